use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::FeatureMap;
use crate::error::{Error, Result};
use crate::image::Bitmap;
use crate::segmentation::{MaskSet, RegionMask};

/// Mean feature vector of an edit-image region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionDescriptor {
    pub mask_id: u32,
    pub mean_vec: Vec<f64>,
    pub pixel_count: usize,
}

/// Denominator of the region distance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Divide by the target part's pixel count.
    #[default]
    TargetArea,
    /// Divide by the candidate edit region's pixel count.
    EditArea,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchEntry {
    pub edit_mask_id: u32,
    pub distance: f64,
}

/// Target mask id → best edit region.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchAssignment {
    pub entries: BTreeMap<u32, MatchEntry>,
}

impl MatchAssignment {
    pub fn get(&self, target_mask_id: u32) -> Option<&MatchEntry> {
        self.entries.get(&target_mask_id)
    }
}

/// Cells touched by `bitmap`, with the number of mask pixels falling in each.
fn cell_weights(featmap: &FeatureMap, bitmap: &Bitmap) -> Result<Vec<(usize, usize)>> {
    if !featmap.covers(bitmap.width(), bitmap.height()) {
        return Err(Error::param(format!(
            "feature grid {}x{} with stride {} does not cover a {}x{} mask",
            featmap.rows,
            featmap.cols,
            featmap.stride,
            bitmap.width(),
            bitmap.height()
        )));
    }
    let mut counts = vec![0usize; featmap.cell_count()];
    for (x, y) in bitmap.iter_set() {
        counts[(y / featmap.stride) * featmap.cols + x / featmap.stride] += 1;
    }
    Ok(counts.into_iter().enumerate().filter(|&(_, n)| n > 0).collect())
}

/// Pixel-overlap-weighted mean of the feature cells under `mask`.
pub fn describe_region(featmap: &FeatureMap, mask: &RegionMask) -> Result<RegionDescriptor> {
    let weights = cell_weights(featmap, &mask.bitmap)?;
    let area: usize = weights.iter().map(|&(_, n)| n).sum();
    if area == 0 {
        return Err(Error::param(format!("mask {} is empty", mask.mask_id)));
    }
    let c = featmap.channels;
    let mut mean = vec![0.0; c];
    for &(cell, n) in &weights {
        let f = &featmap.data[cell * c..(cell + 1) * c];
        for k in 0..c {
            mean[k] += n as f64 * f[k];
        }
    }
    for m in &mut mean {
        *m /= area as f64;
    }
    Ok(RegionDescriptor { mask_id: mask.mask_id, mean_vec: mean, pixel_count: area })
}

/// `Σ_{i∈P} ‖D(i) − mean‖² / norm` with the sum taken over cells weighted by
/// their pixel overlap with the part.
pub fn region_distance(featmap: &FeatureMap, part: &Bitmap, edit: &RegionDescriptor, normalization: Normalization) -> Result<f64> {
    let weights = cell_weights(featmap, part)?;
    Ok(weighted_distance(featmap, &weights, edit, normalization))
}

fn weighted_distance(featmap: &FeatureMap, weights: &[(usize, usize)], edit: &RegionDescriptor, normalization: Normalization) -> f64 {
    let c = featmap.channels;
    let mut sum = 0.0;
    let mut area = 0usize;
    for &(cell, n) in weights {
        let f = &featmap.data[cell * c..(cell + 1) * c];
        let sq: f64 = f.iter().zip(&edit.mean_vec).map(|(a, b)| (a - b) * (a - b)).sum();
        sum += n as f64 * sq;
        area += n;
    }
    let denom = match normalization {
        Normalization::TargetArea => area,
        Normalization::EditArea => edit.pixel_count,
    };
    sum / denom.max(1) as f64
}

/// Assigns every target mask the edit region with the smallest distance.
/// Ties go to the lower edit mask id.
pub fn match_regions(
    target: &MaskSet,
    featmap: &FeatureMap,
    edit: &[RegionDescriptor],
    normalization: Normalization,
) -> Result<MatchAssignment> {
    if edit.is_empty() {
        return Err(Error::param("matching needs at least one edit region"));
    }
    if !featmap.source_view.is_empty() && !target.view_id.is_empty() && featmap.source_view != target.view_id {
        return Err(Error::Consistency(format!(
            "features from view {} used with masks of view {}",
            featmap.source_view, target.view_id
        )));
    }
    if let Some(d) = edit.iter().find(|d| d.mean_vec.len() != featmap.channels) {
        return Err(Error::param(format!(
            "edit descriptor {} has {} channels, feature map has {}",
            d.mask_id,
            d.mean_vec.len(),
            featmap.channels
        )));
    }
    let mut ordered: Vec<&RegionDescriptor> = edit.iter().collect();
    ordered.sort_by_key(|d| d.mask_id);

    let mut entries = BTreeMap::new();
    for part in &target.masks {
        let weights = cell_weights(featmap, &part.bitmap)?;
        if weights.is_empty() {
            return Err(Error::param(format!("target mask {} is empty", part.mask_id)));
        }
        let mut best: Option<MatchEntry> = None;
        for d in &ordered {
            let dist = weighted_distance(featmap, &weights, d, normalization);
            if best.is_none_or(|b| dist < b.distance) {
                best = Some(MatchEntry { edit_mask_id: d.mask_id, distance: dist });
            }
        }
        entries.insert(part.mask_id, best.expect("edit list is non-empty"));
    }
    Ok(MatchAssignment { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmentation::MaskOrigin;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(id: u32, bitmap: Bitmap) -> RegionMask {
        RegionMask::new(id, bitmap, MaskOrigin::Raw(id as usize))
    }

    fn random_map(rows: usize, cols: usize, c: usize, stride: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::new(rows, cols, c, stride, (0..rows * cols * c).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn singleton_cell_mask_returns_that_cell() {
        let map = random_map(4, 4, 3, 2, 1);
        let m = mask(0, Bitmap::from_fn(8, 8, |x, y| (2..4).contains(&x) && (4..6).contains(&y)));
        let d = describe_region(&map, &m).unwrap();
        assert_eq!(d.mean_vec, map.cell(2, 1).to_vec());
        assert_eq!(d.pixel_count, 4);
    }

    #[test]
    fn constant_map_gives_constant_mean() {
        let map = FeatureMap::new(3, 3, 2, 4, [0.25, -1.5].repeat(9)).unwrap();
        let m = mask(3, Bitmap::from_fn(12, 12, |x, y| (x * 7 + y * 3) % 5 == 0));
        let d = describe_region(&map, &m).unwrap();
        for (got, want) in d.mean_vec.iter().zip([0.25, -1.5]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn irregular_mask_matches_pixelwise_average() {
        let map = random_map(4, 4, 2, 3, 7);
        let bits = Bitmap::from_fn(12, 11, |x, y| (x * x + 3 * y) % 7 < 3);
        let d = describe_region(&map, &mask(0, bits.clone())).unwrap();
        let mut acc = [0.0; 2];
        let mut n = 0.0;
        for (x, y) in bits.iter_set() {
            let cell = map.cell(y / 3, x / 3);
            acc[0] += cell[0];
            acc[1] += cell[1];
            n += 1.0;
        }
        assert!((d.mean_vec[0] - acc[0] / n).abs() < 1e-12);
        assert!((d.mean_vec[1] - acc[1] / n).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_is_rejected() {
        let map = random_map(2, 2, 1, 4, 0);
        assert!(matches!(describe_region(&map, &mask(0, Bitmap::new(8, 8))), Err(Error::Parameter(_))));
    }

    #[test]
    fn single_edit_descriptor_is_forced() {
        let map = random_map(2, 2, 3, 4, 2);
        let set = MaskSet::from_masks(
            "v",
            8,
            8,
            vec![mask(0, Bitmap::from_fn(8, 8, |x, _| x < 4)), mask(1, Bitmap::from_fn(8, 8, |x, _| x >= 4))],
        );
        let edit = vec![RegionDescriptor { mask_id: 9, mean_vec: vec![0.5; 3], pixel_count: 10 }];
        let a = match_regions(&set, &map, &edit, Normalization::TargetArea).unwrap();
        assert!(a.entries.values().all(|e| e.edit_mask_id == 9 && e.distance >= 0.0));
        assert_eq!(a.entries.len(), 2);
    }

    #[test]
    fn no_edit_descriptors_is_an_error() {
        let map = random_map(2, 2, 3, 4, 2);
        let set = MaskSet::from_masks("v", 8, 8, vec![mask(0, Bitmap::full(8, 8))]);
        assert!(matches!(match_regions(&set, &map, &[], Normalization::TargetArea), Err(Error::Parameter(_))));
    }

    #[test]
    fn ties_go_to_lower_edit_id() {
        let map = FeatureMap::new(1, 1, 1, 4, vec![0.0]).unwrap();
        let set = MaskSet::from_masks("", 4, 4, vec![mask(0, Bitmap::full(4, 4))]);
        let edit = vec![
            RegionDescriptor { mask_id: 5, mean_vec: vec![1.0], pixel_count: 1 },
            RegionDescriptor { mask_id: 2, mean_vec: vec![-1.0], pixel_count: 1 },
        ];
        let a = match_regions(&set, &map, &edit, Normalization::TargetArea).unwrap();
        assert_eq!(a.entries[&0].edit_mask_id, 2);
    }

    #[test]
    fn edit_area_normalization_divides_by_edit_pixels() {
        let map = FeatureMap::new(1, 2, 1, 2, vec![1.0, 3.0]).unwrap();
        let part = Bitmap::from_fn(4, 2, |_, _| true);
        let e = RegionDescriptor { mask_id: 0, mean_vec: vec![2.0], pixel_count: 2 };
        let t = region_distance(&map, &part, &e, Normalization::TargetArea).unwrap();
        let s = region_distance(&map, &part, &e, Normalization::EditArea).unwrap();
        assert!((t - 1.0).abs() < 1e-12);
        assert!((s - 4.0).abs() < 1e-12);
    }

    #[test]
    fn mismatched_view_ids_are_inconsistent() {
        let map = random_map(1, 1, 1, 4, 0).with_source("a");
        let set = MaskSet::from_masks("b", 4, 4, vec![mask(0, Bitmap::full(4, 4))]);
        let edit = vec![RegionDescriptor { mask_id: 0, mean_vec: vec![0.0], pixel_count: 1 }];
        assert!(matches!(match_regions(&set, &map, &edit, Normalization::TargetArea), Err(Error::Consistency(_))));
    }
}
