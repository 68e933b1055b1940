//! Region masks from a pluggable segmenter, consolidated to a mask budget.

mod external;
mod io;
mod kmeans;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Bitmap, Image};

pub use external::CommandSegmenter;
pub use io::{label_map_png, read_mask_set, write_mask_set};
pub use kmeans::KMeansSegmenter;

/// Where a consolidated mask came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskOrigin {
    /// Kept raw mask, by index in the backend's output.
    Raw(usize),
    /// Everything not claimed by a kept mask.
    Residual,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionMask {
    pub mask_id: u32,
    pub bitmap: Bitmap,
    pub area: usize,
    pub origin: MaskOrigin,
}

impl RegionMask {
    pub fn new(mask_id: u32, bitmap: Bitmap, origin: MaskOrigin) -> Self {
        let area = bitmap.count();
        Self { mask_id, bitmap, area, origin }
    }
}

/// Disjoint, covering set of masks for one view, largest first.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub view_id: String,
    pub width: usize,
    pub height: usize,
    pub masks: Vec<RegionMask>,
}

impl MaskSet {
    /// Wraps masks without checking the partition invariants.
    pub fn from_masks(view_id: impl Into<String>, width: usize, height: usize, masks: Vec<RegionMask>) -> Self {
        Self { view_id: view_id.into(), width, height, masks }
    }

    pub fn get(&self, mask_id: u32) -> Option<&RegionMask> {
        self.masks.iter().find(|m| m.mask_id == mask_id)
    }

    pub fn ids(&self) -> Vec<u32> {
        self.masks.iter().map(|m| m.mask_id).collect()
    }

    /// Per-pixel owning mask id; `u32::MAX` for uncovered pixels.
    pub fn label_map(&self) -> Vec<u32> {
        let mut labels = vec![u32::MAX; self.width * self.height];
        for m in &self.masks {
            for (i, &b) in m.bitmap.bits().iter().enumerate() {
                if b {
                    labels[i] = m.mask_id;
                }
            }
        }
        labels
    }

    /// Checks disjointness, full coverage and area bookkeeping.
    pub fn validate_partition(&self) -> Result<()> {
        let mut owner = vec![false; self.width * self.height];
        for m in &self.masks {
            if m.bitmap.width() != self.width || m.bitmap.height() != self.height {
                return Err(Error::Consistency(format!("mask {} has the wrong resolution", m.mask_id)));
            }
            if m.area != m.bitmap.count() {
                return Err(Error::Consistency(format!("mask {} area is stale", m.mask_id)));
            }
            for (i, &b) in m.bitmap.bits().iter().enumerate() {
                if b {
                    if owner[i] {
                        return Err(Error::Consistency(format!("pixel {i} is claimed twice")));
                    }
                    owner[i] = true;
                }
            }
        }
        if let Some(i) = owner.iter().position(|&o| !o) {
            return Err(Error::Consistency(format!("pixel {i} is not covered")));
        }
        Ok(())
    }
}

/// Regular grid of `side × side` prompt points in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PromptGrid {
    pub side: usize,
}

impl PromptGrid {
    pub fn points(&self) -> Vec<(f64, f64)> {
        let s = self.side as f64;
        (0..self.side * self.side)
            .map(|i| (((i % self.side) as f64 + 0.5) / s, ((i / self.side) as f64 + 0.5) / s))
            .collect()
    }
}

pub const DEFAULT_GRID_SIDE: usize = 32;

pub trait SegmenterBackend: Send + Sync {
    fn name(&self) -> &str;

    /// Backends that cannot serve concurrent calls return `true`.
    fn exclusive(&self) -> bool {
        false
    }

    /// Raw, possibly overlapping and non-covering masks at image resolution.
    fn segment(&self, image: &Image<f32>, prompts: &PromptGrid) -> Result<Vec<RegionMask>>;
}

pub fn segment_view(image: &Image<f32>, backend: &dyn SegmenterBackend, grid_side: usize) -> Result<Vec<RegionMask>> {
    if grid_side == 0 {
        return Err(Error::param("grid_side must be at least 1"));
    }
    let masks = backend.segment(image, &PromptGrid { side: grid_side }).map_err(|e| match e {
        Error::Backend { .. } => e,
        other => Error::backend(backend.name(), other.to_string()),
    })?;
    if masks.is_empty() {
        return Err(Error::DegenerateSegmentation);
    }
    if let Some(m) = masks.iter().find(|m| m.bitmap.width() != image.width() || m.bitmap.height() != image.height()) {
        return Err(Error::backend(backend.name(), format!("mask {} does not match the image resolution", m.mask_id)));
    }
    Ok(masks)
}

/// Keeps the `max_masks - 1` largest raw masks and folds every other pixel
/// into one residual mask.
///
/// Raw masks are ranked by area (ties: lower raw index). A pixel claimed by
/// several kept masks goes to the highest-ranked one. The result is sorted by
/// descending area, ties keeping rank order, and mask ids are reassigned to
/// positions.
pub fn consolidate_masks(raw: &[RegionMask], max_masks: usize, width: usize, height: usize) -> Result<MaskSet> {
    if max_masks < 1 {
        return Err(Error::param("mask budget must be at least 1"));
    }
    if let Some(m) = raw.iter().find(|m| m.bitmap.width() != width || m.bitmap.height() != height) {
        return Err(Error::param(format!("raw mask {} does not match the {width}x{height} image", m.mask_id)));
    }
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| raw[b].area.cmp(&raw[a].area).then(a.cmp(&b)));
    let kept = &order[..order.len().min(max_masks - 1)];

    let mut owner: Vec<Option<usize>> = vec![None; width * height];
    for (rank, &idx) in kept.iter().enumerate() {
        for (p, &b) in raw[idx].bitmap.bits().iter().enumerate() {
            if b && owner[p].is_none() {
                owner[p] = Some(rank);
            }
        }
    }

    let mut out: Vec<RegionMask> = Vec::with_capacity(kept.len() + 1);
    for (rank, &idx) in kept.iter().enumerate() {
        let bits = owner.iter().map(|&o| o == Some(rank)).collect();
        let m = RegionMask::new(0, Bitmap::from_bits(width, height, bits)?, MaskOrigin::Raw(idx));
        if m.area > 0 {
            out.push(m);
        }
    }
    let residual = RegionMask::new(
        0,
        Bitmap::from_bits(width, height, owner.iter().map(|o| o.is_none()).collect())?,
        MaskOrigin::Residual,
    );
    if residual.area > 0 {
        out.push(residual);
    }
    out.sort_by(|a, b| b.area.cmp(&a.area));
    for (i, m) in out.iter_mut().enumerate() {
        m.mask_id = i as u32;
    }
    Ok(MaskSet::from_masks("", width, height, out))
}

/// Segments a view and consolidates it to `max_masks`.
pub fn segment_and_consolidate(
    view_id: &str,
    image: &Image<f32>,
    backend: &dyn SegmenterBackend,
    grid_side: usize,
    max_masks: usize,
) -> Result<MaskSet> {
    let raw = segment_view(image, backend, grid_side)?;
    let mut set = consolidate_masks(&raw, max_masks, image.width(), image.height())?;
    set.view_id = view_id.to_string();
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(id: usize, w: usize, h: usize, f: impl Fn(usize, usize) -> bool) -> RegionMask {
        RegionMask::new(id as u32, Bitmap::from_fn(w, h, f), MaskOrigin::Raw(id))
    }

    #[test]
    fn keeps_largest_and_merges_the_rest() {
        // 1100 pixels split into stripes with areas 500, 300, 200, 60, 40.
        let (w, h) = (100, 11);
        let bounds = [0usize, 500, 800, 1000, 1060, 1100];
        let masks: Vec<_> =
            (0..5).map(|k| raw(k, w, h, |x, y| (bounds[k]..bounds[k + 1]).contains(&(y * w + x)))).collect();
        let set = consolidate_masks(&masks, 3, w, h).unwrap();
        assert_eq!(set.masks.iter().map(|m| m.area).collect::<Vec<_>>(), vec![500, 300, 300]);
        assert_eq!(set.masks[2].origin, MaskOrigin::Residual);
        set.validate_partition().unwrap();
    }

    #[test]
    fn disjoint_covering_input_of_budget_size_is_identity() {
        let (w, h) = (10, 10);
        let masks = vec![raw(0, w, h, |x, _| x < 5), raw(1, w, h, |x, y| x >= 5 && y < 6), raw(2, w, h, |x, y| x >= 5 && y >= 6)];
        let set = consolidate_masks(&masks, 3, w, h).unwrap();
        assert_eq!(set.masks.len(), 3);
        for (a, b) in set.masks.iter().zip(&masks) {
            assert_eq!((a.mask_id, &a.bitmap, a.area), (b.mask_id, &b.bitmap, b.area));
        }
    }

    #[test]
    fn overlap_goes_to_the_larger_mask() {
        let (w, h) = (10, 10);
        // 40 and 30 pixel masks sharing a 12 pixel block.
        let a = raw(0, w, h, |x, y| x < 4 && y < 10);
        let b = raw(1, w, h, |x, y| (2..5).contains(&x) && y < 10);
        let shared = Bitmap::from_fn(w, h, |x, y| (2..4).contains(&x) && y < 6);
        let b = RegionMask::new(1, Bitmap::from_fn(w, h, |x, y| b.bitmap.get(x, y) && (x == 4 || shared.get(x, y))), MaskOrigin::Raw(1));
        assert_eq!(a.bitmap.bits().iter().zip(b.bitmap.bits()).filter(|(p, q)| **p && **q).count(), 12);
        let set = consolidate_masks(&[b.clone(), a.clone()], 3, w, h).unwrap();
        set.validate_partition().unwrap();
        // brute force: each pixel goes to the first raw mask in (area desc, index asc) order containing it
        let ranked = if a.area > b.area { [&a, &b] } else { [&b, &a] };
        for y in 0..h {
            for x in 0..w {
                let want = ranked.iter().position(|m| m.bitmap.get(x, y));
                let got = set.masks.iter().find(|m| m.bitmap.get(x, y)).unwrap();
                match want {
                    Some(r) => assert_eq!(got.origin, MaskOrigin::Raw(if ranked[r].mask_id == 0 { 1 } else { 0 })),
                    None => assert_eq!(got.origin, MaskOrigin::Residual),
                }
            }
        }
    }

    #[test]
    fn budget_of_one_covers_everything() {
        let masks = vec![raw(0, 4, 4, |x, _| x < 2)];
        let set = consolidate_masks(&masks, 1, 4, 4).unwrap();
        assert_eq!(set.masks.len(), 1);
        assert_eq!(set.masks[0].area, 16);
    }

    #[test]
    fn zero_budget_is_rejected() {
        assert!(matches!(consolidate_masks(&[], 0, 2, 2), Err(Error::Parameter(_))));
    }

    #[test]
    fn equal_areas_rank_by_raw_index() {
        let masks = vec![raw(0, 4, 1, |x, _| x == 0), raw(1, 4, 1, |x, _| x == 1), raw(2, 4, 1, |x, _| x >= 2)];
        let set = consolidate_masks(&masks, 3, 4, 1).unwrap();
        let origins: Vec<_> = set.masks.iter().map(|m| m.origin).collect();
        assert_eq!(origins, vec![MaskOrigin::Raw(2), MaskOrigin::Raw(0), MaskOrigin::Residual]);
    }

    #[test]
    fn prompt_grid_is_centered() {
        let pts = PromptGrid { side: 2 }.points();
        assert_eq!(pts, vec![(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)]);
    }
}
