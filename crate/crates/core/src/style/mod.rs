//! Per-region color and texture directives and their 2D application.

mod hsv;
mod quilt;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::external;
use crate::features::{describe_region, extract_features, FeatureProvider, RegionDescriptor};
use crate::features::MatchAssignment;
use crate::image::{Bitmap, Image};
use crate::scene::ViewImage;
use crate::segmentation::MaskSet;

pub use hsv::{apply_color_to_region, hsv_to_rgb, hue_distance, region_mean_hsv, rgb_to_hsv, shift_value, MeanHsv};
pub use quilt::{build_texture_canvas, QuiltParams, TextureCanvas, MIN_CANVAS, MIN_SOURCE_AREA};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StyleMode {
    Color,
    Texture,
    Both,
    #[default]
    None,
}

impl StyleMode {
    pub fn has_color(self) -> bool {
        matches!(self, StyleMode::Color | StyleMode::Both)
    }

    pub fn has_texture(self) -> bool {
        matches!(self, StyleMode::Texture | StyleMode::Both)
    }
}

/// Directive for one edit region. Missing hue/saturation are taken from the
/// source (the matched edit region, or the canvas in `both` mode).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionStyle {
    pub mode: StyleMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hue: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sat: Option<f64>,
    #[serde(default)]
    pub value_shift: f64,
    /// Image whose pixels seed the texture instead of the edit region itself.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub texture_ref: Option<String>,
}

impl RegionStyle {
    pub fn color(hue: f64, sat: f64) -> Self {
        Self { mode: StyleMode::Color, hue: Some(hue), sat: Some(sat), ..Self::default() }
    }

    pub fn from_region(mode: StyleMode) -> Self {
        Self { mode, ..Self::default() }
    }

    fn validate(&self, mask_id: u32) -> Result<()> {
        let bad = |what: String| Err(Error::Validation(format!("style for mask {mask_id}: {what}")));
        if let Some(h) = self.hue {
            if !(0.0..360.0).contains(&h) {
                return bad(format!("hue {h} outside [0, 360)"));
            }
        }
        if let Some(s) = self.sat {
            if !(0.0..=1.0).contains(&s) {
                return bad(format!("saturation {s} outside [0, 1]"));
            }
        }
        if !(-1.0..=1.0).contains(&self.value_shift) {
            return bad(format!("value shift {} outside [-1, 1]", self.value_shift));
        }
        Ok(())
    }
}

/// Edit mask id → directive. Serializes as a JSON object keyed by mask id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StyleSpec(pub BTreeMap<u32, RegionStyle>);

impl StyleSpec {
    /// The same directive for every listed mask.
    pub fn uniform(mask_ids: impl IntoIterator<Item = u32>, style: RegionStyle) -> Self {
        Self(mask_ids.into_iter().map(|id| (id, style.clone())).collect())
    }

    pub fn get(&self, mask_id: u32) -> Option<&RegionStyle> {
        self.0.get(&mask_id)
    }

    pub fn has_color(&self) -> bool {
        self.0.values().any(|s| s.mode.has_color() || (s.mode != StyleMode::None && s.value_shift != 0.0))
    }

    pub fn has_texture(&self) -> bool {
        self.0.values().any(|s| s.mode.has_texture())
    }

    pub fn validate(&self, masks: &MaskSet) -> Result<()> {
        for (&id, style) in &self.0 {
            if masks.get(id).is_none() {
                return Err(Error::Validation(format!("style refers to mask {id}, which the edit image does not have")));
            }
            style.validate(id)?;
        }
        Ok(())
    }
}

/// Pastes `canvas` into the masked pixels, anchored at the mask's bounding-box
/// corner and tiled when the box is larger than the canvas.
pub fn apply_texture_to_region(image: &Image<f32>, mask: &Bitmap, canvas: &TextureCanvas) -> Result<Image<f32>> {
    if mask.width() != image.width() || mask.height() != image.height() {
        return Err(Error::param("texture mask does not match the image"));
    }
    let mut out = image.clone();
    let Some((x0, y0, _, _)) = mask.bounding_box() else {
        return Ok(out);
    };
    let s = canvas.size();
    for (x, y) in mask.iter_set() {
        out.put(x, y, canvas.pixels.get((x - x0) % s, (y - y0) % s));
    }
    Ok(out)
}

/// Produces a texture canvas from a source region.
pub trait TextureSynthesizer: Send + Sync {
    fn name(&self) -> &str;
    fn synthesize(&self, image: &Image<f32>, mask: &Bitmap, mask_id: u32, size: usize) -> Result<TextureCanvas>;
}

#[derive(Clone, Debug, Default)]
pub struct Quilter(pub QuiltParams);

impl TextureSynthesizer for Quilter {
    fn name(&self) -> &str {
        "quilt"
    }

    fn synthesize(&self, image: &Image<f32>, mask: &Bitmap, mask_id: u32, size: usize) -> Result<TextureCanvas> {
        build_texture_canvas(image, mask, mask_id, size, &self.0)
    }
}

/// Texture reformer run as a subprocess:
/// `program [args..] --size <S> <source.png> <mask.png> <canvas.png>`.
#[derive(Clone, Debug)]
pub struct CommandTextureReformer {
    pub name: String,
    pub program: String,
    pub args: Vec<String>,
}

impl TextureSynthesizer for CommandTextureReformer {
    fn name(&self) -> &str {
        &self.name
    }

    fn synthesize(&self, image: &Image<f32>, mask: &Bitmap, mask_id: u32, size: usize) -> Result<TextureCanvas> {
        let hint = |e: Error| match e {
            Error::Backend { backend, msg } => {
                Error::Backend { backend, msg: format!("{msg} (the built-in quilting synthesizer is available as a fallback)") }
            }
            other => other,
        };
        let dir = external::scratch_dir(&self.name)?;
        let (src, msk, out) = (dir.path().join("source.png"), dir.path().join("mask.png"), dir.path().join("canvas.png"));
        image.save_png(&src)?;
        std::fs::write(&msk, mask.to_png()?)?;
        let mut args = self.args.clone();
        args.extend(["--size".to_string(), size.to_string()]);
        external::run(&self.name, &self.program, &args, &[&src, &msk, &out]).map_err(hint)?;
        let pixels = Image::load(&out).map_err(|e| hint(Error::backend(&self.name, e.to_string())))?;
        TextureCanvas::new(pixels, mask_id).map_err(|e| hint(Error::backend(&self.name, e.to_string())))
    }
}

/// Resolved edit: the edit image, its regions and descriptors, directives,
/// precomputed canvases and per-region colour statistics.
#[derive(Clone, Debug)]
pub struct EditPlan {
    pub edit_image: Image<f32>,
    pub edit_masks: MaskSet,
    pub descriptors: Vec<RegionDescriptor>,
    pub style: StyleSpec,
    pub canvases: BTreeMap<u32, TextureCanvas>,
    pub region_hsv: BTreeMap<u32, MeanHsv>,
}

pub struct PlanInputs<'a> {
    pub provider: &'a dyn FeatureProvider,
    pub synthesizer: &'a dyn TextureSynthesizer,
    pub canvas_size: usize,
    /// Directory that relative `texture_ref` paths are resolved against.
    pub base_dir: &'a Path,
}

impl EditPlan {
    pub fn build(edit_image: Image<f32>, edit_masks: MaskSet, style: StyleSpec, inputs: &PlanInputs) -> Result<Self> {
        style.validate(&edit_masks)?;
        if edit_masks.width != edit_image.width() || edit_masks.height != edit_image.height() {
            return Err(Error::Validation("edit masks do not match the edit image".into()));
        }
        let featmap = extract_features(&edit_image.to_f64(), inputs.provider)?;
        let descriptors = edit_masks.masks.iter().map(|m| describe_region(&featmap, m)).collect::<Result<Vec<_>>>()?;
        let mut canvases = BTreeMap::new();
        let mut region_hsv = BTreeMap::new();
        for m in &edit_masks.masks {
            region_hsv.insert(m.mask_id, region_mean_hsv(&edit_image, &m.bitmap)?);
        }
        for (&id, s) in &style.0 {
            if !s.mode.has_texture() {
                continue;
            }
            let canvas = match &s.texture_ref {
                Some(r) => {
                    let src = Image::load(&inputs.base_dir.join(r))?;
                    let full = Bitmap::full(src.width(), src.height());
                    inputs.synthesizer.synthesize(&src, &full, id, inputs.canvas_size)?
                }
                None => {
                    let mask = &edit_masks.get(id).expect("validated").bitmap;
                    inputs.synthesizer.synthesize(&edit_image, mask, id, inputs.canvas_size)?
                }
            };
            canvases.insert(id, canvas);
        }
        Ok(Self { edit_image, edit_masks, descriptors, style, canvases, region_hsv })
    }

    /// Hue and saturation a colour directive resolves to.
    pub fn resolve_color(&self, edit_mask_id: u32) -> Option<(f64, f64)> {
        let s = self.style.get(edit_mask_id)?;
        if !s.mode.has_color() {
            return None;
        }
        let source = if s.mode == StyleMode::Both {
            let c = self.canvases.get(&edit_mask_id)?;
            region_mean_hsv(&c.pixels, &Bitmap::full(c.size(), c.size())).ok()?
        } else {
            *self.region_hsv.get(&edit_mask_id)?
        };
        Some((s.hue.unwrap_or(source.hue), s.sat.unwrap_or(source.sat)))
    }
}

/// Applies the plan to one target view: each target region takes its matched
/// edit region's directive (texture, then colour, then value shift).
pub fn render_edited_view(view: &ViewImage, plan: &EditPlan, masks: &MaskSet, assignment: &MatchAssignment) -> Result<ViewImage> {
    if masks.width != view.width() || masks.height != view.height() {
        return Err(Error::Consistency(format!("masks for view {} have the wrong resolution", view.view_id)));
    }
    let mut img = view.pixels.clone();
    for part in &masks.masks {
        let entry = assignment.get(part.mask_id).ok_or_else(|| {
            Error::Consistency(format!("view {} mask {} has no matched edit region", view.view_id, part.mask_id))
        })?;
        let Some(style) = plan.style.get(entry.edit_mask_id) else { continue };
        if style.mode == StyleMode::None {
            continue;
        }
        if style.mode.has_texture() {
            let canvas = plan.canvases.get(&entry.edit_mask_id).ok_or_else(|| {
                Error::Consistency(format!("no texture canvas for edit region {}", entry.edit_mask_id))
            })?;
            img = apply_texture_to_region(&img, &part.bitmap, canvas)?;
        }
        if let Some((hue, sat)) = plan.resolve_color(entry.edit_mask_id) {
            img = apply_color_to_region(&img, &part.bitmap, hue, sat)?;
        }
        if style.value_shift != 0.0 {
            img = shift_value(&img, &part.bitmap, style.value_shift)?;
        }
    }
    Ok(ViewImage { view_id: view.view_id.clone(), pixels: img })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{match_regions, Normalization, PatchDescriptor};
    use crate::segmentation::{MaskOrigin, RegionMask};

    fn halves(w: usize, h: usize) -> MaskSet {
        MaskSet::from_masks(
            "v",
            w,
            h,
            vec![
                RegionMask::new(0, Bitmap::from_fn(w, h, |x, _| x < w / 2), MaskOrigin::Raw(0)),
                RegionMask::new(1, Bitmap::from_fn(w, h, |x, _| x >= w / 2), MaskOrigin::Raw(1)),
            ],
        )
    }

    fn two_tone(w: usize, h: usize, a: [f32; 3], b: [f32; 3]) -> Image<f32> {
        let mut img = Image::filled(w, h, a);
        for y in 0..h {
            for x in w / 2..w {
                img.put(x, y, b);
            }
        }
        img
    }

    fn plan(style: StyleSpec, edit: Image<f32>) -> EditPlan {
        let (w, h) = (edit.width(), edit.height());
        let inputs = PlanInputs {
            provider: &PatchDescriptor::default(),
            synthesizer: &Quilter::default(),
            canvas_size: 64,
            base_dir: Path::new("."),
        };
        EditPlan::build(edit, halves(w, h), style, &inputs).unwrap()
    }

    fn identity() -> MatchAssignment {
        let mut a = MatchAssignment::default();
        for id in 0..2 {
            a.entries.insert(id, crate::features::MatchEntry { edit_mask_id: id, distance: 0.0 });
        }
        a
    }

    #[test]
    fn style_spec_json_shape() {
        let spec: StyleSpec =
            serde_json::from_str(r#"{"0": {"mode": "color", "hue": 280, "sat": 0.8}, "3": {"mode": "none"}}"#).unwrap();
        assert_eq!(spec.get(0), Some(&RegionStyle::color(280.0, 0.8)));
        assert_eq!(spec.get(3).unwrap().mode, StyleMode::None);
        let back: StyleSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn validation_rejects_unknown_masks_and_ranges() {
        let masks = halves(8, 8);
        assert!(StyleSpec::uniform([5], RegionStyle::color(10.0, 0.5)).validate(&masks).is_err());
        assert!(StyleSpec::uniform([0], RegionStyle::color(360.0, 0.5)).validate(&masks).is_err());
        assert!(StyleSpec::uniform([0], RegionStyle::color(10.0, 0.5)).validate(&masks).is_ok());
    }

    #[test]
    fn none_plan_is_identity() {
        let view = ViewImage { view_id: "v".into(), pixels: two_tone(32, 16, [0.2, 0.3, 0.4], [0.9, 0.1, 0.5]) };
        let p = plan(StyleSpec::uniform([0, 1], RegionStyle::default()), view.pixels.clone());
        let out = render_edited_view(&view, &p, &halves(32, 16), &identity()).unwrap();
        assert_eq!(out, view);
    }

    #[test]
    fn color_from_green_region() {
        let edit = two_tone(32, 16, [0.1, 0.8, 0.1], [0.5, 0.5, 0.5]);
        let p = plan(StyleSpec::uniform([0], RegionStyle::from_region(StyleMode::Color)), edit);
        let view = ViewImage { view_id: "v".into(), pixels: Image::filled(32, 16, [0.6, 0.2, 0.2]) };
        let out = render_edited_view(&view, &p, &halves(32, 16), &identity()).unwrap();
        let m = region_mean_hsv(&out.pixels, &halves(32, 16).masks[0].bitmap).unwrap();
        assert!(hue_distance(m.hue, 120.0) < 1e-4);
        assert_eq!(out.pixels.get(20, 3), view.pixels.get(20, 3));
    }

    #[test]
    fn composite_equals_sequential_single_region_ops() {
        let mut edit = two_tone(64, 64, [0.2, 0.3, 0.9], [0.0; 3]);
        for y in 0..64 {
            for x in 32..64 {
                edit.put(x, y, if (x / 4 + y / 4) % 2 == 0 { [0.9, 0.9, 0.9] } else { [0.1, 0.1, 0.1] });
            }
        }
        let mut spec = StyleSpec::default();
        spec.0.insert(0, RegionStyle::color(45.0, 0.7));
        spec.0.insert(1, RegionStyle::from_region(StyleMode::Texture));
        let p = plan(spec, edit);
        let view = ViewImage { view_id: "v".into(), pixels: two_tone(64, 64, [0.5, 0.4, 0.3], [0.3, 0.6, 0.2]) };
        let masks = halves(64, 64);
        let out = render_edited_view(&view, &p, &masks, &identity()).unwrap();

        let step = apply_color_to_region(&view.pixels, &masks.masks[0].bitmap, 45.0, 0.7).unwrap();
        let step = apply_texture_to_region(&step, &masks.masks[1].bitmap, &p.canvases[&1]).unwrap();
        assert_eq!(out.pixels, step);
    }

    #[test]
    fn missing_assignment_is_a_consistency_error() {
        let edit = two_tone(16, 16, [0.1, 0.2, 0.3], [0.3, 0.2, 0.1]);
        let p = plan(StyleSpec::default(), edit.clone());
        let mut a = identity();
        a.entries.remove(&1);
        let view = ViewImage { view_id: "v".into(), pixels: edit };
        assert!(matches!(render_edited_view(&view, &p, &halves(16, 16), &a), Err(Error::Consistency(_))));
    }

    #[test]
    fn texture_crop_and_tiling() {
        let mut px = Image::filled(64, 64, [0.0; 3]);
        for y in 0..64 {
            for x in 0..64 {
                px.put(x, y, [x as f32 / 63.0, y as f32 / 63.0, 0.5]);
            }
        }
        let canvas = TextureCanvas::new(px, 0).unwrap();
        let img = Image::filled(150, 120, [1.0; 3]);
        let mask = Bitmap::from_fn(150, 120, |x, y| (10..110).contains(&x) && (20..100).contains(&y));
        let out = apply_texture_to_region(&img, &mask, &canvas).unwrap();
        for y in 0..120 {
            for x in 0..150 {
                let want = if mask.get(x, y) { canvas.pixels.get((x - 10) % 64, (y - 20) % 64) } else { [1.0; 3] };
                assert_eq!(out.get(x, y), want);
            }
        }
        let blue = TextureCanvas::new(Image::filled(64, 64, [0.0, 0.0, 1.0]), 0).unwrap();
        let all = apply_texture_to_region(&img, &Bitmap::full(150, 120), &blue).unwrap();
        assert!(all.data().chunks_exact(3).all(|p| p == [0.0, 0.0, 1.0]));
    }

    #[test]
    fn matched_plan_end_to_end() {
        let edit = two_tone(32, 32, [0.9, 0.1, 0.1], [0.1, 0.1, 0.9]);
        let p = plan(StyleSpec::uniform([0], RegionStyle::color(200.0, 0.6)), edit.clone());
        let masks = halves(32, 32);
        let feats = extract_features(&edit.to_f64(), &PatchDescriptor::default()).unwrap();
        let a = match_regions(&masks, &feats, &p.descriptors, Normalization::TargetArea).unwrap();
        assert!(a.entries.iter().all(|(t, e)| *t == e.edit_mask_id));
        let view = ViewImage { view_id: "v".into(), pixels: edit };
        let out = render_edited_view(&view, &p, &masks, &a).unwrap();
        assert!(hue_distance(rgb_to_hsv(out.pixels.get(3, 3))[0], 200.0) < 1e-3);
    }
}
