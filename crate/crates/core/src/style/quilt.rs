//! Square texture canvases synthesized from a masked source region by image
//! quilting: overlapping patches chosen by overlap error and stitched along a
//! minimum-error boundary cut.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Bitmap, Image};

pub const MIN_CANVAS: usize = 64;
pub const MIN_SOURCE_AREA: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct TextureCanvas {
    pub pixels: Image<f32>,
    pub source_mask_id: u32,
}

impl TextureCanvas {
    pub fn new(pixels: Image<f32>, source_mask_id: u32) -> Result<Self> {
        if pixels.width() != pixels.height() || pixels.width() < MIN_CANVAS {
            return Err(Error::Validation(format!(
                "texture canvas must be square and at least {MIN_CANVAS} pixels, got {}x{}",
                pixels.width(),
                pixels.height()
            )));
        }
        Ok(Self { pixels, source_mask_id })
    }

    pub fn size(&self) -> usize {
        self.pixels.width()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuiltParams {
    pub patch: usize,
    pub overlap: usize,
    /// Candidates within `(1 + tolerance) × best error` are eligible.
    pub tolerance: f64,
    pub max_candidates: usize,
    pub seed: u64,
}

impl Default for QuiltParams {
    fn default() -> Self {
        Self { patch: 32, overlap: 8, tolerance: 0.1, max_candidates: 1024, seed: 0 }
    }
}

/// Quilts a `canvas_size` square from pixels of `image` under `mask`, then
/// shifts it so its mean matches the region mean.
pub fn build_texture_canvas(
    image: &Image<f32>,
    mask: &Bitmap,
    source_mask_id: u32,
    canvas_size: usize,
    params: &QuiltParams,
) -> Result<TextureCanvas> {
    if canvas_size < MIN_CANVAS {
        return Err(Error::param(format!("canvas size must be at least {MIN_CANVAS}")));
    }
    if mask.width() != image.width() || mask.height() != image.height() {
        return Err(Error::param("texture mask does not match the source image"));
    }
    if mask.count() < MIN_SOURCE_AREA {
        return Err(Error::param(format!(
            "texture source region {source_mask_id} has {} pixels, need at least {MIN_SOURCE_AREA}",
            mask.count()
        )));
    }
    if params.patch == 0 || params.overlap >= params.patch {
        return Err(Error::param("quilt overlap must be smaller than the patch"));
    }

    let mut patch = params.patch.min(canvas_size);
    let mut origins = patch_origins(mask, patch);
    while origins.is_empty() && patch > 1 {
        patch /= 2;
        origins = patch_origins(mask, patch);
    }
    let overlap = params.overlap * patch / params.patch;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    if origins.len() > params.max_candidates {
        let mut keep: Vec<usize> = sample(&mut rng, origins.len(), params.max_candidates).into_vec();
        keep.sort_unstable();
        origins = keep.into_iter().map(|i| origins[i]).collect();
    }

    let step = patch - overlap;
    let blocks = (canvas_size.saturating_sub(overlap)).div_ceil(step).max(1);
    let full = blocks * step + overlap;
    let mut canvas = vec![[0.0f32; 3]; full * full];
    let mut errors = Vec::with_capacity(origins.len());

    for bi in 0..blocks {
        for bj in 0..blocks {
            let (cy, cx) = (bi * step, bj * step);
            let choice = if bi == 0 && bj == 0 {
                origins[rng.random_range(0..origins.len())]
            } else {
                errors.clear();
                for &(ox, oy) in &origins {
                    errors.push(overlap_error(image, &canvas, full, (ox, oy), (cx, cy), patch, overlap, bi > 0, bj > 0));
                }
                let best = errors.iter().copied().fold(f64::INFINITY, f64::min);
                let limit = best * (1.0 + params.tolerance);
                let eligible: Vec<usize> = (0..origins.len()).filter(|&i| errors[i] <= limit).collect();
                origins[eligible[rng.random_range(0..eligible.len())]]
            };
            place(image, &mut canvas, full, choice, (cx, cy), patch, overlap, bi > 0, bj > 0);
        }
    }

    let mut pixels = Vec::with_capacity(canvas_size * canvas_size * 3);
    for y in 0..canvas_size {
        for x in 0..canvas_size {
            pixels.extend_from_slice(&canvas[y * full + x]);
        }
    }
    let mut pixels = Image::from_vec(canvas_size, canvas_size, pixels)?;
    let want = image.mean_rgb(mask);
    let have = pixels.mean_rgb(&Bitmap::full(canvas_size, canvas_size));
    let shift = [0, 1, 2].map(|c| (want[c] - have[c]) as f32);
    for p in pixels.data_mut().chunks_exact_mut(3) {
        for c in 0..3 {
            p[c] = (p[c] + shift[c]).clamp(0.0, 1.0);
        }
    }
    TextureCanvas::new(pixels, source_mask_id)
}

/// Top-left corners of `patch`-sized squares lying entirely inside the mask.
fn patch_origins(mask: &Bitmap, patch: usize) -> Vec<(usize, usize)> {
    let (w, h) = (mask.width(), mask.height());
    if patch > w || patch > h {
        return Vec::new();
    }
    let mut integral = vec![0usize; (w + 1) * (h + 1)];
    for y in 0..h {
        for x in 0..w {
            integral[(y + 1) * (w + 1) + x + 1] = usize::from(mask.get(x, y)) + integral[y * (w + 1) + x + 1]
                + integral[(y + 1) * (w + 1) + x]
                - integral[y * (w + 1) + x];
        }
    }
    let sum = |x0: usize, y0: usize| {
        let (x1, y1) = (x0 + patch, y0 + patch);
        integral[y1 * (w + 1) + x1] + integral[y0 * (w + 1) + x0] - integral[y0 * (w + 1) + x1] - integral[y1 * (w + 1) + x0]
    };
    let mut out = Vec::new();
    for y in 0..=h - patch {
        for x in 0..=w - patch {
            if sum(x, y) == patch * patch {
                out.push((x, y));
            }
        }
    }
    out
}

fn sq_diff(a: [f32; 3], b: [f32; 3]) -> f64 {
    (0..3).map(|c| f64::from(a[c] - b[c]).powi(2)).sum()
}

#[allow(clippy::too_many_arguments)]
fn overlap_error(
    image: &Image<f32>,
    canvas: &[[f32; 3]],
    full: usize,
    (ox, oy): (usize, usize),
    (cx, cy): (usize, usize),
    patch: usize,
    overlap: usize,
    top: bool,
    left: bool,
) -> f64 {
    let mut err = 0.0;
    for dy in 0..patch {
        for dx in 0..patch {
            if (top && dy < overlap) || (left && dx < overlap) {
                err += sq_diff(image.get(ox + dx, oy + dy), canvas[(cy + dy) * full + cx + dx]);
            }
        }
    }
    err
}

/// Pastes the patch, keeping existing canvas pixels on the far side of the
/// minimum-error seams through the overlap strips.
#[allow(clippy::too_many_arguments)]
fn place(
    image: &Image<f32>,
    canvas: &mut [[f32; 3]],
    full: usize,
    (ox, oy): (usize, usize),
    (cx, cy): (usize, usize),
    patch: usize,
    overlap: usize,
    top: bool,
    left: bool,
) {
    let cost = |dx: usize, dy: usize| sq_diff(image.get(ox + dx, oy + dy), canvas[(cy + dy) * full + cx + dx]);
    let mut take = vec![true; patch * patch];
    if left && overlap > 0 {
        // vertical seam: one column per row
        let seam = min_cut(patch, overlap, |row, col| cost(col, row));
        for (dy, &s) in seam.iter().enumerate() {
            for dx in 0..s {
                take[dy * patch + dx] = false;
            }
        }
    }
    if top && overlap > 0 {
        let seam = min_cut(patch, overlap, |col, row| cost(col, row));
        for (dx, &s) in seam.iter().enumerate() {
            for dy in 0..s {
                take[dy * patch + dx] = false;
            }
        }
    }
    for dy in 0..patch {
        for dx in 0..patch {
            if take[dy * patch + dx] {
                canvas[(cy + dy) * full + cx + dx] = image.get(ox + dx, oy + dy);
            }
        }
    }
}

/// Dynamic-programming seam through a `len × width` cost strip; returns for
/// each step the first index taken from the new patch.
fn min_cut(len: usize, width: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    let mut acc = vec![0.0f64; len * width];
    for j in 0..width {
        acc[j] = cost(0, j);
    }
    for i in 1..len {
        for j in 0..width {
            let lo = j.saturating_sub(1);
            let hi = (j + 1).min(width - 1);
            let prev = (lo..=hi).map(|k| acc[(i - 1) * width + k]).fold(f64::INFINITY, f64::min);
            acc[i * width + j] = cost(i, j) + prev;
        }
    }
    let argmin = |i: usize, lo: usize, hi: usize| {
        (lo..=hi).fold(lo, |best, k| if acc[i * width + k] < acc[i * width + best] { k } else { best })
    };
    let mut seam = vec![0usize; len];
    seam[len - 1] = argmin(len - 1, 0, width - 1);
    for i in (0..len - 1).rev() {
        let j = seam[i + 1];
        seam[i] = argmin(i, j.saturating_sub(1), (j + 1).min(width - 1));
    }
    seam
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker(w: usize, h: usize, period: usize) -> Image<f32> {
        let mut img = Image::filled(w, h, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                let on = ((x / period) + (y / period)) % 2 == 0;
                img.put(x, y, if on { [0.9, 0.9, 0.2] } else { [0.1, 0.2, 0.6] });
            }
        }
        img
    }

    #[test]
    fn uniform_region_gives_uniform_canvas() {
        let img = Image::filled(80, 80, [0.3, 0.5, 0.7]);
        let mask = Bitmap::from_fn(80, 80, |x, y| x > 10 && y > 5);
        let c = build_texture_canvas(&img, &mask, 2, 64, &QuiltParams::default()).unwrap();
        assert_eq!(c.size(), 64);
        assert!(c.pixels.data().chunks_exact(3).all(|p| p == [0.3, 0.5, 0.7]));
    }

    #[test]
    fn checkerboard_period_survives() {
        let img = checker(96, 96, 8);
        let c = build_texture_canvas(&img, &Bitmap::full(96, 96), 0, 128, &QuiltParams::default()).unwrap();
        // autocorrelation oracle on the green channel, mean removed
        let n = c.size();
        let g: Vec<f64> = c.pixels.data().chunks_exact(3).map(|p| f64::from(p[1])).collect();
        let mean = g.iter().sum::<f64>() / g.len() as f64;
        let ac = |dx: usize, dy: usize| {
            let mut s = 0.0;
            for y in 0..n - dy {
                for x in 0..n - dx {
                    s += (g[y * n + x] - mean) * (g[(y + dy) * n + x + dx] - mean);
                }
            }
            s / ((n - dx) * (n - dy)) as f64
        };
        let zero = ac(0, 0);
        for lag in [16usize, 32] {
            assert!(ac(lag, 0) > 0.9 * zero, "x lag {lag}");
            assert!(ac(0, lag) > 0.9 * zero, "y lag {lag}");
        }
        assert!(ac(8, 0) < -0.9 * zero && ac(0, 8) < -0.9 * zero);
    }

    #[test]
    fn mean_matches_region_and_output_is_deterministic() {
        let mut img = checker(70, 60, 5);
        for y in 0..60 {
            for x in 0..70 {
                let p = img.get(x, y);
                img.put(x, y, [p[0] * (x as f32 / 70.0), p[1], (y as f32 / 60.0)]);
            }
        }
        let mask = Bitmap::from_fn(70, 60, |x, y| (x as i64 - 35).pow(2) + (y as i64 - 30).pow(2) < 600);
        let p = QuiltParams { seed: 5, ..QuiltParams::default() };
        let a = build_texture_canvas(&img, &mask, 1, 96, &p).unwrap();
        let b = build_texture_canvas(&img, &mask, 1, 96, &p).unwrap();
        assert_eq!(a, b);
        let want = img.mean_rgb(&mask);
        let have = a.pixels.mean_rgb(&Bitmap::full(96, 96));
        for c in 0..3 {
            assert!((want[c] - have[c]).abs() < 0.05);
        }
        assert!(a.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn thin_region_still_quilts() {
        let img = checker(40, 40, 2);
        let mask = Bitmap::from_fn(40, 40, |x, y| y == 20 && x < 20);
        let c = build_texture_canvas(&img, &mask, 0, 64, &QuiltParams::default()).unwrap();
        assert_eq!(c.size(), 64);
    }

    #[test]
    fn small_inputs_are_rejected() {
        let img = Image::filled(10, 10, [0.5; 3]);
        let tiny = Bitmap::from_fn(10, 10, |x, y| x < 3 && y < 3);
        assert!(build_texture_canvas(&img, &tiny, 0, 64, &QuiltParams::default()).is_err());
        assert!(build_texture_canvas(&img, &Bitmap::full(10, 10), 0, 32, &QuiltParams::default()).is_err());
    }

    #[test]
    fn seam_follows_cheap_column() {
        let seam = min_cut(5, 4, |_, j| if j == 2 { 0.0 } else { 1.0 });
        assert_eq!(seam, vec![2; 5]);
    }
}
