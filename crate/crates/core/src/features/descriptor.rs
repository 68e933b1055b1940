use std::f64::consts::PI;

use super::{DifferentiableFeatures, FeatureMap, FeatureProvider};
use crate::error::{Error, Result};
use crate::image::Image;

const COLOR_BINS: usize = 8;
const ORIENT_BINS: usize = 8;
const CHANNELS: usize = 3 * COLOR_BINS + ORIENT_BINS;
const BIN_SIGMA: f64 = 1.0 / COLOR_BINS as f64;
const GRADIENT_GAIN: f64 = 4.0;

/// Weight-free per-patch descriptor: a soft 8-bin histogram per RGB channel
/// (24 values) followed by an 8-bin gradient-orientation energy histogram
/// computed on the HSV value channel.
///
/// Soft binning keeps the descriptor differentiable so it can drive the
/// nearest-neighbor feature loss as well as region matching. Orientation
/// channels only see `V = max(r, g, b)`, so a pure hue rotation leaves them
/// unchanged.
#[derive(Clone, Debug)]
pub struct PatchDescriptor {
    pub stride: usize,
}

impl Default for PatchDescriptor {
    fn default() -> Self {
        Self { stride: 8 }
    }
}

/// Normalized gaussian bin memberships of `v` and the per-bin log-derivative terms.
#[inline]
fn soft_bins(v: f64) -> ([f64; COLOR_BINS], [f64; COLOR_BINS]) {
    let mut w = [0.0; COLOR_BINS];
    let mut s = [0.0; COLOR_BINS];
    let mut total = 0.0;
    for b in 0..COLOR_BINS {
        let center = (b as f64 + 0.5) / COLOR_BINS as f64;
        s[b] = (v - center) / (BIN_SIGMA * BIN_SIGMA);
        w[b] = (-0.5 * (v - center).powi(2) / (BIN_SIGMA * BIN_SIGMA)).exp();
        total += w[b];
    }
    for wb in &mut w {
        *wb /= total;
    }
    (w, s)
}

fn orient_dirs() -> [(f64, f64); ORIENT_BINS] {
    let mut d = [(0.0, 0.0); ORIENT_BINS];
    for (k, slot) in d.iter_mut().enumerate() {
        let t = k as f64 * 2.0 * PI / ORIENT_BINS as f64;
        *slot = (t.cos(), t.sin());
    }
    d
}

struct ValuePlane {
    argmax: Vec<u8>,
    gx: Vec<f64>,
    gy: Vec<f64>,
}

fn value_plane(image: &Image<f64>) -> ValuePlane {
    let (w, h) = (image.width(), image.height());
    let mut v = Vec::with_capacity(w * h);
    let mut argmax = Vec::with_capacity(w * h);
    for px in image.data().chunks_exact(3) {
        let mut best = 0;
        for c in 1..3 {
            if px[c] > px[best] {
                best = c;
            }
        }
        v.push(px[best]);
        argmax.push(best as u8);
    }
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
            gx[y * w + x] = 0.5 * (v[y * w + xr] - v[y * w + xl]);
            gy[y * w + x] = 0.5 * (v[yd * w + x] - v[yu * w + x]);
        }
    }
    ValuePlane { argmax, gx, gy }
}

impl PatchDescriptor {
    fn grid(&self, image: &Image<f64>) -> (usize, usize) {
        (image.height().div_ceil(self.stride), image.width().div_ceil(self.stride))
    }

    fn cell_pixels(&self, image: &Image<f64>, r: usize, c: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>, f64) {
        let ys = r * self.stride..((r + 1) * self.stride).min(image.height());
        let xs = c * self.stride..((c + 1) * self.stride).min(image.width());
        let n = (ys.len() * xs.len()) as f64;
        (ys, xs, n)
    }
}

impl FeatureProvider for PatchDescriptor {
    fn name(&self) -> &str {
        "patch-descriptor"
    }

    fn channels(&self) -> usize {
        CHANNELS
    }

    fn extract(&self, image: &Image<f64>) -> Result<FeatureMap> {
        if self.stride == 0 {
            return Err(Error::param("descriptor stride must be positive"));
        }
        let (rows, cols) = self.grid(image);
        let plane = value_plane(image);
        let dirs = orient_dirs();
        let w = image.width();
        let mut data = vec![0.0; rows * cols * CHANNELS];
        for r in 0..rows {
            for c in 0..cols {
                let (ys, xs, n) = self.cell_pixels(image, r, c);
                let cell = &mut data[(r * cols + c) * CHANNELS..(r * cols + c + 1) * CHANNELS];
                for y in ys {
                    for x in xs.clone() {
                        let px = image.get(x, y);
                        for ch in 0..3 {
                            let (wb, _) = soft_bins(px[ch]);
                            for b in 0..COLOR_BINS {
                                cell[ch * COLOR_BINS + b] += wb[b] / n;
                            }
                        }
                        let (gx, gy) = (plane.gx[y * w + x], plane.gy[y * w + x]);
                        for (k, (dc, ds)) in dirs.iter().enumerate() {
                            let p = (gx * dc + gy * ds).max(0.0);
                            cell[3 * COLOR_BINS + k] += GRADIENT_GAIN * p * p / n;
                        }
                    }
                }
            }
        }
        FeatureMap::new(rows, cols, CHANNELS, self.stride, data)
    }

    fn differentiable(&self) -> Option<&dyn DifferentiableFeatures> {
        Some(self)
    }
}

impl DifferentiableFeatures for PatchDescriptor {
    fn backward(&self, image: &Image<f64>, grad: &[f64]) -> Result<Image<f64>> {
        let (rows, cols) = self.grid(image);
        if grad.len() != rows * cols * CHANNELS {
            return Err(Error::param("feature gradient does not match the descriptor grid"));
        }
        let (w, h) = (image.width(), image.height());
        let plane = value_plane(image);
        let dirs = orient_dirs();
        let mut out = Image::filled(w, h, [0.0; 3]);
        let mut g_v = vec![0.0; w * h];
        for r in 0..rows {
            for c in 0..cols {
                let (ys, xs, n) = self.cell_pixels(image, r, c);
                let g = &grad[(r * cols + c) * CHANNELS..(r * cols + c + 1) * CHANNELS];
                for y in ys {
                    for x in xs.clone() {
                        let px = image.get(x, y);
                        let mut gp = [0.0; 3];
                        for ch in 0..3 {
                            let (wb, sb) = soft_bins(px[ch]);
                            let mean_s: f64 = (0..COLOR_BINS).map(|b| wb[b] * sb[b]).sum();
                            for b in 0..COLOR_BINS {
                                gp[ch] += g[ch * COLOR_BINS + b] * wb[b] * (mean_s - sb[b]) / n;
                            }
                        }
                        let i = y * w + x;
                        let (gx, gy) = (plane.gx[i], plane.gy[i]);
                        let (mut g_gx, mut g_gy) = (0.0, 0.0);
                        for (k, (dc, ds)) in dirs.iter().enumerate() {
                            let p = (gx * dc + gy * ds).max(0.0);
                            let d = g[3 * COLOR_BINS + k] * GRADIENT_GAIN * 2.0 * p / n;
                            g_gx += d * dc;
                            g_gy += d * ds;
                        }
                        let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
                        let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
                        g_v[y * w + xr] += 0.5 * g_gx;
                        g_v[y * w + xl] -= 0.5 * g_gx;
                        g_v[yd * w + x] += 0.5 * g_gy;
                        g_v[yu * w + x] -= 0.5 * g_gy;
                        let d = out.data_mut();
                        for ch in 0..3 {
                            d[i * 3 + ch] += gp[ch];
                        }
                    }
                }
            }
        }
        let d = out.data_mut();
        for (i, gv) in g_v.into_iter().enumerate() {
            d[i * 3 + plane.argmax[i] as usize] += gv;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::style::{hsv_to_rgb, rgb_to_hsv};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> Image<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_vec(w, h, (0..w * h * 3).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    /// Straightforward recomputation of one cell, with hard-coded bin layout.
    fn cell_oracle(img: &Image<f64>, r: usize, c: usize) -> Vec<f64> {
        let (w, h) = (img.width() as isize, img.height() as isize);
        let val = |x: isize, y: isize| {
            let p = img.get(x.clamp(0, w - 1) as usize, y.clamp(0, h - 1) as usize);
            p[0].max(p[1]).max(p[2])
        };
        let mut out = vec![0.0; 32];
        let mut n = 0.0;
        for y in (r * 8) as isize..((r * 8 + 8) as isize).min(h) {
            for x in (c * 8) as isize..((c * 8 + 8) as isize).min(w) {
                n += 1.0;
                let p = img.get(x as usize, y as usize);
                for ch in 0..3 {
                    let e: Vec<f64> = (0..8).map(|b| (-0.5 * ((p[ch] - (b as f64 + 0.5) / 8.0) * 8.0).powi(2)).exp()).collect();
                    let s: f64 = e.iter().sum();
                    for b in 0..8 {
                        out[ch * 8 + b] += e[b] / s;
                    }
                }
                let gx = 0.5 * (val(x + 1, y) - val(x - 1, y));
                let gy = 0.5 * (val(x, y + 1) - val(x, y - 1));
                for k in 0..8 {
                    let t = k as f64 * std::f64::consts::FRAC_PI_4;
                    let proj = (gx * t.cos() + gy * t.sin()).max(0.0);
                    out[24 + k] += 4.0 * proj * proj;
                }
            }
        }
        out.iter().map(|v| v / n).collect()
    }

    #[test]
    fn sixty_four_square_image_gives_eight_by_eight_grid() {
        let map = PatchDescriptor::default().extract(&random_image(64, 64, 0)).unwrap();
        assert_eq!((map.rows, map.cols, map.channels, map.stride), (8, 8, 32, 8));
    }

    #[test]
    fn constant_image_gives_identical_cells() {
        let map = PatchDescriptor::default().extract(&Image::filled(37, 21, [0.2, 0.6, 0.9])).unwrap();
        let first = map.cell(0, 0).to_vec();
        for v in map.vectors() {
            assert!(v.iter().zip(&first).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn hue_rotation_keeps_orientation_channels_only() {
        let img = random_image(24, 16, 9);
        let img = img.map(|v| f64::from(v as f32));
        let mut rotated = img.clone();
        for y in 0..16 {
            for x in 0..24 {
                let p = img.get(x, y).map(|v| v as f32);
                let [hh, s, v] = rgb_to_hsv(p);
                let q = hsv_to_rgb((hh + 97.0) % 360.0, s, v);
                rotated.put(x, y, q.map(f64::from));
            }
        }
        let d = PatchDescriptor::default();
        let a = d.extract(&img).unwrap();
        let b = d.extract(&rotated).unwrap();
        let mut color_diff = 0.0f64;
        for r in 0..a.rows {
            for c in 0..a.cols {
                let (ca, cb) = (a.cell(r, c), b.cell(r, c));
                assert_eq!(&ca[24..], &cb[24..], "orientation channels differ at ({r},{c})");
                color_diff = color_diff.max(ca[..24].iter().zip(&cb[..24]).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
                let oracle_a = cell_oracle(&img, r, c);
                let oracle_b = cell_oracle(&rotated, r, c);
                for k in 0..32 {
                    assert!((ca[k] - oracle_a[k]).abs() < 1e-12);
                    assert!((cb[k] - oracle_b[k]).abs() < 1e-12);
                }
            }
        }
        assert!(color_diff > 1e-3);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let img = random_image(11, 9, 4);
        let d = PatchDescriptor::default();
        let map = d.extract(&img).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let weights: Vec<f64> = (0..map.data.len()).map(|_| rng.random::<f64>() - 0.5).collect();
        let f = |im: &Image<f64>| -> f64 { d.extract(im).unwrap().data.iter().zip(&weights).map(|(a, b)| a * b).sum() };
        let g = d.backward(&img, &weights).unwrap();
        let h = 1e-6;
        for idx in [0, 5, 33, 100, 200, 296] {
            let mut p = img.clone();
            p.data_mut()[idx] += h;
            let mut m = img.clone();
            m.data_mut()[idx] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((fd - g.data()[idx]).abs() < 1e-6 * (1.0 + fd.abs()), "idx {idx}: fd {fd} vs {}", g.data()[idx]);
        }
    }
}
