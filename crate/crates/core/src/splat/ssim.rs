//! Gaussian-windowed SSIM with zero-padded "same" convolution, averaged over
//! pixels and channels, plus its gradient with respect to the first image.

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, c1: 1e-4, c2: 9e-4 }
    }
}

impl SsimParams {
    fn kernel(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let k: Vec<f64> =
            (0..self.window).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * self.sigma * self.sigma)).exp()).collect();
        let s: f64 = k.iter().sum();
        k.into_iter().map(|v| v / s).collect()
    }
}

/// Separable blur with zero padding; self-adjoint because the kernel is symmetric.
fn blur(plane: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let r = kernel.len() / 2;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let xx = x as isize + k as isize - r as isize;
                if xx >= 0 && (xx as usize) < w {
                    acc += kv * plane[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let yy = y as isize + k as isize - r as isize;
                if yy >= 0 && (yy as usize) < h {
                    acc += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn plane(img: &Image<f64>, ch: usize) -> Vec<f64> {
    img.data().iter().skip(ch).step_by(3).copied().collect()
}

pub fn ssim(a: &Image<f64>, b: &Image<f64>) -> Result<f64> {
    ssim_with(a, b, &SsimParams::default())
}

pub fn ssim_with(a: &Image<f64>, b: &Image<f64>, params: &SsimParams) -> Result<f64> {
    Ok(ssim_impl(a, b, params, false)?.0)
}

/// Mean SSIM and `∂ssim/∂a`.
pub fn ssim_grad(a: &Image<f64>, b: &Image<f64>, params: &SsimParams) -> Result<(f64, Image<f64>)> {
    let (v, g) = ssim_impl(a, b, params, true)?;
    Ok((v, g.expect("gradient requested")))
}

fn ssim_impl(a: &Image<f64>, b: &Image<f64>, params: &SsimParams, want_grad: bool) -> Result<(f64, Option<Image<f64>>)> {
    if !a.same_shape(b) {
        return Err(Error::param(format!(
            "ssim shape mismatch: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    if a.pixel_count() == 0 {
        return Err(Error::param("ssim of an empty image"));
    }
    let (w, h) = (a.width(), a.height());
    let n = (w * h * 3) as f64;
    let kernel = params.kernel();
    let (c1, c2) = (params.c1, params.c2);
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Image::filled(w, h, [0.0; 3]));

    for ch in 0..3 {
        let x = plane(a, ch);
        let y = plane(b, ch);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = blur(&x, w, h, &kernel);
        let my = blur(&y, w, h, &kernel);
        let exx = blur(&xx, w, h, &kernel);
        let eyy = blur(&yy, w, h, &kernel);
        let exy = blur(&xy, w, h, &kernel);

        let mut g_mx = vec![0.0; w * h];
        let mut g_exx = vec![0.0; w * h];
        let mut g_exy = vec![0.0; w * h];
        for i in 0..w * h {
            let sxx = exx[i] - mx[i] * mx[i];
            let syy = eyy[i] - my[i] * my[i];
            let sxy = exy[i] - mx[i] * my[i];
            let a1 = 2.0 * mx[i] * my[i] + c1;
            let a2 = 2.0 * sxy + c2;
            let b1 = mx[i] * mx[i] + my[i] * my[i] + c1;
            let b2 = sxx + syy + c2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                // totals through σ terms: ∂σxy/∂μx = -μy, ∂σxx/∂μx = -2μx
                let d_a1 = 2.0 * my[i];
                let d_a2 = -2.0 * my[i];
                let d_b1 = 2.0 * mx[i];
                let d_b2 = -2.0 * mx[i];
                let ds_dmx = s * (d_a1 / a1 + d_a2 / a2 - d_b1 / b1 - d_b2 / b2);
                g_mx[i] = ds_dmx / n;
                g_exx[i] = -s / b2 / n;
                g_exy[i] = 2.0 * a1 / (b1 * b2) / n;
            }
        }
        if let Some(grad) = grad.as_mut() {
            let bm = blur(&g_mx, w, h, &kernel);
            let bxx = blur(&g_exx, w, h, &kernel);
            let bxy = blur(&g_exy, w, h, &kernel);
            let data = grad.data_mut();
            for i in 0..w * h {
                data[i * 3 + ch] = bm[i] + 2.0 * x[i] * bxx[i] + y[i] * bxy[i];
            }
        }
    }
    Ok((total / n, grad))
}
