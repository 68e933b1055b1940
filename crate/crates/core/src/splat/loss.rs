//! Photometric and feature-matching losses with gradients.

use serde::{Deserialize, Serialize};

use super::ssim::{ssim_grad, ssim_with, SsimParams};
use crate::error::{Error, Result};
use crate::features::{extract_features, FeatureMap, FeatureProvider};
use crate::image::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the L1 term; `1 - lambda` goes to the SSIM term.
    pub lambda: f64,
    /// Weight of the photometric regularizer in the texture loss.
    pub alpha: f64,
    /// Feature layers used for NNFM. Only meaningful for layered providers.
    pub nnfm_layers: Vec<String>,
    pub ssim_window: usize,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.8,
            alpha: 0.5,
            nnfm_layers: Vec::new(),
            ssim_window: 11,
            ssim_c1: 1e-4,
            ssim_c2: 9e-4,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::param(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::param(format!("alpha must be a finite non-negative number, got {}", self.alpha)));
        }
        if self.ssim_window == 0 || self.ssim_window % 2 == 0 {
            return Err(Error::param("SSIM window must be odd"));
        }
        Ok(())
    }

    pub fn ssim_params(&self) -> SsimParams {
        SsimParams { window: self.ssim_window, c1: self.ssim_c1, c2: self.ssim_c2, ..SsimParams::default() }
    }
}

fn check_shapes(a: &Image<f64>, b: &Image<f64>) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::param(format!(
            "image shapes differ: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

pub fn l1(a: &Image<f64>, b: &Image<f64>) -> Result<f64> {
    check_shapes(a, b)?;
    let n = a.data().len().max(1) as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n)
}

/// `λ·L1 + (1 − λ)(1 − SSIM)` with default SSIM settings.
pub fn loss_gs(rendered: &Image<f64>, target: &Image<f64>, lambda: f64) -> Result<f64> {
    loss_gs_with(rendered, target, &LossConfig { lambda, ..LossConfig::default() })
}

pub fn loss_gs_with(rendered: &Image<f64>, target: &Image<f64>, config: &LossConfig) -> Result<f64> {
    config.validate()?;
    let l = l1(rendered, target)?;
    let s = if config.lambda < 1.0 { ssim_with(rendered, target, &config.ssim_params())? } else { 1.0 };
    Ok(config.lambda * l + (1.0 - config.lambda) * (1.0 - s))
}

/// Loss and its gradient with respect to `rendered`.
pub fn loss_gs_grad(rendered: &Image<f64>, target: &Image<f64>, config: &LossConfig) -> Result<(f64, Image<f64>)> {
    config.validate()?;
    let l = l1(rendered, target)?;
    let n = rendered.data().len().max(1) as f64;
    let lam = config.lambda;
    let mut grad = Image::from_vec(
        rendered.width(),
        rendered.height(),
        rendered.data().iter().zip(target.data()).map(|(r, t)| lam * (r - t).signum() * f64::from(u8::from(r != t)) / n).collect(),
    )?;
    let mut loss = lam * l;
    if lam < 1.0 {
        let (s, gs) = ssim_grad(rendered, target, &config.ssim_params())?;
        loss += (1.0 - lam) * (1.0 - s);
        for (g, d) in grad.data_mut().iter_mut().zip(gs.data()) {
            *g -= (1.0 - lam) * d;
        }
    }
    Ok((loss, grad))
}

/// Style features for one NNFM term, restricted to a subset of rendered cells.
#[derive(Clone, Debug)]
pub struct NnfmTarget {
    /// Rendered-cell indices (row-major) the term applies to; `None` = all cells.
    pub cells: Option<Vec<usize>>,
    pub style: FeatureMap,
}

fn cosine_nearest(f: &[f64], style: &FeatureMap) -> (f64, Option<usize>) {
    let fn2: f64 = f.iter().map(|v| v * v).sum();
    if fn2 == 0.0 {
        return (1.0, None);
    }
    let fnorm = fn2.sqrt();
    let mut best = (1.0, None);
    let c = style.channels;
    for (k, g) in style.data.chunks_exact(c).enumerate() {
        let gn: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gn == 0.0 {
            continue;
        }
        let dot: f64 = f.iter().zip(g).map(|(a, b)| a * b).sum();
        let d = 1.0 - dot / (fnorm * gn);
        if d < best.0 || best.1.is_none() && d <= best.0 {
            best = (d, Some(k));
        }
    }
    best
}

/// Mean over rendered cells of the cosine distance to the nearest style vector.
pub fn loss_nnfm(rendered: &FeatureMap, style: &FeatureMap) -> Result<f64> {
    Ok(nnfm_terms(rendered, &[NnfmTarget { cells: None, style: style.clone() }], false)?.0)
}

/// Loss and `∂loss/∂rendered` over several cell-restricted terms; the mean
/// is taken over all selected cells together.
pub fn loss_nnfm_grad(rendered: &FeatureMap, targets: &[NnfmTarget]) -> Result<(f64, Vec<f64>)> {
    let (l, g) = nnfm_terms(rendered, targets, true)?;
    Ok((l, g.expect("gradient requested")))
}

pub fn loss_nnfm_targets(rendered: &FeatureMap, targets: &[NnfmTarget]) -> Result<f64> {
    Ok(nnfm_terms(rendered, targets, false)?.0)
}

fn nnfm_terms(rendered: &FeatureMap, targets: &[NnfmTarget], want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    let c = rendered.channels;
    let mut grad = want_grad.then(|| vec![0.0; rendered.data.len()]);
    let mut total = 0.0;
    let mut count = 0usize;
    for t in targets {
        if t.style.channels != c {
            return Err(Error::param(format!("feature channels differ: {} vs {}", c, t.style.channels)));
        }
        if t.style.cell_count() == 0 {
            return Err(Error::param("style feature map is empty"));
        }
        let all: Vec<usize>;
        let cells = match &t.cells {
            Some(v) => v.as_slice(),
            None => {
                all = (0..rendered.cell_count()).collect();
                &all
            }
        };
        let per_cell: Vec<(usize, f64, Option<usize>)> = {
            use rayon::prelude::*;
            cells
                .par_iter()
                .map(|&i| {
                    let (d, k) = cosine_nearest(&rendered.data[i * c..(i + 1) * c], &t.style);
                    (i, d, k)
                })
                .collect()
        };
        for (i, d, k) in per_cell {
            if i >= rendered.cell_count() {
                return Err(Error::param(format!("cell {i} outside the rendered feature map")));
            }
            total += d;
            count += 1;
            if let (Some(grad), Some(k)) = (grad.as_mut(), k) {
                let f = &rendered.data[i * c..(i + 1) * c];
                let g = &t.style.data[k * c..(k + 1) * c];
                let fn2: f64 = f.iter().map(|v| v * v).sum();
                let fnorm = fn2.sqrt();
                let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                let dot: f64 = f.iter().zip(g).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    grad[i * c + j] -= g[j] / (fnorm * gnorm) - dot * f[j] / (fn2 * fnorm * gnorm);
                }
            }
        }
    }
    if count == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / count as f64;
    if let Some(g) = grad.as_mut() {
        for v in g.iter_mut() {
            *v *= inv;
        }
    }
    Ok((total * inv, grad))
}

/// `NNFM(features(rendered), style) + α·loss_gs(rendered, target)`.
pub fn loss_texture(
    rendered: &Image<f64>,
    target: &Image<f64>,
    style: &FeatureMap,
    provider: &dyn FeatureProvider,
    config: &LossConfig,
) -> Result<f64> {
    let feats = extract_features(rendered, provider)?;
    let nnfm = loss_nnfm(&feats, style)?;
    let gs = if config.alpha > 0.0 { loss_gs_with(rendered, target, config)? } else { 0.0 };
    Ok(nnfm + config.alpha * gs)
}

/// Texture loss over cell-restricted NNFM terms, with `∂loss/∂rendered`.
pub fn loss_texture_grad(
    rendered: &Image<f64>,
    target: &Image<f64>,
    targets: &[NnfmTarget],
    provider: &dyn FeatureProvider,
    config: &LossConfig,
) -> Result<(f64, Image<f64>)> {
    let diff = provider
        .differentiable()
        .ok_or_else(|| Error::param(format!("feature provider `{}` has no backward pass", provider.name())))?;
    let feats = extract_features(rendered, provider)?;
    let (nnfm, gf) = loss_nnfm_grad(&feats, targets)?;
    let mut grad = diff.backward(rendered, &gf)?;
    let mut loss = nnfm;
    if config.alpha > 0.0 {
        let (gs, gg) = loss_gs_grad(rendered, target, config)?;
        loss += config.alpha * gs;
        for (a, b) in grad.data_mut().iter_mut().zip(gg.data()) {
            *a += config.alpha * b;
        }
    }
    Ok((loss, grad))
}
