//! Tile-based EWA splatting with an analytic backward pass.
//!
//! Gaussians are projected with the first-order (EWA) approximation of the
//! perspective map, depth sorted, and composited front to back:
//! `C = Σ c_i α_i T_i + T_N · background` with `α_i = o_i exp(-½ dᵀ Σ₂⁻¹ d)`.
//! Everything is evaluated in `f64` so finite differences stay meaningful.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};
use rayon::prelude::*;

use super::camera::Camera;
use super::gaussians::{sigmoid, GaussianSet, SplatParams, PARAMS_PER_GAUSSIAN};
use crate::error::{Error, Result};
use crate::image::Image;

const TILE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderSettings {
    pub background: [f64; 3],
    /// Isotropic screen-space variance added to every projected covariance.
    pub dilation: f64,
    /// Gaussians closer than this camera depth are culled.
    pub near: f64,
    /// Contributions with `α` below this are skipped.
    pub min_alpha: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self { background: [1.0; 3], dilation: 0.3, near: 0.01, min_alpha: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub image: Image<f64>,
    /// Accumulated coverage `1 - T_N` per pixel.
    pub alpha: Vec<f64>,
    /// `true` when produced by the differentiable path (always, for this rasterizer).
    pub differentiable: bool,
}

/// Renders `gaussians` from `camera` at the camera's resolution with default settings.
pub fn rasterize(gaussians: &GaussianSet, camera: &Camera) -> Result<RenderOutput> {
    gaussians.validate()?;
    render(&gaussians.to_params(), camera, &RenderSettings::default())
}

#[derive(Clone, Debug)]
struct Projected {
    index: usize,
    mean: [f64; 2],
    conic: [f64; 3],
    depth: f64,
    opacity: f64,
    color: [f64; 3],
    bbox: [usize; 4],
}

struct GeometryCache {
    rotation: Matrix3<f64>,
    scale: Vector3<f64>,
    quat: [f64; 4],
    quat_norm: f64,
    t_cam: Vector3<f64>,
    jw: Matrix2x3<f64>,
    cov3: Matrix3<f64>,
    conic: Matrix2<f64>,
}

fn quat_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

fn geometry(g: &[f64], camera: &Camera, settings: &RenderSettings) -> Option<(GeometryCache, [f64; 2])> {
    let p = Vector3::new(g[0], g[1], g[2]);
    let t = camera.to_camera(&p);
    if t.z < settings.near {
        return None;
    }
    let scale = Vector3::new(g[3].exp(), g[4].exp(), g[5].exp());
    let qn = (g[6] * g[6] + g[7] * g[7] + g[8] * g[8] + g[9] * g[9]).sqrt();
    if qn == 0.0 {
        return None;
    }
    let quat = [g[6] / qn, g[7] / qn, g[8] / qn, g[9] / qn];
    let rotation = quat_to_matrix(quat);
    let m = rotation * Matrix3::from_diagonal(&scale);
    let cov3 = m * m.transpose();
    let (fx, fy) = (camera.fx, camera.fy);
    let j = Matrix2x3::new(fx / t.z, 0.0, -fx * t.x / (t.z * t.z), 0.0, fy / t.z, -fy * t.y / (t.z * t.z));
    let jw = j * camera.rotation;
    let cov2 = jw * cov3 * jw.transpose() + Matrix2::identity() * settings.dilation;
    let det = cov2.determinant();
    if !(det > 0.0) {
        return None;
    }
    let conic = cov2.try_inverse()?;
    let mean = [fx * t.x / t.z + camera.cx, fy * t.y / t.z + camera.cy];
    Some((GeometryCache { rotation, scale, quat, quat_norm: qn, t_cam: t, jw, cov3, conic }, mean))
}

fn project_all(params: &SplatParams, camera: &Camera, settings: &RenderSettings) -> Vec<Projected> {
    let mut out: Vec<Projected> = (0..params.len())
        .into_par_iter()
        .filter_map(|i| {
            let g = params.gaussian(i);
            let opacity = sigmoid(g[10]);
            if opacity < settings.min_alpha {
                return None;
            }
            let (geo, mean) = geometry(g, camera, settings)?;
            let cov2 = geo.conic.try_inverse()?;
            // Pixels with α ≥ min_alpha satisfy dᵀΣ⁻¹d ≤ k.
            let k = 2.0 * (opacity / settings.min_alpha).ln();
            let rx = (k * cov2[(0, 0)]).sqrt();
            let ry = (k * cov2[(1, 1)]).sqrt();
            let x0 = (mean[0] - rx - 0.5).ceil().max(0.0);
            let y0 = (mean[1] - ry - 0.5).ceil().max(0.0);
            let x1 = ((mean[0] + rx - 0.5).floor() + 1.0).min(camera.width as f64);
            let y1 = ((mean[1] + ry - 0.5).floor() + 1.0).min(camera.height as f64);
            if !(x0 < x1 && y0 < y1) {
                return None;
            }
            Some(Projected {
                index: i,
                mean,
                conic: [geo.conic[(0, 0)], geo.conic[(0, 1)], geo.conic[(1, 1)]],
                depth: geo.t_cam.z,
                opacity,
                color: [sigmoid(g[11]), sigmoid(g[12]), sigmoid(g[13])],
                bbox: [x0 as usize, y0 as usize, x1 as usize, y1 as usize],
            })
        })
        .collect();
    out.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    out
}

struct TileGrid {
    cols: usize,
    rows: usize,
    lists: Vec<Vec<u32>>,
}

fn bin_tiles(projected: &[Projected], width: usize, height: usize) -> TileGrid {
    let cols = width.div_ceil(TILE);
    let rows = height.div_ceil(TILE);
    let mut lists = vec![Vec::new(); cols * rows];
    for (slot, p) in projected.iter().enumerate() {
        let [x0, y0, x1, y1] = p.bbox;
        for ty in y0 / TILE..=(y1 - 1) / TILE {
            for tx in x0 / TILE..=(x1 - 1) / TILE {
                lists[ty * cols + tx].push(slot as u32);
            }
        }
    }
    TileGrid { cols, rows, lists }
}

#[inline]
fn alpha_at(p: &Projected, px: f64, py: f64) -> (f64, f64, f64) {
    let dx = px - p.mean[0];
    let dy = py - p.mean[1];
    let q = p.conic[0] * dx * dx + 2.0 * p.conic[1] * dx * dy + p.conic[2] * dy * dy;
    (p.opacity * (-0.5 * q).exp(), dx, dy)
}

#[inline]
fn inside(p: &Projected, x: usize, y: usize) -> bool {
    let [x0, y0, x1, y1] = p.bbox;
    x >= x0 && x < x1 && y >= y0 && y < y1
}

/// Forward render of a flat parameter vector.
pub fn render(params: &SplatParams, camera: &Camera, settings: &RenderSettings) -> Result<RenderOutput> {
    params.validate()?;
    if camera.width == 0 || camera.height == 0 {
        return Err(Error::param("camera resolution must be non-zero"));
    }
    let (w, h) = (camera.width, camera.height);
    let projected = project_all(params, camera, settings);
    let grid = bin_tiles(&projected, w, h);

    let tiles: Vec<(usize, Vec<f64>, Vec<f64>)> = (0..grid.cols * grid.rows)
        .into_par_iter()
        .map(|tile| {
            let (tx, ty) = (tile % grid.cols, tile / grid.cols);
            let list = &grid.lists[tile];
            let xs = tx * TILE..((tx + 1) * TILE).min(w);
            let ys = ty * TILE..((ty + 1) * TILE).min(h);
            let mut rgb = Vec::with_capacity(TILE * TILE * 3);
            let mut cover = Vec::with_capacity(TILE * TILE);
            for y in ys {
                for x in xs.clone() {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut t = 1.0;
                    let mut c = [0.0; 3];
                    for &slot in list {
                        let p = &projected[slot as usize];
                        if !inside(p, x, y) {
                            continue;
                        }
                        let (a, _, _) = alpha_at(p, px, py);
                        if a < settings.min_alpha {
                            continue;
                        }
                        for ch in 0..3 {
                            c[ch] += t * a * p.color[ch];
                        }
                        t *= 1.0 - a;
                    }
                    for ch in 0..3 {
                        rgb.push(c[ch] + t * settings.background[ch]);
                    }
                    cover.push(1.0 - t);
                }
            }
            (tile, rgb, cover)
        })
        .collect();

    let mut image = Image::filled(w, h, [0.0; 3]);
    let mut alpha = vec![0.0; w * h];
    for (tile, rgb, cover) in tiles {
        let (tx, ty) = (tile % grid.cols, tile / grid.cols);
        let tw = ((tx + 1) * TILE).min(w) - tx * TILE;
        for (k, a) in cover.into_iter().enumerate() {
            let (x, y) = (tx * TILE + k % tw, ty * TILE + k / tw);
            image.put(x, y, [rgb[k * 3], rgb[k * 3 + 1], rgb[k * 3 + 2]]);
            alpha[y * w + x] = a;
        }
    }
    Ok(RenderOutput { image, alpha, differentiable: true })
}

/// Screen-space gradient of one gaussian: mean (2), conic a/b/c (3),
/// activated opacity (1), activated color (3).
type ScreenGrad = [f64; 9];

/// Vector-Jacobian product of [`render`]: returns `∂L/∂params` given `∂L/∂image`.
pub fn render_backward(
    params: &SplatParams,
    camera: &Camera,
    settings: &RenderSettings,
    grad_image: &Image<f64>,
) -> Result<Vec<f64>> {
    params.validate()?;
    if grad_image.width() != camera.width || grad_image.height() != camera.height {
        return Err(Error::param("gradient image does not match camera resolution"));
    }
    let (w, h) = (camera.width, camera.height);
    let projected = project_all(params, camera, settings);
    let grid = bin_tiles(&projected, w, h);

    // Per-tile partial gradients, merged in tile order so results are deterministic.
    let partials: Vec<Vec<(u32, ScreenGrad)>> = (0..grid.cols * grid.rows)
        .into_par_iter()
        .map(|tile| {
            let (tx, ty) = (tile % grid.cols, tile / grid.cols);
            let list = &grid.lists[tile];
            let mut acc: Vec<ScreenGrad> = vec![[0.0; 9]; list.len()];
            let mut trail: Vec<(usize, f64, f64, f64, f64)> = Vec::new();
            for y in ty * TILE..((ty + 1) * TILE).min(h) {
                for x in tx * TILE..((tx + 1) * TILE).min(w) {
                    let gc = grad_image.get(x, y);
                    if gc == [0.0; 3] {
                        continue;
                    }
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    trail.clear();
                    let mut t = 1.0;
                    for (k, &slot) in list.iter().enumerate() {
                        let p = &projected[slot as usize];
                        if !inside(p, x, y) {
                            continue;
                        }
                        let (a, dx, dy) = alpha_at(p, px, py);
                        if a < settings.min_alpha {
                            continue;
                        }
                        trail.push((k, a, t, dx, dy));
                        t *= 1.0 - a;
                    }
                    let mut behind = settings.background;
                    for &(k, a, t_i, dx, dy) in trail.iter().rev() {
                        let p = &projected[list[k] as usize];
                        let g = &mut acc[k];
                        let mut g_alpha = 0.0;
                        for ch in 0..3 {
                            g[6 + ch] += gc[ch] * a * t_i;
                            g_alpha += gc[ch] * t_i * (p.color[ch] - behind[ch]);
                            behind[ch] = a * p.color[ch] + (1.0 - a) * behind[ch];
                        }
                        g[5] += g_alpha * a / p.opacity;
                        let g_q = -0.5 * a * g_alpha;
                        // q = a dx² + 2 b dx dy + c dy², d = pixel - mean
                        let (ca, cb, cc) = (p.conic[0], p.conic[1], p.conic[2]);
                        g[0] += g_q * -2.0 * (ca * dx + cb * dy);
                        g[1] += g_q * -2.0 * (cb * dx + cc * dy);
                        g[2] += g_q * dx * dx;
                        g[3] += g_q * 2.0 * dx * dy;
                        g[4] += g_q * dy * dy;
                    }
                }
            }
            list.iter().copied().zip(acc).filter(|(_, g)| g.iter().any(|&v| v != 0.0)).collect()
        })
        .collect();

    let mut screen: Vec<ScreenGrad> = vec![[0.0; 9]; projected.len()];
    for tile in partials {
        for (slot, g) in tile {
            let s = &mut screen[slot as usize];
            for k in 0..9 {
                s[k] += g[k];
            }
        }
    }

    let per_gaussian: Vec<(usize, [f64; PARAMS_PER_GAUSSIAN])> = projected
        .par_iter()
        .zip(screen.par_iter())
        .filter(|(_, g)| g.iter().any(|&v| v != 0.0))
        .map(|(p, g)| (p.index, gaussian_backward(params.gaussian(p.index), camera, settings, g)))
        .collect();

    let mut grad = vec![0.0; params.values.len()];
    for (i, g) in per_gaussian {
        grad[i * PARAMS_PER_GAUSSIAN..(i + 1) * PARAMS_PER_GAUSSIAN].copy_from_slice(&g);
    }
    Ok(grad)
}

fn gaussian_backward(g: &[f64], camera: &Camera, settings: &RenderSettings, s: &ScreenGrad) -> [f64; PARAMS_PER_GAUSSIAN] {
    let mut out = [0.0; PARAMS_PER_GAUSSIAN];
    let Some((geo, _)) = geometry(g, camera, settings) else {
        return out;
    };

    let opacity = sigmoid(g[10]);
    out[10] = s[5] * opacity * (1.0 - opacity);
    for ch in 0..3 {
        let c = sigmoid(g[11 + ch]);
        out[11 + ch] = s[6 + ch] * c * (1.0 - c);
    }

    // conic -> projected covariance: dΣ = -A G_A A
    let g_conic = Matrix2::new(s[2], 0.5 * s[3], 0.5 * s[3], s[4]);
    let g_cov2 = -(geo.conic * g_conic * geo.conic);

    // Σ₂ = T Σ₃ Tᵀ with T = J W
    let tmat = geo.jw;
    let g_cov3 = tmat.transpose() * g_cov2 * tmat;
    let g_t = 2.0 * g_cov2 * tmat * geo.cov3;
    let g_j = g_t * camera.rotation.transpose();

    let (fx, fy) = (camera.fx, camera.fy);
    let t = geo.t_cam;
    let (iz, iz2, iz3) = (1.0 / t.z, 1.0 / (t.z * t.z), 1.0 / (t.z * t.z * t.z));
    let (gu, gv) = (s[0], s[1]);
    let g_tx = gu * fx * iz - g_j[(0, 2)] * fx * iz2;
    let g_ty = gv * fy * iz - g_j[(1, 2)] * fy * iz2;
    let g_tz = -gu * fx * t.x * iz2 - gv * fy * t.y * iz2 - g_j[(0, 0)] * fx * iz2
        + g_j[(0, 2)] * 2.0 * fx * t.x * iz3
        - g_j[(1, 1)] * fy * iz2
        + g_j[(1, 2)] * 2.0 * fy * t.y * iz3;
    let g_pos = camera.rotation.transpose() * Vector3::new(g_tx, g_ty, g_tz);
    out[0] = g_pos.x;
    out[1] = g_pos.y;
    out[2] = g_pos.z;

    // Σ₃ = M Mᵀ with M = R S
    let m = geo.rotation * Matrix3::from_diagonal(&geo.scale);
    let g_m = 2.0 * g_cov3 * m;
    let mut g_r = Matrix3::zeros();
    for j in 0..3 {
        let mut g_s = 0.0;
        for i in 0..3 {
            g_s += g_m[(i, j)] * geo.rotation[(i, j)];
            g_r[(i, j)] = g_m[(i, j)] * geo.scale[j];
        }
        out[3 + j] = g_s * geo.scale[j];
    }

    let [w, x, y, z] = geo.quat;
    let dr_dw = Matrix3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0);
    let dr_dx = Matrix3::new(0.0, 2.0 * y, 2.0 * z, 2.0 * y, -4.0 * x, -2.0 * w, 2.0 * z, 2.0 * w, -4.0 * x);
    let dr_dy = Matrix3::new(-4.0 * y, 2.0 * x, 2.0 * w, 2.0 * x, 0.0, 2.0 * z, -2.0 * w, 2.0 * z, -4.0 * y);
    let dr_dz = Matrix3::new(-4.0 * z, -2.0 * w, 2.0 * x, 2.0 * w, -4.0 * z, 2.0 * y, 2.0 * x, 2.0 * y, 0.0);
    let g_hat = [
        g_r.component_mul(&dr_dw).sum(),
        g_r.component_mul(&dr_dx).sum(),
        g_r.component_mul(&dr_dy).sum(),
        g_r.component_mul(&dr_dz).sum(),
    ];
    let dot: f64 = (0..4).map(|k| geo.quat[k] * g_hat[k]).sum();
    for k in 0..4 {
        out[6 + k] = (g_hat[k] - geo.quat[k] * dot) / geo.quat_norm;
    }
    out
}
