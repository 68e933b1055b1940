//! Synthetic scenes: colored gaussian blobs seen from a ring of cameras.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::image::{Bitmap, Image};
use crate::scene::{CameraPose, SceneDataset, ViewImage};
use crate::splat::{render, Camera, Gaussian, GaussianSet, RenderSettings};

pub const BLOB_COLORS: [[f64; 3]; 3] = [[0.85, 0.15, 0.12], [0.2, 0.7, 0.25], [0.18, 0.3, 0.85]];
const BLOB_CENTERS: [[f64; 3]; 3] = [[0.0, 0.0, -0.75], [0.7, 0.0, 0.45], [-0.7, 0.0, 0.45]];
const BLOB_RADIUS: f64 = 0.45;
pub const FIXTURE_FOV: f64 = 0.6912;

/// Gaussians of a blob scene plus the blob index of every gaussian.
#[derive(Clone, Debug)]
pub struct BlobScene {
    pub gaussians: GaussianSet,
    pub labels: Vec<usize>,
}

impl BlobScene {
    pub fn new(count: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gaussians = GaussianSet::new();
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let b = i % 3;
            let p = loop {
                let v = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0f64..1.0)];
                if v.iter().map(|x| x * x).sum::<f64>() <= 1.0 {
                    break v;
                }
            };
            let s = rng.random_range(0.07..0.11);
            let jitter = rng.random_range(-0.03..0.03);
            gaussians.push(Gaussian {
                position: [0, 1, 2].map(|k| BLOB_CENTERS[b][k] + BLOB_RADIUS * p[k]),
                scale: [s, s * rng.random_range(0.8..1.2), s * rng.random_range(0.8..1.2)],
                rotation: [1.0, rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)],
                opacity: 0.9,
                color: BLOB_COLORS[b].map(|c| (c + jitter).clamp(0.01, 0.99)),
            });
            labels.push(b);
        }
        Self { gaussians, labels }
    }

    /// Per-pixel share of the final color contributed by blob `blob`.
    pub fn coverage(&self, blob: usize, camera: &Camera) -> Result<Vec<f64>> {
        let mut g = self.gaussians.clone();
        for (i, c) in g.color_logits.iter_mut().enumerate() {
            let on = self.labels[i] == blob;
            *c = [if on { 30.0 } else { -30.0 }; 3];
        }
        let settings = RenderSettings { background: [0.0; 3], ..RenderSettings::default() };
        let out = render(&g.to_params(), camera, &settings)?;
        Ok(out.image.data().chunks_exact(3).map(|p| p[0]).collect())
    }

    /// Pixels where blob `blob` contributes at least `threshold`.
    pub fn blob_mask(&self, blob: usize, camera: &Camera, threshold: f64) -> Result<Bitmap> {
        let cov = self.coverage(blob, camera)?;
        Ok(Bitmap::from_fn(camera.width, camera.height, |x, y| cov[y * camera.width + x] >= threshold))
    }
}

/// `count` cameras on a ring around the origin, slightly above the blobs.
pub fn ring_poses(count: usize, size: usize) -> Vec<CameraPose> {
    let focal = 0.5 * size as f64 / (0.5 * FIXTURE_FOV).tan();
    (0..count)
        .map(|i| {
            let t = i as f64 / count as f64 * std::f64::consts::TAU;
            let eye = [4.0 * t.sin(), 1.4, 4.0 * t.cos()];
            Camera::look_at_pose(eye, [0.0, 0.0, 0.0], [0.0, 1.0, 0.0], focal, size, size)
        })
        .collect()
}

/// Renders every pose and stores the views as 8-bit images.
pub fn render_dataset(name: &str, gaussians: &GaussianSet, poses: &[CameraPose], size: usize) -> Result<SceneDataset> {
    let params = gaussians.to_params();
    let mut views = Vec::with_capacity(poses.len());
    for (i, pose) in poses.iter().enumerate() {
        let cam = Camera::from_pose(pose, size, size);
        let img = render(&params, &cam, &RenderSettings::default())?.image.to_f32();
        let pixels = Image::from_rgb8(size, size, &img.to_rgb8())?;
        views.push((ViewImage { view_id: format!("r_{i}"), pixels }, pose.clone()));
    }
    SceneDataset::new(name, views)
}

/// The desk-scale scene: ~500 gaussians, 30 views at 64×64.
pub fn desk_scene(seed: u64) -> Result<(BlobScene, SceneDataset)> {
    let scene = BlobScene::new(501, seed);
    let ds = render_dataset("blobs", &scene.gaussians, &ring_poses(30, 64), 64)?;
    Ok((scene, ds))
}

pub fn blob_scene(count: usize, seed: u64) -> GaussianSet {
    BlobScene::new(count, seed).gaussians
}

/// Small dataset for quick tests.
pub fn tiny_dataset(views: usize, size: usize) -> SceneDataset {
    let g = blob_scene(60, 0);
    render_dataset("tiny", &g, &ring_poses(views, size), size).expect("fixture renders")
}
