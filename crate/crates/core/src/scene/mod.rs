//! Posed multi-view datasets, edit-view sampling, projects and checkpoints.

mod checkpoint;
mod project;

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub use checkpoint::{
    checkpoint_path, decode_checkpoint, encode_checkpoint, load_checkpoint, read_checkpoint, save_checkpoint,
    write_checkpoint, Checkpoint, TrainingStage,
};
pub use project::{BackendConfig, CommandConfig, Project, ProjectConfig, PROJECT_FILE};

/// A dataset view: identifier plus decoded pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewImage {
    pub view_id: String,
    pub pixels: Image<f32>,
}

impl ViewImage {
    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }
}

/// Pinhole camera with a camera-to-world transform in the OpenGL convention
/// used by NeRF-style manifests (camera looks down -z, +y up).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub c2w: [[f64; 4]; 4],
    pub focal: f64,
    pub principal_point: (f64, f64),
}

impl CameraPose {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0) || !self.focal.is_finite() {
            return Err(Error::Validation(format!("focal length must be positive, got {}", self.focal)));
        }
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| self.c2w[k][i] * self.c2w[k][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > 1e-5 {
                    return Err(Error::Validation(format!(
                        "camera rotation is not orthonormal (column {i}·{j} = {dot})"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Standard pinhole relation between horizontal field of view and focal length.
pub fn focal_from_fov(camera_angle_x: f64, width: usize) -> f64 {
    0.5 * width as f64 / (0.5 * camera_angle_x).tan()
}

#[derive(Clone, Debug)]
pub struct SceneDataset {
    pub name: String,
    pub views: Vec<(ViewImage, CameraPose)>,
}

impl SceneDataset {
    pub fn new(name: impl Into<String>, views: Vec<(ViewImage, CameraPose)>) -> Result<Self> {
        if views.len() < 2 {
            return Err(Error::Dataset(format!("a dataset needs at least 2 views, got {}", views.len())));
        }
        let (w, h) = (views[0].0.width(), views[0].0.height());
        let mut ids = HashSet::new();
        for (view, pose) in &views {
            if view.width() != w || view.height() != h {
                return Err(Error::Dataset(format!(
                    "view {} is {}x{}, expected {}x{}",
                    view.view_id,
                    view.width(),
                    view.height(),
                    w,
                    h
                )));
            }
            if w == 0 || h == 0 {
                return Err(Error::Dataset("views must be at least 1x1".into()));
            }
            if !ids.insert(view.view_id.clone()) {
                return Err(Error::Dataset(format!("duplicate view id {}", view.view_id)));
            }
            pose.validate()?;
        }
        Ok(Self { name: name.into(), views })
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.views[0].0.width(), self.views[0].0.height())
    }

    pub fn view_ids(&self) -> Vec<String> {
        self.views.iter().map(|(v, _)| v.view_id.clone()).collect()
    }

    pub fn find(&self, view_id: &str) -> Result<&(ViewImage, CameraPose)> {
        self.views
            .iter()
            .find(|(v, _)| v.view_id == view_id)
            .ok_or_else(|| Error::NotFound(format!("view {view_id}")))
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct TransformsFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    camera_angle_x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fl_x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cx: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cy: Option<f64>,
    frames: Vec<TransformsFrame>,
}

#[derive(Debug, Deserialize, Serialize)]
struct TransformsFrame {
    file_path: String,
    transform_matrix: [[f64; 4]; 4],
}

const MANIFEST_NAMES: [&str; 2] = ["transforms.json", "transforms_train.json"];
const FLAT_POSES: &str = "poses.txt";

/// Loads a dataset from a NeRF-synthetic `transforms.json` (directory or file
/// path), falling back to a flat directory with a `poses.txt` file.
pub fn load_dataset(path: &Path) -> Result<SceneDataset> {
    let (dir, manifest) = if path.is_file() {
        (path.parent().unwrap_or(Path::new(".")).to_path_buf(), Some(path.to_path_buf()))
    } else {
        let found = MANIFEST_NAMES.iter().map(|n| path.join(n)).find(|p| p.is_file());
        (path.to_path_buf(), found)
    };
    let name = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "scene".into());

    match manifest {
        Some(manifest) => load_transforms(&dir, &manifest, name),
        None if dir.join(FLAT_POSES).is_file() => load_flat(&dir, name),
        None => Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("no {} or {} found", MANIFEST_NAMES.join(" / "), FLAT_POSES),
        }),
    }
}

fn load_transforms(dir: &Path, manifest: &Path, name: String) -> Result<SceneDataset> {
    let text = std::fs::read_to_string(manifest)?;
    let parsed: TransformsFile = serde_json::from_str(&text)
        .map_err(|e| Error::Format { path: manifest.to_path_buf(), msg: e.to_string() })?;
    if parsed.frames.is_empty() {
        return Err(Error::Dataset(format!("{} lists no frames", manifest.display())));
    }
    if parsed.camera_angle_x.is_none() && parsed.fl_x.is_none() {
        return Err(Error::Format {
            path: manifest.to_path_buf(),
            msg: "missing camera_angle_x or fl_x".into(),
        });
    }

    let decoded: Vec<(String, Image<f32>)> = parsed
        .frames
        .par_iter()
        .map(|frame| {
            let file = resolve_image(dir, &frame.file_path)?;
            let pixels = Image::load(&file)?;
            Ok((view_id_for(&frame.file_path), pixels))
        })
        .collect::<Result<_>>()?;

    let views = decoded
        .into_iter()
        .zip(&parsed.frames)
        .map(|((view_id, pixels), frame)| {
            let (w, h) = (pixels.width(), pixels.height());
            let focal = parsed.fl_x.unwrap_or_else(|| focal_from_fov(parsed.camera_angle_x.unwrap_or_default(), w));
            let pose = CameraPose {
                c2w: frame.transform_matrix,
                focal,
                principal_point: (parsed.cx.unwrap_or(w as f64 / 2.0), parsed.cy.unwrap_or(h as f64 / 2.0)),
            };
            (ViewImage { view_id, pixels }, pose)
        })
        .collect();
    SceneDataset::new(name, views)
}

fn resolve_image(dir: &Path, file_path: &str) -> Result<PathBuf> {
    let base = dir.join(file_path);
    if base.is_file() {
        return Ok(base);
    }
    for ext in ["png", "jpg", "jpeg"] {
        let candidate = PathBuf::from(format!("{}.{ext}", base.display()));
        if candidate.is_file() {
            return Ok(candidate);
        }
    }
    Err(Error::ImageRead { path: base, msg: "file not found".into() })
}

fn view_id_for(file_path: &str) -> String {
    let p = Path::new(file_path);
    let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if stem.is_empty() {
        file_path.to_string()
    } else {
        stem
    }
}

/// `poses.txt`: one line per view, `<image file> <focal> <16 row-major c2w values>`.
fn load_flat(dir: &Path, name: String) -> Result<SceneDataset> {
    let poses_path = dir.join(FLAT_POSES);
    let text = std::fs::read_to_string(&poses_path)?;
    let mut views = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: &str| Error::Format { path: poses_path.clone(), msg: format!("line {}: {msg}", lineno + 1) };
        let mut parts = line.split_whitespace();
        let file = parts.next().ok_or_else(|| bad("missing file name"))?;
        let nums: Vec<f64> = parts.map(|s| s.parse::<f64>()).collect::<Result<_, _>>().map_err(|e| bad(&e.to_string()))?;
        if nums.len() != 17 {
            return Err(bad("expected focal plus 16 matrix values"));
        }
        let mut c2w = [[0.0; 4]; 4];
        for (i, v) in nums[1..].iter().enumerate() {
            c2w[i / 4][i % 4] = *v;
        }
        let pixels = Image::load(&dir.join(file))?;
        let pose = CameraPose {
            c2w,
            focal: nums[0],
            principal_point: (pixels.width() as f64 / 2.0, pixels.height() as f64 / 2.0),
        };
        views.push((ViewImage { view_id: view_id_for(file), pixels }, pose));
    }
    if views.is_empty() {
        return Err(Error::Dataset(format!("{} lists no views", poses_path.display())));
    }
    SceneDataset::new(name, views)
}

/// Writes `dataset` as `transforms.json` plus 8-bit PNGs under `images/`.
pub fn save_dataset(dataset: &SceneDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    let (w, _) = dataset.resolution();
    let first = &dataset.views[0].1;
    let mut frames = Vec::with_capacity(dataset.len());
    for (view, pose) in &dataset.views {
        if pose.focal != first.focal || pose.principal_point != first.principal_point {
            return Err(Error::Dataset("per-view intrinsics cannot be written to a shared manifest".into()));
        }
        let rel = format!("images/{}.png", view.view_id);
        view.pixels.save_png(&dir.join(&rel))?;
        frames.push(TransformsFrame { file_path: rel, transform_matrix: pose.c2w });
    }
    let manifest = TransformsFile {
        camera_angle_x: Some(2.0 * (0.5 * w as f64 / first.focal).atan()),
        fl_x: Some(first.focal),
        cx: Some(first.principal_point.0),
        cy: Some(first.principal_point.1),
        frames,
    };
    std::fs::write(dir.join("transforms.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Number of views drawn for a sampling fraction: `ceil(fraction * n)`.
///
/// A tolerance absorbs binary rounding so that e.g. `0.1 * 30` yields 3.
pub fn sample_count(n: usize, fraction: f64) -> usize {
    let raw = fraction * n as f64;
    ((raw - 1e-9).ceil().max(1.0) as usize).min(n)
}

/// Uniformly samples `ceil(fraction * |views|)` distinct view ids without
/// replacement. The result is returned in manifest order.
pub fn sample_edit_views(dataset: &SceneDataset, fraction: f64, seed: u64) -> Result<Vec<String>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::param(format!("sampling fraction must be in (0, 1], got {fraction}")));
    }
    let n = dataset.len();
    let k = sample_count(n, fraction);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, n, k).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| dataset.views[i].0.view_id.clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_pose() -> CameraPose {
        let mut c2w = [[0.0; 4]; 4];
        for (i, row) in c2w.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        CameraPose { c2w, focal: 10.0, principal_point: (2.0, 2.0) }
    }

    fn toy_dataset(n: usize) -> SceneDataset {
        let views = (0..n)
            .map(|i| {
                (ViewImage { view_id: format!("v{i}"), pixels: Image::filled(4, 4, [0.5; 3]) }, identity_pose())
            })
            .collect();
        SceneDataset::new("toy", views).unwrap()
    }

    #[test]
    fn focal_matches_pinhole_relation() {
        let f = focal_from_fov(0.6911, 800);
        let expect = 400.0 / 0.34555f64.tan();
        assert!((f - expect).abs() < 1e-9, "{f} vs {expect}");
    }

    #[test]
    fn sampling_twenty_percent_of_hundred() {
        let ds = toy_dataset(100);
        let ids = sample_edit_views(&ds, 0.2, 7).unwrap();
        assert_eq!(ids.len(), 20);
        assert_eq!(ids.iter().collect::<HashSet<_>>().len(), 20);
    }

    #[test]
    fn full_fraction_returns_every_view() {
        let ds = toy_dataset(13);
        assert_eq!(sample_edit_views(&ds, 1.0, 99).unwrap(), ds.view_ids());
    }

    #[test]
    fn sampling_is_deterministic() {
        let ds = toy_dataset(50);
        assert_eq!(sample_edit_views(&ds, 0.05, 3).unwrap(), sample_edit_views(&ds, 0.05, 3).unwrap());
    }

    #[test]
    fn sampling_rejects_bad_fractions() {
        let ds = toy_dataset(5);
        for f in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(sample_edit_views(&ds, f, 0), Err(Error::Parameter(_))));
        }
    }

    #[test]
    fn sample_count_absorbs_rounding() {
        assert_eq!(sample_count(30, 0.1), 3);
        assert_eq!(sample_count(30, 0.05), 2);
        assert_eq!(sample_count(30, 0.2), 6);
        assert_eq!(sample_count(7, 0.01), 1);
    }

    #[test]
    fn mixed_resolutions_are_rejected() {
        let mut views: Vec<_> = toy_dataset(2).views;
        views[1].0.pixels = Image::filled(5, 4, [0.0; 3]);
        assert!(matches!(SceneDataset::new("x", views), Err(Error::Dataset(_))));
    }

    #[test]
    fn non_orthonormal_pose_is_rejected() {
        let mut p = identity_pose();
        p.c2w[0][0] = 1.1;
        assert!(p.validate().is_err());
    }
}
