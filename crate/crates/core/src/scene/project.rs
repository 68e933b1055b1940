use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::{read_checkpoint, save_checkpoint, Checkpoint, TrainingStage};
use super::{load_dataset, save_dataset, SceneDataset};
use crate::error::{Error, Result};
use crate::features::Normalization;
use crate::splat::{GaussianSet, LossConfig};

pub const PROJECT_FILE: &str = "project.json";
const DATASET_DIR: &str = "dataset";

/// External program invocation for an optional backend.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommandConfig {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
    /// Feature channel count, for feature extractors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
}

/// Optional external backends; the built-in fallbacks are used when unset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmenter: Option<CommandConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<CommandConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub texture: Option<CommandConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectConfig {
    pub sample_rate: f64,
    pub max_masks: usize,
    pub grid_side: usize,
    pub seed: u64,
    pub canvas_size: usize,
    pub color_iters: u64,
    pub texture_iters: u64,
    pub checkpoint_every: u64,
    pub normalization: Normalization,
    pub loss: LossConfig,
    pub backends: BackendConfig,
}

impl Default for ProjectConfig {
    fn default() -> Self {
        Self {
            sample_rate: 0.2,
            max_masks: 8,
            grid_side: 32,
            seed: 0,
            canvas_size: 256,
            color_iters: 2000,
            texture_iters: 3000,
            checkpoint_every: 500,
            normalization: Normalization::TargetArea,
            loss: LossConfig::default(),
            backends: BackendConfig::default(),
        }
    }
}

impl ProjectConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return Err(Error::param(format!("sample_rate must be in (0, 1], got {}", self.sample_rate)));
        }
        if self.max_masks == 0 {
            return Err(Error::param("max_masks must be at least 1"));
        }
        if self.grid_side == 0 {
            return Err(Error::param("grid_side must be at least 1"));
        }
        if self.canvas_size < crate::style::MIN_CANVAS {
            return Err(Error::param(format!("canvas_size must be at least {}", crate::style::MIN_CANVAS)));
        }
        self.loss.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ProjectFile {
    name: String,
    dataset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    base_checkpoint: Option<String>,
    #[serde(default)]
    config: ProjectConfig,
    #[serde(default)]
    checkpoints: Vec<String>,
}

/// On-disk project: `project.json`, a dataset copy, checkpoints, jobs and renders.
#[derive(Clone, Debug, PartialEq)]
pub struct Project {
    pub root: PathBuf,
    pub name: String,
    /// Dataset directory, relative to the root.
    pub dataset: String,
    pub base_checkpoint: Option<String>,
    pub config: ProjectConfig,
    pub checkpoints: Vec<String>,
}

impl Project {
    /// Creates a project directory holding a copy of `dataset`.
    pub fn create(root: &Path, name: &str, dataset: &SceneDataset, config: ProjectConfig) -> Result<Self> {
        config.validate()?;
        if root.join(PROJECT_FILE).exists() {
            return Err(Error::Conflict(format!("{} already contains a project", root.display())));
        }
        std::fs::create_dir_all(root)?;
        save_dataset(dataset, &root.join(DATASET_DIR))?;
        let project = Self {
            root: root.to_path_buf(),
            name: name.to_string(),
            dataset: DATASET_DIR.to_string(),
            base_checkpoint: None,
            config,
            checkpoints: Vec::new(),
        };
        project.save()?;
        Ok(project)
    }

    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(PROJECT_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(format!("no project at {}", root.display())),
            _ => Error::Io(e),
        })?;
        let file: ProjectFile =
            serde_json::from_str(&text).map_err(|e| Error::Format { path: path.clone(), msg: e.to_string() })?;
        file.config.validate()?;
        Ok(Self {
            root: root.to_path_buf(),
            name: file.name,
            dataset: file.dataset,
            base_checkpoint: file.base_checkpoint,
            config: file.config,
            checkpoints: file.checkpoints,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ProjectFile {
            name: self.name.clone(),
            dataset: self.dataset.clone(),
            base_checkpoint: self.base_checkpoint.clone(),
            config: self.config.clone(),
            checkpoints: self.checkpoints.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)? + "\n")
    }

    pub fn save(&self) -> Result<()> {
        let mut tmp = tempfile::NamedTempFile::new_in(&self.root)?;
        std::io::Write::write_all(&mut tmp, self.to_json()?.as_bytes())?;
        tmp.persist(self.root.join(PROJECT_FILE)).map_err(|e| Error::Io(e.error))?;
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<SceneDataset> {
        load_dataset(&self.root.join(&self.dataset))
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.root).unwrap_or(path).to_string_lossy().into_owned()
    }

    /// Stores `ckpt` under `checkpoints/` and records it in the project file.
    pub fn add_checkpoint(&mut self, tag: &str, ckpt: &Checkpoint) -> Result<PathBuf> {
        let path = save_checkpoint(&self.root, tag, ckpt)?;
        let rel = self.relative(&path);
        if !self.checkpoints.contains(&rel) {
            self.checkpoints.push(rel);
        }
        self.save()?;
        Ok(path)
    }

    pub fn set_base(&mut self, gaussians: &GaussianSet) -> Result<PathBuf> {
        let path = self.add_checkpoint("base", &Checkpoint::new(gaussians.clone(), TrainingStage::Base, 0))?;
        self.base_checkpoint = Some(self.relative(&path));
        self.save()?;
        Ok(path)
    }

    pub fn base_gaussians(&self) -> Result<GaussianSet> {
        let rel = self
            .base_checkpoint
            .as_ref()
            .ok_or_else(|| Error::NotFound(format!("project {} has no trained base scene", self.name)))?;
        Ok(read_checkpoint(&self.resolve(rel))?.gaussians)
    }
}
