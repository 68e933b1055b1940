use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::MatchAssignment;
use crate::scene::{ProjectConfig, TrainingStage};
use crate::style::StyleSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum JobState {
    #[serde(rename = "PENDING")]
    Pending,
    #[serde(rename = "SEGMENTING")]
    Segmenting,
    #[serde(rename = "MATCHING")]
    Matching,
    #[serde(rename = "EDITING_2D")]
    Editing2d,
    #[serde(rename = "TRAINING_TEXTURE")]
    TrainingTexture,
    #[serde(rename = "TRAINING_COLOR")]
    TrainingColor,
    #[serde(rename = "DONE")]
    Done,
    #[serde(rename = "FAILED")]
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            JobState::Pending => "PENDING",
            JobState::Segmenting => "SEGMENTING",
            JobState::Matching => "MATCHING",
            JobState::Editing2d => "EDITING_2D",
            JobState::TrainingTexture => "TRAINING_TEXTURE",
            JobState::TrainingColor => "TRAINING_COLOR",
            JobState::Done => "DONE",
            JobState::Failed => "FAILED",
        }
    }
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Serializable edit request: the edit image and per-region directives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanSpec {
    /// `view:<view_id>` for a dataset view, otherwise a path relative to the project root.
    pub edit_image: String,
    #[serde(default)]
    pub style: StyleSpec,
}

/// Per-job settings that take precedence over the project configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JobOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_masks: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub color_iters: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub texture_iters: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub canvas_size: Option<usize>,
}

impl JobOverrides {
    pub fn apply(&self, base: &ProjectConfig) -> Result<ProjectConfig> {
        let mut c = base.clone();
        if let Some(v) = self.sample_rate {
            c.sample_rate = v;
        }
        if let Some(v) = self.max_masks {
            c.max_masks = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.color_iters {
            c.color_iters = v;
        }
        if let Some(v) = self.texture_iters {
            c.texture_iters = v;
        }
        if let Some(v) = self.checkpoint_every {
            c.checkpoint_every = v;
        }
        if let Some(v) = self.canvas_size {
            c.canvas_size = v;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageCheckpoint {
    pub stage: TrainingStage,
    pub iter: u64,
    /// Relative to the project root.
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditJob {
    pub job_id: String,
    pub project: String,
    pub plan: PlanSpec,
    pub config: ProjectConfig,
    pub seed: u64,
    pub state: JobState,
    /// Completed fraction per stage name.
    #[serde(default)]
    pub progress: BTreeMap<String, f64>,
    #[serde(default)]
    pub skipped: Vec<JobState>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<JobState>,
    #[serde(default)]
    pub sampled_views: Vec<String>,
    /// Cached per-view matches, keyed by view id.
    #[serde(default)]
    pub assignments: BTreeMap<String, MatchAssignment>,
    /// Most recent training checkpoint of the active stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latest_checkpoint: Option<StageCheckpoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub texture_result: Option<StageCheckpoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color_result: Option<StageCheckpoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_checkpoint: Option<String>,
}

impl EditJob {
    pub fn new(job_id: String, project: String, plan: PlanSpec, config: ProjectConfig) -> Self {
        let now = Utc::now();
        Self {
            job_id,
            project,
            seed: config.seed,
            plan,
            config,
            state: JobState::Pending,
            progress: BTreeMap::new(),
            skipped: Vec::new(),
            created_at: now,
            updated_at: now,
            failure: None,
            failed_stage: None,
            sampled_views: Vec::new(),
            assignments: BTreeMap::new(),
            latest_checkpoint: None,
            texture_result: None,
            color_result: None,
            output_checkpoint: None,
        }
    }

    /// Moves forward along the stage order, or to `FAILED` from an active state.
    pub fn advance(&mut self, next: JobState) -> Result<()> {
        let ok = match next {
            JobState::Failed => !self.state.is_terminal(),
            _ => !self.state.is_terminal() && next > self.state,
        };
        if !ok {
            return Err(Error::Consistency(format!("job {} cannot go from {} to {next}", self.job_id, self.state)));
        }
        self.state = next;
        self.updated_at = Utc::now();
        Ok(())
    }

    pub fn set_progress(&mut self, stage: JobState, fraction: f64) {
        let slot = self.progress.entry(stage.as_str().to_string()).or_insert(0.0);
        *slot = slot.max(fraction.clamp(0.0, 1.0));
        self.updated_at = Utc::now();
    }

    pub fn fail(&mut self, stage: JobState, cause: &Error) {
        self.failure = Some(format!("{stage}: {cause}"));
        self.failed_stage = Some(stage);
        self.state = JobState::Failed;
        self.updated_at = Utc::now();
    }

    /// Puts a failed job back at the stage that failed so it can be resumed.
    pub(crate) fn reopen(&mut self) -> Result<()> {
        let stage = match (self.state, self.failed_stage) {
            (JobState::Failed, Some(s)) => s,
            _ => return Err(Error::Consistency(format!("job {} has not failed", self.job_id))),
        };
        self.state = stage;
        self.failure = None;
        self.failed_stage = None;
        self.updated_at = Utc::now();
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEvent {
    pub timestamp: DateTime<Utc>,
    pub stage: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iter: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl LogEvent {
    pub fn new(stage: JobState) -> Self {
        Self { timestamp: Utc::now(), stage: stage.as_str().to_string(), iter: None, loss: None, message: None }
    }

    pub fn loss(stage: JobState, iter: u64, loss: f64) -> Self {
        Self { iter: Some(iter), loss: Some(loss), ..Self::new(stage) }
    }

    pub fn message(stage: JobState, msg: impl Into<String>) -> Self {
        Self { message: Some(msg.into()), ..Self::new(stage) }
    }
}

/// Job records under `jobs/` in a project: `{id}.json`, `{id}.log.jsonl` and
/// an artifact directory `{id}/`.
#[derive(Clone, Debug)]
pub struct JobStore {
    dir: PathBuf,
}

impl JobStore {
    pub fn new(project_root: &Path) -> Self {
        Self { dir: project_root.join("jobs") }
    }

    pub fn record_path(&self, job_id: &str) -> PathBuf {
        self.dir.join(format!("{job_id}.json"))
    }

    pub fn log_path(&self, job_id: &str) -> PathBuf {
        self.dir.join(format!("{job_id}.log.jsonl"))
    }

    pub fn artifact_dir(&self, job_id: &str) -> PathBuf {
        self.dir.join(job_id)
    }

    pub fn exists(&self, job_id: &str) -> bool {
        self.record_path(job_id).is_file()
    }

    pub fn save(&self, job: &EditJob) -> Result<()> {
        validate_id(&job.job_id)?;
        std::fs::create_dir_all(&self.dir)?;
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
        tmp.write_all(&serde_json::to_vec_pretty(job)?)?;
        tmp.persist(self.record_path(&job.job_id)).map_err(|e| Error::Io(e.error))?;
        Ok(())
    }

    pub fn load(&self, job_id: &str) -> Result<EditJob> {
        validate_id(job_id)?;
        let path = self.record_path(job_id);
        let bytes = std::fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(format!("job {job_id}")),
            _ => Error::Io(e),
        })?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Format { path, msg: e.to_string() })
    }

    pub fn list(&self) -> Result<Vec<String>> {
        let mut ids = Vec::new();
        if let Ok(entries) = std::fs::read_dir(&self.dir) {
            for e in entries {
                let name = e?.file_name().to_string_lossy().into_owned();
                if let Some(id) = name.strip_suffix(".json") {
                    if !id.ends_with(".log") {
                        ids.push(id.to_string());
                    }
                }
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn log(&self, job_id: &str, event: &LogEvent) -> Result<()> {
        std::fs::create_dir_all(&self.dir)?;
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(self.log_path(job_id))?;
        let mut line = serde_json::to_vec(event)?;
        line.push(b'\n');
        f.write_all(&line)?;
        Ok(())
    }

    pub fn read_log(&self, job_id: &str) -> Result<Vec<LogEvent>> {
        let text = std::fs::read_to_string(self.log_path(job_id))?;
        text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
    }
}

/// Job ids become file names, so only a conservative character set is allowed.
pub fn validate_id(id: &str) -> Result<()> {
    let ok = !id.is_empty() && id.len() <= 128 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if ok {
        Ok(())
    } else {
        Err(Error::param(format!("invalid job id `{id}`")))
    }
}
