use std::collections::{BTreeMap, BTreeSet};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;

use super::job::{validate_id, EditJob, JobOverrides, JobState, JobStore, LogEvent, PlanSpec, StageCheckpoint};
use super::{nnfm_targets, Session};
use crate::error::{Error, Result};
use crate::features::{extract_features, FeatureMap};
use crate::image::Image;
use crate::scene::{read_checkpoint, sample_edit_views, save_checkpoint, Checkpoint, Project, TrainingStage};
use crate::segmentation::{read_mask_set, write_mask_set, MaskSet};
use crate::splat::{render, Camera, GaussianSet, Objective, RenderSettings, TrainConfig, TrainState, TrainView, Trainer};
use crate::style::{EditPlan, MIN_SOURCE_AREA};

type HaltFn = dyn Fn(&EditJob) -> bool + Send + Sync;

/// Callbacks into a running job.
#[derive(Default)]
pub struct JobHooks {
    /// Consulted after every training checkpoint; `true` stops the job there,
    /// leaving it resumable.
    pub halt_after_checkpoint: Option<Box<HaltFn>>,
}

impl JobHooks {
    pub fn halt_when(f: impl Fn(&EditJob) -> bool + Send + Sync + 'static) -> Self {
        Self { halt_after_checkpoint: Some(Box::new(f)) }
    }

    fn halt(&self, job: &EditJob) -> bool {
        self.halt_after_checkpoint.as_ref().is_some_and(|f| f(job))
    }
}

static ACTIVE: Mutex<BTreeSet<PathBuf>> = Mutex::new(BTreeSet::new());

/// At most one running job per project within this process.
struct ActiveGuard(PathBuf);

impl ActiveGuard {
    fn acquire(root: &Path) -> Result<Self> {
        let key = root.canonicalize()?;
        let mut active = ACTIVE.lock().unwrap_or_else(|e| e.into_inner());
        if !active.insert(key.clone()) {
            return Err(Error::Conflict(format!("a job is already running in {}", root.display())));
        }
        Ok(Self(key))
    }
}

impl Drop for ActiveGuard {
    fn drop(&mut self) {
        ACTIVE.lock().unwrap_or_else(|e| e.into_inner()).remove(&self.0);
    }
}

/// Validates the plan against the edit image's regions and records a
/// `PENDING` job with the effective configuration.
pub fn create_job(root: &Path, plan: PlanSpec, overrides: &JobOverrides, job_id: Option<String>) -> Result<EditJob> {
    let session = Session::open(root, overrides)?;
    let (_, masks) = session.edit_masks(&plan)?;
    for (&id, s) in &plan.style.0 {
        match &s.texture_ref {
            Some(r) if !session.project.resolve(r).is_file() => {
                return Err(Error::Validation(format!("texture reference {r} does not exist")));
            }
            None if s.mode.has_texture() && masks.get(id).is_some_and(|m| m.area < MIN_SOURCE_AREA) => {
                return Err(Error::Validation(format!(
                    "region {id} is too small to source a texture ({} pixels, need {MIN_SOURCE_AREA})",
                    masks.get(id).map_or(0, |m| m.area)
                )));
            }
            _ => {}
        }
    }
    let id = job_id.unwrap_or_else(|| uuid::Uuid::new_v4().simple().to_string());
    validate_id(&id)?;
    let store = JobStore::new(root);
    if store.exists(&id) {
        return Err(Error::Conflict(format!("job {id} already exists")));
    }
    let job = EditJob::new(id, session.project.name.clone(), plan, session.config);
    store.save(&job)?;
    Ok(job)
}

/// Creates and runs a job to completion (or until a hook halts it).
pub fn run_edit_job(root: &Path, plan: PlanSpec, overrides: &JobOverrides, hooks: &JobHooks) -> Result<EditJob> {
    let job = create_job(root, plan, overrides, None)?;
    execute_job(root, &job.job_id, hooks)
}

/// Continues a halted or failed job from its last completed stage or checkpoint.
pub fn resume_edit_job(root: &Path, job_id: &str, hooks: &JobHooks) -> Result<EditJob> {
    execute_job(root, job_id, hooks)
}

/// Runs the remaining stages of a stored job. Stage errors are recorded in the
/// returned `FAILED` job; errors before the job could be loaded are returned.
pub fn execute_job(root: &Path, job_id: &str, hooks: &JobHooks) -> Result<EditJob> {
    let store = JobStore::new(root);
    let mut job = store.load(job_id)?;
    if job.state == JobState::Done {
        return Err(Error::JobDone(job_id.to_string()));
    }
    let _guard = ActiveGuard::acquire(root)?;
    if job.state == JobState::Failed {
        job.reopen()?;
        store.save(&job)?;
    }
    let mut runner = match Project::open(root).and_then(|p| Session::with_config(p, job.config.clone())) {
        Ok(session) => Runner { art: store.artifact_dir(&job.job_id), session, store: store.clone(), plan: None, hooks },
        Err(e) => return fail(&store, job, e),
    };
    loop {
        let stage = job.state;
        let step = match stage {
            JobState::Done | JobState::Failed => return Ok(job),
            JobState::Pending => {
                let _ = store.log(&job.job_id, &LogEvent::message(stage, "started"));
                job.advance(JobState::Segmenting).and_then(|_| store.save(&job)).map(|_| Step::Next)
            }
            JobState::Segmenting => runner.segment(&mut job),
            JobState::Matching => runner.match_views(&mut job),
            JobState::Editing2d => runner.edit(&mut job),
            JobState::TrainingTexture => runner.train(&mut job, TrainingStage::Texture),
            JobState::TrainingColor => runner.train(&mut job, TrainingStage::Color),
        };
        match step {
            Ok(Step::Next) => {}
            Ok(Step::Halt) => return Ok(job),
            Err(e) => return fail(&store, job, e),
        }
    }
}

fn fail(store: &JobStore, mut job: EditJob, cause: Error) -> Result<EditJob> {
    let stage = job.state;
    log::error!("job {} failed in {stage}: {cause}", job.job_id);
    let _ = store.log(&job.job_id, &LogEvent::message(stage, cause.to_string()));
    job.fail(stage, &cause);
    store.save(&job)?;
    Ok(job)
}

enum Step {
    Next,
    Halt,
}

struct Runner<'h> {
    session: Session,
    store: JobStore,
    art: PathBuf,
    plan: Option<EditPlan>,
    hooks: &'h JobHooks,
}

impl Runner<'_> {
    fn root(&self) -> &Path {
        &self.session.project.root
    }

    fn relative(&self, path: &Path) -> String {
        path.strip_prefix(self.root()).unwrap_or(path).to_string_lossy().into_owned()
    }

    fn edit_masks_path(&self) -> PathBuf {
        self.art.join("edit_masks.json")
    }

    fn masks_path(&self, view_id: &str) -> PathBuf {
        self.art.join("masks").join(format!("{view_id}.json"))
    }

    fn edit_path(&self, view_id: &str) -> PathBuf {
        self.art.join("edits").join(format!("{view_id}.png"))
    }

    fn plan(&mut self, job: &EditJob) -> Result<&EditPlan> {
        if self.plan.is_none() {
            let image = self.session.load_edit_image(&job.plan.edit_image)?;
            let masks = read_mask_set(&self.edit_masks_path())?;
            self.plan = Some(self.session.build_plan_with(&job.plan, image, masks)?);
        }
        Ok(self.plan.as_ref().expect("just built"))
    }

    fn segment(&mut self, job: &mut EditJob) -> Result<Step> {
        if job.sampled_views.is_empty() {
            job.sampled_views = sample_edit_views(&self.session.dataset, job.config.sample_rate, job.seed)?;
            self.store.save(job)?;
        }
        if !self.edit_masks_path().is_file() {
            let (_, masks) = self.session.edit_masks(&job.plan)?;
            write_mask_set(&self.edit_masks_path(), &masks)?;
        }
        let todo: Vec<String> = job.sampled_views.iter().filter(|v| !self.masks_path(v).is_file()).cloned().collect();
        for set in self.session.segment_views(&todo)? {
            write_mask_set(&self.masks_path(&set.view_id), &set)?;
        }
        job.set_progress(JobState::Segmenting, 1.0);
        job.advance(JobState::Matching)?;
        self.store.save(job)?;
        Ok(Step::Next)
    }

    fn match_views(&mut self, job: &mut EditJob) -> Result<Step> {
        let masks: Vec<MaskSet> = job
            .sampled_views
            .iter()
            .filter(|v| !job.assignments.contains_key(*v))
            .map(|v| read_mask_set(&self.masks_path(v)))
            .collect::<Result<_>>()?;
        self.plan(job)?;
        let plan = self.plan.as_ref().expect("built above");
        let found = self.session.match_views(plan, &masks)?;
        for (m, a) in masks.iter().zip(found) {
            job.assignments.insert(m.view_id.clone(), a);
        }
        job.set_progress(JobState::Matching, 1.0);
        job.advance(JobState::Editing2d)?;
        self.store.save(job)?;
        Ok(Step::Next)
    }

    fn edit(&mut self, job: &mut EditJob) -> Result<Step> {
        self.plan(job)?;
        let plan = self.plan.as_ref().expect("built above");
        std::fs::create_dir_all(self.art.join("edits"))?;
        let edits: Vec<(String, Image<f32>)> = job
            .sampled_views
            .par_iter()
            .map(|v| {
                let masks = read_mask_set(&self.masks_path(v))?;
                let assignment = job
                    .assignments
                    .get(v)
                    .ok_or_else(|| Error::Consistency(format!("view {v} has no cached match")))?;
                Ok((v.clone(), self.session.edit_view(plan, &masks, assignment)?.pixels))
            })
            .collect::<Result<_>>()?;
        for (v, img) in &edits {
            img.save_png(&self.edit_path(v))?;
        }
        if !plan.canvases.is_empty() {
            std::fs::create_dir_all(self.art.join("canvases"))?;
            for (id, c) in &plan.canvases {
                c.pixels.save_png(&self.art.join("canvases").join(format!("{id}.png")))?;
            }
        }
        job.set_progress(JobState::Editing2d, 1.0);
        self.advance_past(job, JobState::Editing2d)?;
        Ok(Step::Next)
    }

    /// Moves to the next training stage the plan needs, finalizing when none is left.
    fn advance_past(&mut self, job: &mut EditJob, from: JobState) -> Result<()> {
        let style = &job.plan.style;
        let mut next = JobState::Done;
        for (stage, needed) in [(JobState::TrainingTexture, style.has_texture()), (JobState::TrainingColor, style.has_color())] {
            if stage <= from {
                continue;
            }
            if needed {
                next = stage;
                break;
            }
            if !job.skipped.contains(&stage) {
                job.skipped.push(stage);
            }
        }
        if next == JobState::Done {
            self.finalize(job)?;
        }
        job.advance(next)?;
        self.store.save(job)?;
        if next == JobState::Done {
            let _ = self.store.log(&job.job_id, &LogEvent::message(next, "finished"));
        }
        Ok(())
    }

    fn base(&self) -> Result<GaussianSet> {
        self.session.project.base_gaussians()
    }

    fn load(&self, cp: &StageCheckpoint) -> Result<Checkpoint> {
        read_checkpoint(&self.session.project.resolve(&cp.path))
    }

    fn train_views(&mut self, job: &EditJob, stage: TrainingStage) -> Result<Vec<TrainView>> {
        let style: BTreeMap<u32, FeatureMap> = match stage {
            TrainingStage::Texture => {
                self.plan(job)?;
                self.session.style_features(self.plan.as_ref().expect("built above"))?
            }
            _ => BTreeMap::new(),
        };
        let provider = self.session.backends.nnfm_provider();
        job.sampled_views
            .iter()
            .map(|v| {
                let (view, pose) = self.session.dataset.find(v)?;
                let target = Image::load(&self.edit_path(v))?.to_f64();
                let nnfm = if style.is_empty() {
                    Vec::new()
                } else {
                    let masks = read_mask_set(&self.masks_path(v))?;
                    let assignment = job
                        .assignments
                        .get(v)
                        .ok_or_else(|| Error::Consistency(format!("view {v} has no cached match")))?;
                    let f = extract_features(&target, provider)?;
                    nnfm_targets(&masks, assignment, &style, (f.rows, f.cols, f.stride))?
                };
                Ok(TrainView {
                    view_id: v.clone(),
                    camera: Camera::from_pose(pose, view.width(), view.height()),
                    target,
                    nnfm,
                })
            })
            .collect()
    }

    fn save_state(&self, tag: &str, s: &TrainState) -> Result<StageCheckpoint> {
        let ckpt = Checkpoint {
            gaussians: s.gaussians.clone(),
            stage: s.stage,
            iter: s.iter,
            extra: vec![("adam_m".into(), s.adam_m.clone()), ("adam_v".into(), s.adam_v.clone())],
        };
        let path = save_checkpoint(self.root(), tag, &ckpt)?;
        Ok(StageCheckpoint { stage: s.stage, iter: s.iter, path: self.relative(&path) })
    }

    fn train(&mut self, job: &mut EditJob, stage: TrainingStage) -> Result<Step> {
        let state_name = job.state;
        let views = self.train_views(job, stage)?;
        let config = TrainConfig { seed: job.seed, loss: job.config.loss.clone(), ..TrainConfig::default() };
        let objective = match stage {
            TrainingStage::Texture => Objective::Texture(self.session.backends.nnfm_provider()),
            _ => Objective::Color,
        };
        let until = match stage {
            TrainingStage::Texture => job.config.texture_iters,
            _ => job.config.color_iters,
        };
        let mut state = match job.latest_checkpoint.clone().filter(|c| c.stage == stage) {
            Some(cp) => {
                let ck = self.load(&cp)?;
                let n = ck.gaussians.len() * crate::splat::PARAMS_PER_GAUSSIAN;
                let moment = |name| ck.extra(name).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
                let (adam_m, adam_v) = (moment("adam_m"), moment("adam_v"));
                TrainState { gaussians: ck.gaussians, adam_m, adam_v, iter: ck.iter, stage }
            }
            None => {
                let start = match (&job.texture_result, stage) {
                    (Some(t), TrainingStage::Color) => self.load(t)?.gaussians,
                    _ => self.base()?,
                };
                TrainState::new(start, stage)
            }
        };
        let _ = self.store.log(&job.job_id, &LogEvent::message(state_name, format!("training from iteration {}", state.iter)));

        let trainer = Trainer::new(&views, &config, objective)?;
        let tag = job.job_id.clone();
        let store = &self.store;
        let this = &*self;
        let outcome = trainer.run(
            &mut state,
            until,
            job.config.checkpoint_every,
            |s, loss| {
                if s.iter % 10 == 0 || s.iter == until {
                    if let Err(e) = store.log(&tag, &LogEvent::loss(state_name, s.iter, loss)) {
                        log::warn!("cannot append to the log of job {tag}: {e}");
                    }
                }
            },
            |s| {
                job.latest_checkpoint = Some(this.save_state(&tag, s)?);
                job.set_progress(state_name, s.iter as f64 / until.max(1) as f64);
                store.save(job)?;
                Ok(if this.hooks.halt(job) { ControlFlow::Break(()) } else { ControlFlow::Continue(()) })
            },
        );
        match outcome {
            Ok(ControlFlow::Break(())) => return Ok(Step::Halt),
            Ok(ControlFlow::Continue(())) => {}
            Err(e @ Error::Diverged { .. }) => {
                if let Ok(cp) = self.save_state(&format!("{tag}-diverged"), &state) {
                    let _ = self.store.log(&tag, &LogEvent::message(state_name, format!("last finite state saved to {}", cp.path)));
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        }
        let result = match job.latest_checkpoint.take().filter(|c| c.stage == stage && c.iter == until) {
            Some(cp) => cp,
            None => self.save_state(&tag, &state)?,
        };
        match stage {
            TrainingStage::Texture => job.texture_result = Some(result),
            _ => job.color_result = Some(result),
        }
        job.set_progress(state_name, 1.0);
        self.advance_past(job, state_name)?;
        Ok(Step::Next)
    }

    /// Writes the output checkpoint and renders every dataset view from it.
    fn finalize(&mut self, job: &mut EditJob) -> Result<()> {
        let ckpt = match job.color_result.as_ref().or(job.texture_result.as_ref()) {
            Some(cp) => {
                let c = self.load(cp)?;
                Checkpoint::new(c.gaussians, c.stage, c.iter)
            }
            None => Checkpoint::new(self.base()?, TrainingStage::Base, 0),
        };
        let path = save_checkpoint(self.root(), &format!("{}-output", job.job_id), &ckpt)?;
        job.output_checkpoint = Some(self.relative(&path));
        let dir = self.art.join("renders");
        std::fs::create_dir_all(&dir)?;
        let params = ckpt.gaussians.to_params();
        let settings = RenderSettings::default();
        self.session.dataset.views.par_iter().try_for_each(|(view, pose)| {
            let camera = Camera::from_pose(pose, view.width(), view.height());
            let img = render(&params, &camera, &settings)?.image.to_f32();
            img.save_png(&dir.join(format!("{}.png", view.view_id)))
        })
    }
}
