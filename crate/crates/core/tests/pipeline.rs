use std::path::Path;

use iceg_core::fixture;
use iceg_core::image::Image;
use iceg_core::pipeline::{
    create_job, execute_job, resume_edit_job, run_edit_job, JobHooks, JobOverrides, JobState, JobStore, PlanSpec, Session,
};
use iceg_core::scene::{read_checkpoint, Project, ProjectConfig};
use iceg_core::style::{RegionStyle, StyleMode, StyleSpec};
use iceg_core::Error;

fn project(dir: &Path) -> Project {
    let ds = fixture::tiny_dataset(6, 32);
    let config = ProjectConfig {
        sample_rate: 0.5,
        color_iters: 40,
        texture_iters: 10,
        checkpoint_every: 20,
        canvas_size: 64,
        ..ProjectConfig::default()
    };
    let mut p = Project::create(dir, "tiny", &ds, config).unwrap();
    p.set_base(&fixture::blob_scene(60, 0)).unwrap();
    p
}

fn plan_where(dir: &Path, style: RegionStyle, min_area: usize) -> PlanSpec {
    let s = Session::open(dir, &JobOverrides::default()).unwrap();
    let spec = PlanSpec { edit_image: "view:r_0".into(), style: StyleSpec::default() };
    let (_, masks) = s.edit_masks(&spec).unwrap();
    let ids = masks.masks.iter().filter(|m| m.area >= min_area).map(|m| m.mask_id);
    PlanSpec { style: StyleSpec::uniform(ids, style), ..spec }
}

fn plan(dir: &Path, style: RegionStyle) -> PlanSpec {
    plan_where(dir, style, 0)
}

fn color_plan(dir: &Path) -> PlanSpec {
    plan(dir, RegionStyle::color(200.0, 0.7))
}

#[test]
fn color_job_runs_to_done_with_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    project(dir.path());
    let spec = color_plan(dir.path());
    let job = run_edit_job(dir.path(), spec.clone(), &JobOverrides::default(), &JobHooks::default()).unwrap();
    assert_eq!(job.state, JobState::Done, "{:?}", job.failure);
    assert_eq!(job.skipped, vec![JobState::TrainingTexture]);
    assert_eq!(job.sampled_views.len(), 3);
    assert_eq!(job.progress["TRAINING_COLOR"], 1.0);
    assert_eq!(job.color_result.as_ref().unwrap().iter, 40);
    assert!(job.texture_result.is_none());

    let store = JobStore::new(dir.path());
    let art = store.artifact_dir(&job.job_id);
    let session = Session::open(dir.path(), &JobOverrides::default()).unwrap();
    for v in &job.sampled_views {
        let written = std::fs::read(art.join("edits").join(format!("{v}.png"))).unwrap();
        assert_eq!(written, session.preview(v, &spec).unwrap(), "preview differs from the job's edit of {v}");
        assert!(art.join("masks").join(format!("{v}.json")).is_file());
    }
    assert_eq!(std::fs::read_dir(art.join("renders")).unwrap().count(), 6);
    let out = read_checkpoint(&dir.path().join(job.output_checkpoint.as_ref().unwrap())).unwrap();
    assert_eq!(out.gaussians.len(), 60);

    let log = store.read_log(&job.job_id).unwrap();
    assert!(log.iter().filter(|e| e.loss.is_some()).count() >= 4);
    assert!(log.iter().all(|e| e.loss.is_none_or(f64::is_finite)));

    assert!(matches!(execute_job(dir.path(), &job.job_id, &JobHooks::default()), Err(Error::JobDone(_))));
}

#[test]
fn halted_job_resumes_to_the_same_result() {
    let straight = tempfile::tempdir().unwrap();
    project(straight.path());
    let a = run_edit_job(straight.path(), color_plan(straight.path()), &JobOverrides::default(), &JobHooks::default()).unwrap();

    let halted = tempfile::tempdir().unwrap();
    project(halted.path());
    let hooks = JobHooks::halt_when(|j| j.latest_checkpoint.as_ref().is_some_and(|c| c.iter == 20));
    let b = run_edit_job(halted.path(), color_plan(halted.path()), &JobOverrides::default(), &hooks).unwrap();
    assert_eq!(b.state, JobState::TrainingColor);
    assert_eq!(b.progress["TRAINING_COLOR"], 0.5);
    let b = resume_edit_job(halted.path(), &b.job_id, &JobHooks::default()).unwrap();
    assert_eq!(b.state, JobState::Done);

    let ga = read_checkpoint(&straight.path().join(a.output_checkpoint.unwrap())).unwrap().gaussians;
    let gb = read_checkpoint(&halted.path().join(b.output_checkpoint.unwrap())).unwrap().gaussians;
    assert_eq!(ga, gb);
}

#[test]
fn no_op_plan_copies_the_base_scene() {
    let dir = tempfile::tempdir().unwrap();
    let p = project(dir.path());
    let job = run_edit_job(dir.path(), plan(dir.path(), RegionStyle::from_region(StyleMode::None)), &JobOverrides::default(), &JobHooks::default())
        .unwrap();
    assert_eq!(job.state, JobState::Done);
    assert_eq!(job.skipped, vec![JobState::TrainingTexture, JobState::TrainingColor]);
    let out = read_checkpoint(&dir.path().join(job.output_checkpoint.unwrap())).unwrap();
    assert_eq!(out.gaussians, p.base_gaussians().unwrap());
    let stage_ckpts = std::fs::read_dir(dir.path().join("checkpoints"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().contains("-color-"))
        .count();
    assert_eq!(stage_ckpts, 0);
}

#[test]
fn failure_records_stage_and_resume_recovers() {
    let dir = tempfile::tempdir().unwrap();
    let p = project(dir.path());
    let job = create_job(dir.path(), color_plan(dir.path()), &JobOverrides::default(), Some("broken".into())).unwrap();
    let base = p.resolve(p.base_checkpoint.as_ref().unwrap());
    let saved = std::fs::read(&base).unwrap();
    std::fs::remove_file(&base).unwrap();

    let failed = execute_job(dir.path(), &job.job_id, &JobHooks::default()).unwrap();
    assert_eq!(failed.state, JobState::Failed);
    assert_eq!(failed.failed_stage, Some(JobState::TrainingColor));
    assert!(failed.failure.as_deref().unwrap().starts_with("TRAINING_COLOR"));

    std::fs::write(&base, saved).unwrap();
    let done = resume_edit_job(dir.path(), "broken", &JobHooks::default()).unwrap();
    assert_eq!(done.state, JobState::Done);
}

#[test]
fn texture_job_trains_both_stages() {
    let dir = tempfile::tempdir().unwrap();
    project(dir.path());
    let both = RegionStyle::from_region(StyleMode::Both);
    let speck = dir.path().join("speck.png");
    let pixels = (0..32 * 32)
        .flat_map(|i| match (i % 32, i / 32) {
            (10..13, 10..13) => [0.9, 0.1, 0.1],
            (x, _) if x < 16 => [0.1, 0.2, 0.8],
            _ => [0.2, 0.8, 0.3],
        })
        .collect();
    Image::from_vec(32, 32, pixels).unwrap().save_png(&speck).unwrap();
    let spec = PlanSpec { edit_image: speck.to_string_lossy().into_owned(), style: StyleSpec::default() };
    let (_, masks) = Session::open(dir.path(), &JobOverrides::default()).unwrap().edit_masks(&spec).unwrap();
    let tiny = masks.masks.iter().find(|m| m.bitmap.get(11, 11)).unwrap();
    assert!(tiny.area < 16);
    let too_small = PlanSpec { style: StyleSpec::uniform([tiny.mask_id], both.clone()), ..spec };
    assert!(matches!(create_job(dir.path(), too_small, &JobOverrides::default(), None), Err(Error::Validation(_))));
    let spec = plan_where(dir.path(), both, 64);
    assert!(!spec.style.0.is_empty());
    let job = run_edit_job(dir.path(), spec, &JobOverrides::default(), &JobHooks::default()).unwrap();
    assert_eq!(job.state, JobState::Done, "{:?}", job.failure);
    assert!(job.skipped.is_empty());
    assert_eq!(job.texture_result.as_ref().unwrap().iter, 10);
    assert_eq!(job.color_result.as_ref().unwrap().iter, 40);
    let art = JobStore::new(dir.path()).artifact_dir(&job.job_id);
    assert!(std::fs::read_dir(art.join("canvases")).unwrap().count() > 0);
}

#[test]
fn invalid_plans_are_rejected_before_a_job_exists() {
    let dir = tempfile::tempdir().unwrap();
    project(dir.path());
    let bad = PlanSpec { edit_image: "view:r_0".into(), style: StyleSpec::uniform([97], RegionStyle::color(10.0, 0.5)) };
    assert!(matches!(create_job(dir.path(), bad, &JobOverrides::default(), None), Err(Error::Validation(_))));
    let missing = PlanSpec { edit_image: "view:nope".into(), style: StyleSpec::default() };
    assert!(matches!(create_job(dir.path(), missing, &JobOverrides::default(), None), Err(Error::NotFound(_))));
    let overrides = JobOverrides { sample_rate: Some(0.0), ..JobOverrides::default() };
    assert!(matches!(create_job(dir.path(), color_plan(dir.path()), &overrides, None), Err(Error::Parameter(_))));
    assert!(JobStore::new(dir.path()).list().unwrap().is_empty());
}

#[test]
fn overrides_are_recorded_in_the_job() {
    let dir = tempfile::tempdir().unwrap();
    project(dir.path());
    let overrides = JobOverrides { seed: Some(9), sample_rate: Some(1.0), ..JobOverrides::default() };
    let job = create_job(dir.path(), color_plan(dir.path()), &overrides, None).unwrap();
    assert_eq!((job.seed, job.config.sample_rate, job.config.color_iters), (9, 1.0, 40));
}
