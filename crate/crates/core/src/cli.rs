//! `iceg` command line: project setup, single-stage tools, full edits and the
//! HTTP service.

use std::ffi::OsString;
use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::fixture;
use crate::pipeline::{create_job, execute_job, JobHooks, JobOverrides, JobState, JobStore, PlanSpec, Session};
use crate::scene::{load_dataset, read_checkpoint, Project, ProjectConfig};
use crate::segmentation::{label_map_png, write_mask_set};
use crate::splat::{render, Camera, RenderSettings};
use crate::style::{RegionStyle, StyleMode, StyleSpec, MIN_SOURCE_AREA};

const PRECEDENCE: &str = "Settings resolve in this order: command-line flag, then the project's project.json, \
then the built-in default. The project root may also be given through ICEG_PROJECT_ROOT.";

#[derive(Parser, Debug)]
#[command(name = "iceg", version, about = "Color and texture editing of gaussian-splat scenes from a style image", after_help = PRECEDENCE)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Create a project from a dataset and base checkpoint, or from the synthetic fixture.
    #[command(after_help = PRECEDENCE)]
    Init(InitArgs),
    /// Segment one view and write its mask set and label map.
    #[command(after_help = PRECEDENCE)]
    Segment(SegmentArgs),
    /// Match the regions of one view against an edit image and print the assignment.
    #[command(after_help = PRECEDENCE)]
    Match(MatchArgs),
    /// Apply an edit plan to one view in 2D and write the PNG.
    #[command(after_help = PRECEDENCE)]
    Preview(PreviewArgs),
    /// Run (or resume) a full edit job.
    #[command(after_help = PRECEDENCE)]
    Edit(EditArgs),
    /// Render one view from a checkpoint.
    #[command(after_help = PRECEDENCE)]
    Render(RenderArgs),
    /// Serve the HTTP API.
    #[command(after_help = PRECEDENCE)]
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
struct ProjectArg {
    /// Project directory.
    #[arg(long, env = "ICEG_PROJECT_ROOT")]
    project: PathBuf,
}

#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// Seed for view sampling, segmentation, texture synthesis and training.
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of views edited in 2D and used for finetuning.
    #[arg(long)]
    sample_rate: Option<f64>,
    /// Mask budget per view.
    #[arg(long)]
    max_masks: Option<usize>,
    #[arg(long)]
    color_iters: Option<u64>,
    #[arg(long)]
    texture_iters: Option<u64>,
    /// Iterations between training checkpoints.
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Side length of synthesized texture canvases.
    #[arg(long)]
    canvas_size: Option<usize>,
}

impl ConfigArgs {
    fn overrides(&self) -> JobOverrides {
        JobOverrides {
            sample_rate: self.sample_rate,
            max_masks: self.max_masks,
            seed: self.seed,
            color_iters: self.color_iters,
            texture_iters: self.texture_iters,
            checkpoint_every: self.checkpoint_every,
            canvas_size: self.canvas_size,
        }
    }
}

#[derive(Args, Debug)]
struct InitArgs {
    #[command(flatten)]
    project: ProjectArg,
    /// Dataset directory with a transforms manifest.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    dataset: Option<PathBuf>,
    /// Trained base scene (checkpoint file) for the dataset.
    #[arg(long, requires = "dataset")]
    base: Option<PathBuf>,
    /// Generate the three-blob fixture scene and its views instead.
    #[arg(long)]
    synthetic: bool,
    /// Number of fixture views.
    #[arg(long, default_value_t = 30)]
    views: usize,
    /// Fixture image size.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long)]
    name: Option<String>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct SegmentArgs {
    #[command(flatten)]
    project: ProjectArg,
    #[arg(long)]
    view: String,
    #[arg(long)]
    max_masks: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: `<project>/segments`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EditImageArgs {
    /// Edit image file.
    #[arg(long, conflicts_with_all = ["edit_view", "plan"])]
    style_image: Option<PathBuf>,
    /// Use a dataset view as the edit image.
    #[arg(long, conflicts_with = "plan")]
    edit_view: Option<String>,
    /// Edit plan JSON (`edit_image` plus per-region `style`).
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Directive applied to every edit region when no plan file is given.
    #[arg(long, value_enum, default_value_t = Mode::Color)]
    mode: Mode,
    /// Target hue in degrees for every region (default: each region's own hue).
    #[arg(long)]
    hue: Option<f64>,
    /// Target saturation for every region.
    #[arg(long)]
    sat: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Color,
    Texture,
    Both,
    None,
}

impl From<Mode> for StyleMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Color => StyleMode::Color,
            Mode::Texture => StyleMode::Texture,
            Mode::Both => StyleMode::Both,
            Mode::None => StyleMode::None,
        }
    }
}

#[derive(Args, Debug)]
struct MatchArgs {
    #[command(flatten)]
    project: ProjectArg,
    #[arg(long)]
    view: String,
    #[command(flatten)]
    edit: EditImageArgs,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct PreviewArgs {
    #[command(flatten)]
    project: ProjectArg,
    #[arg(long)]
    view: String,
    #[command(flatten)]
    edit: EditImageArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EditArgs {
    #[command(flatten)]
    project: ProjectArg,
    #[command(flatten)]
    edit: EditImageArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Id for the new job.
    #[arg(long, conflicts_with = "resume")]
    job_id: Option<String>,
    /// Resume an existing job instead of starting one.
    #[arg(long)]
    resume: Option<String>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[command(flatten)]
    project: ProjectArg,
    /// Checkpoint file, relative to the project or absolute; `base` for the base scene.
    #[arg(long, default_value = "base")]
    checkpoint: String,
    #[arg(long)]
    view: String,
    /// Output PNG (default: `<project>/renders/<view>.png`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ServeArgs {
    /// Directory of projects, or a single project directory.
    #[arg(long, env = "ICEG_PROJECT_ROOT")]
    root: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
}

/// Exit status for an error: 1 for problems with the user's input, 2 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Parameter(_)
        | Error::Validation(_)
        | Error::NotFound(_)
        | Error::Conflict(_)
        | Error::JobDone(_)
        | Error::Format { .. }
        | Error::ImageRead { .. }
        | Error::Dataset(_)
        | Error::DegenerateSegmentation => 1,
        _ => 2,
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let mut out = std::io::stdout().lock();
    match run(cli.command, &mut out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn run(command: Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Init(a) => init(a, out),
        Command::Segment(a) => segment(a, out),
        Command::Match(a) => match_cmd(a, out),
        Command::Preview(a) => preview(a, out),
        Command::Edit(a) => edit(a, out),
        Command::Render(a) => render_cmd(a, out),
        Command::Serve(a) => {
            crate::service::run(&a.root, SocketAddr::new(a.host, a.port))?;
            Ok(0)
        }
    }
}

fn emit(out: &mut dyn Write, value: &serde_json::Value) -> Result<()> {
    writeln!(out, "{}", serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn init(a: InitArgs, out: &mut dyn Write) -> Result<i32> {
    let config = a.config.overrides().apply(&ProjectConfig::default())?;
    let root = &a.project.project;
    let project = if a.synthetic {
        let scene = fixture::BlobScene::new(501, config.seed);
        let ds = fixture::render_dataset("blobs", &scene.gaussians, &fixture::ring_poses(a.views, a.size), a.size)?;
        let mut p = Project::create(root, a.name.as_deref().unwrap_or("blobs"), &ds, config)?;
        p.set_base(&scene.gaussians)?;
        p
    } else {
        let dir = a.dataset.expect("clap requires --dataset without --synthetic");
        let ds = load_dataset(&dir)?;
        let name = a.name.unwrap_or_else(|| ds.name.clone());
        let mut p = Project::create(root, &name, &ds, config)?;
        if let Some(base) = a.base {
            p.set_base(&read_checkpoint(&base)?.gaussians)?;
        }
        p
    };
    emit(
        out,
        &serde_json::json!({
            "project": project.name,
            "root": root,
            "base_checkpoint": project.base_checkpoint,
        }),
    )?;
    Ok(0)
}

fn segment(a: SegmentArgs, out: &mut dyn Write) -> Result<i32> {
    let overrides = JobOverrides { max_masks: a.max_masks, seed: a.seed, ..JobOverrides::default() };
    let session = Session::open(&a.project.project, &overrides)?;
    let masks = session.segment_view(&a.view)?;
    let dir = a.out.unwrap_or_else(|| a.project.project.join("segments"));
    let json = dir.join(format!("{}.json", a.view));
    let labels = dir.join(format!("{}.labels.png", a.view));
    write_mask_set(&json, &masks)?;
    std::fs::write(&labels, label_map_png(&masks)?)?;
    emit(
        out,
        &serde_json::json!({
            "view_id": masks.view_id,
            "masks": masks.masks.iter().map(|m| serde_json::json!({"mask_id": m.mask_id, "area": m.area})).collect::<Vec<_>>(),
            "mask_set": json,
            "label_map": labels,
        }),
    )?;
    Ok(0)
}

/// Plan from a plan file, or one directive for every region of the edit image.
fn plan_from(session: &Session, e: &EditImageArgs) -> Result<PlanSpec> {
    if let Some(path) = &e.plan {
        let text = std::fs::read_to_string(path)?;
        return serde_json::from_str(&text).map_err(|err| Error::Format { path: path.clone(), msg: err.to_string() });
    }
    let edit_image = match (&e.style_image, &e.edit_view) {
        (Some(p), _) => std::path::absolute(p)?.to_string_lossy().into_owned(),
        (None, Some(v)) => format!("view:{v}"),
        (None, None) => return Err(Error::param("give --style-image, --edit-view or --plan")),
    };
    let spec = PlanSpec { edit_image, style: StyleSpec::default() };
    let (_, masks) = session.edit_masks(&spec)?;
    let mode = StyleMode::from(e.mode);
    let style = RegionStyle { mode, hue: e.hue, sat: e.sat, ..RegionStyle::default() };
    let ids = masks.masks.iter().filter(|m| !mode.has_texture() || m.area >= MIN_SOURCE_AREA).map(|m| m.mask_id);
    Ok(PlanSpec { style: StyleSpec::uniform(ids, style), ..spec })
}

fn match_cmd(a: MatchArgs, out: &mut dyn Write) -> Result<i32> {
    let session = Session::open(&a.project.project, &a.config.overrides())?;
    let spec = PlanSpec { style: StyleSpec::default(), ..plan_from(&session, &a.edit)? };
    let plan = session.build_plan(&spec)?;
    let masks = session.segment_view(&a.view)?;
    emit(out, &serde_json::to_value(session.match_view(&plan, &masks)?)?)?;
    Ok(0)
}

fn preview(a: PreviewArgs, out: &mut dyn Write) -> Result<i32> {
    let session = Session::open(&a.project.project, &a.config.overrides())?;
    let spec = plan_from(&session, &a.edit)?;
    session.view(&a.view)?;
    let png = session.preview(&a.view, &spec)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&a.out, png)?;
    emit(out, &serde_json::json!({"view_id": a.view, "output": a.out}))?;
    Ok(0)
}

fn edit(a: EditArgs, out: &mut dyn Write) -> Result<i32> {
    let root = &a.project.project;
    let id = match a.resume {
        Some(id) => id,
        None => {
            let overrides = a.config.overrides();
            let session = Session::open(root, &overrides)?;
            let spec = plan_from(&session, &a.edit)?;
            drop(session);
            create_job(root, spec, &overrides, a.job_id)?.job_id
        }
    };
    let job = execute_job(root, &id, &JobHooks::default())?;
    let renders = JobStore::new(root).artifact_dir(&job.job_id).join("renders");
    emit(
        out,
        &serde_json::json!({
            "job_id": job.job_id,
            "state": job.state,
            "failure": job.failure,
            "sampled_views": job.sampled_views,
            "output_checkpoint": job.output_checkpoint,
            "renders": (job.state == JobState::Done).then_some(renders),
        }),
    )?;
    Ok(if job.state == JobState::Done { 0 } else { 2 })
}

fn render_cmd(a: RenderArgs, out: &mut dyn Write) -> Result<i32> {
    let project = Project::open(&a.project.project)?;
    let gaussians = if a.checkpoint == "base" {
        project.base_gaussians()?
    } else {
        let path = project.resolve(&a.checkpoint);
        if !path.is_file() {
            return Err(Error::NotFound(format!("checkpoint {}", a.checkpoint)));
        }
        read_checkpoint(&path)?.gaussians
    };
    let ds = project.load_dataset()?;
    let (view, pose) = ds.find(&a.view)?;
    let camera = Camera::from_pose(pose, view.width(), view.height());
    let img = render(&gaussians.to_params(), &camera, &RenderSettings::default())?.image.to_f32();
    let path = a.out.unwrap_or_else(|| project.root.join("renders").join(format!("{}.png", a.view)));
    img.save_png(&path)?;
    emit(out, &serde_json::json!({"view_id": a.view, "output": path, "width": img.width(), "height": img.height()}))?;
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn help_documents_precedence_and_exits_zero() {
        let help = Cli::command().render_long_help().to_string();
        assert!(help.contains("command-line flag, then the project's project.json"));
        assert_eq!(main_with(["iceg", "--help"]), 0);
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(main_with(["iceg", "segment", "--bogus"]), 1);
        assert_eq!(main_with(["iceg"]), 1);
    }

    #[test]
    fn error_classes() {
        assert_eq!(exit_code(&Error::param("x")), 1);
        assert_eq!(exit_code(&Error::Integrity("x".into())), 2);
        assert_eq!(exit_code(&Error::NotFound("x".into())), 1);
    }

    #[test]
    fn missing_project_is_a_user_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("none");
        assert_eq!(main_with(["iceg".into(), "render".into(), "--project".into(), p.into_os_string(), "--view".into(), "r_0".into()]), 1);
    }
}
