//! C ABI over `iceg-core`.
//!
//! Every function returns an [`IcegStatus`]. On failure the message is kept
//! per thread and read with [`iceg_last_error`]. Handles are opaque and must be
//! released with their `_free` function; strings returned through out
//! parameters are released with [`iceg_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use iceg_core::image::{Bitmap, Image};
use iceg_core::pipeline::{run_edit_job, JobHooks, JobOverrides, JobState, PlanSpec};
use iceg_core::scene::{load_dataset, read_checkpoint, ProjectConfig, SceneDataset};
use iceg_core::segmentation::{segment_and_consolidate, KMeansSegmenter};
use iceg_core::splat::{render, ssim, Camera, GaussianSet, RenderSettings};
use iceg_core::style::apply_color_to_region;
use iceg_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IcegStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidParameter = 3,
    NotFound = 4,
    BadFile = 5,
    DatasetInvalid = 6,
    ValidationFailed = 7,
    Conflict = 8,
    BackendFailed = 9,
    Diverged = 10,
    BufferTooSmall = 11,
    JobFailed = 12,
    Internal = 13,
    Panic = 14,
}

/// Loaded multi-view dataset.
pub struct IcegDataset(SceneDataset);

/// Gaussian scene read from a checkpoint.
pub struct IcegGaussians(GaussianSet);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(IcegStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Parameter(_) => IcegStatus::InvalidParameter,
            Error::NotFound(_) => IcegStatus::NotFound,
            Error::Format { .. } | Error::ImageRead { .. } | Error::Integrity(_) | Error::Json(_) => IcegStatus::BadFile,
            Error::Dataset(_) => IcegStatus::DatasetInvalid,
            Error::Validation(_) | Error::DegenerateSegmentation => IcegStatus::ValidationFailed,
            Error::Conflict(_) | Error::JobDone(_) => IcegStatus::Conflict,
            Error::Backend { .. } => IcegStatus::BackendFailed,
            Error::Diverged { .. } => IcegStatus::Diverged,
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => IcegStatus::NotFound,
            Error::Io(_) | Error::Consistency(_) => IcegStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: IcegStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> IcegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            IcegStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            IcegStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(IcegStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(IcegStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, Failure> {
    Ok(Path::new(str_arg(p, name)?).to_path_buf())
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| fail(IcegStatus::NullArgument, format!("{name} is null")))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| fail(IcegStatus::NullArgument, format!("{name} is null")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return Err(fail(IcegStatus::NullArgument, format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut_arg<'a, T>(p: *mut T, len: usize, need: usize, name: &str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(fail(IcegStatus::NullArgument, format!("{name} is null")));
    }
    if len < need {
        return Err(fail(IcegStatus::BufferTooSmall, format!("{name} holds {len} values, {need} needed")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s).map(CString::into_raw).map_err(|_| fail(IcegStatus::Internal, "string contains a NUL byte"))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn iceg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// # Safety
/// `s` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn iceg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a dataset directory (`transforms.json` plus images).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn iceg_dataset_load(path: *const c_char, out: *mut *mut IcegDataset) -> IcegStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let ds = load_dataset(&path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(IcegDataset(ds)));
        Ok(())
    })
}

/// # Safety
/// `ds` must come from [`iceg_dataset_load`] or be null.
#[no_mangle]
pub unsafe extern "C" fn iceg_dataset_free(ds: *mut IcegDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// # Safety
/// `ds` must be a live handle; out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn iceg_dataset_info(
    ds: *const IcegDataset,
    views: *mut usize,
    width: *mut usize,
    height: *mut usize,
) -> IcegStatus {
    guard(|| {
        let ds = &ref_arg(ds, "ds")?.0;
        let (w, h) = ds.resolution();
        *out_arg(views, "views")? = ds.len();
        *out_arg(width, "width")? = w;
        *out_arg(height, "height")? = h;
        Ok(())
    })
}

/// Id of view `index`, released with [`iceg_string_free`].
///
/// # Safety
/// `ds` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn iceg_dataset_view_id(ds: *const IcegDataset, index: usize, out: *mut *mut c_char) -> IcegStatus {
    guard(|| {
        let ds = &ref_arg(ds, "ds")?.0;
        let out = out_arg(out, "out")?;
        let (view, _) = ds.views.get(index).ok_or_else(|| fail(IcegStatus::NotFound, format!("no view at index {index}")))?;
        *out = c_string(view.view_id.clone())?;
        Ok(())
    })
}

/// Reads the gaussians of a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn iceg_gaussians_load(path: *const c_char, out: *mut *mut IcegGaussians) -> IcegStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let ckpt = read_checkpoint(&path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(IcegGaussians(ckpt.gaussians)));
        Ok(())
    })
}

/// # Safety
/// `g` must come from [`iceg_gaussians_load`] or be null.
#[no_mangle]
pub unsafe extern "C" fn iceg_gaussians_free(g: *mut IcegGaussians) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

/// # Safety
/// `g` must be a live handle; `count` must be writable.
#[no_mangle]
pub unsafe extern "C" fn iceg_gaussians_count(g: *const IcegGaussians, count: *mut usize) -> IcegStatus {
    guard(|| {
        *out_arg(count, "count")? = ref_arg(g, "g")?.0.len();
        Ok(())
    })
}

/// Renders `g` from the camera of `view_id` into `rgb`, row-major RGB floats
/// of `width * height * 3` values.
///
/// # Safety
/// Handles must be live; `rgb` must hold `len` floats.
#[no_mangle]
pub unsafe extern "C" fn iceg_render(
    g: *const IcegGaussians,
    ds: *const IcegDataset,
    view_id: *const c_char,
    rgb: *mut f32,
    len: usize,
) -> IcegStatus {
    guard(|| {
        let g = &ref_arg(g, "g")?.0;
        let ds = &ref_arg(ds, "ds")?.0;
        let (view, pose) = ds.find(str_arg(view_id, "view_id")?)?;
        let (w, h) = (view.width(), view.height());
        let out = slice_mut_arg(rgb, len, w * h * 3, "rgb")?;
        let img = render(&g.to_params(), &Camera::from_pose(pose, w, h), &RenderSettings::default())?.image;
        for (o, v) in out.iter_mut().zip(img.data()) {
            *o = *v as f32;
        }
        Ok(())
    })
}

/// Segments a dataset view into at most `max_masks` regions with the
/// built-in segmenter. Writes one mask id per pixel into `labels` and the
/// number of masks into `count`.
///
/// # Safety
/// `ds` must be live; `labels` must hold `len` values; `count` writable.
#[no_mangle]
pub unsafe extern "C" fn iceg_segment(
    ds: *const IcegDataset,
    view_id: *const c_char,
    max_masks: usize,
    seed: u64,
    labels: *mut u32,
    len: usize,
    count: *mut usize,
) -> IcegStatus {
    guard(|| {
        let ds = &ref_arg(ds, "ds")?.0;
        let id = str_arg(view_id, "view_id")?;
        let (view, _) = ds.find(id)?;
        let out = slice_mut_arg(labels, len, view.pixels.pixel_count(), "labels")?;
        let count = out_arg(count, "count")?;
        let grid = ProjectConfig::default().grid_side;
        let set = segment_and_consolidate(id, &view.pixels, &KMeansSegmenter::with_seed(seed), grid, max_masks)?;
        out[..view.pixels.pixel_count()].copy_from_slice(&set.label_map());
        *count = set.masks.len();
        Ok(())
    })
}

/// Sets hue (degrees) and saturation of the pixels where `mask` is non-zero,
/// keeping their value. `rgb` is modified in place.
///
/// # Safety
/// `rgb` must hold `width * height * 3` floats and `mask` `width * height` bytes.
#[no_mangle]
pub unsafe extern "C" fn iceg_apply_color(
    rgb: *mut f32,
    mask: *const u8,
    width: usize,
    height: usize,
    hue: f64,
    sat: f64,
) -> IcegStatus {
    guard(|| {
        let n = width * height;
        let pixels = slice_mut_arg(rgb, n * 3, n * 3, "rgb")?;
        let mask = slice_arg(mask, n, "mask")?;
        let img = Image::from_vec(width, height, pixels.to_vec())?;
        let bitmap = Bitmap::from_bits(width, height, mask.iter().map(|&m| m != 0).collect())?;
        pixels.copy_from_slice(apply_color_to_region(&img, &bitmap, hue, sat)?.data());
        Ok(())
    })
}

/// Mean SSIM of two RGB float images of equal size.
///
/// # Safety
/// `a` and `b` must hold `width * height * 3` floats; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn iceg_ssim(a: *const f32, b: *const f32, width: usize, height: usize, out: *mut f64) -> IcegStatus {
    guard(|| {
        let n = width * height * 3;
        let to_image = |s: &[f32]| Image::from_vec(width, height, s.iter().map(|&v| f64::from(v)).collect());
        let a = to_image(slice_arg(a, n, "a")?)?;
        let b = to_image(slice_arg(b, n, "b")?)?;
        *out_arg(out, "out")? = ssim(&a, &b)?;
        Ok(())
    })
}

/// Runs an edit job to completion on the project at `project_root`.
/// `plan_json` is a plan (`{"edit_image": ..., "style": {...}}`) and
/// `overrides_json` an optional object of config overrides (may be null).
/// The final job record is returned as JSON in `out_job`, also when the job
/// failed, in which case the status is `JobFailed`.
///
/// # Safety
/// String arguments must be NUL-terminated; `out_job` must be writable.
#[no_mangle]
pub unsafe extern "C" fn iceg_run_edit_job(
    project_root: *const c_char,
    plan_json: *const c_char,
    overrides_json: *const c_char,
    out_job: *mut *mut c_char,
) -> IcegStatus {
    guard(|| {
        let out = out_arg(out_job, "out_job")?;
        let root = path_arg(project_root, "project_root")?;
        let plan: PlanSpec = serde_json::from_str(str_arg(plan_json, "plan_json")?)
            .map_err(|e| fail(IcegStatus::InvalidParameter, format!("bad plan: {e}")))?;
        let overrides: JobOverrides = if overrides_json.is_null() {
            JobOverrides::default()
        } else {
            serde_json::from_str(str_arg(overrides_json, "overrides_json")?)
                .map_err(|e| fail(IcegStatus::InvalidParameter, format!("bad overrides: {e}")))?
        };
        let job = run_edit_job(&root, plan, &overrides, &JobHooks::default())?;
        let json = serde_json::to_string(&job).map_err(|e| fail(IcegStatus::Internal, e.to_string()))?;
        *out = c_string(json)?;
        if job.state == JobState::Failed {
            return Err(fail(IcegStatus::JobFailed, job.failure.unwrap_or_else(|| "job failed".into())));
        }
        Ok(())
    })
}
