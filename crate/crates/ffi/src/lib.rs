//! C ABI over `rgbt-count`.
//!
//! Every function returns an [`RgbtStatus`]; on failure a description is
//! available from [`rgbt_last_error_message`] on the same thread. Models are
//! opaque [`RgbtModel`] handles released with [`rgbt_model_free`]. Images
//! are row-major `H x W x C` arrays of `double` in `[0, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use rgbt_count::backbone::make_thermal_input;
use rgbt_count::checkpoint::Checkpoint;
use rgbt_count::metrics::{regional_counts, rmse_counts};
use rgbt_count::synth::{generate_dataset, SceneConfig};
use rgbt_count::train::Adam;
use rgbt_count::{CrowdCounter, DensityMap, Error, ParamStore, RunConfig, Tensor};

/// Result code of every entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RgbtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    NonFinite = 4,
    Config = 5,
    Parse = 6,
    Checkpoint = 7,
    Io = 8,
    Diverged = 9,
    Panic = 10,
}

impl From<&Error> for RgbtStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape(_) => RgbtStatus::Shape,
            Error::NonFinite(_) => RgbtStatus::NonFinite,
            Error::Config(_) => RgbtStatus::Config,
            Error::Parse { .. } => RgbtStatus::Parse,
            Error::Checkpoint(_) => RgbtStatus::Checkpoint,
            Error::Diverged { .. } => RgbtStatus::Diverged,
            Error::Io(_) => RgbtStatus::Io,
        }
    }
}

/// Opaque model handle: architecture, parameters and optimizer state.
pub struct RgbtModel {
    model: CrowdCounter,
    params: ParamStore,
    adam: Adam,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Fail(RgbtStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail((&e).into(), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(RgbtStatus::NullPointer, format!("`{what}` is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(RgbtStatus::InvalidArgument, msg.into())
}

/// Runs `f`, converting errors and panics to a status and a stored message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> RgbtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            RgbtStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            RgbtStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("`{what}` is not UTF-8")))?;
    Ok(Path::new(s).to_path_buf())
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn model_ref<'a>(m: *const RgbtModel) -> Result<&'a RgbtModel, Fail> {
    m.as_ref().ok_or_else(|| null("model"))
}

/// Message of the last failed call on this thread (empty after a success).
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn rgbt_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Static description of a status code.
#[no_mangle]
pub extern "C" fn rgbt_status_string(status: RgbtStatus) -> *const c_char {
    let s: &'static [u8] = match status {
        RgbtStatus::Ok => b"ok\0",
        RgbtStatus::NullPointer => b"null pointer\0",
        RgbtStatus::InvalidArgument => b"invalid argument\0",
        RgbtStatus::Shape => b"shape error\0",
        RgbtStatus::NonFinite => b"non-finite value\0",
        RgbtStatus::Config => b"invalid configuration\0",
        RgbtStatus::Parse => b"parse error\0",
        RgbtStatus::Checkpoint => b"checkpoint error\0",
        RgbtStatus::Io => b"I/O error\0",
        RgbtStatus::Diverged => b"training diverged\0",
        RgbtStatus::Panic => b"internal panic\0",
    };
    s.as_ptr().cast()
}

/// Creates a freshly initialized model.
///
/// # Safety
/// `config_text` is null (defaults) or a NUL-terminated `key = value` config;
/// `out` must be a valid pointer to write the handle to.
#[no_mangle]
pub unsafe extern "C" fn rgbt_model_new(config_text: *const c_char, seed: u64, out: *mut *mut RgbtModel) -> RgbtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let mut cfg = if config_text.is_null() {
            RunConfig::default()
        } else {
            let text = CStr::from_ptr(config_text)
                .to_str()
                .map_err(|_| invalid("config is not UTF-8"))?;
            RunConfig::parse(text, Path::new("<config>"))?
        };
        cfg.seed = seed;
        let (model, params) = CrowdCounter::new(&cfg)?;
        let adam = Adam::new(&cfg.optim);
        *out = Box::into_raw(Box::new(RgbtModel { model, params, adam }));
        Ok(())
    })
}

/// Loads a checkpoint written by the CLI or [`rgbt_model_save`].
///
/// # Safety
/// `path` is a NUL-terminated UTF-8 path; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rgbt_model_load(path: *const c_char, out: *mut *mut RgbtModel) -> RgbtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let ck = Checkpoint::load(&path_arg(path, "path")?)?;
        let model = ck.model()?;
        *out = Box::into_raw(Box::new(RgbtModel {
            model,
            params: ck.params,
            adam: ck.adam,
        }));
        Ok(())
    })
}

/// # Safety
/// `model` is a live handle; `path` a NUL-terminated UTF-8 path.
#[no_mangle]
pub unsafe extern "C" fn rgbt_model_save(model: *const RgbtModel, path: *const c_char) -> RgbtStatus {
    guard(|| {
        let m = model_ref(model)?;
        let path = path_arg(path, "path")?;
        Checkpoint::new(&m.model.config, &m.params, &m.adam).save(&path)?;
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rgbt_model_free(model: *mut RgbtModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Expected input height and width.
///
/// # Safety
/// `model` is a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rgbt_model_image_size(model: *const RgbtModel, out: *mut usize) -> RgbtStatus {
    guard(|| {
        let m = model_ref(model)?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.model.config.image_size;
        Ok(())
    })
}

/// Side `N` of the `N x N` density grid.
///
/// # Safety
/// `model` is a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rgbt_model_grid_side(model: *const RgbtModel, out: *mut usize) -> RgbtStatus {
    guard(|| {
        let m = model_ref(model)?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.model.config.token_grid_n();
        Ok(())
    })
}

/// Number of scalar parameters.
///
/// # Safety
/// `model` is a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rgbt_model_num_params(model: *const RgbtModel, out: *mut usize) -> RgbtStatus {
    guard(|| {
        let m = model_ref(model)?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.params.num_scalars();
        Ok(())
    })
}

/// Predicts a density map. `rgb` holds `S*S*3` values and `thermal`
/// `S*S*thermal_channels` (1 or 3), `S` the model image size. Writes `N*N`
/// cells to `density_out` and the map total to `count_out`.
///
/// # Safety
/// All pointers valid for the stated lengths; `density_len` must be `N*N`.
#[no_mangle]
pub unsafe extern "C" fn rgbt_model_predict(
    model: *const RgbtModel,
    rgb: *const f64,
    thermal: *const f64,
    thermal_channels: usize,
    density_out: *mut f64,
    density_len: usize,
    count_out: *mut f64,
) -> RgbtStatus {
    guard(|| {
        let m = model_ref(model)?;
        let s = m.model.config.image_size;
        let n = m.model.config.token_grid_n();
        if thermal_channels != 1 && thermal_channels != 3 {
            return Err(invalid("thermal_channels must be 1 or 3"));
        }
        if density_len != n * n {
            return Err(invalid(format!("density buffer must hold {} values", n * n)));
        }
        let rgb = Tensor::new([s, s, 3], slice(rgb, s * s * 3, "rgb")?.to_vec())?;
        let thermal = Tensor::new([s, s, thermal_channels], slice(thermal, s * s * thermal_channels, "thermal")?.to_vec())?;
        let thermal = make_thermal_input(&thermal)?;
        let out = slice_mut(density_out, density_len, "density_out")?;
        let count = count_out.as_mut().ok_or_else(|| null("count_out"))?;
        let p = m.model.predict(&m.params, &rgb, &thermal)?;
        out.copy_from_slice(p.density.grid.data());
        *count = p.density.predicted_count();
        Ok(())
    })
}

/// GAME regional counts of an `n x n` density grid over a `height x width`
/// image: writes `4^level` values, row-major.
///
/// # Safety
/// `grid` holds `n*n` values; `out` has room for `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn rgbt_regional_counts(
    grid: *const f64,
    n: usize,
    height: usize,
    width: usize,
    level: u32,
    out: *mut f64,
    out_len: usize,
) -> RgbtStatus {
    guard(|| {
        if n == 0 {
            return Err(invalid("n must be positive"));
        }
        let g = Tensor::new([n, n], slice(grid, n * n, "grid")?.to_vec())?;
        let counts = regional_counts(&DensityMap::new(g, (height, width))?, level)?;
        if out_len != counts.len() {
            return Err(invalid(format!("out must hold {} values", counts.len())));
        }
        slice_mut(out, out_len, "out")?.copy_from_slice(&counts);
        Ok(())
    })
}

/// RMSE of predicted versus ground-truth totals.
///
/// # Safety
/// `pred` and `gt` hold `len` values; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rgbt_rmse(pred: *const f64, gt: *const f64, len: usize, out: *mut f64) -> RgbtStatus {
    guard(|| {
        let v = rmse_counts(slice(pred, len, "pred")?, slice(gt, len, "gt")?)?;
        *out.as_mut().ok_or_else(|| null("out"))? = v;
        Ok(())
    })
}

/// Writes a synthetic dataset (`train/val/test` splits plus manifests) of
/// `image_size` square scenes with 10 to 30 people.
///
/// # Safety
/// `out_dir` is a NUL-terminated UTF-8 path.
#[no_mangle]
pub unsafe extern "C" fn rgbt_generate_dataset(
    out_dir: *const c_char,
    seed: u64,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    image_size: usize,
) -> RgbtStatus {
    guard(|| {
        let dir = path_arg(out_dir, "out_dir")?;
        let scene = SceneConfig {
            height: image_size,
            width: image_size,
            ..Default::default()
        };
        generate_dataset(&dir, seed, &[("train", n_train), ("val", n_val), ("test", n_test)], &scene)?;
        Ok(())
    })
}
