//! C ABI over `ocutime`: opaque model and config handles, status codes and
//! a per-thread last-error message.
//!
//! Every function returns an [`OcutimeStatus`]; outputs go through pointer
//! arguments. Panics are caught at the boundary and reported as
//! `OCUTIME_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use ocutime::autodiff::checkpoint::Checkpoint;
use ocutime::metrics::{dtw, normalized_xcorr, pearson_r};
use ocutime::model::{self, ModelConfig, ModelState, Variant};
use ocutime::pipeline::{run_stage, PipelineConfig, Stage};
use ocutime::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OcutimeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Shape = 4,
    Numeric = 5,
    InsufficientData = 6,
    UndefinedCorrelation = 7,
    StageOrder = 8,
    StaleInput = 9,
    Io = 10,
    Parse = 11,
    BufferTooSmall = 12,
    Panic = 13,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OcutimeVariant {
    M0 = 0,
    M1 = 1,
    M2 = 2,
}

/// Opaque trained or freshly initialized model.
pub struct OcutimeModel {
    state: ModelState,
}

/// Opaque pipeline configuration.
pub struct OcutimeConfig {
    config: PipelineConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("NUL bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> OcutimeStatus {
    match e {
        Error::Config(_) | Error::InfeasibleBand { .. } | Error::DegenerateMontage(_) => OcutimeStatus::Config,
        Error::Shape(_) | Error::Range(_) | Error::Alignment(_) | Error::Ordering(_) => OcutimeStatus::Shape,
        Error::Numeric { .. } => OcutimeStatus::Numeric,
        Error::EmptyInput(_) | Error::InsufficientData(_) | Error::TooShort { .. } => OcutimeStatus::InsufficientData,
        Error::UndefinedCorrelation => OcutimeStatus::UndefinedCorrelation,
        Error::StageOrder { .. } => OcutimeStatus::StageOrder,
        Error::StaleInput { .. } => OcutimeStatus::StaleInput,
        Error::Io { .. } => OcutimeStatus::Io,
        Error::Parse { .. } => OcutimeStatus::Parse,
    }
}

struct Fail(OcutimeStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> OcutimeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => OcutimeStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(&format!("panic: {msg}"));
            OcutimeStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(OcutimeStatus::NullPointer, format!("{what} is null"))
}

unsafe fn slice<'a>(p: *const f64, n: usize, what: &str) -> Result<&'a [f64], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn out_slice<'a>(p: *mut f64, n: usize, needed: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if n < needed {
        return Err(Fail(OcutimeStatus::BufferTooSmall, format!("{what} holds {n} values, {needed} needed")));
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, needed))
}

unsafe fn write<T>(p: *mut T, v: T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    p.write(v);
    Ok(())
}

unsafe fn string<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(OcutimeStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ocutime_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread ("" if none). The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ocutime_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Builds a model with the default architecture for `channels × window`
/// windows, initialized from `seed`.
///
/// # Safety
/// `out` must be a valid pointer; the handle must be released with
/// [`ocutime_model_free`].
#[no_mangle]
pub unsafe extern "C" fn ocutime_model_new(
    variant: OcutimeVariant,
    channels: usize,
    window: usize,
    seed: u64,
    out: *mut *mut OcutimeModel,
) -> OcutimeStatus {
    guard(|| {
        let variant = match variant {
            OcutimeVariant::M0 => Variant::M0,
            OcutimeVariant::M1 => Variant::M1,
            OcutimeVariant::M2 => Variant::M2,
        };
        let cfg = ModelConfig {
            variant,
            channels,
            window,
            output_len: window,
            seed,
            ..ModelConfig::default()
        };
        let state = ModelState::init(&cfg)?;
        write(out, Box::into_raw(Box::new(OcutimeModel { state })), "out")
    })
}

/// Loads a checkpoint written by the train or ablate stage.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ocutime_model_load(path: *const c_char, out: *mut *mut OcutimeModel) -> OcutimeStatus {
    guard(|| {
        let path = string(path, "path")?;
        let ck = Checkpoint::load(Path::new(path))?;
        let state = ModelState::from_checkpoint(&ck)?;
        write(out, Box::into_raw(Box::new(OcutimeModel { state })), "out")
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `model` a live handle.
#[no_mangle]
pub unsafe extern "C" fn ocutime_model_save(model: *const OcutimeModel, path: *const c_char) -> OcutimeStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let path = string(path, "path")?;
        m.state.to_checkpoint().save(Path::new(path))?;
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn ocutime_model_free(model: *mut OcutimeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input channels, window length, output length and parameter count.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ocutime_model_dims(
    model: *const OcutimeModel,
    channels: *mut usize,
    window: *mut usize,
    output_len: *mut usize,
    parameters: *mut usize,
) -> OcutimeStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let c = &m.state.config;
        write(channels, c.channels, "channels")?;
        write(window, c.window, "window")?;
        write(output_len, c.output_len, "output_len")?;
        write(parameters, m.state.parameter_count(), "parameters")
    })
}

/// Predicted trajectory for one channel-major window `eeg[channels × window]`.
///
/// # Safety
/// `eeg` must hold `eeg_len` values and `out` `out_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn ocutime_model_predict(
    model: *const OcutimeModel,
    eeg: *const f64,
    eeg_len: usize,
    out: *mut f64,
    out_len: usize,
) -> OcutimeStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let x = slice(eeg, eeg_len, "eeg")?;
        let y = model::forward(&m.state, x)?;
        out_slice(out, out_len, y.len(), "out")?.copy_from_slice(&y);
        Ok(())
    })
}

/// Spatial-filter feature (one value per input sample) for one window.
///
/// # Safety
/// As [`ocutime_model_predict`]; `out` needs `window` values.
#[no_mangle]
pub unsafe extern "C" fn ocutime_model_feature(
    model: *const OcutimeModel,
    eeg: *const f64,
    eeg_len: usize,
    out: *mut f64,
    out_len: usize,
) -> OcutimeStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let x = slice(eeg, eeg_len, "eeg")?;
        let y = model::extract_feature(&m.state, x)?;
        out_slice(out, out_len, y.len(), "out")?.copy_from_slice(&y);
        Ok(())
    })
}

/// Pearson correlation of two equal-length sequences.
///
/// # Safety
/// `a` and `b` must hold `n` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ocutime_pearson_r(a: *const f64, b: *const f64, n: usize, out: *mut f64) -> OcutimeStatus {
    guard(|| {
        let r = pearson_r(slice(a, n, "a")?, slice(b, n, "b")?)?;
        write(out, r, "out")
    })
}

/// Banded DTW distance with absolute-difference cost.
///
/// # Safety
/// `a` holds `n` values, `b` holds `m`; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ocutime_dtw_distance(
    a: *const f64,
    n: usize,
    b: *const f64,
    m: usize,
    radius: usize,
    out: *mut f64,
) -> OcutimeStatus {
    guard(|| {
        let d = dtw(slice(a, n, "a")?, slice(b, m, "b")?, radius)?;
        write(out, d.distance, "out")
    })
}

/// Lag (ms) and value of the normalized cross-correlation peak of `a`
/// against `b`; positive lag means `a` trails `b`.
///
/// # Safety
/// `a` and `b` must hold `n` values; outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn ocutime_xcorr_peak(
    a: *const f64,
    b: *const f64,
    n: usize,
    max_lag: usize,
    fs: f64,
    lag_ms: *mut f64,
    peak: *mut f64,
) -> OcutimeStatus {
    guard(|| {
        let c = normalized_xcorr(slice(a, n, "a")?, slice(b, n, "b")?, max_lag, fs)?;
        write(lag_ms, c.umax_lag_ms, "lag_ms")?;
        write(peak, c.peak_value, "peak")
    })
}

/// Parses a TOML pipeline configuration. `base_dir` (nullable) anchors
/// relative paths.
///
/// # Safety
/// `toml` (and `base_dir` when non-null) must be NUL-terminated; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn ocutime_config_from_toml(
    toml: *const c_char,
    base_dir: *const c_char,
    out: *mut *mut OcutimeConfig,
) -> OcutimeStatus {
    guard(|| {
        let mut config = PipelineConfig::from_toml(string(toml, "toml")?)?;
        if !base_dir.is_null() {
            let base = Path::new(string(base_dir, "base_dir")?);
            if config.paths.output_dir.is_relative() {
                config.paths.output_dir = base.join(&config.paths.output_dir);
            }
            if let Some(p) = config.paths.input_dir.as_mut().filter(|p| p.is_relative()) {
                *p = base.join(&*p);
            }
        }
        config.validate()?;
        write(out, Box::into_raw(Box::new(OcutimeConfig { config })), "out")
    })
}

/// # Safety
/// `config` must come from this library and not be used afterwards. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn ocutime_config_free(config: *mut OcutimeConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ocutime_config_set_seed(config: *mut OcutimeConfig, seed: u64) -> OcutimeStatus {
    guard(|| {
        let c = config.as_mut().ok_or_else(|| null("config"))?;
        c.config.seed = seed;
        Ok(())
    })
}

/// Runs one named stage (`simulate`, `preprocess`, ... `report`). `empty`
/// (nullable) receives 1 when the stage produced no usable results.
///
/// # Safety
/// `config` must be a live handle and `stage` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ocutime_run_stage(config: *const OcutimeConfig, stage: *const c_char, empty: *mut i32) -> OcutimeStatus {
    guard(|| {
        let c = config.as_ref().ok_or_else(|| null("config"))?;
        let stage: Stage = string(stage, "stage")?.parse()?;
        let outcome = run_stage(&c.config, stage)?;
        if !empty.is_null() {
            empty.write(outcome.empty as i32);
        }
        Ok(())
    })
}
