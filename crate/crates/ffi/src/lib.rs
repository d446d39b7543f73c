//! C ABI over the `metadmoe` crate.
//!
//! Every object crosses the boundary as an opaque pointer created by a
//! `mdm_*_new`/`mdm_*_load`-style function and released by the matching
//! `mdm_*_free`. Functions return an [`MdmStatus`]; on failure the message is
//! available from [`mdm_last_error`] on the same thread. Strings returned to
//! the caller are owned by the caller and must be released with
//! [`mdm_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use metadmoe::adapt::{test_time_adapt, ModelState};
use metadmoe::autodiff::Mat;
use metadmoe::runner::{generate_data, load_model, run_pipeline_on, save_model, ExperimentConfig};
use metadmoe::synthdata::{read_registry, write_registry, DomainRegistry};
use metadmoe::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MdmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidConfig = 3,
    InvalidArgument = 4,
    Shape = 5,
    InsufficientSamples = 6,
    UnknownDomain = 7,
    NonFinite = 8,
    AuditViolation = 9,
    Empty = 10,
    Undefined = 11,
    Io = 12,
    Format = 13,
    BufferTooSmall = 14,
    Panic = 15,
}

impl From<&Error> for MdmStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidConfig(_) => MdmStatus::InvalidConfig,
            Error::Shape { .. } => MdmStatus::Shape,
            Error::InvalidArgument(_) => MdmStatus::InvalidArgument,
            Error::InsufficientSamples { .. } => MdmStatus::InsufficientSamples,
            Error::UnknownDomain(_) => MdmStatus::UnknownDomain,
            Error::NonFinite { .. } => MdmStatus::NonFinite,
            Error::AuditViolation(_) => MdmStatus::AuditViolation,
            Error::Empty(_) => MdmStatus::Empty,
            Error::Undefined(_) => MdmStatus::Undefined,
            Error::Io { .. } => MdmStatus::Io,
            Error::Format { .. } => MdmStatus::Format,
        }
    }
}

/// Experiment configuration.
pub struct MdmConfig {
    inner: ExperimentConfig,
}

/// Generated or loaded benchmark.
pub struct MdmRegistry {
    inner: DomainRegistry,
}

/// Trained model together with the configuration that built it.
pub struct MdmModel {
    cfg: ExperimentConfig,
    state: ModelState,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).unwrap_or_default());
}

struct Fail(MdmStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail((&e).into(), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MdmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MdmStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            MdmStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(MdmStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(MdmStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = CString::new(s.replace('\0', " "))
        .unwrap_or_default()
        .into_raw();
    Ok(())
}

unsafe fn matrix(p: *const f64, rows: usize, cols: usize, what: &str) -> Result<Mat, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let data = std::slice::from_raw_parts(p, rows * cols).to_vec();
    Mat::from_shape_vec((rows, cols), data).map_err(|e| Fail(MdmStatus::Shape, e.to_string()))
}

/// Message of the last failed call on this thread (empty after a success).
/// The pointer stays valid until the next call into this library on the same
/// thread.
#[no_mangle]
pub extern "C" fn mdm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mdm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed before.
#[no_mangle]
pub unsafe extern "C" fn mdm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Default configuration.
///
/// # Safety
/// `out` must be a valid pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn mdm_config_default(out: *mut *mut MdmConfig) -> MdmStatus {
    guard(|| {
        put(
            out,
            MdmConfig {
                inner: ExperimentConfig::default(),
            },
        )
    })
}

/// Parses and validates a TOML configuration.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mdm_config_from_toml(
    toml: *const c_char,
    out: *mut *mut MdmConfig,
) -> MdmStatus {
    guard(|| {
        let text = str_arg(toml, "toml")?;
        put(
            out,
            MdmConfig {
                inner: ExperimentConfig::from_toml_str(text)?,
            },
        )
    })
}

/// Sets the root seed.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mdm_config_set_seed(cfg: *mut MdmConfig, seed: u64) -> MdmStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| null("cfg"))?;
        cfg.inner.seed = seed;
        Ok(())
    })
}

/// Configuration serialised as TOML.
///
/// # Safety
/// `cfg` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mdm_config_to_toml(
    cfg: *const MdmConfig,
    out: *mut *mut c_char,
) -> MdmStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "cfg")?;
        put_string(out, cfg.inner.to_toml()?)
    })
}

/// SHA-256 of the canonical configuration, as lowercase hex.
///
/// # Safety
/// `cfg` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mdm_config_hash(
    cfg: *const MdmConfig,
    out: *mut *mut c_char,
) -> MdmStatus {
    guard(|| put_string(out, ref_arg(cfg, "cfg")?.inner.hash()))
}

/// # Safety
/// `cfg` must come from this library and not have been freed before.
#[no_mangle]
pub unsafe extern "C" fn mdm_config_free(cfg: *mut MdmConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Generates the synthetic benchmark described by `cfg`.
///
/// # Safety
/// `cfg` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mdm_registry_generate(
    cfg: *const MdmConfig,
    out: *mut *mut MdmRegistry,
) -> MdmStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "cfg")?;
        put(
            out,
            MdmRegistry {
                inner: generate_data(&cfg.inner)?,
            },
        )
    })
}

/// Loads a benchmark directory.
///
/// # Safety
/// `dir` must be a NUL-terminated path; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mdm_registry_load(
    dir: *const c_char,
    out: *mut *mut MdmRegistry,
) -> MdmStatus {
    guard(|| {
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        put(
            out,
            MdmRegistry {
                inner: read_registry(&dir)?,
            },
        )
    })
}

/// Writes a benchmark directory.
///
/// # Safety
/// `reg` must be a live handle; `dir` a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn mdm_registry_save(
    reg: *const MdmRegistry,
    dir: *const c_char,
) -> MdmStatus {
    guard(|| {
        let reg = ref_arg(reg, "reg")?;
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        Ok(write_registry(&reg.inner, &dir)?)
    })
}

/// Number of domains (all splits).
///
/// # Safety
/// `reg` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn mdm_registry_num_domains(reg: *const MdmRegistry) -> usize {
    reg.as_ref().map_or(0, |r| r.inner.domains.len())
}

/// Input dimension.
///
/// # Safety
/// `reg` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn mdm_registry_input_dim(reg: *const MdmRegistry) -> usize {
    reg.as_ref().map_or(0, |r| r.inner.input_dim)
}

/// # Safety
/// `reg` must come from this library and not have been freed before.
#[no_mangle]
pub unsafe extern "C" fn mdm_registry_free(reg: *mut MdmRegistry) {
    if !reg.is_null() {
        drop(Box::from_raw(reg));
    }
}

/// Full pipeline on `reg`: experts, warm start, meta-training and
/// evaluation. Writes the trained model handle to `model_out` and the run
/// record as JSON to `record_json_out`; either output may be null to skip it.
///
/// # Safety
/// `cfg` and `reg` must be live handles; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn mdm_run_pipeline(
    cfg: *const MdmConfig,
    reg: *const MdmRegistry,
    model_out: *mut *mut MdmModel,
    record_json_out: *mut *mut c_char,
) -> MdmStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "cfg")?;
        let reg = ref_arg(reg, "reg")?;
        let out = run_pipeline_on(&cfg.inner, &reg.inner)?;
        if !record_json_out.is_null() {
            put_string(record_json_out, out.record.to_json()?)?;
        }
        if !model_out.is_null() {
            put(
                model_out,
                MdmModel {
                    cfg: cfg.inner.clone(),
                    state: out.model,
                },
            )?;
        }
        Ok(())
    })
}

/// Saves a model checkpoint directory.
///
/// # Safety
/// `model` must be a live handle; `dir` a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn mdm_model_save(model: *const MdmModel, dir: *const c_char) -> MdmStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        save_model(&dir, &m.cfg, &m.state, 0)?;
        Ok(())
    })
}

/// Loads a model checkpoint directory.
///
/// # Safety
/// `dir` must be a NUL-terminated path; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mdm_model_load(dir: *const c_char, out: *mut *mut MdmModel) -> MdmStatus {
    guard(|| {
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        let (cfg, state) = load_model(&dir)?;
        put(out, MdmModel { cfg, state })
    })
}

/// Number of model outputs (classes, or 1 for regression).
///
/// # Safety
/// `model` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn mdm_model_num_outputs(model: *const MdmModel) -> usize {
    model.as_ref().map_or(0, |m| m.state.student.num_outputs())
}

/// Adapts the student once on the unlabeled `support` rows
/// (`n_support × input_dim`, row-major) and writes predictions for the `x`
/// rows (`n × input_dim`) to `out` (`n × num_outputs`, row-major).
/// `out_len` is the capacity of `out` in doubles. With `adapt == 0` the
/// unadapted student predicts and `support` may be null.
///
/// # Safety
/// Array pointers must reference at least the stated number of doubles.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn mdm_model_adapt_predict(
    model: *const MdmModel,
    support: *const f64,
    n_support: usize,
    x: *const f64,
    n: usize,
    input_dim: usize,
    adapt: i32,
    out: *mut f64,
    out_len: usize,
) -> MdmStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        if input_dim != m.state.student.input_dim {
            return Err(Fail(
                MdmStatus::Shape,
                format!(
                    "input_dim {input_dim} does not match model input_dim {}",
                    m.state.student.input_dim
                ),
            ));
        }
        let outputs = m.state.student.num_outputs();
        if out.is_null() {
            return Err(null("out"));
        }
        if out_len < n * outputs {
            return Err(Fail(
                MdmStatus::BufferTooSmall,
                format!(
                    "output needs {} doubles, capacity is {out_len}",
                    n * outputs
                ),
            ));
        }
        let x = matrix(x, n, input_dim, "x")?;
        let logits = if adapt != 0 {
            let s = matrix(support, n_support, input_dim, "support")?;
            let mut counter = 0;
            let a = test_time_adapt(&m.state, &s, &m.cfg.adapt, m.cfg.eval.strict, &mut counter)?;
            m.state.student.predict(&a.theta_e, &a.theta_c, &x)?
        } else {
            m.state
                .student
                .predict(&m.state.theta_e, &m.state.theta_c, &x)?
        };
        let dst = std::slice::from_raw_parts_mut(out, n * outputs);
        for (d, v) in dst.iter_mut().zip(logits.iter()) {
            *d = *v;
        }
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not have been freed before.
#[no_mangle]
pub unsafe extern "C" fn mdm_model_free(model: *mut MdmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
