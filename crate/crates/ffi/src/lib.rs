//! C interface to the sparseful simulator.
//!
//! Every object crosses the boundary as an opaque pointer created by a
//! `spf_*_new`/`parse`/`load` function and released by the matching
//! `spf_*_free`. Functions return an [`SpfStatus`]; on failure the message
//! is kept per thread and can be read with [`spf_last_error_message`].
//!
//! Handles are not synchronised. Use one from one thread at a time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use sparseful::compression::{codec, nonzero_macs_compressed, serialized_size, CompressedModel};
use sparseful::harness::{self, Experiment, ExperimentConfig, MetricsRecord};
use sparseful::protocol::Arm;
use sparseful::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Config = 4,
    Io = 5,
    Codec = 6,
    Runtime = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpfArm {
    Sparsefuel = 0,
    GlobalFedavg = 1,
    Isolated = 2,
}

impl From<SpfArm> for Arm {
    fn from(a: SpfArm) -> Self {
        match a {
            SpfArm::Sparsefuel => Arm::SelfFederated,
            SpfArm::GlobalFedavg => Arm::GlobalFedAvg,
            SpfArm::Isolated => Arm::Isolated,
        }
    }
}

/// Scalar columns of one round's metrics.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SpfRoundMetrics {
    pub round: u64,
    pub federation_count: u64,
    pub objective: f64,
    pub bytes_round: u64,
    pub bytes_total: u64,
    pub macs: u64,
}

impl From<&MetricsRecord> for SpfRoundMetrics {
    fn from(r: &MetricsRecord) -> Self {
        Self {
            round: r.round,
            federation_count: r.federation_count as u64,
            objective: r.objective,
            bytes_round: r.bytes_round,
            bytes_total: r.bytes_total,
            macs: r.macs,
        }
    }
}

/// A parsed experiment configuration.
pub struct SpfConfig {
    inner: ExperimentConfig,
}

/// A running experiment and the metrics recorded so far.
pub struct SpfExperiment {
    inner: Experiment,
    records: Vec<MetricsRecord>,
    regions: usize,
}

/// A decoded model.
pub struct SpfModel {
    inner: CompressedModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_error(msg: &str) {
    LAST_ERROR.with(|e| {
        let mut e = e.borrow_mut();
        e.clear();
        e.extend(msg.bytes().filter(|&b| b != 0));
    });
}

fn fail(status: SpfStatus, msg: impl AsRef<str>) -> SpfStatus {
    set_error(msg.as_ref());
    status
}

fn from_error(e: Error) -> SpfStatus {
    let status = match &e {
        Error::Config { .. } => SpfStatus::Config,
        Error::Io { .. } | Error::Idx { .. } => SpfStatus::Io,
        Error::Codec(_) => SpfStatus::Codec,
        Error::InvalidArgument(_) => SpfStatus::InvalidArgument,
        _ => SpfStatus::Runtime,
    };
    fail(status, e.to_string())
}

/// Run `f`, turning a panic into [`SpfStatus::Panic`].
fn guard(f: impl FnOnce() -> SpfStatus) -> SpfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(SpfStatus::Panic, format!("internal panic: {msg}"))
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, SpfStatus> {
    if p.is_null() {
        return Err(fail(SpfStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(SpfStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

macro_rules! try_status {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

macro_rules! non_null {
    ($p:expr, $what:expr) => {
        if $p.is_null() {
            return fail(SpfStatus::NullPointer, concat!($what, " is null"));
        }
    };
}

/// Length in bytes of the calling thread's last error message, without a
/// terminator. Zero when nothing has failed yet.
#[no_mangle]
pub extern "C" fn spf_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().len())
}

/// Copy the last error message into `buf` as a NUL-terminated string,
/// truncating to `len - 1` bytes. Returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn spf_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = e.len().min(len - 1);
            ptr::copy_nonoverlapping(e.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        e.len()
    })
}

/// Parse configuration text.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn spf_config_parse(text: *const c_char, out: *mut *mut SpfConfig) -> SpfStatus {
    guard(|| {
        non_null!(out, "out");
        let text = try_status!(str_arg(text, "text"));
        match harness::parse_config(text) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(SpfConfig { inner }));
                SpfStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Read and parse a configuration file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn spf_config_load(path: *const c_char, out: *mut *mut SpfConfig) -> SpfStatus {
    guard(|| {
        non_null!(out, "out");
        let path = try_status!(str_arg(path, "path"));
        match harness::load_config(&PathBuf::from(path)) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(SpfConfig { inner }));
                SpfStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Replace the configuration's seed.
///
/// # Safety
/// `cfg` must come from this library and not be freed.
#[no_mangle]
pub unsafe extern "C" fn spf_config_set_seed(cfg: *mut SpfConfig, seed: u64) -> SpfStatus {
    non_null!(cfg, "cfg");
    (*cfg).inner.environment.seed = seed;
    SpfStatus::Ok
}

/// Number of subregions, which is also the number of per-region columns.
///
/// # Safety
/// `cfg` must come from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn spf_config_subregion_count(cfg: *const SpfConfig, out: *mut usize) -> SpfStatus {
    non_null!(cfg, "cfg");
    non_null!(out, "out");
    *out = (*cfg).inner.subregion_count();
    SpfStatus::Ok
}

/// # Safety
/// `cfg` must be null or come from this library, and is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn spf_config_free(cfg: *mut SpfConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Run the threshold calibration for `cfg` and store the recommended value.
///
/// # Safety
/// `cfg` must come from this library; `tau` must be valid.
#[no_mangle]
pub unsafe extern "C" fn spf_calibrate_tau(cfg: *const SpfConfig, tau: *mut f64) -> SpfStatus {
    guard(|| {
        non_null!(cfg, "cfg");
        non_null!(tau, "tau");
        match harness::calibrate(&(*cfg).inner) {
            Ok(c) => {
                *tau = c.tau;
                SpfStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Set up an experiment. The configuration is copied; `cfg` may be freed
/// afterwards.
///
/// # Safety
/// `cfg` must come from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn spf_experiment_new(
    cfg: *const SpfConfig,
    arm: SpfArm,
    out: *mut *mut SpfExperiment,
) -> SpfStatus {
    guard(|| {
        non_null!(cfg, "cfg");
        non_null!(out, "out");
        let cfg = &(*cfg).inner;
        match Experiment::new(cfg, arm.into()) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(SpfExperiment {
                    inner,
                    records: Vec::new(),
                    regions: cfg.subregion_count(),
                }));
                SpfStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Run one round. `metrics` may be null.
///
/// # Safety
/// `exp` must come from this library; `metrics` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn spf_experiment_step(exp: *mut SpfExperiment, metrics: *mut SpfRoundMetrics) -> SpfStatus {
    guard(|| {
        non_null!(exp, "exp");
        let exp = &mut *exp;
        match exp.inner.step() {
            Ok(r) => {
                if !metrics.is_null() {
                    *metrics = SpfRoundMetrics::from(&r);
                }
                exp.records.push(r);
                SpfStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Run the remaining configured rounds.
///
/// # Safety
/// `exp` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn spf_experiment_run(exp: *mut SpfExperiment) -> SpfStatus {
    guard(|| {
        non_null!(exp, "exp");
        let exp = &mut *exp;
        match exp.inner.run_to_end() {
            Ok(rs) => {
                exp.records.extend(rs);
                SpfStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Rounds completed so far.
///
/// # Safety
/// `exp` must come from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn spf_experiment_round(exp: *const SpfExperiment, out: *mut u64) -> SpfStatus {
    non_null!(exp, "exp");
    non_null!(out, "out");
    *out = (*exp).inner.round();
    SpfStatus::Ok
}

/// Per-subregion test accuracy after the latest round, written to
/// `out[0..len]`. `len` must equal the subregion count.
///
/// # Safety
/// `exp` must come from this library; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn spf_experiment_region_accuracy(
    exp: *const SpfExperiment,
    out: *mut f64,
    len: usize,
) -> SpfStatus {
    non_null!(exp, "exp");
    non_null!(out, "out");
    let exp = &*exp;
    let Some(last) = exp.records.last() else {
        return fail(SpfStatus::InvalidArgument, "no round has run yet");
    };
    if len != exp.regions {
        return fail(
            SpfStatus::BufferTooSmall,
            format!("need room for {} values, got {len}", exp.regions),
        );
    }
    ptr::copy_nonoverlapping(last.region_accuracy.as_ptr(), out, len);
    SpfStatus::Ok
}

/// Write the metrics recorded so far as CSV.
///
/// # Safety
/// `exp` must come from this library; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn spf_experiment_write_csv(exp: *const SpfExperiment, path: *const c_char) -> SpfStatus {
    guard(|| {
        non_null!(exp, "exp");
        let path = try_status!(str_arg(path, "path"));
        let exp = &*exp;
        match harness::write_metrics_csv(&exp.records, exp.regions, &PathBuf::from(path)) {
            Ok(()) => SpfStatus::Ok,
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `exp` must be null or come from this library, and is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn spf_experiment_free(exp: *mut SpfExperiment) {
    if !exp.is_null() {
        drop(Box::from_raw(exp));
    }
}

/// Decode a serialized model.
///
/// # Safety
/// `bytes` must point to `len` readable bytes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn spf_model_decode(bytes: *const u8, len: usize, out: *mut *mut SpfModel) -> SpfStatus {
    guard(|| {
        non_null!(bytes, "bytes");
        non_null!(out, "out");
        let data = std::slice::from_raw_parts(bytes, len);
        match codec::decode(data) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(SpfModel { inner }));
                SpfStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Read a model checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn spf_model_load(path: *const c_char, out: *mut *mut SpfModel) -> SpfStatus {
    guard(|| {
        non_null!(out, "out");
        let path = try_status!(str_arg(path, "path"));
        match codec::load(&PathBuf::from(path)) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(SpfModel { inner }));
                SpfStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Encoded size in bytes.
///
/// # Safety
/// `model` must come from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn spf_model_serialized_size(model: *const SpfModel, out: *mut u64) -> SpfStatus {
    non_null!(model, "model");
    non_null!(out, "out");
    *out = serialized_size(&(*model).inner);
    SpfStatus::Ok
}

/// Nonzero weights, i.e. multiply-accumulates per inference.
///
/// # Safety
/// `model` must come from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn spf_model_nonzero_macs(model: *const SpfModel, out: *mut u64) -> SpfStatus {
    non_null!(model, "model");
    non_null!(out, "out");
    *out = nonzero_macs_compressed(&(*model).inner);
    SpfStatus::Ok
}

/// Encode `model` into `buf`. `written` receives the encoded length even
/// when `cap` is too small, so a first call with `cap = 0` sizes the buffer.
///
/// # Safety
/// `model` must come from this library; `buf` must be null or hold `cap`
/// bytes; `written` must be valid.
#[no_mangle]
pub unsafe extern "C" fn spf_model_encode(
    model: *const SpfModel,
    buf: *mut u8,
    cap: usize,
    written: *mut usize,
) -> SpfStatus {
    guard(|| {
        non_null!(model, "model");
        non_null!(written, "written");
        let bytes = codec::encode(&(*model).inner);
        *written = bytes.len();
        if bytes.len() > cap || buf.is_null() {
            return fail(
                SpfStatus::BufferTooSmall,
                format!("encoding needs {} bytes, buffer holds {cap}", bytes.len()),
            );
        }
        ptr::copy_nonoverlapping(bytes.as_ptr(), buf, bytes.len());
        SpfStatus::Ok
    })
}

/// # Safety
/// `model` must be null or come from this library, and is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn spf_model_free(model: *mut SpfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
