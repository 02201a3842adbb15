//! C ABI over the experiment runner and instance fields.
//!
//! Every fallible call returns an [`InstmapStatus`]; on failure the message
//! is available from [`instmap_last_error_message`] on the same thread.
//! Handles are created and destroyed only through this API.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use instmap::field::InstanceField;
use instmap::geometry::Vec3;
use instmap::pipeline::{self, ExperimentConfig, RunOutcome};
use instmap::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstmapStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Io = 4,
    Protocol = 5,
    Pipeline = 6,
    Panic = 7,
}

/// Parsed experiment configuration.
pub struct InstmapConfig(ExperimentConfig);

/// Result of one pipeline run.
pub struct InstmapRun {
    outcome: RunOutcome,
    metrics_json: CString,
}

/// A decoded instance field.
pub struct InstmapField(InstanceField);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> InstmapStatus {
    match e {
        Error::Config(_) | Error::Toml(_) | Error::Scene(_) => InstmapStatus::Config,
        Error::Io(_) => InstmapStatus::Io,
        Error::Protocol(_) | Error::Json(_) => InstmapStatus::Protocol,
        _ => InstmapStatus::Pipeline,
    }
}

enum Failure {
    Status(InstmapStatus, String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> InstmapStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            InstmapStatus::Ok
        }
        Ok(Err(Failure::Status(s, msg))) => {
            set_error(&msg);
            s
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            InstmapStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure::Status(InstmapStatus::NullArgument, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure::Status(InstmapStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn mut_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn instmap_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn instmap_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads an experiment file, resolving its scene path.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn instmap_config_from_path(path: *const c_char, out: *mut *mut InstmapConfig) -> InstmapStatus {
    guard(|| {
        let out = mut_arg(out, "out")?;
        let cfg = ExperimentConfig::from_path(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(InstmapConfig(cfg)));
        Ok(())
    })
}

/// Parses an experiment from TOML text; the scene must be inline.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn instmap_config_from_toml(toml: *const c_char, out: *mut *mut InstmapConfig) -> InstmapStatus {
    guard(|| {
        let out = mut_arg(out, "out")?;
        let cfg = ExperimentConfig::from_toml_str(str_arg(toml, "toml")?)?;
        *out = Box::into_raw(Box::new(InstmapConfig(cfg)));
        Ok(())
    })
}

/// Overrides the round count.
///
/// # Safety
/// `cfg` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn instmap_config_set_rounds(cfg: *mut InstmapConfig, rounds: u32) -> InstmapStatus {
    guard(|| {
        mut_arg(cfg, "cfg")?.0.rounds = rounds;
        Ok(())
    })
}

/// Overrides the agent count.
///
/// # Safety
/// `cfg` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn instmap_config_set_agents(cfg: *mut InstmapConfig, agents: u32) -> InstmapStatus {
    guard(|| {
        mut_arg(cfg, "cfg")?.0.agents = agents as usize;
        Ok(())
    })
}

/// Validates the configuration.
///
/// # Safety
/// `cfg` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn instmap_config_validate(cfg: *const InstmapConfig) -> InstmapStatus {
    guard(|| {
        ref_arg(cfg, "cfg")?.0.validate()?;
        Ok(())
    })
}

/// # Safety
/// `cfg` must come from this library or be null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn instmap_config_free(cfg: *mut InstmapConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Runs the full pipeline for one seed.
///
/// # Safety
/// `cfg` must come from this library and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn instmap_run(cfg: *const InstmapConfig, seed: u64, out: *mut *mut InstmapRun) -> InstmapStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "cfg")?;
        let out = mut_arg(out, "out")?;
        let outcome = pipeline::run(&cfg.0, seed)?;
        let metrics_json = CString::new(outcome.report.to_json()).map_err(|e| Failure::Status(InstmapStatus::Pipeline, e.to_string()))?;
        *out = Box::into_raw(Box::new(InstmapRun { outcome, metrics_json }));
        Ok(())
    })
}

/// Metrics report as JSON, owned by the run handle.
///
/// # Safety
/// `run` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn instmap_run_metrics_json(run: *const InstmapRun) -> *const c_char {
    match run.as_ref() {
        Some(r) => r.metrics_json.as_ptr(),
        None => std::ptr::null(),
    }
}

/// Mean completion ratio in percent and completion in centimetres.
///
/// # Safety
/// `run` must come from this library; the outputs must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn instmap_run_completion(run: *const InstmapRun, ratio_pct: *mut f64, completion_cm: *mut f64) -> InstmapStatus {
    guard(|| {
        let r = &ref_arg(run, "run")?.outcome.report;
        *mut_arg(ratio_pct, "ratio_pct")? = r.completion_ratio_pct;
        *mut_arg(completion_cm, "completion_cm")? = r.completion_cm;
        Ok(())
    })
}

/// Writes every run artifact into `dir`.
///
/// # Safety
/// `run` and `cfg` must come from this library; `dir` must be a
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn instmap_run_write(run: *const InstmapRun, cfg: *const InstmapConfig, dir: *const c_char) -> InstmapStatus {
    guard(|| {
        let run = ref_arg(run, "run")?;
        let cfg = ref_arg(cfg, "cfg")?;
        pipeline::write_outputs(&run.outcome, &cfg.0, Path::new(str_arg(dir, "dir")?))?;
        Ok(())
    })
}

/// Copies a field trained by `agent` for instance `global_id` out of a run.
///
/// # Safety
/// `run` must come from this library and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn instmap_run_field(run: *const InstmapRun, agent: u32, global_id: u32, out: *mut *mut InstmapField) -> InstmapStatus {
    guard(|| {
        let run = ref_arg(run, "run")?;
        let out = mut_arg(out, "out")?;
        let f = run
            .outcome
            .agents
            .iter()
            .find(|a| a.id() == agent)
            .and_then(|a| a.field(global_id))
            .ok_or_else(|| Failure::Status(InstmapStatus::Pipeline, format!("agent {agent} has no field {global_id}")))?;
        *out = Box::into_raw(Box::new(InstmapField(f.clone())));
        Ok(())
    })
}

/// # Safety
/// `run` must come from this library or be null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn instmap_run_free(run: *mut InstmapRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Decodes a field from its wire encoding.
///
/// # Safety
/// `bytes` must point to `len` readable bytes and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn instmap_field_decode(bytes: *const u8, len: usize, out: *mut *mut InstmapField) -> InstmapStatus {
    guard(|| {
        if bytes.is_null() {
            return Err(null("bytes"));
        }
        let out = mut_arg(out, "out")?;
        let f = InstanceField::from_bytes(std::slice::from_raw_parts(bytes, len))?;
        *out = Box::into_raw(Box::new(InstmapField(f)));
        Ok(())
    })
}

/// Wire size of a field in bytes.
///
/// # Safety
/// `field` must come from this library or be null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn instmap_field_encoded_len(field: *const InstmapField) -> usize {
    field.as_ref().map_or(0, |f| f.0.encoded_len())
}

/// Encodes a field into `buf`; fails when `cap` is too small.
///
/// # Safety
/// `field` must come from this library and `buf` point to `cap` writable
/// bytes.
#[no_mangle]
pub unsafe extern "C" fn instmap_field_encode(field: *const InstmapField, buf: *mut u8, cap: usize) -> InstmapStatus {
    guard(|| {
        let f = ref_arg(field, "field")?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let bytes = f.0.to_bytes();
        if bytes.len() > cap {
            return Err(Failure::Status(InstmapStatus::Protocol, format!("buffer holds {cap} bytes, need {}", bytes.len())));
        }
        std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf, bytes.len());
        Ok(())
    })
}

/// Evaluates occupancy and colour at `n` points given as `xyz` triples.
/// `sigma` receives `n` values and `rgb` receives `3n`.
///
/// # Safety
/// `field` must come from this library; `xyz`, `sigma` and `rgb` must hold
/// `3n`, `n` and `3n` doubles.
#[no_mangle]
pub unsafe extern "C" fn instmap_field_query(field: *const InstmapField, xyz: *const f64, n: usize, sigma: *mut f64, rgb: *mut f64) -> InstmapStatus {
    guard(|| {
        let f = ref_arg(field, "field")?;
        if xyz.is_null() || sigma.is_null() || rgb.is_null() {
            return Err(null("point or output buffer"));
        }
        let xyz = std::slice::from_raw_parts(xyz, 3 * n);
        let points: Vec<Vec3> = xyz.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
        let outs = f.0.eval(&points)?;
        let sigma = std::slice::from_raw_parts_mut(sigma, n);
        let rgb = std::slice::from_raw_parts_mut(rgb, 3 * n);
        for (i, o) in outs.iter().enumerate() {
            sigma[i] = o.sigma;
            rgb[3 * i..3 * i + 3].copy_from_slice(&o.color);
        }
        Ok(())
    })
}

/// # Safety
/// `field` must come from this library or be null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn instmap_field_free(field: *mut InstmapField) {
    if !field.is_null() {
        drop(Box::from_raw(field));
    }
}
