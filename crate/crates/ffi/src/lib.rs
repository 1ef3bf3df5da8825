//! C ABI over `tsode-core`.
//!
//! Every function returns a [`TsodeStatus`]. On failure a message is kept per
//! thread and can be copied out with [`tsode_last_error`]. Handles are
//! opaque, created by `*_new`/`*_from_*` functions and released with the
//! matching `*_free`. Panics never cross the boundary; they surface as
//! `TSODE_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use tsode_core::bench::{self, BgSource, ExperimentConfig, ExperimentReport};
use tsode_core::forecaster::ForecastDist;
use tsode_core::looprt::{Controller, ControllerKind, Episode, LoopConfig, Mode, Outcome};
use tsode_core::safegate::{self, ConformalCalibration, SafetyConfig};
use tsode_core::vpatient::Cohort;
use tsode_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TsodeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    NotFound = 4,
    Config = 5,
    Numerical = 6,
    Io = 7,
    Parse = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TsodeController {
    MealBolus = 0,
    Pid = 1,
    Tsmpc = 2,
    Tsode = 3,
}

impl From<TsodeController> for ControllerKind {
    fn from(c: TsodeController) -> Self {
        match c {
            TsodeController::MealBolus => ControllerKind::MealBolus,
            TsodeController::Pid => ControllerKind::Pid,
            TsodeController::Tsmpc => ControllerKind::Tsmpc,
            TsodeController::Tsode => ControllerKind::Tsode,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TsodeMode {
    Warmup = 0,
    Eval = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TsodeOutcome {
    ColdStart = 0,
    Refractory = 1,
    Ungated = 2,
    Accept = 3,
    Scaled = 4,
    Reject = 5,
    Bypassed = 6,
    GuardrailBlocked = 7,
    GuardrailCapped = 8,
}

impl From<Outcome> for TsodeOutcome {
    fn from(o: Outcome) -> Self {
        match o {
            Outcome::ColdStart => TsodeOutcome::ColdStart,
            Outcome::Refractory => TsodeOutcome::Refractory,
            Outcome::Ungated => TsodeOutcome::Ungated,
            Outcome::Accept => TsodeOutcome::Accept,
            Outcome::Scaled => TsodeOutcome::Scaled,
            Outcome::Reject => TsodeOutcome::Reject,
            Outcome::Bypassed => TsodeOutcome::Bypassed,
            Outcome::GuardrailBlocked => TsodeOutcome::GuardrailBlocked,
            Outcome::GuardrailCapped => TsodeOutcome::GuardrailCapped,
        }
    }
}

/// Clinical metrics in percent of steps, plus mean glucose in mg/dL.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TsodeMetrics {
    pub tir: f64,
    pub below_70: f64,
    pub below_54: f64,
    pub above_180: f64,
    pub mean_bg: f64,
    pub steps: u64,
}

/// One control step of an episode trace.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TsodeStep {
    pub step: u64,
    pub day: u64,
    /// Minute of day.
    pub clock: f64,
    pub bg_true: f64,
    pub bg_observed: f64,
    pub iob: f64,
    pub cob: f64,
    pub meal_carbs: f64,
    pub proposed_dose: f64,
    pub final_dose: f64,
    pub delivered_dose: f64,
    pub decision: TsodeOutcome,
}

/// Mean over one controller's successful sweep cells.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TsodeSummary {
    pub cells: u64,
    pub failed: u64,
    pub tir: f64,
    pub below_70: f64,
    pub below_54: f64,
    pub above_180: f64,
    pub mean_bg: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TsodeSafetyCheck {
    pub passes: bool,
    pub w_lcb: f64,
    pub s_lcb: f64,
}

/// A closed-loop episode on one cohort patient.
pub struct TsodeEpisode {
    inner: Episode,
}

/// A validated experiment configuration.
pub struct TsodeConfig {
    inner: ExperimentConfig,
}

/// The result of a sweep.
pub struct TsodeReport {
    inner: ExperimentReport,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure {
    status: TsodeStatus,
    message: String,
}

impl Failure {
    fn new(status: TsodeStatus, message: impl Into<String>) -> Self {
        Failure {
            status,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config(_) | Error::Shape(_) | Error::Usage(_) | Error::TooFewCalibration { .. } => TsodeStatus::Config,
            Error::Numerical(_) | Error::Diverged { .. } | Error::EmptyTrace => TsodeStatus::Numerical,
            Error::Io { .. } => TsodeStatus::Io,
            Error::Csv(_) | Error::Json(_) | Error::TomlDe(_) | Error::TomlSer(_) => TsodeStatus::Parse,
        };
        Failure::new(status, e.to_string())
    }
}

fn set_last_error(message: Option<String>) {
    let c = message.map(|m| CString::new(m.replace('\0', " ")).expect("interior NUL removed"));
    LAST_ERROR.with(|slot| *slot.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TsodeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error(None);
            TsodeStatus::Ok
        }
        Ok(Err(fail)) => {
            set_last_error(Some(fail.message));
            fail.status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(Some(format!("panic: {msg}")));
            TsodeStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(TsodeStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(TsodeStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure::new(TsodeStatus::NullPointer, format!("{what} is null")))
}

unsafe fn mut_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure::new(TsodeStatus::NullPointer, format!("{what} is null")))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tsode_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copy the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len`). Returns the buffer size needed for the whole message,
/// or 0 when the last call succeeded.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn tsode_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|slot| match slot.borrow().as_ref() {
        None => 0,
        Some(msg) => {
            let bytes = msg.as_bytes_with_nul();
            if !buf.is_null() && len > 0 {
                let n = bytes.len().min(len);
                std::ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
                *buf.add(n - 1) = 0;
            }
            bytes.len()
        }
    })
}

/// Start an episode for a named patient of the standard cohort with the
/// default loop configuration.
///
/// # Safety
/// `patient` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tsode_episode_new(
    patient: *const c_char,
    controller: TsodeController,
    seed: u64,
    out: *mut *mut TsodeEpisode,
) -> TsodeStatus {
    guard(|| {
        let out = mut_arg(out, "out")?;
        let name = str_arg(patient, "patient")?;
        let cohort = Cohort::standard();
        let params = *cohort
            .get(name)
            .ok_or_else(|| Failure::new(TsodeStatus::NotFound, format!("unknown patient {name}")))?;
        let cfg = LoopConfig::default();
        let ctrl = Controller::fresh(controller.into(), &params, &cfg);
        let inner = Episode::new(name, params, cfg, ctrl, seed)?;
        *out = Box::into_raw(Box::new(TsodeEpisode { inner }));
        Ok(())
    })
}

/// Advance the episode by whole days. A fresh TSODE controller evaluates
/// behind the guardrails only, since it has no trained forecaster.
///
/// # Safety
/// `episode` must come from [`tsode_episode_new`].
#[no_mangle]
pub unsafe extern "C" fn tsode_episode_run(episode: *mut TsodeEpisode, days: u32, mode: TsodeMode) -> TsodeStatus {
    guard(|| {
        let ep = mut_arg(episode, "episode")?;
        let mode = match mode {
            TsodeMode::Warmup => Mode::Warmup,
            TsodeMode::Eval => Mode::Eval,
        };
        ep.inner.run(days as usize, mode)?;
        Ok(())
    })
}

/// # Safety
/// `episode` must come from [`tsode_episode_new`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tsode_episode_trace_len(episode: *const TsodeEpisode, out: *mut usize) -> TsodeStatus {
    guard(|| {
        *mut_arg(out, "out")? = ref_arg(episode, "episode")?.inner.trace().len();
        Ok(())
    })
}

/// # Safety
/// `episode` must come from [`tsode_episode_new`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tsode_episode_step(episode: *const TsodeEpisode, index: usize, out: *mut TsodeStep) -> TsodeStatus {
    guard(|| {
        let out = mut_arg(out, "out")?;
        let trace = ref_arg(episode, "episode")?.inner.trace();
        let r = trace.get(index).ok_or_else(|| {
            Failure::new(TsodeStatus::InvalidArgument, format!("step {index} out of range ({} recorded)", trace.len()))
        })?;
        *out = TsodeStep {
            step: r.step as u64,
            day: r.day as u64,
            clock: r.clock,
            bg_true: r.bg_true,
            bg_observed: r.bg_observed,
            iob: r.iob,
            cob: r.cob,
            meal_carbs: r.meal_carbs,
            proposed_dose: r.proposed_dose,
            final_dose: r.final_dose,
            delivered_dose: r.delivered_dose,
            decision: r.decision.into(),
        };
        Ok(())
    })
}

/// Metrics on true glucose over the steps recorded since the last
/// [`tsode_episode_clear_trace`].
///
/// # Safety
/// `episode` must come from [`tsode_episode_new`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tsode_episode_metrics(episode: *const TsodeEpisode, out: *mut TsodeMetrics) -> TsodeStatus {
    guard(|| {
        let out = mut_arg(out, "out")?;
        let m = bench::metrics(ref_arg(episode, "episode")?.inner.trace(), BgSource::True)?;
        *out = TsodeMetrics {
            tir: m.tir,
            below_70: m.below_70,
            below_54: m.below_54,
            above_180: m.above_180,
            mean_bg: m.mean_bg,
            steps: m.steps as u64,
        };
        Ok(())
    })
}

/// Drop the recorded trace; the patient and controller state carry on.
///
/// # Safety
/// `episode` must come from [`tsode_episode_new`].
#[no_mangle]
pub unsafe extern "C" fn tsode_episode_clear_trace(episode: *mut TsodeEpisode) -> TsodeStatus {
    guard(|| {
        mut_arg(episode, "episode")?.inner.take_trace();
        Ok(())
    })
}

/// # Safety
/// `episode` must be null or come from [`tsode_episode_new`], and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn tsode_episode_free(episode: *mut TsodeEpisode) {
    if !episode.is_null() {
        drop(Box::from_raw(episode));
    }
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tsode_config_default(out: *mut *mut TsodeConfig) -> TsodeStatus {
    guard(|| {
        *mut_arg(out, "out")? = Box::into_raw(Box::new(TsodeConfig {
            inner: ExperimentConfig::default(),
        }));
        Ok(())
    })
}

/// Parse and validate an experiment configuration written as TOML.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tsode_config_from_toml(text: *const c_char, out: *mut *mut TsodeConfig) -> TsodeStatus {
    guard(|| {
        let out = mut_arg(out, "out")?;
        let inner = ExperimentConfig::from_toml_str(str_arg(text, "text")?)?;
        *out = Box::into_raw(Box::new(TsodeConfig { inner }));
        Ok(())
    })
}

/// # Safety
/// `config` must be null or come from a `tsode_config_*` constructor, and
/// not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tsode_config_free(config: *mut TsodeConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Run the configured sweep. Report files are written when the config names
/// an output directory. Individual failed cells do not fail the call; see
/// `TsodeSummary::failed`.
///
/// # Safety
/// `config` must come from a `tsode_config_*` constructor; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn tsode_experiment_run(config: *const TsodeConfig, out: *mut *mut TsodeReport) -> TsodeStatus {
    guard(|| {
        let out = mut_arg(out, "out")?;
        let inner = bench::run_experiment(&ref_arg(config, "config")?.inner)?;
        *out = Box::into_raw(Box::new(TsodeReport { inner }));
        Ok(())
    })
}

/// Summary row of one controller; `TSODE_STATUS_NOT_FOUND` when the sweep
/// did not include it.
///
/// # Safety
/// `report` must come from [`tsode_experiment_run`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tsode_report_summary(
    report: *const TsodeReport,
    controller: TsodeController,
    out: *mut TsodeSummary,
) -> TsodeStatus {
    guard(|| {
        let out = mut_arg(out, "out")?;
        let kind = ControllerKind::from(controller);
        let row = ref_arg(report, "report")?
            .inner
            .summary
            .iter()
            .find(|r| r.controller == kind.as_str())
            .ok_or_else(|| Failure::new(TsodeStatus::NotFound, format!("no {kind} cells in the report")))?;
        *out = TsodeSummary {
            cells: row.cells as u64,
            failed: row.failed as u64,
            tir: row.tir,
            below_70: row.below_70,
            below_54: row.below_54,
            above_180: row.above_180,
            mean_bg: row.mean_bg,
        };
        Ok(())
    })
}

/// # Safety
/// `report` must be null or come from [`tsode_experiment_run`], and not be
/// used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tsode_report_free(report: *mut TsodeReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Test a forecast mean trajectory of `k` steps against the default safety
/// thresholds after shifting it down by `q_alpha`.
///
/// # Safety
/// `mu` must be valid for `k` reads; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tsode_check_safety(
    mu: *const f64,
    k: usize,
    bg_now: f64,
    q_alpha: f64,
    out: *mut TsodeSafetyCheck,
) -> TsodeStatus {
    guard(|| {
        let out = mut_arg(out, "out")?;
        if mu.is_null() {
            return Err(Failure::new(TsodeStatus::NullPointer, "mu is null"));
        }
        if k == 0 || !(q_alpha >= 0.0) || !bg_now.is_finite() {
            return Err(Failure::new(TsodeStatus::InvalidArgument, "need k > 0, q_alpha >= 0 and a finite bg_now"));
        }
        let mu = std::slice::from_raw_parts(mu, k).to_vec();
        if mu.iter().any(|m| !m.is_finite()) {
            return Err(Failure::new(TsodeStatus::InvalidArgument, "mu has non-finite entries"));
        }
        let dist = ForecastDist {
            var: vec![0.0; k],
            mu,
            dose: 0.0,
        };
        let cal = ConformalCalibration {
            q_alpha,
            ..ConformalCalibration::exact()
        };
        let c = safegate::check_safety(&dist, bg_now, &cal, &SafetyConfig::default());
        *out = TsodeSafetyCheck {
            passes: c.passes,
            w_lcb: c.w_lcb,
            s_lcb: c.s_lcb,
        };
        Ok(())
    })
}
