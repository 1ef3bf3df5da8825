//! Experiment harness: the warm-up / evaluation protocol over a cohort, PID
//! and TSMPC tuning, the transfer scenario, and report files.

mod metrics;
mod tuning;

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use metrics::{
    format_summary, metrics, read_metrics_csv, summarize, write_metrics_csv, write_summary_csv, BgSource, Metrics,
    MetricsRow, SummaryRow,
};
pub use tuning::{tune_pid, tune_tsmpc, TuningConfig, TuningResult};

use crate::error::{Error, Result};
use crate::forecaster::{self, FeatureStep, ForecasterModel, RecordSplit, TrainConfig, TrainRecord, HORIZON};
use crate::looprt::{self, Controller, ControllerKind, Episode, ForecastSource, LoopConfig, Mode, StepRecord};
use crate::safegate::{self, ConformalCalibration};
use crate::tspolicy::PolicyTable;
use crate::vpatient::{Cohort, PatientParams, COHORT_SEED, COHORT_SIZE, COHORT_SPREAD};

/// Where the patients come from: a cohort file, or a generated cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    pub file: Option<PathBuf>,
    pub size: usize,
    pub spread: f64,
    pub seed: u64,
    pub base: PatientParams,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            file: None,
            size: COHORT_SIZE,
            spread: COHORT_SPREAD,
            seed: COHORT_SEED,
            base: PatientParams::default(),
        }
    }
}

impl CohortConfig {
    pub fn resolve(&self) -> Result<Cohort> {
        match &self.file {
            Some(path) => Cohort::load(path),
            None => {
                let base = self.base.balanced();
                base.validate()?;
                if !(0.0..1.0).contains(&self.spread) {
                    return Err(Error::Config(format!("cohort spread {} must lie in [0, 1)", self.spread)));
                }
                Ok(Cohort::generate(&base, self.size, self.spread, self.seed))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecasterConfig {
    /// `seed` is replaced per cell by a value derived from the cell seed.
    pub train: TrainConfig,
    pub train_frac: f64,
    pub cal_frac: f64,
}

impl Default for ForecasterConfig {
    fn default() -> Self {
        ForecasterConfig {
            train: TrainConfig::default(),
            train_frac: 0.7,
            cal_frac: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    pub sources: Vec<String>,
    pub target: String,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            sources: vec!["adult#001".into(), "adult#002".into()],
            target: "adult#005".into(),
        }
    }
}

/// Which trace files a run writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceOutput {
    #[default]
    All,
    Eval,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Patient names; empty means the whole cohort.
    pub patients: Vec<String>,
    pub controllers: Vec<ControllerKind>,
    pub seeds: Vec<u64>,
    pub days_warmup: usize,
    pub days_eval: usize,
    /// Parallel sweep cells; 0 uses every core.
    pub workers: usize,
    pub out_dir: Option<PathBuf>,
    pub traces: TraceOutput,
    /// Save each TSODE forecaster checkpoint and policy table.
    pub save_models: bool,
    pub metrics_bg: BgSource,
    pub cohort: CohortConfig,
    #[serde(rename = "loop")]
    pub loop_cfg: LoopConfig,
    pub forecaster: ForecasterConfig,
    pub tuning: TuningConfig,
    pub transfer: TransferConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            patients: Vec::new(),
            controllers: ControllerKind::ALL.to_vec(),
            seeds: vec![1, 2, 3],
            days_warmup: 30,
            days_eval: 14,
            workers: 0,
            out_dir: None,
            traces: TraceOutput::All,
            save_models: true,
            metrics_bg: BgSource::True,
            cohort: CohortConfig::default(),
            loop_cfg: LoopConfig::default(),
            forecaster: ForecasterConfig::default(),
            tuning: TuningConfig::default(),
            transfer: TransferConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.controllers.is_empty() {
            return Err(Error::Config("controllers must not be empty".into()));
        }
        if self.days_eval == 0 {
            return Err(Error::Config("days_eval must be >= 1".into()));
        }
        if self.controllers.contains(&ControllerKind::Tsode) && self.days_warmup == 0 {
            return Err(Error::Config("TSODE needs warm-up days to train its forecaster".into()));
        }
        let f = &self.forecaster;
        if !(f.train_frac > 0.0 && f.cal_frac > 0.0 && f.train_frac + f.cal_frac < 1.0) {
            return Err(Error::Config("forecaster split fractions must be positive and sum below 1".into()));
        }
        self.loop_cfg.validate()
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> Result<String> {
        let text = toml::to_string(self)?;
        Ok(hex_digest(text.as_bytes()))
    }

    /// Requested patients with their parameters, in config order.
    pub fn patient_list(&self, cohort: &Cohort) -> Result<Vec<(String, PatientParams)>> {
        if self.patients.is_empty() {
            return Ok(cohort.patients.iter().map(|p| (p.name.clone(), p.params)).collect());
        }
        self.patients
            .iter()
            .map(|name| {
                cohort
                    .get(name)
                    .map(|p| (name.clone(), *p))
                    .ok_or_else(|| Error::Config(format!("unknown patient {name}")))
            })
            .collect()
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Seed for a cell's forecaster, derived from the cell seed and patient.
pub fn model_seed(seed: u64, patient: &str) -> u64 {
    let d = Sha256::digest(format!("{seed}/{patient}/forecaster").as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// What TSODE learned during warm-up.
#[derive(Debug, Clone)]
pub struct TsodeArtifacts {
    pub model: ForecasterModel,
    pub calibration: ConformalCalibration,
    pub table: PolicyTable,
    pub train_report: forecaster::TrainReport,
    /// Held-out residual coverage of the calibrated band.
    pub validation_coverage: f64,
    /// mg/dL RMSE at the last horizon step on the validation split.
    pub validation_rmse: f64,
    pub n_train: usize,
}

#[derive(Debug, Clone)]
pub struct CellOutput {
    pub metrics: Metrics,
    pub warmup: Vec<StepRecord>,
    pub eval: Vec<StepRecord>,
    pub tsode: Option<TsodeArtifacts>,
}

/// Failure of one cell, with whatever trace was recorded before it.
#[derive(Debug)]
pub struct CellFailure {
    pub error: String,
    pub partial: Vec<StepRecord>,
    pub phase: Mode,
}

#[derive(Debug)]
pub struct CellResult {
    pub patient: String,
    pub controller: ControllerKind,
    pub seed: u64,
    pub outcome: std::result::Result<CellOutput, CellFailure>,
}

impl CellResult {
    pub fn row(&self, steps_per_day: usize) -> MetricsRow {
        let c = self.controller.as_str();
        match &self.outcome {
            Ok(out) => MetricsRow::ok(&self.patient, c, self.seed, &out.metrics, steps_per_day),
            Err(f) => MetricsRow::failed(&self.patient, c, self.seed, &f.error),
        }
    }
}

/// Train a forecaster on chronological splits of `logs`, calibrate it, and
/// score the validation split.
pub fn fit_forecaster(
    splits: &RecordSplit,
    fcfg: &ForecasterConfig,
    alpha: f64,
    per_step: bool,
    seed: u64,
) -> Result<(ForecasterModel, ConformalCalibration, forecaster::TrainReport, f64, f64)> {
    let mut model = ForecasterModel::new(seed);
    let tcfg = TrainConfig {
        seed: seed.wrapping_add(1),
        ..fcfg.train.clone()
    };
    let report = forecaster::train(&mut model, &splits.train, &tcfg)?;
    let cal = safegate::calibrate(&model, &splits.calibration, alpha, per_step)?;
    let (cov, rmse) = if splits.validation.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        let rows = safegate::residuals(&model, &splits.validation)?;
        (
            safegate::coverage(&cal, &rows),
            forecaster::rmse_at(&model, &splits.validation, model.horizon)?,
        )
    };
    Ok((model, cal, report, cov, rmse))
}

pub fn split_log(log: &[FeatureStep], cfg: &ExperimentConfig, source: &str) -> Result<RecordSplit> {
    forecaster::split_records(
        log,
        cfg.loop_cfg.window,
        HORIZON,
        cfg.forecaster.train_frac,
        cfg.forecaster.cal_frac,
        source,
    )
}

/// Warm-up then evaluation for one (patient, controller, seed).
pub fn run_cell(
    cfg: &ExperimentConfig,
    loop_cfg: &LoopConfig,
    patient: &str,
    params: &PatientParams,
    kind: ControllerKind,
    seed: u64,
) -> std::result::Result<CellOutput, CellFailure> {
    let fail = |phase, partial, e: Error| CellFailure {
        error: e.to_string(),
        partial,
        phase,
    };
    let controller = Controller::fresh(kind, params, loop_cfg);
    let mut ep = Episode::new(patient, *params, loop_cfg.clone(), controller, seed).map_err(|e| fail(Mode::Warmup, Vec::new(), e))?;
    let mut warmup = Vec::new();
    if cfg.days_warmup > 0 {
        if let Err(e) = ep.run(cfg.days_warmup, Mode::Warmup) {
            return Err(fail(Mode::Warmup, ep.take_trace(), e));
        }
        warmup = ep.take_trace();
    }

    let mut tsode = None;
    if kind == ControllerKind::Tsode {
        let prepared = split_log(ep.feature_log(), cfg, patient).and_then(|splits| {
            let n_train = splits.train.len();
            let s = &loop_cfg.safety;
            fit_forecaster(&splits, &cfg.forecaster, s.alpha, s.per_step_quantile, model_seed(seed, patient))
                .map(|fit| (fit, n_train))
        });
        let ((model, cal, report, cov, rmse), n_train) = prepared.map_err(|e| fail(Mode::Warmup, Vec::new(), e))?;
        if let Controller::Tsode {
            table,
            forecaster,
            calibration,
        } = &mut ep.controller
        {
            *forecaster = Some(ForecastSource::Learned(Box::new(model.clone())));
            *calibration = Some(cal.clone());
            tsode = Some(TsodeArtifacts {
                model,
                calibration: cal,
                table: table.clone(),
                train_report: report,
                validation_coverage: cov,
                validation_rmse: rmse,
                n_train,
            });
        }
    }

    if let Err(e) = ep.run(cfg.days_eval, Mode::Eval) {
        return Err(fail(Mode::Eval, ep.take_trace(), e));
    }
    let eval = ep.take_trace();
    let m = metrics(&eval, cfg.metrics_bg).map_err(|e| fail(Mode::Eval, Vec::new(), e))?;
    Ok(CellOutput {
        metrics: m,
        warmup,
        eval,
        tsode,
    })
}

fn run_cell_isolated(
    cfg: &ExperimentConfig,
    loop_cfg: &LoopConfig,
    patient: &str,
    params: &PatientParams,
    kind: ControllerKind,
    seed: u64,
) -> CellResult {
    let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
        run_cell(cfg, loop_cfg, patient, params, kind, seed)
    }))
    .unwrap_or_else(|panic| {
        let msg = panic
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(CellFailure {
            error: format!("panic: {msg}"),
            partial: Vec::new(),
            phase: Mode::Warmup,
        })
    });
    CellResult {
        patient: patient.to_string(),
        controller: kind,
        seed,
        outcome,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceMeta {
    pub patient: String,
    pub controller: ControllerKind,
    pub seed: u64,
    pub mode: Mode,
    pub config_hash: String,
    pub dt: f64,
    pub steps: usize,
    pub complete: bool,
}

pub fn trace_stem(patient: &str, kind: ControllerKind, seed: u64, mode: Mode) -> String {
    format!("{}_{}_s{}_{}", patient.replace('#', ""), kind.as_str(), seed, mode.as_str())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    fs::File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_trace(dir: &Path, meta: &TraceMeta, records: &[StepRecord]) -> Result<()> {
    let stem = trace_stem(&meta.patient, meta.controller, meta.seed, meta.mode);
    let suffix = if meta.complete { "" } else { ".partial" };
    looprt::write_trace_csv(records, create(&dir.join(format!("{stem}{suffix}.csv")))?)?;
    write_json(&dir.join(format!("{stem}{suffix}.meta.json")), meta)
}

/// Persist one finished cell's traces and models, then drop the warm-up trace.
fn persist_cell(cfg: &ExperimentConfig, hash: &str, out: &Path, cell: &mut CellResult) -> Result<()> {
    let traces = out.join("traces");
    let meta = |mode, steps, complete| TraceMeta {
        patient: cell.patient.clone(),
        controller: cell.controller,
        seed: cell.seed,
        mode,
        config_hash: hash.to_string(),
        dt: cfg.loop_cfg.dt,
        steps,
        complete,
    };
    match &mut cell.outcome {
        Ok(o) => {
            if cfg.traces == TraceOutput::All && !o.warmup.is_empty() {
                write_trace(&traces, &meta(Mode::Warmup, o.warmup.len(), true), &o.warmup)?;
            }
            if cfg.traces != TraceOutput::None {
                write_trace(&traces, &meta(Mode::Eval, o.eval.len(), true), &o.eval)?;
            }
            if let (true, Some(t)) = (cfg.save_models, &o.tsode) {
                let stem = format!("{}_s{}", cell.patient.replace('#', ""), cell.seed);
                let models = out.join("models");
                t.model.save(&models.join(format!("{stem}_forecaster.json")))?;
                t.table.write_csv(create(&models.join(format!("{stem}_policy.csv")))?)?;
                write_json(&models.join(format!("{stem}_calibration.json")), &t.calibration)?;
            }
            o.warmup = Vec::new();
        }
        Err(f) => {
            if cfg.traces != TraceOutput::None && !f.partial.is_empty() {
                write_trace(&traces, &meta(f.phase, f.partial.len(), false), &f.partial)?;
            }
        }
    }
    Ok(())
}

#[derive(Debug)]
pub struct ExperimentReport {
    pub cells: Vec<CellResult>,
    pub rows: Vec<MetricsRow>,
    pub summary: Vec<SummaryRow>,
    pub tuning: Option<TuningResult>,
    /// The loop configuration after tuning, as used by every cell.
    pub loop_cfg: LoopConfig,
    pub config_hash: String,
}

#[derive(Debug, Serialize)]
struct CellManifest<'a> {
    patient: &'a str,
    controller: ControllerKind,
    seed: u64,
    status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    q_alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    validation_coverage: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    validation_rmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_train_nll: Option<f64>,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    package: &'static str,
    version: &'static str,
    config_hash: &'a str,
    seeds: &'a [u64],
    patients: Vec<&'a str>,
    controllers: &'a [ControllerKind],
    days_warmup: usize,
    days_eval: usize,
    tuning: &'a Option<TuningResult>,
    failed_cells: usize,
    cells: Vec<CellManifest<'a>>,
}

/// Tune the baselines that request it, on the configured tuning patient.
pub fn resolve_loop_config(cfg: &ExperimentConfig, cohort: &Cohort) -> Result<(LoopConfig, Option<TuningResult>)> {
    let mut loop_cfg = cfg.loop_cfg.clone();
    let t = &cfg.tuning;
    let want_pid = t.pid && cfg.controllers.contains(&ControllerKind::Pid);
    let want_mpc = t.tsmpc && cfg.controllers.contains(&ControllerKind::Tsmpc);
    if !(want_pid || want_mpc) {
        return Ok((loop_cfg, None));
    }
    let params = cohort
        .get(&t.patient)
        .ok_or_else(|| Error::Config(format!("unknown tuning patient {}", t.patient)))?;
    let mut result = TuningResult::default();
    if want_pid {
        let (pid, tir) = tune_pid(&t.patient, params, &loop_cfg, t)?;
        loop_cfg.pid = pid.clone();
        result.pid = Some(pid);
        result.pid_tir = Some(tir);
    }
    if want_mpc {
        let (rho, tir) = tune_tsmpc(&t.patient, params, &loop_cfg, t)?;
        loop_cfg.tsmpc.rho = rho;
        result.tsmpc_rho = Some(rho);
        result.tsmpc_tir = Some(tir);
    }
    Ok((loop_cfg, Some(result)))
}

/// Run every (patient, controller, seed) cell and write the report files when
/// `cfg.out_dir` is set. `progress` is called once per finished cell.
pub fn run_experiment_with<F>(cfg: &ExperimentConfig, progress: F) -> Result<ExperimentReport>
where
    F: Fn(&CellResult) + Sync,
{
    cfg.validate()?;
    let hash = cfg.hash()?;
    let cohort = cfg.cohort.resolve()?;
    let patients = cfg.patient_list(&cohort)?;
    let (loop_cfg, tuning) = resolve_loop_config(cfg, &cohort)?;
    if let Some(out) = &cfg.out_dir {
        for sub in ["traces", "models"] {
            let d = out.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
    }

    let jobs: Vec<(&str, &PatientParams, ControllerKind, u64)> = patients
        .iter()
        .flat_map(|(name, p)| {
            cfg.controllers
                .iter()
                .flat_map(move |&k| cfg.seeds.iter().map(move |&s| (name.as_str(), p, k, s)))
        })
        .collect();

    let cells: Vec<CellResult> = cfg.pool()?.install(|| {
        jobs.par_iter()
            .map(|&(name, p, k, s)| {
                let mut cell = run_cell_isolated(cfg, &loop_cfg, name, p, k, s);
                if let Some(out) = &cfg.out_dir {
                    if let Err(e) = persist_cell(cfg, &hash, out, &mut cell) {
                        cell.outcome = Err(CellFailure {
                            error: e.to_string(),
                            partial: Vec::new(),
                            phase: Mode::Eval,
                        });
                    }
                } else if let Ok(o) = &mut cell.outcome {
                    o.warmup = Vec::new();
                }
                progress(&cell);
                cell
            })
            .collect()
    });

    let spd = loop_cfg.steps_per_day();
    let rows: Vec<MetricsRow> = cells.iter().map(|c| c.row(spd)).collect();
    let summary = summarize(&rows);
    if let Some(out) = &cfg.out_dir {
        write_metrics_csv(&rows, create(&out.join("metrics.csv"))?)?;
        write_summary_csv(&summary, create(&out.join("summary.csv"))?)?;
        let resolved = ExperimentConfig {
            loop_cfg: loop_cfg.clone(),
            ..cfg.clone()
        };
        let p = out.join("resolved_config.toml");
        fs::write(&p, toml::to_string(&resolved)?).map_err(|e| Error::io(&p, e))?;
        let manifest = Manifest {
            package: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            config_hash: &hash,
            seeds: &cfg.seeds,
            patients: patients.iter().map(|(n, _)| n.as_str()).collect(),
            controllers: &cfg.controllers,
            days_warmup: cfg.days_warmup,
            days_eval: cfg.days_eval,
            tuning: &tuning,
            failed_cells: rows.iter().filter(|r| !r.is_ok()).count(),
            cells: cells
                .iter()
                .zip(&rows)
                .map(|(c, r)| {
                    let t = c.outcome.as_ref().ok().and_then(|o| o.tsode.as_ref());
                    CellManifest {
                        patient: &c.patient,
                        controller: c.controller,
                        seed: c.seed,
                        status: r.status.clone(),
                        q_alpha: t.map(|t| t.calibration.q_alpha),
                        validation_coverage: t.map(|t| t.validation_coverage),
                        validation_rmse: t.map(|t| t.validation_rmse),
                        final_train_nll: t.map(|t| t.train_report.final_loss),
                    }
                })
                .collect(),
        };
        write_json(&out.join("manifest.json"), &manifest)?;
    }
    Ok(ExperimentReport {
        cells,
        rows,
        summary,
        tuning,
        loop_cfg,
        config_hash: hash,
    })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    run_experiment_with(cfg, |_| {})
}

/// Pooled warm-up knowledge from several source patients.
#[derive(Debug, Clone)]
pub struct TransferArtifacts {
    pub model: ForecasterModel,
    pub calibration: ConformalCalibration,
    pub table: PolicyTable,
    /// Source tag of every record used for training or calibration.
    pub record_sources: Vec<String>,
}

/// Warm up TSODE on each source, pool the logs into one forecaster and
/// calibration, and merge the policy tables.
pub fn pool_sources(cfg: &ExperimentConfig, loop_cfg: &LoopConfig, cohort: &Cohort, seed: u64) -> Result<TransferArtifacts> {
    let t = &cfg.transfer;
    if t.sources.is_empty() {
        return Err(Error::Config("transfer needs at least one source patient".into()));
    }
    let mut pooled = RecordSplit::default();
    let mut tables = Vec::new();
    for name in &t.sources {
        let params = cohort
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown source patient {name}")))?;
        let controller = Controller::fresh(ControllerKind::Tsode, params, loop_cfg);
        let mut ep = Episode::new(name, *params, loop_cfg.clone(), controller, seed)?;
        ep.run(cfg.days_warmup.max(1), Mode::Warmup)?;
        let split = split_log(ep.feature_log(), cfg, name)?;
        pooled.train.extend(split.train);
        pooled.calibration.extend(split.calibration);
        pooled.validation.extend(split.validation);
        tables.push(ep.controller.table().expect("TSODE has a table").clone());
    }
    let record_sources: Vec<String> = pooled
        .train
        .iter()
        .chain(&pooled.calibration)
        .map(|r: &TrainRecord| r.source.clone())
        .collect();
    let s = &loop_cfg.safety;
    let (model, calibration, _, _, _) = fit_forecaster(
        &pooled,
        &cfg.forecaster,
        s.alpha,
        s.per_step_quantile,
        model_seed(seed, &t.sources.join("+")),
    )?;
    let table = PolicyTable::merged(&tables.iter().collect::<Vec<_>>())?;
    Ok(TransferArtifacts {
        model,
        calibration,
        table,
        record_sources,
    })
}

#[derive(Debug)]
pub struct TransferReport {
    /// One row per seed, controller label `tsode_transfer`.
    pub rows: Vec<MetricsRow>,
    pub eval: Vec<Vec<StepRecord>>,
    pub artifacts: Vec<TransferArtifacts>,
}

pub const TRANSFER_LABEL: &str = "tsode_transfer";

/// Evaluate pooled source knowledge greedily on the held-out target, with no
/// further learning. One row per configured seed.
pub fn transfer_scenario(cfg: &ExperimentConfig) -> Result<TransferReport> {
    cfg.validate()?;
    let t = &cfg.transfer;
    if t.sources.iter().any(|s| *s == t.target) && t.sources.len() > 1 {
        return Err(Error::Config("transfer target must not be one of several sources".into()));
    }
    let cohort = cfg.cohort.resolve()?;
    let target = *cohort
        .get(&t.target)
        .ok_or_else(|| Error::Config(format!("unknown target patient {}", t.target)))?;
    let (loop_cfg, _) = resolve_loop_config(cfg, &cohort)?;
    let spd = loop_cfg.steps_per_day();

    let results: Vec<Result<(MetricsRow, Vec<StepRecord>, TransferArtifacts)>> = cfg.pool()?.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| {
                let art = pool_sources(cfg, &loop_cfg, &cohort, seed)?;
                let controller = Controller::Tsode {
                    table: art.table.clone(),
                    forecaster: Some(ForecastSource::Learned(Box::new(art.model.clone()))),
                    calibration: Some(art.calibration.clone()),
                };
                let mut ep = Episode::new(&t.target, target, loop_cfg.clone(), controller, seed)?;
                ep.run(cfg.days_eval, Mode::Eval)?;
                let eval = ep.take_trace();
                let m = metrics(&eval, cfg.metrics_bg)?;
                Ok((MetricsRow::ok(&t.target, TRANSFER_LABEL, seed, &m, spd), eval, art))
            })
            .collect()
    });
    let mut report = TransferReport {
        rows: Vec::new(),
        eval: Vec::new(),
        artifacts: Vec::new(),
    };
    for (seed, r) in cfg.seeds.iter().zip(results) {
        match r {
            Ok((row, eval, art)) => {
                report.rows.push(row);
                report.eval.push(eval);
                report.artifacts.push(art);
            }
            Err(e) => report.rows.push(MetricsRow::failed(&t.target, TRANSFER_LABEL, *seed, &e.to_string())),
        }
    }
    if let Some(out) = &cfg.out_dir {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        write_metrics_csv(&report.rows, create(&out.join("transfer.csv"))?)?;
    }
    Ok(report)
}

/// Recompute metrics rows from the evaluation traces under `dir/traces`,
/// ordered by patient, controller and seed.
pub fn report_from_traces(dir: &Path, source: BgSource) -> Result<Vec<MetricsRow>> {
    let traces = dir.join("traces");
    let mut found: BTreeMap<(String, String, u64), MetricsRow> = BTreeMap::new();
    let entries = fs::read_dir(&traces).map_err(|e| Error::io(&traces, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with("_eval.meta.json"))
        .collect();
    paths.sort();
    for meta_path in paths {
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: TraceMeta = serde_json::from_str(&text)?;
        let csv_path = PathBuf::from(meta_path.to_string_lossy().replace(".meta.json", ".csv"));
        let file = fs::File::open(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        let records = looprt::read_trace_csv(std::io::BufReader::new(file))?;
        let steps_per_day = (crate::vpatient::MIN_PER_DAY / meta.dt).round() as usize;
        let m = metrics(&records, source)?;
        let key = (meta.patient.clone(), meta.controller.as_str().to_string(), meta.seed);
        found.insert(key, MetricsRow::ok(&meta.patient, meta.controller.as_str(), meta.seed, &m, steps_per_day));
    }
    if found.is_empty() {
        return Err(Error::Config(format!("no evaluation traces under {}", traces.display())));
    }
    Ok(found.into_values().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            patients: vec!["adult#003".into()],
            controllers: vec![ControllerKind::Pid],
            seeds: vec![4],
            days_warmup: 1,
            days_eval: 1,
            workers: 1,
            tuning: TuningConfig {
                pid: false,
                tsmpc: false,
                ..TuningConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
        let partial: ExperimentConfig = toml::from_str("seeds = [7]\ncontrollers = [\"pid\", \"tsode\"]\n[loop.safety]\nL = 95.0\n").unwrap();
        assert_eq!(partial.seeds, vec![7]);
        assert_eq!(partial.loop_cfg.safety.l, 95.0);
        assert_eq!(partial.days_warmup, 30);
        assert!(toml::from_str::<ExperimentConfig>("bogus = 1").is_err());
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut c = tiny();
        c.seeds.clear();
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.forecaster.train_frac = 0.9;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.patients = vec!["adult#999".into()];
        assert!(run_experiment(&c).is_err());
    }

    #[test]
    fn one_cell_gives_one_row_and_two_traces() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            out_dir: Some(dir.path().to_path_buf()),
            ..tiny()
        };
        let rep = run_experiment(&cfg).unwrap();
        assert_eq!(rep.rows.len(), 1);
        assert!(rep.rows[0].is_ok());
        let names: Vec<String> = fs::read_dir(dir.path().join("traces"))
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".csv"))
            .collect();
        assert_eq!(names.len(), 2, "{names:?}");
        let again = report_from_traces(dir.path(), BgSource::True).unwrap();
        assert_eq!(again, rep.rows);
        let first = fs::read(dir.path().join("metrics.csv")).unwrap();
        run_experiment(&cfg).unwrap();
        assert_eq!(fs::read(dir.path().join("metrics.csv")).unwrap(), first);
    }

    #[test]
    fn failing_cell_is_isolated() {
        let mut cfg = tiny();
        cfg.controllers = vec![ControllerKind::Pid, ControllerKind::Tsode];
        // too little warm-up data to calibrate on
        cfg.days_warmup = 1;
        cfg.forecaster.train.epochs = 1;
        cfg.forecaster.cal_frac = 0.01;
        let rep = run_experiment(&cfg).unwrap();
        assert!(rep.rows[0].is_ok());
        assert!(rep.rows[1].status.starts_with("failed"), "{}", rep.rows[1].status);
        assert_eq!(rep.summary.len(), 2);
        assert_eq!(rep.summary[1].failed, 1);
    }

    #[test]
    fn model_seeds_differ_by_cell() {
        assert_ne!(model_seed(1, "adult#001"), model_seed(2, "adult#001"));
        assert_ne!(model_seed(1, "adult#001"), model_seed(1, "adult#002"));
        assert_eq!(model_seed(1, "adult#001"), model_seed(1, "adult#001"));
    }
}
