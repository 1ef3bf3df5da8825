use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tsode_core::bench::{self, BgSource, ExperimentConfig, TRANSFER_LABEL};
use tsode_core::forecaster::{self, feature_row, FeatureStep, ForecasterModel, RecordSplit, TrainConfig, HORIZON};
use tsode_core::looprt::{self, ControllerKind};
use tsode_core::safegate;
use tsode_core::{Error, Result};

#[derive(Parser)]
#[command(name = "tsode", version, about = "Safety-gated Thompson Sampling insulin control on a virtual cohort")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment configuration; every field is optional.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Replace the configured seeds with this one.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (or file for `train` / `calibrate`).
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Parallel workers; 0 uses every core.
    #[arg(long)]
    workers: Option<usize>,
    /// Restrict to these controllers (mealbolus, pid, tsmpc, tsode).
    #[arg(long, value_delimiter = ',')]
    controller: Vec<ControllerKind>,
    /// Restrict to these patients, e.g. adult#001.
    #[arg(long, value_delimiter = ',')]
    patient: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// One warm-up plus evaluation episode for a single patient and controller.
    Simulate(Common),
    /// Fit a forecaster on warm-up trace CSVs.
    Train {
        #[command(flatten)]
        common: Common,
        /// Warm-up trace CSVs written by `simulate` or `run`.
        #[arg(long, required = true, num_args = 1..)]
        logs: Vec<PathBuf>,
    },
    /// Conformal calibration of a trained forecaster on warm-up trace CSVs.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        logs: Vec<PathBuf>,
    },
    /// Full sweep over patients, controllers and seeds.
    Run(Common),
    /// Pool source patients and evaluate on the held-out target.
    Transfer(Common),
    /// Recompute metrics from the evaluation traces of a finished run.
    Report {
        #[command(flatten)]
        common: Common,
        /// Compute metrics on CGM readings instead of true glucose.
        #[arg(long)]
        observed: bool,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seeds = vec![s];
    }
    if let Some(w) = c.workers {
        cfg.workers = w;
    }
    if !c.controller.is_empty() {
        cfg.controllers = c.controller.clone();
    }
    if !c.patient.is_empty() {
        cfg.patients = c.patient.clone();
    }
    if c.out.is_some() {
        cfg.out_dir = c.out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn steps_from_trace(path: &Path) -> Result<Vec<FeatureStep>> {
    let file = fs::File::open(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let records = looprt::read_trace_csv(BufReader::new(file))?;
    Ok(records
        .iter()
        .map(|r| FeatureStep {
            features: feature_row(r.bg_observed, r.iob, r.cob, r.clock),
            bg: r.bg_observed,
            dose: r.delivered_dose,
        })
        .collect())
}

fn pooled_splits(cfg: &ExperimentConfig, logs: &[PathBuf]) -> Result<RecordSplit> {
    let mut pooled = RecordSplit::default();
    for path in logs {
        let steps = steps_from_trace(path)?;
        let source = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let s = bench::split_log(&steps, cfg, &source)?;
        pooled.train.extend(s.train);
        pooled.calibration.extend(s.calibration);
        pooled.validation.extend(s.validation);
    }
    Ok(pooled)
}

fn simulate(c: &Common) -> Result<()> {
    let mut cfg = load_config(c)?;
    if cfg.patients.len() > 1 || cfg.controllers.len() > 1 || cfg.seeds.len() > 1 {
        return Err(Error::Config(
            "simulate runs one episode: pass a single --patient, --controller and --seed".into(),
        ));
    }
    if cfg.patients.is_empty() {
        cfg.patients = vec!["adult#001".into()];
    }
    cfg.out_dir = Some(out_dir(&cfg));
    let rep = bench::run_experiment(&cfg)?;
    print!("{}", bench::format_summary(&rep.summary));
    fail_if_any(&rep.rows)
}

fn fail_if_any(rows: &[bench::MetricsRow]) -> Result<()> {
    let failed: Vec<String> = rows
        .iter()
        .filter(|r| !r.is_ok())
        .map(|r| format!("{} {} seed {}: {}", r.patient, r.controller, r.seed, r.status))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{} failed cell(s):\n  {}", failed.len(), failed.join("\n  "))))
    }
}

fn train(c: &Common, logs: &[PathBuf]) -> Result<()> {
    let cfg = load_config(c)?;
    let splits = pooled_splits(&cfg, logs)?;
    let seed = cfg.seeds[0];
    let mut model = ForecasterModel::new(seed);
    let tcfg = TrainConfig {
        seed: seed.wrapping_add(1),
        ..cfg.forecaster.train.clone()
    };
    let report = forecaster::train(&mut model, &splits.train, &tcfg)?;
    let path = c.out.clone().unwrap_or_else(|| PathBuf::from("forecaster.json"));
    model.save(&path)?;
    println!(
        "trained on {} records: NLL {:.4} -> {:.4}; saved {}",
        splits.train.len(),
        report.initial_loss,
        report.final_loss,
        path.display()
    );
    if !splits.validation.is_empty() {
        println!(
            "validation RMSE at {} min: {:.2} mg/dL",
            HORIZON as f64 * cfg.loop_cfg.dt,
            forecaster::rmse_at(&model, &splits.validation, HORIZON)?
        );
    }
    Ok(())
}

fn calibrate(c: &Common, model_path: &Path, logs: &[PathBuf]) -> Result<()> {
    let cfg = load_config(c)?;
    let model = ForecasterModel::load(model_path)?;
    let splits = pooled_splits(&cfg, logs)?;
    let s = &cfg.loop_cfg.safety;
    let cal = safegate::calibrate(&model, &splits.calibration, s.alpha, s.per_step_quantile)?;
    let path = c.out.clone().unwrap_or_else(|| PathBuf::from("calibration.json"));
    fs::write(&path, serde_json::to_string_pretty(&cal)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    println!(
        "q_alpha = {:.3} mg/dL from {} residuals (alpha = {}); saved {}",
        cal.q_alpha,
        cal.residuals.len(),
        cal.alpha,
        path.display()
    );
    if !splits.validation.is_empty() {
        let rows = safegate::residuals(&model, &splits.validation)?;
        println!("held-out coverage {:.4}", safegate::coverage(&cal, &rows));
    }
    Ok(())
}

fn run(c: &Common) -> Result<()> {
    let mut cfg = load_config(c)?;
    cfg.out_dir = Some(out_dir(&cfg));
    let total = cfg.patients.len().max(if cfg.patients.is_empty() { 10 } else { 0 }) * cfg.controllers.len() * cfg.seeds.len();
    let done = std::sync::atomic::AtomicUsize::new(0);
    let rep = bench::run_experiment_with(&cfg, |cell| {
        let n = done.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
        let status = match &cell.outcome {
            Ok(o) => format!("TIR {:.1}% <70 {:.1}%", o.metrics.tir, o.metrics.below_70),
            Err(f) => format!("FAILED: {}", f.error),
        };
        eprintln!("[{n}/{total}] {} {} seed {}: {status}", cell.patient, cell.controller, cell.seed);
    })?;
    if let Some(t) = &rep.tuning {
        eprintln!("tuning: {}", serde_json::to_string(t)?);
    }
    print!("{}", bench::format_summary(&rep.summary));
    println!("wrote {}", out_dir(&cfg).display());
    fail_if_any(&rep.rows)
}

fn transfer(c: &Common) -> Result<()> {
    let mut cfg = load_config(c)?;
    cfg.out_dir = Some(out_dir(&cfg));
    let rep = bench::transfer_scenario(&cfg)?;
    let mut reference = cfg.clone();
    reference.patients = vec![cfg.transfer.target.clone()];
    reference.controllers = vec![ControllerKind::Tsode];
    reference.out_dir = Some(out_dir(&cfg).join("reference"));
    let own = bench::run_experiment(&reference)?;
    let mut rows = own.rows.clone();
    rows.extend(rep.rows.iter().cloned());
    let summary = bench::summarize(&rows);
    print!("{}", bench::format_summary(&summary));
    println!(
        "sources {} -> target {} ({} rows labelled {TRANSFER_LABEL})",
        cfg.transfer.sources.join(", "),
        cfg.transfer.target,
        rep.rows.len()
    );
    fail_if_any(&rows)
}

fn report(c: &Common, observed: bool) -> Result<()> {
    let dir = c.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    let source = if observed { BgSource::Observed } else { BgSource::True };
    let rows = bench::report_from_traces(&dir, source)?;
    let path = dir.join("metrics_recomputed.csv");
    let file = fs::File::create(&path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    bench::write_metrics_csv(&rows, file)?;
    print!("{}", bench::format_summary(&bench::summarize(&rows)));
    let original = dir.join("metrics.csv");
    if original.exists() && !observed {
        let file = fs::File::open(&original).map_err(|e| Error::Config(format!("{}: {e}", original.display())))?;
        let reported = bench::read_metrics_csv(file)?;
        let mut worst: f64 = 0.0;
        for r in &rows {
            if let Some(o) = reported
                .iter()
                .find(|o| o.patient == r.patient && o.controller == r.controller && o.seed == r.seed)
            {
                for (a, b) in [(r.tir, o.tir), (r.below_70, o.below_70), (r.mean_bg, o.mean_bg)] {
                    if let (Some(a), Some(b)) = (a, b) {
                        worst = worst.max((a - b).abs());
                    }
                }
            }
        }
        println!("max |recomputed - reported| = {worst:.3e}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(c) => simulate(c),
        Command::Train { common, logs } => train(common, logs),
        Command::Calibrate { common, model, logs } => calibrate(common, model, logs),
        Command::Run(c) => run(c),
        Command::Transfer(c) => transfer(c),
        Command::Report { common, observed } => report(common, *observed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
