use serde::{Deserialize, Serialize};

use super::metrics::{metrics, BgSource};
use crate::baselines::PidConfig;
use crate::error::{Error, Result};
use crate::looprt::{Controller, ControllerKind, Episode, LoopConfig, Mode};
use crate::vpatient::PatientParams;

/// Grid searches that fix the baselines' free weights on one patient before a
/// sweep. Each candidate is scored by evaluation TIR; ties keep the earlier one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuningConfig {
    pub patient: String,
    pub seed: u64,
    pub days_warmup: usize,
    pub days_eval: usize,
    pub pid: bool,
    pub kp: Vec<f64>,
    pub ki: Vec<f64>,
    pub kd: Vec<f64>,
    pub tsmpc: bool,
    pub rho: Vec<f64>,
}

impl Default for TuningConfig {
    fn default() -> Self {
        TuningConfig {
            patient: "adult#001".into(),
            seed: 0,
            days_warmup: 30,
            days_eval: 14,
            pid: true,
            kp: vec![0.005, 0.01, 0.02, 0.03, 0.05],
            ki: vec![0.0, 1e-5, 3e-5, 1e-4],
            kd: vec![0.0, 0.1, 0.3, 1.0],
            tsmpc: true,
            rho: vec![1.0, 10.0, 100.0, 300.0, 1000.0, 3000.0, 10000.0],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TuningResult {
    pub pid: Option<PidConfig>,
    pub pid_tir: Option<f64>,
    pub tsmpc_rho: Option<f64>,
    pub tsmpc_tir: Option<f64>,
}

fn eval_tir(name: &str, params: &PatientParams, cfg: &LoopConfig, kind: ControllerKind, t: &TuningConfig) -> Result<f64> {
    let mut ep = Episode::new(name, *params, cfg.clone(), Controller::fresh(kind, params, cfg), t.seed)?;
    if t.days_warmup > 0 {
        ep.run(t.days_warmup, Mode::Warmup)?;
    }
    ep.run(t.days_eval.max(1), Mode::Eval)?;
    Ok(metrics(ep.trace(), BgSource::True)?.tir)
}

fn argmax<T: Clone>(cands: impl IntoIterator<Item = Result<(T, f64)>>) -> Result<(T, f64)> {
    let mut best: Option<(T, f64)> = None;
    for c in cands {
        let (v, tir) = c?;
        if best.as_ref().is_none_or(|(_, b)| tir > *b) {
            best = Some((v, tir));
        }
    }
    best.ok_or_else(|| Error::Config("empty tuning grid".into()))
}

/// PID gains with the highest evaluation TIR on `params`.
pub fn tune_pid(name: &str, params: &PatientParams, base: &LoopConfig, t: &TuningConfig) -> Result<(PidConfig, f64)> {
    let grid = t
        .kp
        .iter()
        .flat_map(|&kp| t.ki.iter().flat_map(move |&ki| t.kd.iter().map(move |&kd| (kp, ki, kd))));
    argmax(grid.map(|(kp, ki, kd)| {
        let mut cfg = base.clone();
        cfg.pid = PidConfig { kp, ki, kd, ..base.pid.clone() };
        cfg.pid.validate()?;
        eval_tir(name, params, &cfg, ControllerKind::Pid, t).map(|tir| (cfg.pid, tir))
    }))
}

/// TSMPC dose penalty with the highest evaluation TIR on `params`.
pub fn tune_tsmpc(name: &str, params: &PatientParams, base: &LoopConfig, t: &TuningConfig) -> Result<(f64, f64)> {
    argmax(t.rho.iter().map(|&rho| {
        let mut cfg = base.clone();
        cfg.tsmpc.rho = rho;
        cfg.tsmpc.validate()?;
        eval_tir(name, params, &cfg, ControllerKind::Tsmpc, t).map(|tir| (rho, tir))
    }))
}
