//! Closed-loop runtime: feature windows, IOB/COB bookkeeping, meal pre-bolus,
//! refractory period, and the observe → propose → gate → deliver cycle for
//! every controller.

use std::collections::VecDeque;
use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, AnalyticModel, InputHistory, PidConfig, PidState, TsmpcConfig};
use crate::error::{Error, Result};
use crate::forecaster::{feature_row, FeatureStep, FeatureWindow, ForecastDist, ForecasterModel, N_FEATURES, VARIANCE_FLOOR};
use crate::safegate::{self, ConformalCalibration, Decision, GateInput, SafetyConfig};
use crate::tspolicy::{shaped_reward, trend_of, ActionGrid, BinSpec, PolicyTable, SelectMode};
use crate::vpatient::{self, MealEvent, PatientParams, PatientState, MIN_PER_DAY};

/// Duration of insulin action for the IOB estimate (min).
pub const DIA_MIN: f64 = 240.0;
/// Linear carbohydrate depletion horizon for the COB estimate (min).
pub const CARB_ABSORPTION_MIN: f64 = 180.0;

/// Insulin on board under linear decay over [`DIA_MIN`].
pub fn iob_of(bolus_history: &[(f64, f64)], now: f64) -> f64 {
    linear_remaining(bolus_history, now, DIA_MIN)
}

/// Carbohydrate on board under linear depletion over [`CARB_ABSORPTION_MIN`].
pub fn cob_of(carb_history: &[(f64, f64)], now: f64) -> f64 {
    linear_remaining(carb_history, now, CARB_ABSORPTION_MIN)
}

fn linear_remaining(history: &[(f64, f64)], now: f64, span: f64) -> f64 {
    history
        .iter()
        .map(|&(t, amount)| amount * (1.0 - (now - t) / span).clamp(0.0, 1.0))
        .fold(0.0, |acc, x| acc + x)
}

/// Feed-forward meal dose, carbs over ICR, capped at `cap`.
pub fn prebolus(meals_due_now: &[MealEvent], icr: f64, cap: f64) -> Result<f64> {
    if !(icr > 0.0) {
        return Err(Error::Config(format!("icr must be positive, got {icr}")));
    }
    let carbs: f64 = meals_due_now.iter().map(|m| m.carbs).sum();
    Ok((carbs / icr).min(cap))
}

/// Nearest grid dose, ties going to the smaller one.
pub fn project(dose: f64, grid: &ActionGrid) -> f64 {
    grid.project(dose)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    #[serde(alias = "meal_bolus", alias = "meal-bolus")]
    MealBolus,
    Pid,
    Tsmpc,
    Tsode,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 4] = [
        ControllerKind::MealBolus,
        ControllerKind::Pid,
        ControllerKind::Tsmpc,
        ControllerKind::Tsode,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ControllerKind::MealBolus => "mealbolus",
            ControllerKind::Pid => "pid",
            ControllerKind::Tsmpc => "tsmpc",
            ControllerKind::Tsode => "tsode",
        }
    }
}

impl std::fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ControllerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mealbolus" | "meal_bolus" | "meal-bolus" => Ok(ControllerKind::MealBolus),
            "pid" => Ok(ControllerKind::Pid),
            "tsmpc" => Ok(ControllerKind::Tsmpc),
            "tsode" => Ok(ControllerKind::Tsode),
            other => Err(Error::Config(format!("unknown controller {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Warmup,
    Eval,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Warmup => "warmup",
            Mode::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    /// min
    pub dt: f64,
    /// Feature rows per window.
    pub window: usize,
    /// Minimum spacing between nonzero deliveries (min).
    pub refractory: f64,
    /// CGM noise standard deviation (mg/dL).
    pub noise_sd: f64,
    /// Readings after a decision that make up its reward.
    pub credit_steps: usize,
    pub meals: Vec<MealEvent>,
    pub bins: BinSpec,
    pub grid: ActionGrid,
    pub safety: SafetyConfig,
    pub pid: PidConfig,
    pub tsmpc: TsmpcConfig,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            dt: 3.0,
            window: crate::forecaster::WINDOW_LEN,
            refractory: 20.0,
            noise_sd: 5.0,
            credit_steps: 10,
            meals: vpatient::standard_meal_schedule(),
            bins: BinSpec::default(),
            grid: ActionGrid::default(),
            safety: SafetyConfig::default(),
            pid: PidConfig::default(),
            tsmpc: TsmpcConfig::default(),
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || MIN_PER_DAY % self.dt != 0.0 {
            return Err(Error::Config(format!("dt {} must divide a day", self.dt)));
        }
        if self.window == 0 || self.credit_steps == 0 {
            return Err(Error::Config("window and credit_steps must be >= 1".into()));
        }
        if !(self.refractory >= 0.0 && self.noise_sd >= 0.0) {
            return Err(Error::Config("refractory and noise_sd must be >= 0".into()));
        }
        if self.grid.is_empty() {
            return Err(Error::Config("empty action grid".into()));
        }
        if (self.safety.dt - self.dt).abs() > 1e-12 {
            return Err(Error::Config("safety.dt must equal dt".into()));
        }
        self.bins.validate()?;
        self.safety.validate()?;
        self.pid.validate()?;
        self.tsmpc.validate()
    }

    pub fn steps_per_day(&self) -> usize {
        (MIN_PER_DAY / self.dt).round() as usize
    }
}

/// What happened to the proposal at one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    ColdStart,
    Refractory,
    /// Baseline controllers deliver without the safety layer.
    Ungated,
    Accept,
    Scaled,
    Reject,
    Bypassed,
    GuardrailBlocked,
    GuardrailCapped,
}

impl From<Decision> for Outcome {
    fn from(d: Decision) -> Self {
        match d {
            Decision::Accept => Outcome::Accept,
            Decision::Scaled => Outcome::Scaled,
            Decision::Reject => Outcome::Reject,
            Decision::Bypassed => Outcome::Bypassed,
            Decision::GuardrailBlocked => Outcome::GuardrailBlocked,
            Decision::GuardrailCapped => Outcome::GuardrailCapped,
        }
    }
}

impl Outcome {
    pub fn is_gated(self) -> bool {
        !matches!(self, Outcome::ColdStart | Outcome::Refractory | Outcome::Ungated)
    }
}

/// One row of the trace CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub day: usize,
    /// Minute of day.
    pub clock: f64,
    pub bg_true: f64,
    pub bg_observed: f64,
    pub iob: f64,
    pub cob: f64,
    pub meal_carbs: f64,
    pub state: Option<usize>,
    /// Arm chosen by the bandit: grid index for TSODE, multiplier index for TSMPC.
    pub action: Option<usize>,
    pub prebolus: f64,
    pub proposed_dose: f64,
    pub decision: Outcome,
    /// Gate output; equals the proposal for ungated steps.
    pub final_dose: f64,
    pub delivered_dose: f64,
    pub w_lcb: Option<f64>,
    pub s_lcb: Option<f64>,
    pub q_alpha: Option<f64>,
    pub reward: Option<f64>,
}

pub const TRACE_HEADER: [&str; 19] = [
    "step",
    "day",
    "clock",
    "bg_true",
    "bg_observed",
    "iob",
    "cob",
    "meal_carbs",
    "state",
    "action",
    "prebolus",
    "proposed_dose",
    "decision",
    "final_dose",
    "delivered_dose",
    "w_lcb",
    "s_lcb",
    "q_alpha",
    "reward",
];

pub fn write_trace_csv<W: Write>(records: &[StepRecord], w: W) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wtr.write_record(TRACE_HEADER)?;
    for r in records {
        wtr.serialize(r)?;
    }
    wtr.flush().map_err(|e| Error::io("trace csv", e))?;
    Ok(())
}

pub fn read_trace_csv<R: Read>(r: R) -> Result<Vec<StepRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != TRACE_HEADER {
        return Err(Error::Config(format!("unexpected trace header {header:?}")));
    }
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Per-episode controller with its learned or tuned state.
#[derive(Debug, Clone)]
pub enum Controller {
    MealBolus,
    Pid(PidState),
    Tsmpc {
        model: AnalyticModel,
        table: PolicyTable,
    },
    Tsode {
        table: PolicyTable,
        forecaster: Option<ForecastSource>,
        calibration: Option<ConformalCalibration>,
    },
}

/// Where the TSODE gate gets its forecasts.
#[derive(Debug, Clone)]
pub enum ForecastSource {
    Learned(Box<ForecasterModel>),
    /// Noise-free rollout of the true patient state, meals included.
    Oracle,
}

/// `K`-step noise-free forecast from the true patient state with `dose`
/// delivered now, carrying the variance floor.
pub fn oracle_forecast(patient: &PatientState, params: &PatientParams, cfg: &LoopConfig, dose: f64) -> Result<ForecastDist> {
    let mut x = *patient;
    let mut mu = Vec::with_capacity(cfg.safety.k);
    for i in 0..cfg.safety.k {
        let clock = x.clock.rem_euclid(MIN_PER_DAY);
        let meals = vpatient::meals_due(&cfg.meals, clock, cfg.dt);
        let u = if i == 0 { dose } else { 0.0 };
        x = vpatient::step(&x, params, u, params.basal_rate, &meals, cfg.dt)?;
        mu.push(x.plasma_glucose);
    }
    Ok(ForecastDist {
        var: vec![VARIANCE_FLOOR; mu.len()],
        mu,
        dose,
    })
}

impl Controller {
    pub fn fresh(kind: ControllerKind, params: &PatientParams, cfg: &LoopConfig) -> Self {
        let n_states = cfg.bins.n_states();
        match kind {
            ControllerKind::MealBolus => Controller::MealBolus,
            ControllerKind::Pid => Controller::Pid(PidState::default()),
            ControllerKind::Tsmpc => Controller::Tsmpc {
                model: AnalyticModel::new(params, cfg.tsmpc.horizon, cfg.dt),
                table: PolicyTable::new(n_states, cfg.tsmpc.multipliers.len()),
            },
            ControllerKind::Tsode => Controller::Tsode {
                table: PolicyTable::new(n_states, cfg.grid.len()),
                forecaster: None,
                calibration: None,
            },
        }
    }

    pub fn kind(&self) -> ControllerKind {
        match self {
            Controller::MealBolus => ControllerKind::MealBolus,
            Controller::Pid(_) => ControllerKind::Pid,
            Controller::Tsmpc { .. } => ControllerKind::Tsmpc,
            Controller::Tsode { .. } => ControllerKind::Tsode,
        }
    }

    pub fn table(&self) -> Option<&PolicyTable> {
        match self {
            Controller::Tsmpc { table, .. } | Controller::Tsode { table, .. } => Some(table),
            _ => None,
        }
    }
}

/// Independent random stream for `(seed, patient, stream)`.
pub fn stream_rng(seed: u64, patient: &str, stream: u64) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in patient.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ h);
    rng.set_stream(stream);
    rng
}

pub const POLICY_STREAM: u64 = 1;
pub const SENSOR_STREAM: u64 = 2;

#[derive(Debug, Clone)]
pub struct ControllerState {
    pub window: VecDeque<[f64; N_FEATURES]>,
    pub bolus_history: Vec<(f64, f64)>,
    pub carb_history: Vec<(f64, f64)>,
    pub last_bolus_time: Option<f64>,
    pub policy_rng: ChaCha8Rng,
    pub sensor_rng: ChaCha8Rng,
    pub mode: Mode,
    recent_bg: VecDeque<f64>,
}

impl ControllerState {
    pub fn new(seed: u64, patient: &str) -> Self {
        ControllerState {
            window: VecDeque::new(),
            bolus_history: Vec::new(),
            carb_history: Vec::new(),
            last_bolus_time: None,
            policy_rng: stream_rng(seed, patient, POLICY_STREAM),
            sensor_rng: stream_rng(seed, patient, SENSOR_STREAM),
            mode: Mode::Warmup,
            recent_bg: VecDeque::new(),
        }
    }

    fn prune(&mut self, now: f64) {
        self.bolus_history.retain(|&(t, _)| now - t < DIA_MIN);
        self.carb_history.retain(|&(t, _)| now - t < CARB_ABSORPTION_MIN);
    }
}

struct PendingCredit {
    index: usize,
    state: usize,
    action: usize,
    learn: bool,
    readings: Vec<f64>,
}

/// A patient and controller advanced together; warm-up and evaluation are
/// consecutive phases of the same episode.
pub struct Episode {
    pub name: String,
    pub params: PatientParams,
    pub cfg: LoopConfig,
    pub patient: PatientState,
    pub ctrl: ControllerState,
    pub controller: Controller,
    /// Absolute step counter since the start of the episode.
    pub steps_done: usize,
    trace: Vec<StepRecord>,
    features: Vec<FeatureStep>,
    pending: Vec<PendingCredit>,
}

impl Episode {
    pub fn new(name: &str, params: PatientParams, cfg: LoopConfig, controller: Controller, seed: u64) -> Result<Self> {
        params.validate()?;
        cfg.validate()?;
        Ok(Episode {
            name: name.to_string(),
            patient: vpatient::equilibrium_from(&params),
            params,
            cfg,
            ctrl: ControllerState::new(seed, name),
            controller,
            steps_done: 0,
            trace: Vec::new(),
            features: Vec::new(),
            pending: Vec::new(),
        })
    }

    /// Records of the current phase so far.
    pub fn trace(&self) -> &[StepRecord] {
        &self.trace
    }

    pub fn take_trace(&mut self) -> Vec<StepRecord> {
        std::mem::take(&mut self.trace)
    }

    /// Every observed step so far, as the forecaster sees it.
    pub fn feature_log(&self) -> &[FeatureStep] {
        &self.features
    }

    /// Run `days` more days in `mode`. Starts a new phase trace; on error the
    /// partial trace stays available through [`Episode::trace`].
    pub fn run(&mut self, days: usize, mode: Mode) -> Result<()> {
        if days == 0 {
            return Err(Error::Config("days must be >= 1".into()));
        }
        self.trace.clear();
        self.pending.clear();
        self.ctrl.mode = mode;
        for _ in 0..days * self.cfg.steps_per_day() {
            self.step_once()?;
        }
        Ok(())
    }

    fn step_once(&mut self) -> Result<()> {
        let now = self.patient.clock;
        let minute = now.rem_euclid(MIN_PER_DAY);
        let index = self.trace.len();
        let bg_true = self.patient.plasma_glucose;
        let bg_obs = vpatient::observe(&self.patient, &mut self.ctrl.sensor_rng, self.cfg.noise_sd);

        self.credit(bg_obs)?;
        let cfg = &self.cfg;

        let meals = vpatient::meals_due(&cfg.meals, now, cfg.dt);
        let carbs: f64 = meals.iter().map(|m| m.carbs).sum();
        if carbs > 0.0 {
            self.ctrl.carb_history.push((now, carbs));
        }
        self.ctrl.prune(now);
        let iob = iob_of(&self.ctrl.bolus_history, now);
        let cob = cob_of(&self.ctrl.carb_history, now);
        let row = feature_row(bg_obs, iob, cob, minute);
        push_capped(&mut self.ctrl.window, row, cfg.window);
        push_capped(&mut self.ctrl.recent_bg, bg_obs, 3);
        let trend = trend_of(self.ctrl.recent_bg.make_contiguous(), cfg.dt);

        let mut rec = StepRecord {
            step: index,
            day: self.steps_done / cfg.steps_per_day(),
            clock: minute,
            bg_true,
            bg_observed: bg_obs,
            iob,
            cob,
            meal_carbs: carbs,
            state: None,
            action: None,
            prebolus: 0.0,
            proposed_dose: 0.0,
            decision: Outcome::ColdStart,
            final_dose: 0.0,
            delivered_dose: 0.0,
            w_lcb: None,
            s_lcb: None,
            q_alpha: None,
            reward: None,
        };
        let credit = self.decide(&mut rec, &meals, trend)?;
        let delivered = rec.delivered_dose;

        self.features.push(FeatureStep {
            features: row,
            bg: bg_obs,
            dose: delivered,
        });
        if delivered > 0.0 {
            self.ctrl.bolus_history.push((now, delivered));
            self.ctrl.last_bolus_time = Some(now);
        }
        if let Some((state, action)) = credit {
            self.pending.push(PendingCredit {
                index,
                state,
                action,
                learn: self.ctrl.mode == Mode::Warmup,
                readings: Vec::with_capacity(self.cfg.credit_steps),
            });
        }
        self.trace.push(rec);
        self.steps_done += 1;

        self.patient = vpatient::step(
            &self.patient,
            &self.params,
            delivered,
            self.params.basal_rate,
            &meals,
            self.cfg.dt,
        )
        .map_err(|e| match e {
            Error::Numerical(msg) => Error::Numerical(format!("{} step {}: {msg}", self.name, self.steps_done)),
            other => other,
        })?;
        Ok(())
    }

    /// Fill `rec` with the proposal and delivered dose; returns the
    /// (state, action) pair to credit, if any.
    fn decide(&mut self, rec: &mut StepRecord, meals: &[MealEvent], trend: f64) -> Result<Option<(usize, usize)>> {
        let cfg = &self.cfg;
        let ctrl = &mut self.ctrl;
        let bg = rec.bg_observed;
        let state = cfg.bins.discretize(bg, trend);
        let warm = ctrl.window.len() >= cfg.window;
        let refractory = ctrl
            .last_bolus_time
            .is_some_and(|t| self.patient.clock - t < cfg.refractory - 1e-9);
        let select_mode = match ctrl.mode {
            Mode::Warmup => SelectMode::Explore,
            Mode::Eval => SelectMode::Greedy,
        };
        // Evaluation reads unobserved states from their nearest observed neighbour.
        let lookup = |table: &PolicyTable| match select_mode {
            SelectMode::Explore => state,
            SelectMode::Greedy => table.nearest_observed(state, &cfg.bins),
        };

        // PID integrates every step so its state does not depend on the cold start.
        let pid_u = match &mut self.controller {
            Controller::Pid(st) => Some(baselines::pid_controller(bg, st, &cfg.pid, cfg.dt)?),
            _ => None,
        };
        if !warm {
            return Ok(None);
        }

        match &mut self.controller {
            Controller::MealBolus => {
                let u = baselines::meal_bolus_controller(meals, self.params.icr)?;
                rec.prebolus = u;
                rec.proposed_dose = u;
                Ok(ungated(rec, refractory, None))
            }
            Controller::Pid(_) => {
                rec.proposed_dose = cfg.grid.project(pid_u.unwrap_or(0.0));
                Ok(ungated(rec, refractory, None))
            }
            Controller::Tsmpc { model, table } => {
                let now = self.patient.clock;
                let ages = |h: &[(f64, f64)]| h.iter().map(|&(t, x)| (now - t, x)).collect::<Vec<_>>();
                let boluses = ages(&ctrl.bolus_history);
                // the meal arriving now is already in the history
                let meals_past = ages(&ctrl.carb_history);
                let d = baselines::tsmpc_controller(
                    model,
                    bg,
                    0.0,
                    InputHistory {
                        boluses: &boluses,
                        meals: &meals_past,
                    },
                    lookup(table),
                    &cfg.tsmpc,
                    table,
                    select_mode,
                    &cfg.grid,
                    &mut ctrl.policy_rng,
                );
                rec.state = Some(state);
                rec.action = Some(d.arm);
                rec.proposed_dose = d.dose;
                let credit = (d.mpc_dose > 0.0).then_some((state, d.arm));
                Ok(ungated(rec, refractory, credit))
            }
            Controller::Tsode {
                table,
                forecaster,
                calibration,
            } => {
                let a = table.select(lookup(table), &mut ctrl.policy_rng, select_mode);
                let pre = prebolus(meals, self.params.icr, cfg.grid.max())?;
                rec.state = Some(state);
                rec.prebolus = pre;
                rec.proposed_dose = cfg.grid.project(cfg.grid.doses[a] + pre);
                rec.action = Some(a);
                if refractory && rec.proposed_dose > 0.0 {
                    rec.decision = Outcome::Refractory;
                    return Ok(None);
                }
                let input = GateInput {
                    proposed: rec.proposed_dose,
                    bg_now: bg,
                    trend,
                    iob: rec.iob,
                    minute_of_day: rec.clock,
                };
                let cal = match ctrl.mode {
                    Mode::Warmup => None,
                    Mode::Eval => calibration.as_ref(),
                };
                let verdict = match (cal, forecaster.as_ref()) {
                    (Some(cal), Some(ForecastSource::Learned(model))) if rec.proposed_dose > 0.0 => {
                        let window = FeatureWindow {
                            rows: ctrl.window.iter().copied().collect(),
                        };
                        let prepared = model.prepare(&window)?;
                        safegate::gate(input, |u| prepared.predict(u), Some(cal), &cfg.safety, &cfg.grid)?
                    }
                    (Some(cal), Some(ForecastSource::Oracle)) => {
                        let (patient, params) = (&self.patient, &self.params);
                        safegate::gate(input, |u| oracle_forecast(patient, params, cfg, u), Some(cal), &cfg.safety, &cfg.grid)?
                    }
                    (Some(_), None) => {
                        return Err(Error::Config("TSODE evaluation needs a trained forecaster".into()));
                    }
                    _ => safegate::gate(input, |_| unreachable_forecast(), cal, &cfg.safety, &cfg.grid)?,
                };
                rec.decision = verdict.decision.into();
                rec.final_dose = verdict.final_dose;
                rec.delivered_dose = verdict.final_dose;
                rec.w_lcb = verdict.w_lcb;
                rec.s_lcb = verdict.s_lcb;
                rec.q_alpha = verdict.q_alpha;
                Ok((pre == 0.0).then_some((state, a)))
            }
        }
    }

    fn credit(&mut self, bg_obs: f64) -> Result<()> {
        let need = self.cfg.credit_steps;
        for p in &mut self.pending {
            p.readings.push(bg_obs);
        }
        let mut i = 0;
        while i < self.pending.len() {
            if self.pending[i].readings.len() < need {
                i += 1;
                continue;
            }
            let p = self.pending.swap_remove(i);
            let r = shaped_reward(&p.readings)?;
            if let Some(rec) = self.trace.get_mut(p.index) {
                rec.reward = Some(r);
            }
            if p.learn {
                match &mut self.controller {
                    Controller::Tsmpc { table, .. } | Controller::Tsode { table, .. } => table.update(p.state, p.action, r)?,
                    _ => {}
                }
            }
        }
        Ok(())
    }
}

fn ungated(rec: &mut StepRecord, refractory: bool, credit: Option<(usize, usize)>) -> Option<(usize, usize)> {
    if refractory && rec.proposed_dose > 0.0 {
        rec.decision = Outcome::Refractory;
        return None;
    }
    rec.decision = Outcome::Ungated;
    rec.final_dose = rec.proposed_dose;
    rec.delivered_dose = rec.proposed_dose;
    credit
}

fn unreachable_forecast() -> Result<crate::forecaster::ForecastDist> {
    Err(Error::Usage("gate asked for a forecast without a calibration".into()))
}

fn push_capped<T>(q: &mut VecDeque<T>, v: T, cap: usize) {
    if q.len() == cap {
        q.pop_front();
    }
    q.push_back(v);
}

/// Fresh episode of `days` days for one controller.
pub fn run_episode(
    name: &str,
    params: &PatientParams,
    cfg: &LoopConfig,
    controller: Controller,
    days: usize,
    seed: u64,
    mode: Mode,
) -> Result<Vec<StepRecord>> {
    let mut ep = Episode::new(name, *params, cfg.clone(), controller, seed)?;
    ep.run(days, mode)?;
    Ok(ep.take_trace())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iob_examples() {
        let h = [(0.0, 2.0)];
        assert_eq!(iob_of(&h, 0.0), 2.0);
        assert!((iob_of(&h, 120.0) - 1.0).abs() < 1e-12);
        assert_eq!(iob_of(&h, 240.0), 0.0);
        assert_eq!(iob_of(&h, 500.0), 0.0);
    }

    #[test]
    fn cob_examples() {
        let h = [(0.0, 60.0)];
        assert!((cob_of(&h, 90.0) - 30.0).abs() < 1e-12);
        assert_eq!(cob_of(&h, 180.0), 0.0);
        assert_eq!(cob_of(&[], 10.0), 0.0);
    }

    #[test]
    fn prebolus_examples() {
        let m = |c| vec![MealEvent::new(480.0, c).unwrap()];
        assert_eq!(prebolus(&m(50.0), 10.0, 3.0).unwrap(), 3.0);
        assert!((prebolus(&m(15.0), 10.0, 3.0).unwrap() - 1.5).abs() < 1e-12);
        assert_eq!(prebolus(&[], 10.0, 3.0).unwrap(), 0.0);
        assert!(prebolus(&m(15.0), 0.0, 3.0).is_err());
    }

    #[test]
    fn project_examples() {
        let g = ActionGrid::default();
        assert_eq!(project(1.47, &g), 1.4);
        assert_eq!(project(1.5, &g), 1.4);
        assert_eq!(project(0.0, &g), 0.0);
    }

    #[test]
    fn controller_names_round_trip() {
        for k in ControllerKind::ALL {
            assert_eq!(k.as_str().parse::<ControllerKind>().unwrap(), k);
        }
        assert!("mpc".parse::<ControllerKind>().is_err());
    }

    fn one_day(kind: ControllerKind, seed: u64) -> Vec<StepRecord> {
        let p = PatientParams::default();
        let cfg = LoopConfig::default();
        run_episode("adult#001", &p, &cfg, Controller::fresh(kind, &p, &cfg), 1, seed, Mode::Warmup).unwrap()
    }

    #[test]
    fn day_has_480_records_and_cold_start() {
        for kind in ControllerKind::ALL {
            let t = one_day(kind, 1);
            assert_eq!(t.len(), 480);
            assert!(t[..9].iter().all(|r| r.decision == Outcome::ColdStart && r.delivered_dose == 0.0));
        }
    }

    #[test]
    fn episodes_are_deterministic() {
        for kind in ControllerKind::ALL {
            assert_eq!(one_day(kind, 5), one_day(kind, 5));
        }
        assert_ne!(one_day(ControllerKind::Tsode, 5), one_day(ControllerKind::Tsode, 6));
    }

    #[test]
    fn breakfast_prebolus_at_step_160() {
        let t = one_day(ControllerKind::Tsode, 2);
        assert_eq!(t[160].meal_carbs, 50.0);
        assert_eq!(t[160].clock, 480.0);
        assert!(t[160].prebolus > 0.0);
        assert!(t[160].proposed_dose >= t[160].prebolus - 0.1);
        assert!(t.iter().filter(|r| r.prebolus > 0.0).count() == 4);
    }

    #[test]
    fn refractory_spacing_and_grid_doses() {
        let cfg = LoopConfig::default();
        for kind in [ControllerKind::Pid, ControllerKind::Tsmpc, ControllerKind::Tsode] {
            let t = one_day(kind, 3);
            let times: Vec<f64> = t
                .iter()
                .filter(|r| r.delivered_dose > 0.0)
                .map(|r| r.step as f64 * cfg.dt)
                .collect();
            assert!(times.windows(2).all(|w| w[1] - w[0] >= 20.0 - 1e-9), "{kind}");
            for r in &t {
                assert!(cfg.grid.index_of(r.delivered_dose).is_some());
                assert!(r.delivered_dose <= r.final_dose + 1e-12);
                assert!(r.final_dose <= r.proposed_dose + 1e-12);
            }
        }
    }

    #[test]
    fn iob_matches_logged_history() {
        let t = one_day(ControllerKind::Tsode, 4);
        let mut hist = Vec::new();
        for r in &t {
            let now = r.step as f64 * 3.0;
            assert!((iob_of(&hist, now) - r.iob).abs() < 1e-9);
            if r.delivered_dose > 0.0 {
                hist.push((now, r.delivered_dose));
            }
        }
    }

    #[test]
    fn trace_csv_round_trip() {
        let t = one_day(ControllerKind::Tsode, 7);
        let mut buf = Vec::new();
        write_trace_csv(&t, &mut buf).unwrap();
        let header = String::from_utf8(buf.clone()).unwrap();
        assert!(header.starts_with(&TRACE_HEADER.join(",")));
        assert_eq!(read_trace_csv(buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn warmup_learns_and_eval_freezes() {
        let p = PatientParams::default();
        let cfg = LoopConfig::default();
        let mut ep = Episode::new("adult#001", p, cfg.clone(), Controller::fresh(ControllerKind::Tsode, &p, &cfg), 9).unwrap();
        ep.run(1, Mode::Warmup).unwrap();
        let learned = ep.controller.table().unwrap().clone();
        let total: u64 = (0..learned.n_states())
            .flat_map(|s| (0..learned.n_actions()).map(move |a| (s, a)))
            .map(|(s, a)| learned.arm(s, a).n)
            .sum();
        assert!(total > 100, "{total}");
        ep.run(1, Mode::Eval).unwrap();
        assert_eq!(ep.controller.table().unwrap(), &learned);
    }

    #[test]
    fn missing_forecaster_fails_loudly_with_partial_trace() {
        let p = PatientParams::default();
        let cfg = LoopConfig::default();
        let controller = Controller::Tsode {
            table: PolicyTable::new(cfg.bins.n_states(), cfg.grid.len()),
            forecaster: None,
            calibration: Some(ConformalCalibration::exact()),
        };
        let mut ep = Episode::new("adult#001", p, cfg.clone(), controller, 9).unwrap();
        assert!(ep.run(1, Mode::Eval).is_err());
        assert_eq!(ep.trace().len(), cfg.window - 1);
    }
}
