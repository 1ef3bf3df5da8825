//! Comparison controllers: fixed-ratio meal bolus, PID to a setpoint, and an
//! analytic-model predictive controller whose aggressiveness is picked by
//! Thompson Sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tspolicy::{ActionGrid, PolicyTable, SelectMode};
use crate::vpatient::{MealEvent, PatientParams, BIOAVAILABILITY};

/// Largest single bolus any baseline may deliver (U).
pub const HARD_MAX_DOSE: f64 = 10.0;

/// Carbs over ICR at meal steps, nothing otherwise.
pub fn meal_bolus_controller(meals_due: &[MealEvent], icr: f64) -> Result<f64> {
    if !(icr > 0.0) {
        return Err(Error::Config(format!("icr must be positive, got {icr}")));
    }
    let carbs: f64 = meals_due.iter().map(|m| m.carbs).sum();
    Ok((carbs / icr).min(HARD_MAX_DOSE))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PidConfig {
    /// mg/dL
    pub setpoint: f64,
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Bound on |∫e dt| (mg/dL·min).
    pub integral_clamp: f64,
    /// U per decision.
    pub output_max: f64,
}

impl Default for PidConfig {
    fn default() -> Self {
        PidConfig {
            setpoint: 120.0,
            kp: 0.01,
            ki: 0.0,
            kd: 0.0,
            integral_clamp: 5000.0,
            output_max: 3.0,
        }
    }
}

impl PidConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.kp, self.ki, self.kd].iter().any(|g| !(*g >= 0.0 && g.is_finite())) {
            return Err(Error::Config("PID gains must be finite and >= 0".into()));
        }
        if !(self.integral_clamp.is_finite() && self.integral_clamp >= 0.0) {
            return Err(Error::Config("PID integral clamp must be finite and >= 0".into()));
        }
        if !(self.output_max > 0.0 && self.output_max <= HARD_MAX_DOSE) {
            return Err(Error::Config(format!("PID output_max must lie in (0, {HARD_MAX_DOSE}]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PidState {
    pub integral: f64,
    pub prev_bg: Option<f64>,
}

/// `clamp(kp e + ki ∫e + kd dBG/dt, 0, max)` with `e = bg − setpoint`; the
/// derivative acts on the measurement and the integral is clamped.
pub fn pid_controller(bg_obs: f64, state: &mut PidState, cfg: &PidConfig, dt: f64) -> Result<f64> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("dt must be positive, got {dt}")));
    }
    let e = bg_obs - cfg.setpoint;
    state.integral = (state.integral + e * dt).clamp(-cfg.integral_clamp, cfg.integral_clamp);
    let deriv = state.prev_bg.map_or(0.0, |p| (bg_obs - p) / dt);
    state.prev_bg = Some(bg_obs);
    let u = cfg.kp * e + cfg.ki * state.integral + cfg.kd * deriv;
    Ok(u.clamp(0.0, cfg.output_max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsmpcConfig {
    pub horizon: usize,
    /// mg/dL
    pub target: f64,
    /// Analytic lower bound every predicted step must respect (mg/dL).
    pub bg_min: f64,
    /// Dose penalty `ρ` in `Σ(BG − target)² + ρ u²`.
    pub rho: f64,
    pub multipliers: Vec<f64>,
}

impl Default for TsmpcConfig {
    fn default() -> Self {
        TsmpcConfig {
            horizon: 10,
            target: 120.0,
            bg_min: 80.0,
            rho: 1000.0,
            multipliers: vec![0.5, 0.75, 1.0, 1.25, 1.5],
        }
    }
}

impl TsmpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("TSMPC horizon must be >= 1".into()));
        }
        if self.multipliers.is_empty() || self.multipliers.iter().any(|m| !(*m > 0.0)) {
            return Err(Error::Config("TSMPC multipliers must be positive".into()));
        }
        if !(self.rho >= 0.0) {
            return Err(Error::Config("TSMPC rho must be >= 0".into()));
        }
        Ok(())
    }
}

/// Superposition model built from the patient's own parameters: the insulin
/// action curve and carb appearance curve applied to every known input, past
/// and candidate. Clearance and sensor noise are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticModel {
    pub params: PatientParams,
    pub horizon: usize,
    pub dt: f64,
}

/// Inputs already delivered, as (minutes ago, amount) pairs.
#[derive(Debug, Clone, Copy, Default)]
pub struct InputHistory<'a> {
    pub boluses: &'a [(f64, f64)],
    pub meals: &'a [(f64, f64)],
}

impl AnalyticModel {
    pub fn new(params: &PatientParams, horizon: usize, dt: f64) -> Self {
        AnalyticModel {
            params: *params,
            horizon,
            dt,
        }
    }

    fn insulin_drop(&self, age: f64, tau: f64) -> f64 {
        let p = &self.params;
        p.insulin_sensitivity * (p.insulin_absorbed_fraction(age + tau) - p.insulin_absorbed_fraction(age))
    }

    fn carb_rise(&self, age: f64, tau: f64) -> f64 {
        let p = &self.params;
        p.carb_sensitivity * BIOAVAILABILITY * (p.carb_absorbed_fraction(age + tau) - p.carb_absorbed_fraction(age))
    }

    /// Predicted glucose after each of the `horizon` steps.
    pub fn predict(&self, bg_now: f64, dose: f64, carbs: f64, history: InputHistory<'_>) -> Vec<f64> {
        (1..=self.horizon)
            .map(|k| {
                let tau = k as f64 * self.dt;
                let past_ins: f64 = history.boluses.iter().map(|&(a, d)| d * self.insulin_drop(a, tau)).sum();
                let past_carb: f64 = history.meals.iter().map(|&(a, c)| c * self.carb_rise(a, tau)).sum();
                bg_now - past_ins + past_carb - dose * self.insulin_drop(0.0, tau) + carbs * self.carb_rise(0.0, tau)
            })
            .collect()
    }
}

/// Grid dose minimising the quadratic tracking cost subject to the analytic
/// floor; 0 when every dose, including 0, violates the floor.
pub fn mpc_dose(
    model: &AnalyticModel,
    bg_now: f64,
    carbs: f64,
    history: InputHistory<'_>,
    cfg: &TsmpcConfig,
    grid: &ActionGrid,
) -> f64 {
    let mut best: Option<(f64, f64)> = None;
    for &u in &grid.doses {
        let pred = model.predict(bg_now, u, carbs, history);
        if pred.iter().any(|&g| g < cfg.bg_min) {
            continue;
        }
        let cost: f64 = pred.iter().map(|g| (g - cfg.target).powi(2)).sum::<f64>() + cfg.rho * u * u;
        if best.is_none_or(|(c, _)| cost < c) {
            best = Some((cost, u));
        }
    }
    best.map_or(0.0, |(_, u)| u)
}

/// One TSMPC decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TsmpcDecision {
    /// Multiplier index chosen by the bandit.
    pub arm: usize,
    /// Unscaled MPC dose.
    pub mpc_dose: f64,
    /// Scaled and projected dose.
    pub dose: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn tsmpc_controller<R: Rng + ?Sized>(
    model: &AnalyticModel,
    bg_now: f64,
    carbs_due: f64,
    history: InputHistory<'_>,
    state: usize,
    cfg: &TsmpcConfig,
    table: &PolicyTable,
    mode: SelectMode,
    grid: &ActionGrid,
    rng: &mut R,
) -> TsmpcDecision {
    let arm = table.select(state, rng, mode);
    let u = mpc_dose(model, bg_now, carbs_due, history, cfg, grid);
    TsmpcDecision {
        arm,
        mpc_dose: u,
        dose: grid.project(u * cfg.multipliers[arm]),
    }
}
