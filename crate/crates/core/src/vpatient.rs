//! Virtual adult patient with delayed insulin and carbohydrate absorption.
//!
//! Plasma glucose follows minimal-model dynamics
//!
//! ```text
//! dG/dt  = EGP - k_cl * G - IS * k_i * S2 + CS * F * k_g * D2
//! dS1/dt = basal - k_i * S1          dS2/dt = k_i * (S1 - S2)
//! dD1/dt = -k_g * D1                 dD2/dt = k_g * (D1 - D2)
//! ```
//!
//! where `S1, S2` are the subcutaneous insulin depots (U), `D1, D2` the gut
//! carbohydrate compartments (g), `k = ln 2 / halftime`, and `F` the carbohydrate
//! bioavailability. Boluses land in `S1` and meals in `D1` at the start of a step.
//! Endogenous production is solved so that the basal rate holds `G` exactly at
//! `initial_bg`.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of ingested carbohydrate that reaches plasma.
pub const BIOAVAILABILITY: f64 = 0.9;
/// Physiological clamp applied after every step.
pub const BG_CLAMP: (f64, f64) = (20.0, 600.0);
/// CGM reportable range.
pub const CGM_RANGE: (f64, f64) = (40.0, 400.0);
/// Internal RK4 substep (min).
pub const SUBSTEP_MIN: f64 = 1.0;
pub const MIN_PER_DAY: f64 = 1440.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatientParams {
    /// mg/dL drop per U of insulin absorbed.
    pub insulin_sensitivity: f64,
    /// mg/dL rise per g of carbohydrate absorbed.
    pub carb_sensitivity: f64,
    /// 1/min
    pub glucose_clearance_rate: f64,
    /// min
    pub insulin_absorption_halftime: f64,
    /// min
    pub carb_absorption_halftime: f64,
    /// mg/dL/min; always recomputed from the other fields by [`PatientParams::balanced`].
    pub endogenous_production: f64,
    /// U/hr
    pub basal_rate: f64,
    /// g/U
    pub icr: f64,
    /// mg/dL; equilibrium glucose under `basal_rate`.
    pub initial_bg: f64,
}

impl Default for PatientParams {
    fn default() -> Self {
        PatientParams {
            insulin_sensitivity: 45.0,
            carb_sensitivity: 3.5,
            glucose_clearance_rate: 0.003,
            insulin_absorption_halftime: 30.0,
            carb_absorption_halftime: 20.0,
            endogenous_production: 0.0,
            basal_rate: 1.0,
            icr: 15.0,
            initial_bg: 200.0,
        }
        .balanced()
    }
}

impl PatientParams {
    /// Returns a copy whose endogenous production balances basal insulin and
    /// clearance at `initial_bg`.
    pub fn balanced(mut self) -> Self {
        self.endogenous_production = self.glucose_clearance_rate * self.initial_bg
            + self.insulin_sensitivity * self.basal_rate / 60.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("insulin_sensitivity", self.insulin_sensitivity),
            ("carb_sensitivity", self.carb_sensitivity),
            ("glucose_clearance_rate", self.glucose_clearance_rate),
            ("insulin_absorption_halftime", self.insulin_absorption_halftime),
            ("carb_absorption_halftime", self.carb_absorption_halftime),
            ("basal_rate", self.basal_rate),
            ("icr", self.icr),
            ("initial_bg", self.initial_bg),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(BG_CLAMP.0..=BG_CLAMP.1).contains(&self.initial_bg) {
            return Err(Error::Config(format!(
                "initial_bg {} outside {:?}",
                self.initial_bg, BG_CLAMP
            )));
        }
        Ok(())
    }

    /// Insulin transfer rate (1/min).
    pub fn insulin_rate(&self) -> f64 {
        std::f64::consts::LN_2 / self.insulin_absorption_halftime
    }

    /// Gut transfer rate (1/min).
    pub fn carb_rate(&self) -> f64 {
        std::f64::consts::LN_2 / self.carb_absorption_halftime
    }

    /// Fraction of a bolus absorbed into plasma `t` minutes after delivery.
    pub fn insulin_absorbed_fraction(&self, t: f64) -> f64 {
        chain_fraction(self.insulin_rate(), t)
    }

    /// Fraction of a meal absorbed into plasma `t` minutes after ingestion.
    pub fn carb_absorbed_fraction(&self, t: f64) -> f64 {
        chain_fraction(self.carb_rate(), t)
    }
}

/// Cumulative output of a two-compartment chain with equal rates `k` after a
/// unit impulse: `1 - e^{-kt}(1 + kt)`.
fn chain_fraction(k: f64, t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    1.0 - (-k * t).exp() * (1.0 + k * t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatientState {
    pub plasma_glucose: f64,
    pub insulin_sc1: f64,
    pub insulin_sc2: f64,
    pub gut_carbs1: f64,
    pub gut_carbs2: f64,
    /// Minutes since episode start.
    pub clock: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MealEvent {
    /// Minutes after midnight, in `[0, 1440)`.
    pub time_of_day: f64,
    /// g
    pub carbs: f64,
}

impl MealEvent {
    pub fn new(time_of_day: f64, carbs: f64) -> Result<Self> {
        if !(0.0..MIN_PER_DAY).contains(&time_of_day) {
            return Err(Error::Config(format!("meal time {time_of_day} outside [0, 1440)")));
        }
        if !(carbs >= 0.0 && carbs.is_finite()) {
            return Err(Error::Config(format!("meal carbs must be >= 0, got {carbs}")));
        }
        Ok(MealEvent { time_of_day, carbs })
    }
}

/// Breakfast, lunch, snack and dinner used throughout the benchmark.
pub fn standard_meal_schedule() -> Vec<MealEvent> {
    vec![
        MealEvent { time_of_day: 480.0, carbs: 50.0 },
        MealEvent { time_of_day: 750.0, carbs: 70.0 },
        MealEvent { time_of_day: 960.0, carbs: 15.0 },
        MealEvent { time_of_day: 1140.0, carbs: 60.0 },
    ]
}

/// Meals whose time of day falls in `[clock, clock + dt)`, wrapping at midnight.
pub fn meals_due(schedule: &[MealEvent], clock: f64, dt: f64) -> Vec<MealEvent> {
    let start = clock.rem_euclid(MIN_PER_DAY);
    schedule
        .iter()
        .filter(|m| {
            let offset = (m.time_of_day - start).rem_euclid(MIN_PER_DAY);
            offset < dt
        })
        .copied()
        .collect()
}

#[derive(Clone, Copy)]
struct Deriv([f64; 5]);

fn derivative(x: &[f64; 5], p: &PatientParams, basal_per_min: f64) -> Deriv {
    let [g, s1, s2, d1, d2] = *x;
    let ki = p.insulin_rate();
    let kg = p.carb_rate();
    Deriv([
        p.endogenous_production - p.glucose_clearance_rate * g
            - p.insulin_sensitivity * ki * s2
            + p.carb_sensitivity * BIOAVAILABILITY * kg * d2,
        basal_per_min - ki * s1,
        ki * (s1 - s2),
        -kg * d1,
        kg * (d1 - d2),
    ])
}

fn axpy(x: &[f64; 5], k: &Deriv, h: f64) -> [f64; 5] {
    let mut out = *x;
    for (o, d) in out.iter_mut().zip(k.0.iter()) {
        *o += h * d;
    }
    out
}

/// Advance the patient by `dt` minutes.
///
/// `meals_due` are added to the first gut compartment and `bolus` to the first
/// insulin depot before integrating.
pub fn step(
    state: &PatientState,
    params: &PatientParams,
    bolus: f64,
    basal: f64,
    meals_due: &[MealEvent],
    dt: f64,
) -> Result<PatientState> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("dt must be positive, got {dt}")));
    }
    if !(bolus >= 0.0) {
        return Err(Error::Config(format!("bolus must be >= 0, got {bolus}")));
    }
    let carbs: f64 = meals_due.iter().map(|m| m.carbs).sum();
    let mut x = [
        state.plasma_glucose,
        state.insulin_sc1 + bolus,
        state.insulin_sc2,
        state.gut_carbs1 + carbs,
        state.gut_carbs2,
    ];
    let basal_per_min = basal / 60.0;
    let n = (dt / SUBSTEP_MIN).ceil().max(1.0) as usize;
    let h = dt / n as f64;
    for _ in 0..n {
        let k1 = derivative(&x, params, basal_per_min);
        let k2 = derivative(&axpy(&x, &k1, h / 2.0), params, basal_per_min);
        let k3 = derivative(&axpy(&x, &k2, h / 2.0), params, basal_per_min);
        let k4 = derivative(&axpy(&x, &k3, h), params, basal_per_min);
        for i in 0..5 {
            x[i] += h / 6.0 * (k1.0[i] + 2.0 * k2.0[i] + 2.0 * k3.0[i] + k4.0[i]);
        }
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "patient state component {i} blew up at clock {}",
            state.clock
        )));
    }
    Ok(PatientState {
        plasma_glucose: x[0].clamp(BG_CLAMP.0, BG_CLAMP.1),
        insulin_sc1: x[1].max(0.0),
        insulin_sc2: x[2].max(0.0),
        gut_carbs1: x[3].max(0.0),
        gut_carbs2: x[4].max(0.0),
        clock: state.clock + dt,
    })
}

/// Rate at which carbohydrate enters plasma (g/min), after bioavailability.
pub fn carb_appearance_rate(state: &PatientState, params: &PatientParams) -> f64 {
    BIOAVAILABILITY * params.carb_rate() * state.gut_carbs2
}

/// CGM reading: true glucose plus Gaussian noise, clamped to the reportable range.
pub fn observe<R: Rng + ?Sized>(state: &PatientState, noise_rng: &mut R, noise_sd: f64) -> f64 {
    let noise = if noise_sd > 0.0 {
        Normal::new(0.0, noise_sd)
            .expect("noise sd is finite and positive")
            .sample(noise_rng)
    } else {
        0.0
    };
    (state.plasma_glucose + noise).clamp(CGM_RANGE.0, CGM_RANGE.1)
}

/// Steady state under the basal rate with no meals.
pub fn equilibrium_from(params: &PatientParams) -> PatientState {
    let depot = params.basal_rate / 60.0 / params.insulin_rate();
    PatientState {
        plasma_glucose: params.initial_bg,
        insulin_sc1: depot,
        insulin_sc2: depot,
        gut_carbs1: 0.0,
        gut_carbs2: 0.0,
        clock: 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedPatient {
    pub name: String,
    #[serde(flatten)]
    pub params: PatientParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub patients: Vec<NamedPatient>,
}

pub const COHORT_SEED: u64 = 0x5EED_0001;
pub const COHORT_SIZE: usize = 10;
pub const COHORT_SPREAD: f64 = 0.25;

impl Cohort {
    /// Ten virtual adults `adult#001`..`adult#010`, each parameter scaled by an
    /// independent uniform factor in `[1 - spread, 1 + spread]`.
    pub fn generate(base: &PatientParams, size: usize, spread: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut jitter = |v: f64| v * rng.random_range(1.0 - spread..=1.0 + spread);
        let patients = (1..=size)
            .map(|i| {
                let params = PatientParams {
                    insulin_sensitivity: jitter(base.insulin_sensitivity),
                    carb_sensitivity: jitter(base.carb_sensitivity),
                    glucose_clearance_rate: jitter(base.glucose_clearance_rate),
                    insulin_absorption_halftime: jitter(base.insulin_absorption_halftime),
                    carb_absorption_halftime: jitter(base.carb_absorption_halftime),
                    endogenous_production: 0.0,
                    basal_rate: jitter(base.basal_rate),
                    icr: jitter(base.icr),
                    initial_bg: jitter(base.initial_bg),
                }
                .balanced();
                NamedPatient {
                    name: format!("adult#{i:03}"),
                    params,
                }
            })
            .collect();
        Cohort { patients }
    }

    pub fn standard() -> Self {
        Self::generate(&PatientParams::default(), COHORT_SIZE, COHORT_SPREAD, COHORT_SEED)
    }

    pub fn get(&self, name: &str) -> Option<&PatientParams> {
        self.patients.iter().find(|p| p.name == name).map(|p| &p.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cohort: Cohort = toml::from_str(&text)?;
        for p in &mut cohort.patients {
            p.params = p.params.balanced();
            p.params.validate()?;
        }
        Ok(cohort)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
