//! Probabilistic safety filter: conformal lower bounds on a forecast, a
//! joint level/descent test, bisection for the largest safe dose, the
//! high-and-rising bypass and deterministic guardrails.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecaster::{FeatureWindow, ForecastDist, ForecasterModel, TrainRecord};
use crate::tspolicy::ActionGrid;

/// Fewer calibration records than this and the quantile means nothing.
pub const MIN_CALIBRATION: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SafetyConfig {
    /// Floor on the weighted forecast average (mg/dL).
    #[serde(alias = "L")]
    pub l: f64,
    /// Largest tolerated descent rate (mg/dL/min).
    pub gamma: f64,
    /// Miscoverage level.
    pub alpha: f64,
    pub decay_lambda: f64,
    /// Forecast horizon in steps.
    #[serde(alias = "K")]
    pub k: usize,
    /// min
    pub dt: f64,
    pub bypass_bg: f64,
    pub bypass_trend: f64,
    pub guard_bg_min: f64,
    pub guard_trend_min: f64,
    /// U
    pub iob_cap: f64,
    /// `[start, end)` in minutes of day.
    pub night_window: [f64; 2],
    /// U
    pub night_cap: f64,
    /// U
    pub bisection_tol: f64,
    /// Use one quantile per horizon step instead of a pooled one.
    pub per_step_quantile: bool,
}

impl Default for SafetyConfig {
    fn default() -> Self {
        SafetyConfig {
            l: 90.0,
            gamma: 1.5,
            alpha: 0.1,
            decay_lambda: 0.15,
            k: 10,
            dt: 3.0,
            bypass_bg: 250.0,
            bypass_trend: 0.5,
            guard_bg_min: 90.0,
            guard_trend_min: -1.0,
            iob_cap: 2.5,
            night_window: [0.0, 360.0],
            night_cap: 0.5,
            bisection_tol: 0.01,
            per_step_quantile: false,
        }
    }
}

impl SafetyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if !(self.l > 40.0) {
            return bad(format!("L must exceed 40 mg/dL, got {}", self.l));
        }
        if !(self.gamma > 0.0) {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        if self.k == 0 || !(self.dt > 0.0) {
            return bad(format!("horizon {} and dt {} must be positive", self.k, self.dt));
        }
        if !(self.decay_lambda >= 0.0 && self.decay_lambda.is_finite()) {
            return bad(format!("decay_lambda must be >= 0, got {}", self.decay_lambda));
        }
        if !(self.bisection_tol > 0.0) {
            return bad(format!("bisection_tol must be positive, got {}", self.bisection_tol));
        }
        if !(self.iob_cap >= 0.0 && self.night_cap >= 0.0) {
            return bad("iob_cap and night_cap must be >= 0".into());
        }
        let [a, b] = self.night_window;
        if !(0.0..=1440.0).contains(&a) || !(0.0..=1440.0).contains(&b) {
            return bad(format!("night window {a}..{b} outside one day"));
        }
        Ok(())
    }

    pub fn in_night(&self, minute_of_day: f64) -> bool {
        let [a, b] = self.night_window;
        let m = minute_of_day.rem_euclid(1440.0);
        if a <= b {
            a <= m && m < b
        } else {
            m >= a || m < b
        }
    }
}

/// `w_k ∝ exp(-λ (k-1))`, normalised to sum to one.
pub fn make_weights(k: usize, decay_lambda: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|i| (-decay_lambda * i as f64).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

pub fn weighted_average(mu: &[f64], weights: &[f64]) -> Result<f64> {
    if mu.len() != weights.len() || mu.is_empty() {
        return Err(Error::Shape(format!(
            "weighted average of {} values with {} weights",
            mu.len(),
            weights.len()
        )));
    }
    Ok(mu.iter().zip(weights).map(|(m, w)| m * w).sum())
}

/// Horizon-level slope `(μ_K − bg_now) / (K Δt)`.
pub fn slope(mu_last: f64, bg_now: f64, k: usize, dt: f64) -> f64 {
    (mu_last - bg_now) / (k as f64 * dt)
}

/// Rank-based split-conformal quantile: the `⌈(n+1)(1−α)⌉`-th smallest
/// value, or the largest when that rank exceeds `n`.
pub fn conformal_quantile(sorted: &[f64], alpha: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::INFINITY;
    }
    let rank = ((n as f64 + 1.0) * (1.0 - alpha)).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalCalibration {
    pub alpha: f64,
    /// Pooled absolute residuals, ascending (mg/dL).
    pub residuals: Vec<f64>,
    pub q_alpha: f64,
    /// Per-step quantiles when enabled.
    pub q_per_step: Option<Vec<f64>>,
    /// Calibration records used.
    pub n_calibration: usize,
}

impl ConformalCalibration {
    /// Build from residual rows (one row of `K` absolute errors per record).
    pub fn from_residuals(rows: &[Vec<f64>], alpha: f64, per_step: bool) -> Result<Self> {
        if rows.len() < MIN_CALIBRATION {
            return Err(Error::TooFewCalibration {
                got: rows.len(),
                need: MIN_CALIBRATION,
            });
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        let k = rows[0].len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Shape("ragged residual rows".into()));
        }
        let mut residuals: Vec<f64> = rows.iter().flatten().map(|r| r.abs()).collect();
        if residuals.iter().any(|r| !r.is_finite()) {
            return Err(Error::Numerical("non-finite calibration residual".into()));
        }
        residuals.sort_by(f64::total_cmp);
        let q_alpha = conformal_quantile(&residuals, alpha);
        let q_per_step = per_step.then(|| {
            (0..k)
                .map(|i| {
                    let mut col: Vec<f64> = rows.iter().map(|r| r[i].abs()).collect();
                    col.sort_by(f64::total_cmp);
                    conformal_quantile(&col, alpha)
                })
                .collect()
        });
        Ok(ConformalCalibration {
            alpha,
            residuals,
            q_alpha,
            q_per_step,
            n_calibration: rows.len(),
        })
    }

    /// A calibration that shifts nothing; useful with oracle forecasts.
    pub fn exact() -> Self {
        ConformalCalibration {
            alpha: 0.1,
            residuals: Vec::new(),
            q_alpha: 0.0,
            q_per_step: None,
            n_calibration: 0,
        }
    }

    /// Quantile applied at horizon step `k` (0-based).
    pub fn q_at(&self, k: usize) -> f64 {
        match &self.q_per_step {
            Some(q) => q.get(k).copied().unwrap_or(self.q_alpha),
            None => self.q_alpha,
        }
    }
}

/// Absolute residuals of `model` on held-out `records`, one row per record.
pub fn residuals(model: &ForecasterModel, records: &[TrainRecord]) -> Result<Vec<Vec<f64>>> {
    let windows: Vec<&FeatureWindow> = records.iter().map(|r| &r.window).collect();
    let doses: Vec<f64> = records.iter().map(|r| r.dose).collect();
    let dists = model.predict_batch(&windows, &doses)?;
    Ok(dists
        .iter()
        .zip(records)
        .map(|(d, r)| d.mu.iter().zip(&r.target).map(|(m, y)| (y - m).abs()).collect())
        .collect())
}

pub fn calibrate(
    model: &ForecasterModel,
    records: &[TrainRecord],
    alpha: f64,
    per_step: bool,
) -> Result<ConformalCalibration> {
    if records.len() < MIN_CALIBRATION {
        return Err(Error::TooFewCalibration {
            got: records.len(),
            need: MIN_CALIBRATION,
        });
    }
    ConformalCalibration::from_residuals(&residuals(model, records)?, alpha, per_step)
}

/// Fraction of held-out residuals inside the calibrated band.
pub fn coverage(cal: &ConformalCalibration, rows: &[Vec<f64>]) -> f64 {
    let mut hit = 0usize;
    let mut total = 0usize;
    for row in rows {
        for (k, r) in row.iter().enumerate() {
            total += 1;
            if r.abs() <= cal.q_at(k) {
                hit += 1;
            }
        }
    }
    if total == 0 {
        return f64::NAN;
    }
    hit as f64 / total as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SafetyCheck {
    pub passes: bool,
    pub w_lcb: f64,
    pub s_lcb: f64,
}

/// Shift the forecast down by the conformal quantile and test both the
/// weighted level and the horizon slope.
pub fn check_safety(dist: &ForecastDist, bg_now: f64, cal: &ConformalCalibration, cfg: &SafetyConfig) -> SafetyCheck {
    let k = dist.mu.len();
    if k == 0 {
        return SafetyCheck {
            passes: false,
            w_lcb: f64::NAN,
            s_lcb: f64::NAN,
        };
    }
    let lcb: Vec<f64> = dist.mu.iter().enumerate().map(|(i, m)| m - cal.q_at(i)).collect();
    let weights = make_weights(k, cfg.decay_lambda);
    let w_lcb: f64 = lcb.iter().zip(&weights).map(|(m, w)| m * w).sum();
    let s_lcb = slope(lcb[k - 1], bg_now, k, cfg.dt);
    SafetyCheck {
        passes: w_lcb >= cfg.l && s_lcb >= -cfg.gamma,
        w_lcb,
        s_lcb,
    }
}

/// Largest dose in `[0, u_prop]` that passes `safe`, landed on the grid.
///
/// Bisects assuming monotone safety, floors onto the grid, re-checks the
/// result and falls back to a descending grid scan when the predicate turns
/// out not to be monotone. Returns 0 when the predicate fails at 0.
pub fn largest_safe_dose_by<F>(mut safe: F, u_prop: f64, grid: &ActionGrid, tol: f64) -> Result<f64>
where
    F: FnMut(f64) -> Result<bool>,
{
    if !(u_prop > 0.0) || !safe(0.0)? {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (0.0, u_prop);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if safe(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // The bracket is narrower than a grid step, so at most one grid dose lies in (lo, hi].
    if let Some(&up) = grid.doses.iter().find(|&&d| d > lo && d <= hi && d <= u_prop) {
        if safe(up)? {
            return Ok(up);
        }
    }
    let u = grid.floor(lo);
    if u == 0.0 || safe(u)? {
        return Ok(u);
    }
    for &d in grid.doses.iter().rev() {
        if d > 0.0 && d < u_prop && safe(d)? {
            return Ok(d);
        }
    }
    Ok(0.0)
}

pub fn largest_safe_dose<F>(
    mut predict: F,
    u_prop: f64,
    bg_now: f64,
    cal: &ConformalCalibration,
    cfg: &SafetyConfig,
    grid: &ActionGrid,
) -> Result<f64>
where
    F: FnMut(f64) -> Result<ForecastDist>,
{
    largest_safe_dose_by(
        |u| Ok(check_safety(&predict(u)?, bg_now, cal, cfg).passes),
        u_prop,
        grid,
        cfg.bisection_tol,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accept,
    Scaled,
    Reject,
    Bypassed,
    GuardrailBlocked,
    GuardrailCapped,
}

impl Decision {
    pub fn as_str(self) -> &'static str {
        match self {
            Decision::Accept => "accept",
            Decision::Scaled => "scaled",
            Decision::Reject => "reject",
            Decision::Bypassed => "bypassed",
            Decision::GuardrailBlocked => "guardrail_blocked",
            Decision::GuardrailCapped => "guardrail_capped",
        }
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetyVerdict {
    pub decision: Decision,
    pub proposed_dose: f64,
    pub final_dose: f64,
    /// Lower-bound summaries at the proposed dose, when a forecast was consulted.
    pub w_lcb: Option<f64>,
    pub s_lcb: Option<f64>,
    pub q_alpha: Option<f64>,
}

/// Observation context for one gate call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateInput {
    /// U, on the action grid.
    pub proposed: f64,
    pub bg_now: f64,
    /// mg/dL/min
    pub trend: f64,
    /// U
    pub iob: f64,
    pub minute_of_day: f64,
}

/// Full gate: bypass check, forecast test with dose shrinking, then guardrails.
///
/// `predict` is only consulted for nonzero proposals outside the bypass.
/// Passing `None` for `cal` skips the forecast test entirely (guardrails only).
pub fn gate<F>(
    input: GateInput,
    predict: F,
    cal: Option<&ConformalCalibration>,
    cfg: &SafetyConfig,
    grid: &ActionGrid,
) -> Result<SafetyVerdict>
where
    F: FnMut(f64) -> Result<ForecastDist>,
{
    let GateInput {
        proposed,
        bg_now,
        trend,
        iob,
        minute_of_day,
    } = input;
    let mut verdict = SafetyVerdict {
        decision: Decision::Accept,
        proposed_dose: proposed,
        final_dose: proposed.max(0.0),
        w_lcb: None,
        s_lcb: None,
        q_alpha: cal.map(|c| c.q_alpha),
    };

    if proposed > 0.0 {
        if bg_now >= cfg.bypass_bg && trend >= cfg.bypass_trend {
            verdict.decision = Decision::Bypassed;
        } else if let Some(cal) = cal {
            let mut predict = predict;
            let check = check_safety(&predict(proposed)?, bg_now, cal, cfg);
            verdict.w_lcb = Some(check.w_lcb);
            verdict.s_lcb = Some(check.s_lcb);
            if !check.passes {
                let u = largest_safe_dose(&mut predict, proposed, bg_now, cal, cfg, grid)?;
                verdict.final_dose = u;
                verdict.decision = if u > 0.0 { Decision::Scaled } else { Decision::Reject };
            }
        }
    }

    if bg_now < cfg.guard_bg_min || (trend < cfg.guard_trend_min && bg_now < 120.0) {
        verdict.final_dose = 0.0;
        if verdict.decision != Decision::Reject {
            verdict.decision = Decision::GuardrailBlocked;
        }
        return Ok(verdict);
    }
    let mut capped = verdict.final_dose;
    if iob + capped > cfg.iob_cap {
        capped = grid.floor((cfg.iob_cap - iob).max(0.0));
    }
    if cfg.in_night(minute_of_day) && capped > cfg.night_cap {
        capped = grid.floor(cfg.night_cap);
    }
    if capped < verdict.final_dose {
        verdict.final_dose = capped;
        verdict.decision = Decision::GuardrailCapped;
    }
    Ok(verdict)
}

/// One CSV row per verdict.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerdictRow {
    pub step: usize,
    pub decision: Decision,
    pub proposed: f64,
    #[serde(rename = "final")]
    pub final_dose: f64,
    #[serde(rename = "W_lcb")]
    pub w_lcb: Option<f64>,
    #[serde(rename = "S_lcb")]
    pub s_lcb: Option<f64>,
    pub q_alpha: Option<f64>,
}

impl VerdictRow {
    pub fn new(step: usize, v: &SafetyVerdict) -> Self {
        VerdictRow {
            step,
            decision: v.decision,
            proposed: v.proposed_dose,
            final_dose: v.final_dose,
            w_lcb: v.w_lcb,
            s_lcb: v.s_lcb,
            q_alpha: v.q_alpha,
        }
    }
}

pub fn write_verdicts_csv<W: Write>(rows: &[VerdictRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush().map_err(|e| Error::io("verdict csv", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(mu: Vec<f64>) -> ForecastDist {
        let var = vec![1.0; mu.len()];
        ForecastDist { mu, var, dose: 0.0 }
    }

    fn cal_q(q: f64) -> ConformalCalibration {
        ConformalCalibration {
            q_alpha: q,
            ..ConformalCalibration::exact()
        }
    }

    #[test]
    fn weights_examples() {
        let w = make_weights(3, 0.5);
        let e = [1.0, (-0.5f64).exp(), (-1.0f64).exp()];
        let t: f64 = e.iter().sum();
        for (a, b) in w.iter().zip(e) {
            assert!((a - b / t).abs() < 1e-12);
        }
        assert!((weighted_average(&[120.0, 100.0, 80.0], &w).unwrap() - 106.41).abs() < 0.01);
        let w = make_weights(2, std::f64::consts::LN_2);
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-12 && (w[1] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(make_weights(4, 0.0), vec![0.25; 4]);
        assert_eq!(weighted_average(&[7.0, 9.0], &[1.0, 0.0]).unwrap(), 7.0);
        assert!(weighted_average(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn slope_examples() {
        assert_eq!(slope(100.0, 130.0, 10, 3.0), -1.0);
        assert_eq!(slope(160.0, 130.0, 10, 3.0), 1.0);
        assert_eq!(slope(130.0, 130.0, 10, 3.0), 0.0);
    }

    #[test]
    fn quantile_rule() {
        let r: Vec<f64> = (1..=9).map(f64::from).collect();
        assert_eq!(conformal_quantile(&r, 0.1), 9.0);
        assert_eq!(conformal_quantile(&[0.0; 30], 0.1), 0.0);
        // rank beyond n clamps to the maximum
        assert_eq!(conformal_quantile(&[1.0, 2.0, 3.0], 0.01), 3.0);
        let rows: Vec<Vec<f64>> = (0..19).map(|i| vec![i as f64]).collect();
        assert!(matches!(
            ConformalCalibration::from_residuals(&rows, 0.1, false),
            Err(Error::TooFewCalibration { got: 19, .. })
        ));
    }

    #[test]
    fn check_safety_examples() {
        let cfg = SafetyConfig::default();
        let l = cfg.l;
        let flat = dist(vec![l + 10.0; 10]);
        assert!(check_safety(&flat, l + 10.0, &cal_q(0.0), &cfg).passes);
        let c = check_safety(&flat, l + 10.0, &cal_q(20.0), &cfg);
        assert!(!c.passes);
        assert!((c.w_lcb - (l - 10.0)).abs() < 1e-9);

        let bg_now = 200.0;
        let q = 5.0;
        let end = bg_now - (cfg.gamma * 10.0 * cfg.dt + q + 1.0);
        let falling: Vec<f64> = (1..=10).map(|i| bg_now + (end - bg_now) * i as f64 / 10.0).collect();
        let c = check_safety(&dist(falling), bg_now, &cal_q(q), &cfg);
        assert!(c.s_lcb < -cfg.gamma && !c.passes);
    }

    #[test]
    fn largest_safe_dose_examples() {
        let grid = ActionGrid::default();
        let u = largest_safe_dose_by(|u| Ok(u <= 1.37), 3.0, &grid, 0.01).unwrap();
        assert!((u - 1.2).abs() < 1e-12);
        assert_eq!(largest_safe_dose_by(|_| Ok(false), 3.0, &grid, 0.01).unwrap(), 0.0);
        // non-monotone: safe only on [0, 0.3] and exactly around 2.0
        let u = largest_safe_dose_by(|u| Ok(u <= 0.3 || (1.95..=2.05).contains(&u)), 3.0, &grid, 0.01).unwrap();
        assert!(u == 0.2 || (u - 2.0).abs() < 1e-9);
    }

    fn input(proposed: f64, bg_now: f64, trend: f64) -> GateInput {
        GateInput {
            proposed,
            bg_now,
            trend,
            iob: 0.0,
            minute_of_day: 720.0,
        }
    }

    #[test]
    fn gate_examples() {
        let cfg = SafetyConfig::default();
        let grid = ActionGrid::default();
        let never = |_: f64| -> Result<ForecastDist> { panic!("forecast consulted") };
        let cal = cal_q(0.0);

        let v = gate(input(0.0, 150.0, 0.0), never, Some(&cal), &cfg, &grid).unwrap();
        assert_eq!((v.decision, v.final_dose), (Decision::Accept, 0.0));

        let v = gate(input(2.0, 260.0, 1.0), never, Some(&cal), &cfg, &grid).unwrap();
        assert_eq!((v.decision, v.final_dose), (Decision::Bypassed, 2.0));

        for p in [0.0, 1.0, 3.0] {
            let v = gate(input(p, 85.0, 0.0), |_| Ok(dist(vec![200.0; 10])), Some(&cal), &cfg, &grid).unwrap();
            assert_eq!((v.decision, v.final_dose), (Decision::GuardrailBlocked, 0.0));
        }
        // bypass never disables guardrails
        let low_bypass = SafetyConfig {
            bypass_bg: 80.0,
            ..cfg.clone()
        };
        let v = gate(input(1.0, 85.0, 1.0), never, Some(&cal), &low_bypass, &grid).unwrap();
        assert_eq!((v.decision, v.final_dose), (Decision::GuardrailBlocked, 0.0));
    }

    #[test]
    fn gate_scales_and_caps() {
        let cfg = SafetyConfig {
            iob_cap: 5.0,
            ..SafetyConfig::default()
        };
        let grid = ActionGrid::default();
        let cal = cal_q(0.0);
        // each unit takes 20 mg/dL off the whole trajectory: the level bound
        // allows 2.5 U, the descent bound (140 - 20u - 140) / 30 >= -1.5 only 2.25 U
        let model = |u: f64| Ok(dist(vec![140.0 - 20.0 * u; 10]));
        let v = gate(input(3.0, 140.0, 0.0), model, Some(&cal), &cfg, &grid).unwrap();
        assert_eq!(v.decision, Decision::Scaled);
        assert!((v.final_dose - 2.2).abs() < 1e-9);

        let mut i = input(3.0, 200.0, 0.0);
        i.iob = 4.3;
        let v = gate(i, |_| Ok(dist(vec![200.0; 10])), Some(&cal), &cfg, &grid).unwrap();
        assert_eq!(v.decision, Decision::GuardrailCapped);
        assert!((v.final_dose - 0.6).abs() < 1e-9);

        let mut i = input(2.0, 200.0, 0.0);
        i.minute_of_day = 120.0;
        let v = gate(i, |_| Ok(dist(vec![200.0; 10])), Some(&cal), &cfg, &grid).unwrap();
        assert_eq!(v.decision, Decision::GuardrailCapped);
        assert!((v.final_dose - 0.4).abs() < 1e-9);

        let v = gate(input(1.0, 140.0, 0.0), |_| Ok(dist(vec![60.0; 10])), Some(&cal), &cfg, &grid).unwrap();
        assert_eq!((v.decision, v.final_dose), (Decision::Reject, 0.0));
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = SafetyConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: SafetyConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        let partial: SafetyConfig = toml::from_str("L = 100.0\nalpha = 0.2").unwrap();
        assert_eq!((partial.l, partial.alpha, partial.k), (100.0, 0.2, 10));
        assert!(SafetyConfig { alpha: 1.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn verdict_csv_header() {
        let v = SafetyVerdict {
            decision: Decision::Scaled,
            proposed_dose: 1.0,
            final_dose: 0.4,
            w_lcb: Some(95.0),
            s_lcb: Some(-1.0),
            q_alpha: Some(8.0),
        };
        let mut buf = Vec::new();
        write_verdicts_csv(&[VerdictRow::new(7, &v)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "step,decision,proposed,final,W_lcb,S_lcb,q_alpha");
        assert!(text.contains("7,scaled,1.0,0.4,95.0,-1.0,8.0"));
    }
}
