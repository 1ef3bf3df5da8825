//! Discretised Thompson Sampling over a grid of bolus sizes.
//!
//! The state is a (glucose bin, trend bin) pair. Each (state, action) cell keeps
//! a Welford running mean and sum of squared deviations of the shaped reward;
//! exploration draws `r ~ N(mean, var / n)` per action and takes the argmax.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    pub bg_low: f64,
    pub bg_high: f64,
    pub bg_width: f64,
    /// Interior trend edges (mg/dL/min); the outer edges are ±∞. Bins are `[lo, hi)`.
    pub trend_edges: Vec<f64>,
}

impl Default for BinSpec {
    fn default() -> Self {
        BinSpec {
            bg_low: 40.0,
            bg_high: 300.0,
            bg_width: 20.0,
            trend_edges: vec![-2.0, -1.0, -0.3, 0.3, 1.0, 2.0],
        }
    }
}

impl BinSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.bg_high > self.bg_low && self.bg_width > 0.0) {
            return Err(Error::Config("bg bins need bg_low < bg_high and bg_width > 0".into()));
        }
        if self.trend_edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config("trend edges must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn bg_bins(&self) -> usize {
        ((self.bg_high - self.bg_low) / self.bg_width).ceil() as usize
    }

    pub fn trend_bins(&self) -> usize {
        self.trend_edges.len() + 1
    }

    pub fn n_states(&self) -> usize {
        self.bg_bins() * self.trend_bins()
    }

    /// Map glucose (clamped to `[bg_low, bg_high)`) and trend to a state id
    /// `bg_bin * trend_bins + trend_bin`.
    pub fn discretize(&self, bg: f64, trend: f64) -> usize {
        let nb = self.bg_bins();
        let bg_bin = if bg.is_nan() {
            0
        } else {
            (((bg.max(self.bg_low) - self.bg_low) / self.bg_width).floor() as usize).min(nb - 1)
        };
        let trend_bin = self.trend_edges.iter().take_while(|&&e| trend >= e).count();
        bg_bin * self.trend_bins() + trend_bin
    }
}

/// Mean per-step change over the last three samples (oldest first), per minute.
/// Fewer than three samples give a flat trend.
pub fn trend_of(recent_bg: &[f64], dt: f64) -> f64 {
    match recent_bg {
        [.., a, _, c] => (c - a) / (2.0 * dt),
        _ => 0.0,
    }
}

/// Sorted, unique bolus sizes starting at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionGrid {
    pub doses: Vec<f64>,
}

const GRID_TOL: f64 = 1e-9;

impl Default for ActionGrid {
    fn default() -> Self {
        Self::uniform(0.2, 15)
    }
}

impl ActionGrid {
    /// `{0, step, 2 step, ..., n step}`.
    pub fn uniform(step: f64, n: usize) -> Self {
        let inv = 1.0 / step;
        let doses = (0..=n)
            .map(|i| if inv.fract() == 0.0 { i as f64 / inv } else { i as f64 * step })
            .collect();
        ActionGrid { doses }
    }

    pub fn new(doses: Vec<f64>) -> Result<Self> {
        if doses.first() != Some(&0.0) {
            return Err(Error::Config("action grid must start at 0".into()));
        }
        if doses.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config("action grid must be strictly increasing".into()));
        }
        Ok(ActionGrid { doses })
    }

    pub fn len(&self) -> usize {
        self.doses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doses.is_empty()
    }

    pub fn max(&self) -> f64 {
        *self.doses.last().expect("grid is non-empty")
    }

    /// Nearest grid dose; exact midpoints go to the lower dose.
    pub fn project(&self, dose: f64) -> f64 {
        self.doses[self.project_index(dose)]
    }

    pub fn project_index(&self, dose: f64) -> usize {
        let hi = self.doses.partition_point(|&d| d < dose);
        if hi == 0 {
            return 0;
        }
        if hi == self.doses.len() {
            return hi - 1;
        }
        let (dl, dh) = (dose - self.doses[hi - 1], self.doses[hi] - dose);
        if dh < dl - GRID_TOL {
            hi
        } else {
            hi - 1
        }
    }

    /// Largest grid dose not exceeding `dose` (up to float noise).
    pub fn floor(&self, dose: f64) -> f64 {
        let idx = self.doses.partition_point(|&d| d <= dose + GRID_TOL);
        self.doses[idx.saturating_sub(1)]
    }

    /// Index of a dose that lies on the grid.
    pub fn index_of(&self, dose: f64) -> Option<usize> {
        self.doses.iter().position(|&d| (d - dose).abs() <= GRID_TOL)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ArmStats {
    pub n: u64,
    pub mean: f64,
    pub m2: f64,
}

impl ArmStats {
    pub fn push(&mut self, r: f64) {
        self.n += 1;
        let delta = r - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (r - self.mean);
    }

    /// Sample variance, defined for `n >= 2`.
    pub fn variance(&self) -> Option<f64> {
        (self.n >= 2).then(|| self.m2 / (self.n - 1) as f64)
    }

    /// Enough pulls for a posterior of its own rather than the prior.
    pub fn informed(&self) -> bool {
        self.n >= 2
    }

    /// Pool two independent summaries.
    pub fn merge(&self, other: &ArmStats) -> ArmStats {
        if self.n == 0 {
            return *other;
        }
        if other.n == 0 {
            return *self;
        }
        let n = self.n + other.n;
        let (na, nb) = (self.n as f64, other.n as f64);
        let delta = other.mean - self.mean;
        ArmStats {
            n,
            mean: self.mean + delta * nb / n as f64,
            m2: self.m2 + other.m2 + delta * delta * na * nb / n as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectMode {
    Explore,
    Greedy,
}

/// Prior for arms with fewer than two observations.
pub const PRIOR_MEAN: f64 = 0.0;
pub const PRIOR_VAR: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    n_states: usize,
    n_actions: usize,
    arms: Vec<ArmStats>,
}

impl PolicyTable {
    pub fn new(n_states: usize, n_actions: usize) -> Self {
        PolicyTable {
            n_states,
            n_actions,
            arms: vec![ArmStats::default(); n_states * n_actions],
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn arm(&self, s: usize, a: usize) -> &ArmStats {
        &self.arms[s * self.n_actions + a]
    }

    pub fn update(&mut self, s: usize, a: usize, reward: f64) -> Result<()> {
        if s >= self.n_states || a >= self.n_actions {
            return Err(Error::Config(format!("policy index ({s}, {a}) out of range")));
        }
        if !reward.is_finite() {
            return Err(Error::Numerical(format!("non-finite reward {reward} for ({s}, {a})")));
        }
        self.arms[s * self.n_actions + a].push(reward);
        Ok(())
    }

    /// Thompson draw in explore mode. Greedy mode takes the best mean among
    /// informed arms and never exploits the prior; with no informed arm it
    /// returns arm 0. Ties go to the lower index.
    pub fn select<R: Rng + ?Sized>(&self, s: usize, rng: &mut R, mode: SelectMode) -> usize {
        let row = &self.arms[s * self.n_actions..(s + 1) * self.n_actions];
        let score = |arm: &ArmStats, rng: &mut R| -> f64 {
            match mode {
                SelectMode::Greedy => {
                    if !arm.informed() {
                        f64::NEG_INFINITY
                    } else {
                        arm.mean
                    }
                }
                SelectMode::Explore => {
                    let (mu, var) = match arm.variance() {
                        Some(v) => (arm.mean, v / arm.n as f64),
                        None => (PRIOR_MEAN, PRIOR_VAR),
                    };
                    if var > 0.0 {
                        Normal::new(mu, var.sqrt()).expect("finite posterior").sample(rng)
                    } else {
                        mu
                    }
                }
            }
        };
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (a, arm) in row.iter().enumerate() {
            let sc = score(arm, rng);
            if sc > best_score {
                best = a;
                best_score = sc;
            }
        }
        best
    }

    /// `s` if any of its arms is informed, otherwise the closest state with
    /// one: nearest glucose bin first, then nearest trend bin, lower id on
    /// ties. A table without informed arms returns `s`.
    pub fn nearest_observed(&self, s: usize, bins: &BinSpec) -> usize {
        let observed = |q: usize| self.arms[q * self.n_actions..(q + 1) * self.n_actions].iter().any(ArmStats::informed);
        if observed(s) {
            return s;
        }
        let tb = bins.trend_bins();
        let (b, t) = (s / tb, s % tb);
        (0..self.n_states)
            .filter(|&q| observed(q))
            .min_by_key(|&q| ((q / tb).abs_diff(b), (q % tb).abs_diff(t)))
            .unwrap_or(s)
    }

    /// Pool several tables cell by cell.
    pub fn merged(tables: &[&PolicyTable]) -> Result<PolicyTable> {
        let first = tables
            .first()
            .ok_or_else(|| Error::Config("merging zero policy tables".into()))?;
        let mut out = PolicyTable::new(first.n_states, first.n_actions);
        for t in tables {
            if t.n_states != out.n_states || t.n_actions != out.n_actions {
                return Err(Error::Shape("policy tables differ in shape".into()));
            }
            for (o, a) in out.arms.iter_mut().zip(&t.arms) {
                *o = o.merge(a);
            }
        }
        Ok(out)
    }

    /// CSV with header `state,action,n,mean,variance`; variance is empty for `n < 2`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["state", "action", "n", "mean", "variance"])?;
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let arm = self.arm(s, a);
                let var = arm.variance().map(|v| v.to_string()).unwrap_or_default();
                wtr.write_record([
                    s.to_string(),
                    a.to_string(),
                    arm.n.to_string(),
                    arm.mean.to_string(),
                    var,
                ])?;
            }
        }
        wtr.flush().map_err(|e| Error::io("policy csv", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, n_states: usize, n_actions: usize) -> Result<PolicyTable> {
        let mut table = PolicyTable::new(n_states, n_actions);
        let mut rdr = csv::Reader::from_reader(r);
        for rec in rdr.records() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or("").trim().to_string();
            let parse_err = |what: &str| Error::Config(format!("bad policy csv {what}: {rec:?}"));
            let s: usize = field(0).parse().map_err(|_| parse_err("state"))?;
            let a: usize = field(1).parse().map_err(|_| parse_err("action"))?;
            let n: u64 = field(2).parse().map_err(|_| parse_err("n"))?;
            let mean: f64 = field(3).parse().map_err(|_| parse_err("mean"))?;
            let var: f64 = match field(4).as_str() {
                "" => 0.0,
                v => v.parse().map_err(|_| parse_err("variance"))?,
            };
            if s >= n_states || a >= n_actions {
                return Err(parse_err("index"));
            }
            table.arms[s * n_actions + a] = ArmStats {
                n,
                mean,
                m2: if n >= 2 { var * (n - 1) as f64 } else { 0.0 },
            };
        }
        Ok(table)
    }
}

/// Kovatchev glucose risk transform `f(g) = 1.509 ((ln g)^1.084 - 5.381)`.
pub fn risk_transform(g: f64) -> f64 {
    1.509 * (g.ln().powf(1.084) - 5.381)
}

/// Symmetric glucose risk `10 f(g)^2`; zero near 112.5 mg/dL.
pub fn risk(g: f64) -> f64 {
    10.0 * risk_transform(g).powi(2)
}

/// Low and high components of [`risk`], split by the sign of the transform.
pub fn risk_split(g: f64) -> (f64, f64) {
    let f = risk_transform(g);
    let r = 10.0 * f * f;
    if f < 0.0 {
        (r, 0.0)
    } else {
        (0.0, r)
    }
}

pub const HYPO_PENALTY: f64 = 10.0;
pub const SEVERE_HYPO_PENALTY: f64 = 20.0;

/// Negative mean risk over the interval, minus fixed penalties for any
/// sample below 70 and below 54 mg/dL.
pub fn shaped_reward(bg_trace: &[f64]) -> Result<f64> {
    if bg_trace.is_empty() {
        return Err(Error::EmptyTrace);
    }
    if let Some(g) = bg_trace.iter().find(|&&g| !(g > 0.0)) {
        return Err(Error::Numerical(format!("glucose {g} is not positive")));
    }
    let mean_risk = bg_trace.iter().map(|&g| risk(g)).sum::<f64>() / bg_trace.len() as f64;
    let mut r = -mean_risk;
    if bg_trace.iter().any(|&g| g < 70.0) {
        r -= HYPO_PENALTY;
    }
    if bg_trace.iter().any(|&g| g < 54.0) {
        r -= SEVERE_HYPO_PENALTY;
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn discretize_examples() {
        let spec = BinSpec::default();
        assert_eq!(spec.n_states(), 91);
        assert_eq!(spec.discretize(120.0, 0.0), 31);
        assert_eq!(spec.discretize(40.0, -10.0), 0);
        assert_eq!(spec.discretize(500.0, 10.0), 90);
        assert_eq!(spec.discretize(10.0, 0.3), 4);
        assert_eq!(spec.discretize(299.999, -0.3), 12 * 7 + 3);
    }

    #[test]
    fn trend_examples() {
        assert_eq!(trend_of(&[100.0, 100.0, 100.0], 3.0), 0.0);
        assert_eq!(trend_of(&[100.0, 106.0, 112.0], 3.0), 2.0);
        assert_eq!(trend_of(&[130.0, 124.0, 118.0], 3.0), -2.0);
        assert_eq!(trend_of(&[130.0, 124.0], 3.0), 0.0);
        assert_eq!(trend_of(&[1.0, 130.0, 124.0, 118.0], 3.0), -2.0);
    }

    #[test]
    fn grid_projection() {
        let grid = ActionGrid::default();
        assert_eq!(grid.len(), 16);
        assert_eq!(grid.doses[3], 0.6);
        assert_eq!(grid.max(), 3.0);
        assert_eq!(grid.project(1.47), 1.4);
        assert_eq!(grid.project(1.5), 1.4);
        assert_eq!(grid.project(1.51), 1.6);
        assert_eq!(grid.project(0.0), 0.0);
        assert_eq!(grid.project(7.0), 3.0);
        assert_eq!(grid.floor(1.39), 1.2);
        assert_eq!(grid.floor(1.4), 1.4);
        assert_eq!(grid.floor(0.05), 0.0);
    }

    #[test]
    fn welford_small_examples() {
        let mut a = ArmStats::default();
        for r in [2.0, 4.0, 6.0] {
            a.push(r);
        }
        assert_eq!(a.n, 3);
        assert_eq!(a.mean, 4.0);
        assert_eq!(a.variance(), Some(4.0));
        let mut b = ArmStats::default();
        b.push(7.5);
        assert_eq!((b.mean, b.m2, b.variance()), (7.5, 0.0, None));
    }

    #[test]
    fn welford_constant_stream_has_zero_variance() {
        let v = 1e8 + 0.1;
        let mut a = ArmStats::default();
        let (mut s, mut ss) = (0.0f64, 0.0f64);
        for _ in 0..1_000_000 {
            a.push(v);
            s += v;
            ss += v * v;
        }
        assert_eq!(a.variance(), Some(0.0));
        let n = 1e6;
        let naive = (ss - s * s / n) / (n - 1.0);
        assert!(naive != 0.0, "naive formula should show cancellation, got {naive}");
    }

    #[test]
    fn greedy_selection() {
        let mut t = PolicyTable::new(1, 3);
        for _ in 0..2 {
            t.update(0, 0, 1.0).unwrap();
            t.update(0, 1, 3.0).unwrap();
            t.update(0, 2, 2.0).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(t.select(0, &mut rng, SelectMode::Greedy), 1);
        let fresh = PolicyTable::new(1, 16);
        assert_eq!(fresh.select(0, &mut rng, SelectMode::Greedy), 0);
        let mut partial = PolicyTable::new(1, 3);
        partial.update(0, 1, 4.0).unwrap();
        partial.update(0, 2, -5.0).unwrap();
        partial.update(0, 2, -5.0).unwrap();
        assert_eq!(partial.select(0, &mut rng, SelectMode::Greedy), 2, "one pull is not enough to exploit");
    }

    #[test]
    fn nearest_observed_prefers_the_closest_glucose_bin() {
        let bins = BinSpec::default();
        let tb = bins.trend_bins();
        let mut t = PolicyTable::new(bins.n_states(), 2);
        assert_eq!(t.nearest_observed(40, &bins), 40);
        for _ in 0..2 {
            t.update(5 * tb + 3, 1, -1.0).unwrap();
            t.update(8 * tb, 0, -1.0).unwrap();
        }
        t.update(11 * tb + 3, 0, -1.0).unwrap();
        assert_eq!(t.nearest_observed(5 * tb + 3, &bins), 5 * tb + 3);
        assert_eq!(t.nearest_observed(12 * tb + 3, &bins), 8 * tb);
        assert_eq!(t.nearest_observed(5 * tb + 6, &bins), 5 * tb + 3);
        assert_eq!(t.nearest_observed(0, &bins), 5 * tb + 3);
    }

    #[test]
    fn explore_with_zero_variance_is_greedy() {
        let mut t = PolicyTable::new(1, 4);
        for (a, r) in [-3.0, -1.0, -2.0, -5.0].into_iter().enumerate() {
            for _ in 0..5 {
                t.update(0, a, r).unwrap();
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            assert_eq!(
                t.select(0, &mut rng, SelectMode::Explore),
                t.select(0, &mut rng, SelectMode::Greedy)
            );
        }
    }

    #[test]
    fn update_rejects_bad_input() {
        let mut t = PolicyTable::new(2, 2);
        assert!(t.update(2, 0, 1.0).is_err());
        assert!(matches!(t.update(0, 0, f64::NAN), Err(Error::Numerical(_))));
    }

    #[test]
    fn merged_counts_add_up() {
        let mut a = PolicyTable::new(2, 2);
        let mut b = PolicyTable::new(2, 2);
        let mut both = PolicyTable::new(2, 2);
        for (i, r) in [1.0, 5.0, -2.0, 0.5, 3.0].into_iter().enumerate() {
            let t = if i % 2 == 0 { &mut a } else { &mut b };
            t.update(1, 0, r).unwrap();
            both.update(1, 0, r).unwrap();
        }
        let m = PolicyTable::merged(&[&a, &b]).unwrap();
        let (x, y) = (m.arm(1, 0), both.arm(1, 0));
        assert_eq!(x.n, 5);
        assert!((x.mean - y.mean).abs() < 1e-12);
        assert!((x.m2 - y.m2).abs() < 1e-12);
        assert_eq!(m.arm(0, 0).n, 0);
    }

    #[test]
    fn csv_roundtrip_keeps_statistics() {
        let mut t = PolicyTable::new(3, 2);
        for r in [1.0, 2.5, -0.5] {
            t.update(2, 1, r).unwrap();
        }
        t.update(0, 0, 4.0).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("state,action,n,mean,variance\n"));
        let back = PolicyTable::read_csv(buf.as_slice(), 3, 2).unwrap();
        assert_eq!(back.arm(2, 1).n, 3);
        assert!((back.arm(2, 1).m2 - t.arm(2, 1).m2).abs() < 1e-12);
        assert_eq!(back.arm(0, 0).mean, 4.0);
    }

    #[test]
    fn reward_examples() {
        assert!(shaped_reward(&[112.5; 10]).unwrap().abs() < 0.05);
        assert!(shaped_reward(&[60.0; 10]).unwrap() < -10.0);
        assert!(risk(180.0) > 0.0 && risk(180.0).is_finite());
        assert!(risk(70.0) > 0.0 && risk(70.0).is_finite());
        assert!(shaped_reward(&[]).is_err());
        assert!(shaped_reward(&[100.0, 0.0]).is_err());
        let (lo, hi) = risk_split(60.0);
        assert!(lo > 0.0 && hi == 0.0);
        let (lo, hi) = risk_split(250.0);
        assert!(lo == 0.0 && hi > 0.0);
    }
}
