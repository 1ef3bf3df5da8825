//! Latent-ODE glucose forecaster.
//!
//! A GRU encodes the standardised feature window, a linear projection maps the
//! final hidden state to a 16-d latent, and the candidate dose is appended as a
//! 17th channel with zero dynamics. A tanh MLP defines `dz/dt`, which RK4
//! integrates one step per control interval over the 30 min horizon. Each latent
//! state is decoded to a mean offset from the last observed glucose and a
//! log-variance.

mod records;
mod train;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use records::{extract_records, split_records, write_records_csv, FeatureStep, RecordSplit, TrainRecord};
pub use train::{evaluate_nll, loss_and_gradient, rmse_at, train, TrainConfig, TrainReport};

use crate::diffkit::{rk4_integrate, Checkpoint, Dense, Graph, GruCell, GruVars, Mlp, MlpVars, Parameterized, Tensor, Var};
use crate::error::{Error, Result};
use crate::tspolicy::risk_split;

pub const N_FEATURES: usize = 7;
pub const FEATURE_NAMES: [&str; N_FEATURES] = ["bg", "iob", "cob", "tod_sin", "tod_cos", "lbgi", "hbgi"];
pub const WINDOW_LEN: usize = 10;
pub const HORIZON: usize = 10;
pub const HIDDEN_DIM: usize = 32;
pub const LATENT_DIM: usize = 16;
pub const DYNAMICS_HIDDEN: usize = 64;
/// mg/dL^2
pub const VARIANCE_FLOOR: f64 = 1.0;
const PREDICT_BATCH: usize = 256;
/// Standardised inputs beyond this magnitude mean the window was not built
/// from the same feature pipeline as the training data.
pub const MAX_STANDARDIZED: f64 = 100.0;

/// Raw feature row for one step: glucose, insulin and carbs on board, time of
/// day on the unit circle, and the low/high glucose risk components.
pub fn feature_row(bg: f64, iob: f64, cob: f64, minute_of_day: f64) -> [f64; N_FEATURES] {
    let angle = 2.0 * std::f64::consts::PI * minute_of_day / 1440.0;
    let (lbgi, hbgi) = risk_split(bg.max(1.0));
    [bg, iob, cob, angle.sin(), angle.cos(), lbgi, hbgi]
}

/// `H` raw feature rows ending at the current step, oldest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureWindow {
    pub rows: Vec<[f64; N_FEATURES]>,
}

impl FeatureWindow {
    pub fn last_bg(&self) -> f64 {
        self.rows.last().map(|r| r[0]).unwrap_or(f64::NAN)
    }
}

/// Per-step predicted glucose mean and variance under dose `dose`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastDist {
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
    pub dose: f64,
}

/// Feature, dose and target scaling fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: [f64; N_FEATURES],
    pub sd: [f64; N_FEATURES],
    pub dose_mean: f64,
    pub dose_sd: f64,
}

impl Default for Standardizer {
    fn default() -> Self {
        Standardizer {
            mean: [0.0; N_FEATURES],
            sd: [1.0; N_FEATURES],
            dose_mean: 0.0,
            dose_sd: 1.0,
        }
    }
}

impl Standardizer {
    /// Feature moments over every row of every training window. The dose is
    /// scaled by `dose_scale` (the largest grid dose) rather than its moments,
    /// because the logged dose distribution is mostly zeros.
    pub fn fit(records: &[TrainRecord], dose_scale: f64) -> Result<Self> {
        let rows: Vec<&[f64; N_FEATURES]> = records.iter().flat_map(|r| r.window.rows.iter()).collect();
        if rows.is_empty() {
            return Err(Error::Config("cannot fit standardizer on no data".into()));
        }
        let n = rows.len() as f64;
        let mut mean = [0.0; N_FEATURES];
        let mut sd = [0.0; N_FEATURES];
        for f in 0..N_FEATURES {
            mean[f] = rows.iter().map(|r| r[f]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[f] - mean[f]).powi(2)).sum::<f64>() / n;
            sd[f] = if var.sqrt() > 1e-6 { var.sqrt() } else { 1.0 };
        }
        Ok(Standardizer {
            mean,
            sd,
            dose_mean: 0.0,
            dose_sd: dose_scale,
        })
    }

    pub fn bg_mean(&self) -> f64 {
        self.mean[0]
    }

    pub fn bg_sd(&self) -> f64 {
        self.sd[0]
    }

    pub fn row(&self, raw: &[f64; N_FEATURES]) -> [f64; N_FEATURES] {
        let mut out = [0.0; N_FEATURES];
        for f in 0..N_FEATURES {
            out[f] = (raw[f] - self.mean[f]) / self.sd[f];
        }
        out
    }

    pub fn dose(&self, u: f64) -> f64 {
        (u - self.dose_mean) / self.dose_sd
    }

    pub fn bg(&self, g: f64) -> f64 {
        (g - self.mean[0]) / self.sd[0]
    }

    pub fn bg_inverse(&self, z: f64) -> f64 {
        z * self.sd[0] + self.mean[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecasterModel {
    pub encoder: GruCell,
    pub projection: Dense,
    pub dynamics: Mlp,
    pub decoder: Dense,
    pub standardizer: Standardizer,
    pub horizon: usize,
}

/// Tape handles for one bound copy of the model parameters.
pub struct BoundModel {
    pub vars: Vec<Var>,
    gru: GruVars,
    projection: crate::diffkit::nn::DenseVars,
    dynamics: MlpVars,
    decoder: crate::diffkit::nn::DenseVars,
}

/// Tape handles for one batched forward pass in standardised units. Each
/// entry of `mu` and `var` holds one value per batch column.
pub struct ForwardVars {
    pub mu: Vec<Var>,
    pub var: Vec<Var>,
    pub z0: Var,
    pub batch: usize,
}

impl ForecasterModel {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = GruCell::new(N_FEATURES, HIDDEN_DIM, &mut rng);
        let projection = Dense::new(HIDDEN_DIM, LATENT_DIM, &mut rng);
        let mut dynamics = Mlp::new(&[LATENT_DIM + 1, DYNAMICS_HIDDEN, LATENT_DIM + 1], &mut rng)
            .expect("static dims");
        // Start near the identity flow so early training sees stable rollouts.
        let last = dynamics.layers.last_mut().expect("two layers");
        last.weight.values.iter_mut().for_each(|w| *w *= 0.1);
        let decoder = Dense::new(LATENT_DIM, 2, &mut rng);
        ForecasterModel {
            encoder,
            projection,
            dynamics,
            decoder,
            standardizer: Standardizer::default(),
            horizon: HORIZON,
        }
    }

    /// Latent step size: `K` steps span one unit of latent time.
    pub fn latent_step(&self) -> f64 {
        1.0 / self.horizon as f64
    }

    pub fn bind_model(&self, g: &mut Graph) -> BoundModel {
        let vars = self.bind(g);
        let n_gru = 9;
        let gru = GruVars::from_bound(&self.encoder, &vars[..n_gru]);
        let projection = crate::diffkit::nn::DenseVars::from_bound(&vars[n_gru..n_gru + 2], LATENT_DIM);
        let n_dyn = 2 * self.dynamics.layers.len();
        let dynamics = MlpVars::from_bound(&self.dynamics, &vars[n_gru + 2..n_gru + 2 + n_dyn]);
        let decoder = crate::diffkit::nn::DenseVars::from_bound(&vars[n_gru + 2 + n_dyn..], 2);
        BoundModel {
            vars,
            gru,
            projection,
            dynamics,
            decoder,
        }
    }

    fn standardized_rows(&self, window: &FeatureWindow) -> Result<Vec<[f64; N_FEATURES]>> {
        if window.rows.is_empty() {
            return Err(Error::Shape("empty feature window".into()));
        }
        let rows: Vec<[f64; N_FEATURES]> = window.rows.iter().map(|r| self.standardizer.row(r)).collect();
        for (i, r) in rows.iter().enumerate() {
            if let Some(v) = r.iter().find(|v| !(v.abs() <= MAX_STANDARDIZED)) {
                return Err(Error::Config(format!(
                    "window row {i} standardises to {v}; inputs are not on the training scale"
                )));
            }
        }
        Ok(rows)
    }

    /// Encoder half of the forward pass for a batch of windows: the 17-d
    /// initial latent states, stored feature-major (`c * batch + j`).
    pub fn encode_on(&self, g: &mut Graph, m: &BoundModel, windows: &[&FeatureWindow], doses: &[f64]) -> Result<Var> {
        let batch = windows.len();
        if batch == 0 || doses.len() != batch {
            return Err(Error::Shape(format!("{batch} windows, {} doses", doses.len())));
        }
        let rows: Vec<Vec<[f64; N_FEATURES]>> = windows
            .iter()
            .map(|w| self.standardized_rows(w))
            .collect::<Result<_>>()?;
        let len = rows[0].len();
        if rows.iter().any(|r| r.len() != len) {
            return Err(Error::Shape("windows in a batch must share a length".into()));
        }
        let mut buf = vec![0.0; N_FEATURES * batch];
        let mut xs = Vec::with_capacity(len);
        for t in 0..len {
            for (j, r) in rows.iter().enumerate() {
                for f in 0..N_FEATURES {
                    buf[f * batch + j] = r[t][f];
                }
            }
            xs.push(g.leaf(&buf));
        }
        let h0 = g.leaf(&vec![0.0; HIDDEN_DIM * batch]);
        let h = m.gru.forward(g, &xs, h0)?;
        let p = m.projection.forward(g, h)?;
        let lat = g.tanh(p);
        let d: Vec<f64> = doses.iter().map(|&u| self.standardizer.dose(u)).collect();
        let d = g.leaf(&d);
        Ok(g.concat(lat, d))
    }

    /// Full forward pass in standardised units over a batch of windows.
    pub fn forward_on(&self, g: &mut Graph, m: &BoundModel, windows: &[&FeatureWindow], doses: &[f64]) -> Result<ForwardVars> {
        let z0 = self.encode_on(g, m, windows, doses)?;
        let last: Vec<f64> = windows.iter().map(|w| self.standardizer.bg(w.last_bg())).collect();
        self.rollout_on(g, m, z0, &last)
    }

    fn rollout_on(&self, g: &mut Graph, m: &BoundModel, z0: Var, bg_last_std: &[f64]) -> Result<ForwardVars> {
        let batch = bg_last_std.len();
        let floor = VARIANCE_FLOOR / self.standardizer.bg_sd().powi(2);
        let dynamics = &m.dynamics;
        // The dose channel carries no dynamics.
        let mut mask = vec![1.0; (LATENT_DIM + 1) * batch];
        mask[LATENT_DIM * batch..].fill(0.0);
        let mask = g.leaf(&mask);
        let last = g.leaf(bg_last_std);
        let zs = rk4_integrate(
            g,
            |g, z| {
                let dz = dynamics.forward(g, z)?;
                g.mul(dz, mask)
            },
            z0,
            self.horizon,
            self.latent_step(),
        )?;
        let mut mu = Vec::with_capacity(self.horizon);
        let mut var = Vec::with_capacity(self.horizon);
        for z in zs {
            let lat = g.slice(z, 0, LATENT_DIM * batch)?;
            let out = m.decoder.forward(g, lat)?;
            let offset = g.slice(out, 0, batch)?;
            mu.push(g.add(offset, last)?);
            let lv = g.slice(out, batch, batch)?;
            let v = g.exp(lv);
            var.push(g.add_const(v, floor));
        }
        Ok(ForwardVars { mu, var, z0, batch })
    }

    /// Initial latent state (16 latent channels plus the standardised dose).
    pub fn encode(&self, window: &FeatureWindow, dose: f64) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let m = self.bind_model(&mut g);
        let z0 = self.encode_on(&mut g, &m, &[window], &[dose])?;
        Ok(g.value(z0).to_vec())
    }

    pub fn predict(&self, window: &FeatureWindow, dose: f64) -> Result<ForecastDist> {
        self.prepare(window)?.predict(dose)
    }

    /// Forecasts for many (window, dose) pairs, evaluated in batches.
    pub fn predict_batch(&self, windows: &[&FeatureWindow], doses: &[f64]) -> Result<Vec<ForecastDist>> {
        if windows.len() != doses.len() {
            return Err(Error::Shape(format!("{} windows, {} doses", windows.len(), doses.len())));
        }
        let s = &self.standardizer;
        let sd2 = s.bg_sd().powi(2);
        let mut out = Vec::with_capacity(windows.len());
        let mut g = Graph::new();
        for (ws, ds) in windows.chunks(PREDICT_BATCH).zip(doses.chunks(PREDICT_BATCH)) {
            g.reset();
            let m = self.bind_model(&mut g);
            let fw = self.forward_on(&mut g, &m, ws, ds)?;
            out.extend(ds.iter().enumerate().map(|(j, &dose)| ForecastDist {
                mu: fw.mu.iter().map(|&v| s.bg_inverse(g.value(v)[j])).collect(),
                var: fw.var.iter().map(|&v| (g.value(v)[j] * sd2).max(VARIANCE_FLOOR)).collect(),
                dose,
            }));
        }
        Ok(out)
    }

    /// Run the encoder once; the result forecasts any number of candidate doses.
    pub fn prepare(&self, window: &FeatureWindow) -> Result<PreparedForecast<'_>> {
        let z = self.encode(window, 0.0)?;
        Ok(PreparedForecast {
            model: self,
            latent: z[..LATENT_DIM].to_vec(),
            bg_last_std: self.standardizer.bg(window.last_bg()),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::capture(self);
        let s = &self.standardizer;
        ck.meta.insert("feature_mean".into(), s.mean.to_vec());
        ck.meta.insert("feature_sd".into(), s.sd.to_vec());
        ck.meta.insert("dose_scale".into(), vec![s.dose_mean, s.dose_sd]);
        ck.meta.insert("horizon".into(), vec![self.horizon as f64]);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut model = ForecasterModel::new(0);
        ck.restore(&mut model)?;
        let to_arr = |v: &[f64]| -> Result<[f64; N_FEATURES]> {
            v.try_into()
                .map_err(|_| Error::Shape(format!("standardizer needs {N_FEATURES} entries")))
        };
        let dose = ck.meta_vec("dose_scale")?;
        if dose.len() != 2 {
            return Err(Error::Shape("dose_scale needs two entries".into()));
        }
        model.standardizer = Standardizer {
            mean: to_arr(ck.meta_vec("feature_mean")?)?,
            sd: to_arr(ck.meta_vec("feature_sd")?)?,
            dose_mean: dose[0],
            dose_sd: dose[1],
        };
        model.horizon = ck.meta_scalar("horizon")? as usize;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl Parameterized for ForecasterModel {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, part) in [
            ("encoder", &self.encoder as &dyn Parameterized),
            ("projection", &self.projection),
            ("dynamics", &self.dynamics),
            ("decoder", &self.decoder),
        ] {
            out.extend(part.named_tensors().into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.projection.tensors_mut());
        out.extend(self.dynamics.tensors_mut());
        out.extend(self.decoder.tensors_mut());
        out
    }
}

/// Encoded window, ready to roll out under different doses.
pub struct PreparedForecast<'a> {
    model: &'a ForecasterModel,
    latent: Vec<f64>,
    bg_last_std: f64,
}

impl PreparedForecast<'_> {
    pub fn predict(&self, dose: f64) -> Result<ForecastDist> {
        Ok(self.predict_many(&[dose])?.pop().expect("one dose"))
    }

    /// Forecasts for several candidate doses in one batched rollout.
    pub fn predict_many(&self, doses: &[f64]) -> Result<Vec<ForecastDist>> {
        let model = self.model;
        let batch = doses.len();
        if batch == 0 {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let m = model.bind_model(&mut g);
        let mut z0 = Vec::with_capacity((LATENT_DIM + 1) * batch);
        for &c in &self.latent {
            z0.extend(std::iter::repeat_n(c, batch));
        }
        z0.extend(doses.iter().map(|&u| model.standardizer.dose(u)));
        let z0 = g.leaf(&z0);
        let fw = model.rollout_on(&mut g, &m, z0, &vec![self.bg_last_std; batch])?;
        let s = &model.standardizer;
        let sd2 = s.bg_sd().powi(2);
        Ok(doses
            .iter()
            .enumerate()
            .map(|(j, &dose)| ForecastDist {
                mu: fw.mu.iter().map(|&v| s.bg_inverse(g.value(v)[j])).collect(),
                var: fw.var.iter().map(|&v| (g.value(v)[j] * sd2).max(VARIANCE_FLOOR)).collect(),
                dose,
            })
            .collect())
    }
}

/// Mean over the horizon of `½(ln σ² + (y − μ)² / σ²)`, in standardised units.
pub fn nll_loss(dist: &ForecastDist, target: &[f64], std: &Standardizer) -> Result<f64> {
    if dist.mu.len() != target.len() || dist.var.len() != target.len() {
        return Err(Error::Shape(format!(
            "nll: {} means, {} variances, {} targets",
            dist.mu.len(),
            dist.var.len(),
            target.len()
        )));
    }
    let sd2 = std.bg_sd().powi(2);
    let mut total = 0.0;
    for ((mu, var), y) in dist.mu.iter().zip(&dist.var).zip(target) {
        if !(*var > 0.0) {
            return Err(Error::Numerical(format!("non-positive variance {var}")));
        }
        let v = var / sd2;
        let r = std.bg(*y) - std.bg(*mu);
        total += 0.5 * (v.ln() + r * r / v);
    }
    Ok(total / target.len() as f64)
}

/// Mean NLL on the tape over a batch, in standardised units. `targets[j]`
/// holds the standardised horizon for batch column `j`.
pub(crate) fn nll_on(g: &mut Graph, fw: &ForwardVars, targets: &[Vec<f64>]) -> Result<Var> {
    if targets.len() != fw.batch || targets.iter().any(|t| t.len() != fw.mu.len()) {
        return Err(Error::Shape(format!(
            "nll: {} target rows for batch {} and horizon {}",
            targets.len(),
            fw.batch,
            fw.mu.len()
        )));
    }
    let mut terms = Vec::with_capacity(fw.mu.len());
    for (k, (&mu, &var)) in fw.mu.iter().zip(&fw.var).enumerate() {
        let y: Vec<f64> = targets.iter().map(|t| t[k]).collect();
        let y = g.leaf(&y);
        let r = g.sub(y, mu)?;
        let r2 = g.square(r);
        let q = g.div(r2, var)?;
        let lv = g.ln(var);
        let s = g.add(lv, q)?;
        terms.push(g.sum(s));
    }
    let total = g.add_all(&terms)?;
    Ok(g.scale(total, 0.5 / (fw.mu.len() * fw.batch) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window(bg: f64) -> FeatureWindow {
        FeatureWindow {
            rows: (0..WINDOW_LEN).map(|i| feature_row(bg, 0.5, 10.0, 480.0 + 3.0 * i as f64)).collect(),
        }
    }

    fn fitted(model: &mut ForecasterModel) {
        let recs: Vec<TrainRecord> = [90.0, 120.0, 180.0, 240.0]
            .iter()
            .map(|&bg| TrainRecord {
                window: window(bg),
                dose: 0.0,
                target: vec![bg; HORIZON],
                source: "t".into(),
            })
            .collect();
        model.standardizer = Standardizer::fit(&recs, 3.0).unwrap();
    }

    #[test]
    fn nll_examples() {
        let std = Standardizer::default();
        let d = ForecastDist { mu: vec![5.0], var: vec![1.0], dose: 0.0 };
        assert_eq!(nll_loss(&d, &[5.0], &std).unwrap(), 0.0);
        assert!((nll_loss(&d, &[6.0], &std).unwrap() - 0.5).abs() < 1e-15);
        let d = ForecastDist { mu: vec![5.0], var: vec![std::f64::consts::E], dose: 0.0 };
        assert!((nll_loss(&d, &[5.0], &std).unwrap() - 0.5).abs() < 1e-15);
        let bad = ForecastDist { mu: vec![5.0], var: vec![0.0], dose: 0.0 };
        assert!(nll_loss(&bad, &[5.0], &std).is_err());
        assert!(nll_loss(&d, &[5.0, 1.0], &std).is_err());
    }

    #[test]
    fn encode_is_deterministic_and_dose_only_touches_last_channel() {
        let mut m = ForecasterModel::new(3);
        fitted(&mut m);
        let w = window(150.0);
        let a = m.encode(&w, 1.0).unwrap();
        assert_eq!(a, m.encode(&w, 1.0).unwrap());
        assert_eq!(a.len(), LATENT_DIM + 1);
        let b = m.encode(&w, 2.0).unwrap();
        assert_eq!(a[..LATENT_DIM], b[..LATENT_DIM]);
        assert_ne!(a[LATENT_DIM], b[LATENT_DIM]);
    }

    #[test]
    fn zeroed_decoder_predicts_training_mean_at_mean_window() {
        let mut m = ForecasterModel::new(5);
        fitted(&mut m);
        m.decoder.weight.values.iter_mut().for_each(|w| *w = 0.0);
        m.decoder.bias.values.iter_mut().for_each(|w| *w = 0.0);
        let mut w = window(150.0);
        for r in &mut w.rows {
            *r = m.standardizer.mean;
        }
        let d = m.predict(&w, 1.4).unwrap();
        for mu in &d.mu {
            assert!((mu - m.standardizer.bg_mean()).abs() < 1e-9);
        }
    }

    #[test]
    fn variance_respects_floor() {
        let mut m = ForecasterModel::new(6);
        fitted(&mut m);
        m.decoder.bias.values[1] = -200.0;
        let d = m.predict(&window(130.0), 0.0).unwrap();
        assert_eq!(d.mu.len(), HORIZON);
        assert!(d.var.iter().all(|&v| v >= VARIANCE_FLOOR));
    }

    #[test]
    fn wild_inputs_are_rejected() {
        let mut m = ForecasterModel::new(1);
        fitted(&mut m);
        let mut w = window(120.0);
        w.rows[3][1] = 1e9;
        assert!(matches!(m.encode(&w, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn prediction_is_continuous_in_dose() {
        let mut m = ForecasterModel::new(8);
        fitted(&mut m);
        let w = window(160.0);
        let p = m.prepare(&w).unwrap();
        let a = p.predict(1.0).unwrap();
        let b = p.predict(1.0 + 1e-4).unwrap();
        let gap = a.mu.iter().zip(&b.mu).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(gap < 0.1, "{gap}");
        assert_eq!(a, m.predict(&w, 1.0).unwrap());
    }

    #[test]
    fn standardization_roundtrip() {
        let mut m = ForecasterModel::new(1);
        fitted(&mut m);
        for g in [40.0, 97.3, 123.456, 400.0] {
            let back = m.standardizer.bg_inverse(m.standardizer.bg(g));
            assert!((back - g).abs() < 1e-9);
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let mut m = ForecasterModel::new(2);
        fitted(&mut m);
        let ck = m.to_checkpoint();
        let back = ForecasterModel::from_checkpoint(&crate::diffkit::Checkpoint::from_json(&ck.to_json().unwrap()).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
