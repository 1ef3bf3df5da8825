use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{nll_on, BoundModel, FeatureWindow, ForecasterModel, Standardizer, TrainRecord};
use crate::diffkit::{Adam, AdamConfig, Graph, Parameterized, Var};
use crate::error::{Error, Result};

const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub beta1: f64,
    pub beta2: f64,
    /// Global gradient-norm clip; `0` disables.
    pub clip_norm: f64,
    pub seed: u64,
    /// Dose that maps to 1.0 on the latent dose channel.
    pub dose_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            lr: 1e-3,
            batch: 64,
            beta1: 0.9,
            beta2: 0.999,
            clip_norm: 5.0,
            seed: 0,
            dose_scale: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean NLL over the training records before the first update.
    pub initial_loss: f64,
    /// Mean minibatch NLL for each epoch.
    pub epoch_loss: Vec<f64>,
    /// Mean NLL over the training records after the last update.
    pub final_loss: f64,
}

/// Fit the standardiser on `records`, then run minibatch Adam on the mean
/// Gaussian NLL. Deterministic for a fixed `cfg.seed`.
pub fn train(model: &mut ForecasterModel, records: &[TrainRecord], cfg: &TrainConfig) -> Result<TrainReport> {
    if records.is_empty() {
        return Err(Error::Config("no training records".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    model.standardizer = Standardizer::fit(records, cfg.dose_scale)?;
    let initial_loss = evaluate_nll(model, records)?;

    let sizes: Vec<usize> = model.named_tensors().iter().map(|(_, t)| t.len()).collect();
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
        },
        &sizes,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut g = Graph::new();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch).enumerate() {
            g.reset();
            let bound = model.bind_model(&mut g);
            let batch: Vec<&TrainRecord> = chunk.iter().map(|&i| &records[i]).collect();
            let loss = batch_loss(model, &mut g, &bound, &batch)?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, batch: bi, loss: value });
            }
            g.backward(loss)?;
            model.zero_grad();
            model.pull_grads(&g, &bound.vars);
            let scale = clip_scale(model, cfg.clip_norm);
            adam.step(model.tensors_mut(), scale);
            sum += value;
            batches += 1;
        }
        epoch_loss.push(sum / batches as f64);
    }
    let final_loss = evaluate_nll(model, records)?;
    if !final_loss.is_finite() {
        return Err(Error::Diverged {
            epoch: cfg.epochs,
            batch: 0,
            loss: final_loss,
        });
    }
    Ok(TrainReport {
        initial_loss,
        epoch_loss,
        final_loss,
    })
}

fn clip_scale(model: &ForecasterModel, clip: f64) -> f64 {
    if clip <= 0.0 {
        return 1.0;
    }
    let norm2: f64 = model
        .named_tensors()
        .iter()
        .filter_map(|(_, t)| t.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum();
    let norm = norm2.sqrt();
    if norm > clip {
        clip / norm
    } else {
        1.0
    }
}

fn batch_loss(model: &ForecasterModel, g: &mut Graph, bound: &BoundModel, batch: &[&TrainRecord]) -> Result<Var> {
    let windows: Vec<&FeatureWindow> = batch.iter().map(|r| &r.window).collect();
    let doses: Vec<f64> = batch.iter().map(|r| r.dose).collect();
    let targets: Vec<Vec<f64>> = batch
        .iter()
        .map(|r| r.target.iter().map(|&y| model.standardizer.bg(y)).collect())
        .collect();
    let fw = model.forward_on(g, bound, &windows, &doses)?;
    nll_on(g, &fw, &targets)
}

/// Mean NLL (standardised units) over `records`.
pub fn evaluate_nll(model: &ForecasterModel, records: &[TrainRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Config("no records to evaluate".into()));
    }
    let mut g = Graph::new();
    let mut total = 0.0;
    for chunk in records.chunks(EVAL_BATCH) {
        g.reset();
        let bound = model.bind_model(&mut g);
        let batch: Vec<&TrainRecord> = chunk.iter().collect();
        let l = batch_loss(model, &mut g, &bound, &batch)?;
        total += g.scalar(l) * chunk.len() as f64;
    }
    Ok(total / records.len() as f64)
}

/// Mean NLL over one batch of `records` and its gradient with respect to every
/// parameter, flattened in [`Parameterized::named_tensors`] order.
pub fn loss_and_gradient(model: &ForecasterModel, records: &[TrainRecord]) -> Result<(f64, Vec<f64>)> {
    if records.is_empty() {
        return Err(Error::Config("no records to evaluate".into()));
    }
    let mut g = Graph::new();
    let bound = model.bind_model(&mut g);
    let batch: Vec<&TrainRecord> = records.iter().collect();
    let loss = batch_loss(model, &mut g, &bound, &batch)?;
    g.backward(loss)?;
    let grad = bound.vars.iter().flat_map(|&v| g.grad(v).to_vec()).collect();
    Ok((g.scalar(loss), grad))
}

/// Root-mean-square error (mg/dL) of the mean forecast at horizon step `k` (1-based).
pub fn rmse_at(model: &ForecasterModel, records: &[TrainRecord], k: usize) -> Result<f64> {
    if records.is_empty() || k == 0 || k > model.horizon {
        return Err(Error::Config(format!("rmse at step {k} over {} records", records.len())));
    }
    let windows: Vec<&FeatureWindow> = records.iter().map(|r| &r.window).collect();
    let doses: Vec<f64> = records.iter().map(|r| r.dose).collect();
    let dists = model.predict_batch(&windows, &doses)?;
    let se: f64 = dists
        .iter()
        .zip(records)
        .map(|(d, r)| (d.mu[k - 1] - r.target[k - 1]).powi(2))
        .sum();
    Ok((se / records.len() as f64).sqrt())
}
