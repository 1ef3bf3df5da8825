//! Oracles shared by the integration suites and the acceptance run.
#![allow(dead_code)]

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use tsode_core::diffkit::{rk4_integrate, Dense, Graph, GruCell, GruVars, Mlp, Parameterized, Tensor, Var};
use tsode_core::forecaster::{
    evaluate_nll, loss_and_gradient, split_records, ForecastDist, ForecasterModel, RecordSplit, Standardizer, HORIZON, WINDOW_LEN,
};
use tsode_core::looprt::{Controller, ControllerKind, Episode, LoopConfig, Mode, Outcome, StepRecord};
use tsode_core::safegate::{check_safety, gate, largest_safe_dose_by, ConformalCalibration, Decision, GateInput, SafetyConfig};
use tsode_core::tspolicy::{ActionGrid, ArmStats, BinSpec, PolicyTable, SelectMode};
use tsode_core::vpatient::Cohort;

pub const EPS: f64 = 1e-5;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central differences of `loss` with respect to every entry of `x`.
pub fn numeric_grad(x: &[f64], loss: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + EPS;
            let up = loss(&x);
            x[i] = orig - EPS;
            let down = loss(&x);
            x[i] = orig;
            (up - down) / (2.0 * EPS)
        })
        .collect()
}

/// Worst relative error between tape and finite-difference gradients of a
/// squared readout of a GRU unrolled over four steps, over every weight.
pub fn gru_worst_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cell = GruCell::new(3, 5, &mut rng);
    let inputs: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let h0: Vec<f64> = (0..5).map(|_| rng.random_range(-0.5..0.5)).collect();
    let readout: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();

    let loss_of = |cell: &GruCell| -> f64 {
        let h = cell.forward(&inputs, &h0).unwrap();
        h.iter().zip(&readout).map(|(a, b)| a * b).sum::<f64>().powi(2)
    };

    let mut g = Graph::new();
    let vars = cell.bind(&mut g);
    let gv = GruVars::from_bound(&cell, &vars);
    let xs: Vec<Var> = inputs.iter().map(|x| g.leaf(x)).collect();
    let h = g.leaf(&h0);
    let out = gv.forward(&mut g, &xs, h).unwrap();
    let r = g.leaf(&readout);
    let prod = g.mul(out, r).unwrap();
    let s = g.sum(prod);
    let loss = g.square(s);
    assert!((g.scalar(loss) - loss_of(&cell)).abs() < 1e-12);
    g.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for (ti, (_, t)) in cell.named_tensors().into_iter().enumerate() {
        let analytic = g.grad(vars[ti]).to_vec();
        let numeric = numeric_grad(&t.values, |vals| {
            let mut c = cell.clone();
            c.tensors_mut()[ti].values.copy_from_slice(vals);
            loss_of(&c)
        });
        for (a, n) in analytic.iter().zip(&numeric) {
            worst = worst.max(rel_err(*a, *n));
        }
    }
    worst
}

/// One randomly-wired graph exercising every differentiable op.
pub fn random_graph(seed: u64, x: &[f64], g: &mut Graph) -> (Var, Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = x.len();
    let xv = g.leaf(x);
    let w: Vec<f64> = (0..n * n).map(|_| rng.random_range(-0.8..0.8)).collect();
    let b: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
    let c: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    let w = g.leaf(&w);
    let b = g.leaf(&b);
    let c = g.leaf(&c);
    let a = g.affine(w, xv, Some(b), n).unwrap();
    let t = g.tanh(a);
    let s = g.sigmoid(xv);
    let m = g.mul(t, s).unwrap();
    let e = g.exp(s);
    let d = g.div(m, e).unwrap();
    let sq = g.square(xv);
    let sqc = g.add(sq, c).unwrap();
    let l = g.ln(sqc);
    let lz = g.lerp(s, d, l).unwrap();
    let sub = g.sub(lz, t).unwrap();
    let sc = g.scale(sub, rng.random_range(-2.0..2.0));
    let ac = g.add_const(sc, 0.3);
    let ads = g.add_scaled(ac, m, 0.7).unwrap();
    let head = g.slice(ads, 0, n / 2).unwrap();
    let tail = g.slice(ads, n / 2, n - n / 2).unwrap();
    let cat = g.concat(tail, head);
    let sq2 = g.square(cat);
    let mean = g.mean(sq2);
    let total = g.sum(ads);
    let loss = g.add(mean, total).unwrap();
    (xv, loss)
}

/// Worst relative gradient error over `configs` random graphs.
pub fn random_graph_worst_error(configs: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..configs {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let n = rng.random_range(2..7);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
        let mut g = Graph::new();
        let (xv, loss) = random_graph(seed, &x, &mut g);
        g.backward(loss).unwrap();
        let analytic = g.grad(xv).to_vec();
        let numeric = numeric_grad(&x, |xs| {
            let mut g = Graph::new();
            let (_, l) = random_graph(seed, xs, &mut g);
            g.scalar(l)
        });
        for (a, n) in analytic.iter().zip(&numeric) {
            worst = worst.max(rel_err(*a, *n));
        }
    }
    worst
}

fn linear_flow(rate: f64) -> Mlp {
    Mlp::from_layers(vec![Dense {
        weight: Tensor::from_vec(&[1, 1], vec![rate]).unwrap(),
        bias: Tensor::zeros(&[1]),
    }])
    .unwrap()
}

/// RK4 on dz/dt = -z: the end state and its derivative with respect to z0.
pub fn integrate_decay(z0: f64, steps: usize, h: f64) -> (f64, f64) {
    let mlp = linear_flow(-1.0);
    let mut g = Graph::new();
    let vars = mlp.bind_vars(&mut g);
    let z = g.leaf(&[z0]);
    let zs = rk4_integrate(&mut g, |g, z| vars.forward(g, z), z, steps, h).unwrap();
    let last = *zs.last().unwrap();
    let zk = g.scalar(last);
    g.backward(last).unwrap();
    (zk, g.grad(z)[0])
}

/// Observed convergence orders of RK4 on the decay flow as the step halves.
pub fn rk4_orders() -> Vec<f64> {
    let exact = (-1.0f64).exp();
    let err = |n: usize| (integrate_decay(1.0, n, 1.0 / n as f64).0 - exact).abs();
    [2usize, 4, 8, 16].iter().map(|&n| (err(n) / err(2 * n)).log2()).collect()
}

/// Warm-up log of one cohort patient under exploring TSODE, split 70/15/15.
pub fn warmup_splits(patient: &str, days: usize, seed: u64) -> RecordSplit {
    let cohort = Cohort::standard();
    let p = *cohort.get(patient).unwrap();
    let cfg = LoopConfig::default();
    let mut ep = Episode::new(patient, p, cfg.clone(), Controller::fresh(ControllerKind::Tsode, &p, &cfg), seed).unwrap();
    ep.run(days, Mode::Warmup).unwrap();
    split_records(ep.feature_log(), WINDOW_LEN, HORIZON, 0.7, 0.15, patient).unwrap()
}

/// Worst relative error of the forecaster's NLL gradient against central
/// differences over every parameter, on a single-record batch.
pub fn forecaster_nll_worst_error() -> f64 {
    let splits = warmup_splits("adult#003", 2, 21);
    let record = splits.train[137].clone();
    let batch = std::slice::from_ref(&record);
    let mut model = ForecasterModel::new(3);
    model.standardizer = Standardizer::fit(&splits.train, 3.0).unwrap();
    let (loss, grad) = loss_and_gradient(&model, batch).unwrap();
    assert!((loss - evaluate_nll(&model, batch).unwrap()).abs() < 1e-12);

    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    let mut flat = 0;
    let n_tensors = model.tensors_mut().len();
    for t in 0..n_tensors {
        for i in 0..model.tensors_mut()[t].values.len() {
            let orig = model.tensors_mut()[t].values[i];
            model.tensors_mut()[t].values[i] = orig + eps;
            let up = evaluate_nll(&model, batch).unwrap();
            model.tensors_mut()[t].values[i] = orig - eps;
            let down = evaluate_nll(&model, batch).unwrap();
            model.tensors_mut()[t].values[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = grad[flat];
            worst = worst.max((numeric - analytic).abs() / analytic.abs().max(numeric.abs()).max(1e-4));
            flat += 1;
        }
    }
    assert_eq!(flat, grad.len());
    worst
}

pub fn on_grid(grid: &ActionGrid, u: f64) -> bool {
    grid.doses.iter().any(|&d| (d - u).abs() < 1e-12)
}

/// Random forecast whose level falls with dose, optionally with a wobble
/// that breaks monotonicity in the dose.
pub fn synthetic_forecast(rng: &mut ChaCha8Rng, bg: f64, k: usize) -> impl Fn(f64) -> ForecastDist {
    let drift: f64 = rng.random_range(-3.0..3.0);
    let effect: f64 = rng.random_range(0.0..40.0);
    let wobble: f64 = if rng.random_bool(0.5) { rng.random_range(0.0..30.0) } else { 0.0 };
    let freq: f64 = rng.random_range(1.0..9.0);
    move |u: f64| {
        let mu = (1..=k)
            .map(|i| {
                let f = i as f64 / k as f64;
                bg + drift * 3.0 * i as f64 - effect * u * f + wobble * (freq * u).sin() * f
            })
            .collect();
        ForecastDist {
            mu,
            var: vec![4.0; k],
            dose: u,
        }
    }
}

/// Run the gate on `n` random instances and return the first contract
/// violation, or the set of decisions produced.
pub fn gate_fuzz(n: usize, seed: u64) -> Result<HashSet<Decision>, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = ActionGrid::default();
    let base = SafetyConfig::default();
    let mut seen = HashSet::new();
    for _ in 0..n {
        let cfg = SafetyConfig {
            bypass_bg: rng.random_range(150.0..300.0),
            ..base.clone()
        };
        let cal = ConformalCalibration {
            q_alpha: rng.random_range(0.0..30.0),
            ..ConformalCalibration::exact()
        };
        let input = GateInput {
            proposed: grid.doses[rng.random_range(0..grid.len())],
            bg_now: rng.random_range(40.0..400.0),
            trend: rng.random_range(-4.0..4.0),
            iob: rng.random_range(0.0..6.0),
            minute_of_day: rng.random_range(0.0..1440.0),
        };
        let forecast = synthetic_forecast(&mut rng, input.bg_now, cfg.k);
        let use_cal = rng.random_bool(0.8);
        let v = gate(input, |u| Ok(forecast(u)), use_cal.then_some(&cal), &cfg, &grid).map_err(|e| e.to_string())?;
        seen.insert(v.decision);

        let fail = |what: &str| Err(format!("{what}: {input:?} -> {v:?}"));
        if v.final_dose > v.proposed_dose + 1e-12 || v.final_dose < 0.0 {
            return fail("final dose outside [0, proposed]");
        }
        if !on_grid(&grid, v.final_dose) {
            return fail("final dose off the grid");
        }
        if v.decision == Decision::Reject && v.final_dose != 0.0 {
            return fail("reject with a nonzero dose");
        }
        if input.bg_now < cfg.guard_bg_min && v.final_dose != 0.0 {
            return fail("dose below the guard");
        }
        if v.final_dose > 0.0
            && use_cal
            && matches!(v.decision, Decision::Accept | Decision::Scaled)
            && !check_safety(&forecast(v.final_dose), input.bg_now, &cal, &cfg).passes
        {
            return fail("accepted dose fails the safety check");
        }
        if cfg.in_night(input.minute_of_day) && v.final_dose > cfg.night_cap + 1e-12 {
            return fail("night cap exceeded");
        }
        if v.final_dose > 0.0 && input.iob + v.final_dose > cfg.iob_cap + 1e-9 {
            return fail("IOB cap exceeded");
        }
    }
    Ok(seen)
}

/// Bisection over `n` random predicates, mostly non-monotone. The result
/// must be safe (or zero) whenever any positive grid dose is, and exactly
/// the best dose when the predicate is monotone.
pub fn bisection_fuzz(n: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = ActionGrid::default();
    for i in 0..n {
        let u_prop = grid.doses[rng.random_range(1..grid.len())];
        let monotone = rng.random_bool(0.3);
        let threshold: f64 = rng.random_range(0.0..3.0);
        let pattern: Vec<bool> = (0..64).map(|_| rng.random_bool(0.5)).collect();
        let safe = |u: f64| -> bool {
            if monotone {
                u <= threshold
            } else {
                u == 0.0 || pattern[((u * 97.0) as usize) % 64]
            }
        };
        let r = largest_safe_dose_by(|u| Ok(safe(u)), u_prop, &grid, 0.01).map_err(|e| e.to_string())?;
        if r > u_prop || !on_grid(&grid, r) {
            return Err(format!("instance {i}: {r} not a grid dose below {u_prop}"));
        }
        let any = grid.doses.iter().any(|&d| d > 0.0 && d <= u_prop && safe(d));
        if (any || r > 0.0) && !safe(r) {
            return Err(format!("instance {i}: returned unsafe dose {r}"));
        }
        if monotone {
            let best = grid.doses.iter().copied().filter(|&d| d <= u_prop && safe(d)).fold(0.0, f64::max);
            if (r - best).abs() > 1e-12 {
                return Err(format!("instance {i}: monotone predicate gave {r}, best {best}"));
            }
        }
    }
    Ok(())
}

/// Per-step contract check of a closed-loop trace.
pub fn trace_violation(kind: ControllerKind, trace: &[StepRecord], cfg: &LoopConfig) -> Option<String> {
    let mut last: Option<usize> = None;
    for r in trace {
        let s = r.step;
        if r.delivered_dose < 0.0 || r.delivered_dose > r.final_dose + 1e-12 {
            return Some(format!("step {s}: delivered {} vs final {}", r.delivered_dose, r.final_dose));
        }
        if r.decision != Outcome::Refractory && r.delivered_dose != r.final_dose {
            return Some(format!("step {s}: delivered differs from final outside refractory"));
        }
        if r.decision.is_gated() && r.final_dose > r.proposed_dose + 1e-12 {
            return Some(format!("step {s}: final {} above proposed {}", r.final_dose, r.proposed_dose));
        }
        let grid_ok = match kind {
            ControllerKind::MealBolus => r.delivered_dose <= 10.0,
            _ => cfg.grid.index_of(r.delivered_dose).is_some(),
        };
        if !grid_ok {
            return Some(format!("step {s}: off-grid dose {}", r.delivered_dose));
        }
        if kind == ControllerKind::Tsode && r.bg_observed < cfg.safety.guard_bg_min && r.delivered_dose != 0.0 {
            return Some(format!("step {s}: dose {} at BG {}", r.delivered_dose, r.bg_observed));
        }
        if r.delivered_dose > 0.0 {
            if let Some(prev) = last {
                let gap = (s - prev) as f64 * cfg.dt;
                if gap < cfg.refractory {
                    return Some(format!("step {s}: {gap} min between boluses"));
                }
            }
            last = Some(s);
        }
    }
    None
}

/// Hit counts of every state over a dense (BG, trend) grid.
pub fn discretize_hits() -> Vec<usize> {
    let bins = BinSpec::default();
    let mut hits = vec![0usize; bins.n_states()];
    for i in 0..=2800 {
        let bg = i as f64 * 0.25;
        for j in 0..=2000 {
            let trend = -10.0 + j as f64 * 0.01;
            let s = bins.discretize(bg, trend);
            if s >= hits.len() {
                return Vec::new();
            }
            hits[s] += 1;
        }
    }
    hits
}

/// Worst relative disagreement of running Welford statistics with a two-pass
/// mean and sample variance on offset uniform batches.
pub fn welford_worst_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for &len in &[2usize, 10, 1_000, 100_000] {
        let xs: Vec<f64> = (0..len).map(|_| rng.random_range(-40.0..0.0) + 1e4).collect();
        let mut s = ArmStats::default();
        xs.iter().for_each(|&x| s.push(x));
        let n = len as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        worst = worst.max((s.mean - mean).abs() / mean.abs());
        worst = worst.max((s.variance().unwrap() - var).abs() / var);
    }
    worst
}

/// Best-arm picks out of 1000 Thompson draws after `pulls` updates on a
/// three-arm Gaussian bandit, and the greedy arm.
pub fn bandit_best_picks(pulls: usize, seed: u64) -> (usize, usize) {
    let means = [-12.0, -8.0, -4.0];
    let noise = Normal::new(0.0, 3.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = PolicyTable::new(1, 3);
    for _ in 0..pulls {
        let a = table.select(0, &mut rng, SelectMode::Explore);
        table.update(0, a, means[a] + noise.sample(&mut rng)).unwrap();
    }
    let best = (0..1_000).filter(|_| table.select(0, &mut rng, SelectMode::Explore) == 2).count();
    (best, table.select(0, &mut rng, SelectMode::Greedy))
}
