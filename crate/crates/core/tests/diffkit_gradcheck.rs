//! Finite-difference and closed-form oracles for the autodiff kernel.

mod common;

use common::{integrate_decay, random_graph, rel_err};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tsode_core::diffkit::{Graph, GruCell, GruVars, Parameterized, Var};

#[test]
fn gru_weight_gradients_match_finite_differences() {
    let worst = common::gru_worst_error(42);
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn gru_sum_output_gradients_are_finite() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cell = GruCell::new(7, 32, &mut rng);
    let mut g = Graph::new();
    let vars = cell.bind(&mut g);
    let gv = GruVars::from_bound(&cell, &vars);
    let xs: Vec<Var> = (0..10).map(|i| g.leaf(&[0.1 * i as f64; 7])).collect();
    let h0 = g.leaf(&[0.0; 32]);
    let out = gv.forward(&mut g, &xs, h0).unwrap();
    let loss = g.sum(out);
    g.backward(loss).unwrap();
    for v in vars {
        assert!(g.grad(v).iter().all(|x| x.is_finite()));
    }
}

#[test]
fn rk4_gradient_matches_amplification_factor() {
    for &(steps, h) in &[(10usize, 0.1f64), (7, 0.25), (20, 0.05)] {
        let factor = 1.0 - h + h * h / 2.0 - h.powi(3) / 6.0 + h.powi(4) / 24.0;
        let expected = factor.powi(steps as i32);
        let (zk, dz0) = integrate_decay(1.0, steps, h);
        assert!(rel_err(dz0, expected) < 1e-8, "h={h}: {dz0} vs {expected}");
        assert!(rel_err(zk, expected) < 1e-12);
    }
}

#[test]
fn rk4_linear_flow_hits_inverse_e() {
    let (zk, _) = integrate_decay(1.0, 10, 0.1);
    assert!((zk - 0.367879).abs() < 1e-5, "{zk}");
}

#[test]
fn rk4_converges_at_fourth_order() {
    let orders = common::rk4_orders();
    assert!(orders.iter().all(|&o| o >= 3.5), "observed orders {orders:?}");
}

#[test]
fn randomized_graphs_match_finite_differences() {
    let worst = common::random_graph_worst_error(100);
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn repeated_backward_after_reset_is_identical() {
    let x = [0.3, -0.7, 1.1, 0.2];
    let mut g = Graph::new();
    let (xv, loss) = random_graph(5, &x, &mut g);
    g.backward(loss).unwrap();
    let first = g.grad(xv).to_vec();
    g.reset();
    let (xv, loss) = random_graph(5, &x, &mut g);
    g.backward(loss).unwrap();
    assert_eq!(first, g.grad(xv));
}
