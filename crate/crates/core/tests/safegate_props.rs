mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use tsode_core::looprt::{Controller, ControllerKind, Episode, ForecastSource, LoopConfig, Mode};
use tsode_core::safegate::{self, ConformalCalibration, Decision};
use tsode_core::vpatient::Cohort;

#[test]
fn gate_contract_holds_on_fuzzed_instances() {
    let seen = common::gate_fuzz(10_000, 0xFEED).unwrap();
    for d in [
        Decision::Accept,
        Decision::Scaled,
        Decision::Reject,
        Decision::Bypassed,
        Decision::GuardrailBlocked,
        Decision::GuardrailCapped,
    ] {
        assert!(seen.contains(&d), "fuzzer never produced {d}");
    }
}

#[test]
fn bisection_lands_on_a_safe_dose_for_arbitrary_predicates() {
    common::bisection_fuzz(10_000, 7).unwrap();
}

#[test]
fn conformal_quantile_covers_exchangeable_residuals() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let noise = Normal::new(0.0, 12.0).unwrap();
    for alpha in [0.05, 0.1, 0.2] {
        let cal_rows: Vec<Vec<f64>> = (0..600).map(|_| vec![noise.sample(&mut rng)]).collect();
        let cal = ConformalCalibration::from_residuals(&cal_rows, alpha, false).unwrap();
        let test_rows: Vec<Vec<f64>> = (0..20_000).map(|_| vec![noise.sample(&mut rng)]).collect();
        let cov = safegate::coverage(&cal, &test_rows);
        assert!(cov >= 1.0 - alpha - 0.05, "alpha {alpha}: coverage {cov}");
        assert!(cov <= 1.0 - alpha + 0.05, "alpha {alpha}: coverage {cov}");
    }
}

#[test]
fn oracle_gated_controller_avoids_severe_hypoglycaemia() {
    let cohort = Cohort::standard();
    let cfg = LoopConfig::default();
    for named in &cohort.patients {
        let p = named.params;
        let mut ep = Episode::new(&named.name, p, cfg.clone(), Controller::fresh(ControllerKind::Tsode, &p, &cfg), 3).unwrap();
        ep.run(30, Mode::Warmup).unwrap();
        if let Controller::Tsode {
            forecaster,
            calibration,
            ..
        } = &mut ep.controller
        {
            *forecaster = Some(ForecastSource::Oracle);
            *calibration = Some(ConformalCalibration::exact());
        }
        ep.run(14, Mode::Eval).unwrap();
        let low = ep.trace().iter().filter(|r| r.bg_true < 54.0).count();
        assert_eq!(low, 0, "{}: {low} steps below 54", named.name);
        assert!(ep.trace().iter().any(|r| r.w_lcb.is_some()), "{}: gate never consulted", named.name);
    }
}
