//! Primal-dual trainer on a slice of the benchmark.

use voltvar::autodiff::{lagrangian, lagrangian_gradient};
use voltvar::dynamics::{check_stability, EquilibriumOptions};
use voltvar::feeder::FeederModel;
use voltvar::grid_model::{build_sensitivities, GridModel, Scenario};
use voltvar::objective::ChanceConfig;
use voltvar::projection::FeasibleSetSpec;
use voltvar::rules::{validate_1547, RuleSet};
use voltvar::scenarios::{generate_synthetic, LoadProfile};
use voltvar::trainer::{metrics_to_csv_string, primal_update, project_rules, run_ord, Optimizer, TrainerConfig};

fn benchmark(count: usize) -> (GridModel, Vec<Scenario>) {
    let feeder = FeederModel::ieee37();
    let model = build_sensitivities(&feeder).unwrap();
    let set = generate_synthetic(&feeder, count, 3, LoadProfile::HighSolar).unwrap();
    (model, set.scenarios)
}

#[test]
fn small_projected_step_descends() {
    let (model, scenarios) = benchmark(10);
    let cfg = ChanceConfig::with_beta(0.1);
    let opts = EquilibriumOptions {
        tol: 1e-12,
        ..EquilibriumOptions::default()
    };
    let spec = FeasibleSetSpec::from_model(&model, 0.5);
    let start = RuleSet::uniform(&model.der_buses, 1.0, 0.01, 0.03, 1.5);
    let rules = project_rules(&start, &spec).unwrap();
    for lambda in [vec![0.0; model.n()], vec![0.05; model.n()]] {
        let z = rules.to_vector();
        let val = lagrangian_gradient(&z, &lambda, &model, &scenarios, &cfg, &opts).unwrap();
        let grad = val.gradient.unwrap();
        let mu = 1e-6 / grad.iter().map(|g| g.abs()).fold(0.0, f64::max);
        let dir: Vec<f64> = grad.iter().map(|g| mu * g).collect();
        let next = primal_update(&rules, &dir, &spec).unwrap();
        let after = lagrangian(&next.to_vector(), &lambda, &model, &scenarios, &cfg, &opts).unwrap();
        assert!(after.total < val.total, "{} !< {}", after.total, val.total);
    }
}

#[test]
fn iterates_stay_feasible_and_multipliers_bounded() {
    let (model, scenarios) = benchmark(20);
    let config = TrainerConfig {
        chance: ChanceConfig::with_beta(0.1),
        iterations: 60,
        param_tol: 0.0,
        optimizer: Optimizer::Sgd,
        mu_z: 1e-3,
        ..TrainerConfig::default()
    };
    let res = run_ord(&config, &model, &scenarios).unwrap();
    assert!(res.aborted.is_none(), "{:?}", res.aborted);
    assert_eq!(res.metrics.len(), 60);
    assert!(validate_1547(&res.rules, &model.q_hat).is_empty());
    assert!(check_stability(&res.rules, &model, 0.5).inner_ok);
    // λ grows by at most μ_λ decay^k (1 − β) per iteration.
    let cap = config.mu_lambda / (1.0 - config.decay);
    for l in &res.lambda_trajectory {
        assert!(l.iter().all(|&x| (0.0..=cap).contains(&x)));
    }
    assert!(res.metrics.iter().all(|m| m.loss.is_finite() && m.lagrangian.is_finite()));
}

#[test]
fn fixed_seed_reproduces_metrics_exactly() {
    let (model, scenarios) = benchmark(20);
    let config = TrainerConfig {
        chance: ChanceConfig::with_beta(0.15),
        iterations: 30,
        batch_size: Some(8),
        seed: 9,
        ..TrainerConfig::default()
    };
    let a = metrics_to_csv_string(&run_ord(&config, &model, &scenarios).unwrap().metrics);
    let b = metrics_to_csv_string(&run_ord(&config, &model, &scenarios).unwrap().metrics);
    assert_eq!(a, b);
    let other = TrainerConfig { seed: 10, ..config };
    let c = metrics_to_csv_string(&run_ord(&other, &model, &scenarios).unwrap().metrics);
    assert_ne!(a, c);
}

#[test]
fn single_precision_run_tracks_double() {
    let (model, scenarios) = benchmark(10);
    let config = TrainerConfig {
        iterations: 20,
        param_tol: 0.0,
        ..TrainerConfig::default()
    };
    let res64 = run_ord(&config, &model, &scenarios).unwrap();
    let model32: GridModel<f32> = model.cast();
    let scen32: Vec<Scenario<f32>> = scenarios.iter().map(|s| s.cast()).collect();
    let config32 = TrainerConfig::<f32> {
        iterations: 20,
        param_tol: 0.0,
        equilibrium_tol: 1e-5,
        ..TrainerConfig::default()
    };
    let res32 = run_ord(&config32, &model32, &scen32).unwrap();
    assert!(res32.aborted.is_none(), "{:?}", res32.aborted);
    let (l64, l32) = (res64.final_metrics().unwrap().loss, res32.final_metrics().unwrap().loss as f64);
    assert!((l64 - l32).abs() <= 1e-3 * l64, "{l64} vs {l32}");
}
