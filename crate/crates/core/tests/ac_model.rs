//! AC sweep against a nodal-admittance power computation, and the linear
//! model against finite differences of the AC solution.

use num_complex::Complex64;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voltvar::ac_validation::{ac_equilibria, ac_power_flow, model_error, AcOptions};
use voltvar::dynamics::{equilibria, EquilibriumOptions};
use voltvar::feeder::FeederModel;
use voltvar::grid_model::{build_sensitivities, GridModel, Scenario};
use voltvar::rules::RuleSet;
use voltvar::scenarios::{generate_synthetic, LoadProfile};

/// `S = V ∘ conj(Y V)` with `Y` assembled from the line list.
fn nodal_injections(feeder: &FeederModel, v: &[Complex64]) -> Vec<Complex64> {
    let n = feeder.n() + 1;
    let mut y = vec![vec![Complex64::new(0.0, 0.0); n]; n];
    for l in &feeder.lines {
        let g = Complex64::new(1.0, 0.0) / Complex64::new(l.r, l.x);
        y[l.from][l.from] += g;
        y[l.to][l.to] += g;
        y[l.from][l.to] -= g;
        y[l.to][l.from] -= g;
    }
    (0..n)
        .map(|i| {
            let yv: Complex64 = (0..n).map(|j| y[i][j] * v[j]).sum();
            v[i] * yv.conj()
        })
        .collect()
}

fn random_loading(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> (Vec<f64>, Vec<f64>) {
    let p = (0..n).map(|_| scale * rng.random_range(-0.08..0.05)).collect();
    let q = (0..n).map(|_| scale * rng.random_range(-0.04..0.02)).collect();
    (p, q)
}

#[test]
fn sweep_satisfies_nodal_power_balance() {
    let f = FeederModel::ieee37();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let (p, q) = random_loading(&mut rng, f.n(), 1.0);
        let sol = ac_power_flow(&f, &p, &q, &AcOptions::default()).unwrap();
        assert!(sol.converged && sol.mismatch <= 1e-9);
        let s = nodal_injections(&f, &sol.voltages);
        for i in 0..f.n() {
            let err = (s[i + 1] - Complex64::new(p[i], q[i])).norm();
            assert!(err <= 1e-8, "bus {}: {err:e}", i + 1);
        }
    }
}

#[test]
fn sensitivities_match_ac_finite_differences() {
    // d|V_n|²/dq_m and d|V_n|²/dp_m at zero loading, with v0 = 1.
    let mut f = FeederModel::ieee37();
    f.v0 = 1.0;
    let model: GridModel = build_sensitivities(&f).unwrap();
    let n = f.n();
    let h = 1e-5;
    let opts = AcOptions {
        mismatch_tol: 1e-12,
        ..AcOptions::default()
    };
    for m in [1, 9, 20, 35] {
        let mut plus = vec![0.0; n];
        let mut minus = vec![0.0; n];
        plus[m - 1] = h;
        minus[m - 1] = -h;
        let zero = vec![0.0; n];
        let dq: Vec<f64> = {
            let a = ac_power_flow(&f, &zero, &plus, &opts).unwrap().squared_magnitudes();
            let b = ac_power_flow(&f, &zero, &minus, &opts).unwrap().squared_magnitudes();
            a.iter().zip(&b).map(|(x, y)| (x - y) / (2.0 * h)).collect()
        };
        let dp: Vec<f64> = {
            let a = ac_power_flow(&f, &plus, &zero, &opts).unwrap().squared_magnitudes();
            let b = ac_power_flow(&f, &minus, &zero, &opts).unwrap().squared_magnitudes();
            a.iter().zip(&b).map(|(x, y)| (x - y) / (2.0 * h)).collect()
        };
        for row in 0..n {
            let (x, r) = (model.x[(row, m - 1)], model.r[(row, m - 1)]);
            assert!((dq[row] - x).abs() <= 0.05 * x, "X[{row}][{}]: {} vs {x}", m - 1, dq[row]);
            assert!((dp[row] - r).abs() <= 0.05 * r, "R[{row}][{}]: {} vs {r}", m - 1, dp[row]);
        }
    }
}

#[test]
fn linearization_error_shrinks_with_loading() {
    let f = FeederModel::ieee37();
    let model: GridModel = build_sensitivities(&f).unwrap();
    let flat = RuleSet::flat(&f.der_buses());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let (p, q) = random_loading(&mut rng, f.n(), 1.0);
        let s = Scenario::new(p, q).unwrap();
        let err = |sc: &Scenario| {
            let lin = equilibria(&flat, &model, std::slice::from_ref(sc), &EquilibriumOptions::default()).unwrap();
            let ac = ac_equilibria(&flat, &f, std::slice::from_ref(sc), &AcOptions::default()).unwrap();
            model_error(&lin, &ac).unwrap().max_abs
        };
        assert!(err(&s.scaled(0.5)) < err(&s));
    }
}

#[test]
fn closed_loop_error_is_small_on_benchmark() {
    let f = FeederModel::ieee37();
    let model: GridModel = build_sensitivities(&f).unwrap();
    let set = generate_synthetic(&f, 20, 3, LoadProfile::HighSolar).unwrap();
    let rules = RuleSet::ieee_default(&f.der_buses(), &model.q_hat);
    let lin = equilibria(&rules, &model, &set.scenarios, &EquilibriumOptions::default()).unwrap();
    let ac = ac_equilibria(&rules, &f, &set.scenarios, &AcOptions::default()).unwrap();
    let rep = model_error(&lin, &ac).unwrap();
    assert!(rep.mean_abs < rep.max_abs);
    assert!(rep.mean_abs < 5e-3 && rep.max_abs < 2e-2, "{rep:?}");
}
