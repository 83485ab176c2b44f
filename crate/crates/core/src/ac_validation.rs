//! Exact single-phase AC power flow on radial feeders by backward/forward
//! sweep, closed-loop Volt/VAR equilibria under that model, and the error of
//! the linear model against it.
//!
//! The substation is a slack bus at `v0∠0`. Rules are fed `|V|²`, matching the
//! squared-magnitude convention of [`crate::grid_model`].

use num_complex::Complex64;
use rayon::prelude::*;

use crate::dynamics::EquilibriumResult;
use crate::error::{Error, Result};
use crate::feeder::FeederModel;
use crate::grid_model::Scenario;
use crate::rules::RuleSet;
use crate::scalar::{norm2, norm_inf};

/// Buses whose magnitude drops below this abort the sweep.
pub const COLLAPSE_MAGNITUDE: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AcOptions {
    /// Largest tolerated complex power mismatch at any bus, pu.
    pub mismatch_tol: f64,
    pub max_sweeps: usize,
    /// Volt/VAR stopping tolerance on `‖q^{t+1} − q^t‖₂`.
    pub equilibrium_tol: f64,
    pub max_equilibrium_iters: usize,
}

impl Default for AcOptions {
    fn default() -> Self {
        Self {
            mismatch_tol: 1e-9,
            max_sweeps: 200,
            equilibrium_tol: 1e-7,
            max_equilibrium_iters: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AcSolution {
    /// Complex voltages of buses `0..=N`.
    pub voltages: Vec<Complex64>,
    pub converged: bool,
    pub sweeps: usize,
    /// Largest `|S_calc − S_spec|` over buses `1..=N` at the returned voltages.
    pub mismatch: f64,
}

impl AcSolution {
    /// `|V_n|²` for buses `1..=N`.
    pub fn squared_magnitudes(&self) -> Vec<f64> {
        self.voltages[1..].iter().map(|v| v.norm_sqr()).collect()
    }

    /// `|V_n|` for buses `1..=N`.
    pub fn magnitudes(&self) -> Vec<f64> {
        self.voltages[1..].iter().map(|v| v.norm()).collect()
    }
}

fn impedances(feeder: &FeederModel) -> Vec<Complex64> {
    let mut z = vec![Complex64::new(0.0, 0.0); feeder.n() + 1];
    for n in 1..=feeder.n() {
        let (_, line) = feeder.parent(n).expect("non-root bus has a parent");
        let l = &feeder.lines[line];
        z[n] = Complex64::new(l.r, l.x);
    }
    z
}

/// Largest complex power mismatch of `voltages` against the injections, with
/// branch currents recovered from Ohm's law.
pub fn injection_mismatch(feeder: &FeederModel, voltages: &[Complex64], p: &[f64], q: &[f64]) -> f64 {
    let n = feeder.n();
    let z = impedances(feeder);
    // Current on the line feeding bus m, parent → m.
    let mut branch = vec![Complex64::new(0.0, 0.0); n + 1];
    for m in 1..=n {
        let (parent, _) = feeder.parent(m).expect("non-root bus has a parent");
        branch[m] = (voltages[parent] - voltages[m]) / z[m];
    }
    let mut outflow = vec![Complex64::new(0.0, 0.0); n + 1];
    for m in 1..=n {
        let (parent, _) = feeder.parent(m).expect("non-root bus has a parent");
        outflow[parent] += branch[m];
    }
    (1..=n)
        .map(|m| {
            let s = voltages[m] * (outflow[m] - branch[m]).conj();
            (s - Complex64::new(p[m - 1], q[m - 1])).norm()
        })
        .fold(0.0, f64::max)
}

fn check_injections(feeder: &FeederModel, p: &[f64], q: &[f64]) -> Result<()> {
    for (what, v) in [("AC active injections", p), ("AC reactive injections", q)] {
        if v.len() != feeder.n() {
            return Err(Error::Dimension {
                what,
                expected: feeder.n(),
                got: v.len(),
            });
        }
        if let Some(index) = v.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { what, index });
        }
    }
    Ok(())
}

/// Solves the AC power flow for net injections `p + jq` on buses `1..=N`.
pub fn ac_power_flow(feeder: &FeederModel, p: &[f64], q: &[f64], opts: &AcOptions) -> Result<AcSolution> {
    ac_power_flow_from(feeder, p, q, opts, None)
}

fn ac_power_flow_from(feeder: &FeederModel, p: &[f64], q: &[f64], opts: &AcOptions, start: Option<&[Complex64]>) -> Result<AcSolution> {
    check_injections(feeder, p, q)?;
    let n = feeder.n();
    let z = impedances(feeder);
    let order = feeder.topological_order();
    let parents: Vec<usize> = (0..=n).map(|m| feeder.parent(m).map_or(0, |(p, _)| p)).collect();
    let v0 = Complex64::new(feeder.v0, 0.0);
    let mut v = match start {
        Some(s) if s.len() == n + 1 => s.to_vec(),
        _ => vec![v0; n + 1],
    };
    v[0] = v0;
    let s: Vec<Complex64> = (0..n).map(|i| Complex64::new(p[i], q[i])).collect();
    let mut mismatches = Vec::new();

    for sweep in 1..=opts.max_sweeps {
        // Backward: branch current parent → m is minus the injected current of m's subtree.
        let mut branch = vec![Complex64::new(0.0, 0.0); n + 1];
        for &m in order.iter().rev() {
            if m == 0 {
                continue;
            }
            branch[m] -= (s[m - 1] / v[m]).conj();
            let j = branch[m];
            branch[parents[m]] += j;
        }
        // Forward.
        for &m in &order {
            if m == 0 {
                continue;
            }
            v[m] = v[parents[m]] - z[m] * branch[m];
            let mag = v[m].norm();
            if !(mag >= COLLAPSE_MAGNITUDE) {
                return Err(Error::VoltageCollapse { bus: m, magnitude: mag });
            }
        }
        let mismatch = injection_mismatch(feeder, &v, p, q);
        mismatches.push(mismatch);
        if mismatch <= opts.mismatch_tol {
            return Ok(AcSolution {
                voltages: v,
                converged: true,
                sweeps: sweep,
                mismatch,
            });
        }
    }
    Err(Error::AcNonConvergence {
        sweeps: opts.max_sweeps,
        mismatches,
    })
}

/// Volt/VAR equilibrium under the AC model, starting from `q = 0`.
pub fn ac_equilibrium(
    rules: &RuleSet<f64>,
    feeder: &FeederModel,
    scenario: &Scenario<f64>,
    opts: &AcOptions,
) -> Result<EquilibriumResult<f64>> {
    let n = feeder.n();
    scenario.check(n)?;
    if rules.buses != feeder.der_buses() {
        return Err(Error::Dimension {
            what: "rule set vs DER buses",
            expected: feeder.ders.len(),
            got: rules.len(),
        });
    }
    let k = rules.len();
    let params: Vec<_> = (0..k).map(|i| rules.get(i)).collect();
    let base = ac_power_flow(feeder, &scenario.p_tilde, &scenario.q_tilde, opts)?;
    let v_tilde = base.squared_magnitudes();
    let mut q = vec![0.0; k];
    let mut v_full = v_tilde.clone();
    let mut warm = base.voltages;
    let mut residuals = Vec::new();

    for _ in 0..opts.max_equilibrium_iters {
        let q_next: Vec<f64> = params.iter().zip(&rules.buses).map(|(p, &b)| p.eval_relu(v_full[b - 1])).collect();
        let diff: Vec<f64> = q_next.iter().zip(&q).map(|(a, b)| a - b).collect();
        let step = norm2(&diff);
        let last_inf = norm_inf(&diff);
        residuals.push(step);
        if q_next != q {
            q = q_next;
            let mut q_inj = scenario.q_tilde.clone();
            for (&b, &qi) in rules.buses.iter().zip(&q) {
                q_inj[b - 1] += qi;
            }
            let sol = ac_power_flow_from(feeder, &scenario.p_tilde, &q_inj, opts, Some(&warm))?;
            v_full = sol.squared_magnitudes();
            warm = sol.voltages;
        }
        if step < opts.equilibrium_tol {
            let mut q_star = vec![0.0; n];
            for (&b, &qi) in rules.buses.iter().zip(&q) {
                q_star[b - 1] = qi;
            }
            return Ok(EquilibriumResult {
                q_star,
                v_star: v_full,
                iterations: residuals.len(),
                residual: last_inf,
                q_der: q,
                v_tilde,
                tape: None,
                residual_trajectory: residuals,
            });
        }
        if !step.is_finite() {
            break;
        }
    }
    Err(Error::Divergence {
        iterations: residuals.len(),
        residuals,
    })
}

/// AC equilibria for a batch, in scenario order.
pub fn ac_equilibria(
    rules: &RuleSet<f64>,
    feeder: &FeederModel,
    scenarios: &[Scenario<f64>],
    opts: &AcOptions,
) -> Result<Vec<EquilibriumResult<f64>>> {
    scenarios.par_iter().map(|s| ac_equilibrium(rules, feeder, s, opts)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelErrorReport {
    pub mean_abs: f64,
    pub max_abs: f64,
}

/// `|v_lin − v_ac|` statistics over all buses and scenarios.
pub fn model_error(lin: &[EquilibriumResult<f64>], ac: &[EquilibriumResult<f64>]) -> Result<ModelErrorReport> {
    if lin.len() != ac.len() {
        return Err(Error::Dimension {
            what: "equilibrium batches",
            expected: lin.len(),
            got: ac.len(),
        });
    }
    let mut sum = 0.0;
    let mut max: f64 = 0.0;
    let mut count = 0usize;
    for (l, a) in lin.iter().zip(ac) {
        if l.v_star.len() != a.v_star.len() {
            return Err(Error::Dimension {
                what: "equilibrium voltages",
                expected: l.v_star.len(),
                got: a.v_star.len(),
            });
        }
        for (x, y) in l.v_star.iter().zip(&a.v_star) {
            let e = (x - y).abs();
            sum += e;
            max = max.max(e);
            count += 1;
        }
    }
    Ok(ModelErrorReport {
        mean_abs: if count == 0 { 0.0 } else { sum / count as f64 },
        max_abs: max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::{Bus, Der, Line};

    fn two_bus(r: f64, x: f64, v0: f64) -> FeederModel {
        let buses = vec![
            Bus {
                id: 0,
                name: None,
                p_nom: 0.0,
                q_nom: 0.0,
            },
            Bus {
                id: 1,
                name: None,
                p_nom: 0.1,
                q_nom: 0.05,
            },
        ];
        FeederModel::new(
            buses,
            vec![Line { from: 0, to: 1, r, x }],
            v0,
            vec![Der {
                bus: 1,
                p_hat: 0.1,
                q_hat: 0.05,
            }],
        )
        .unwrap()
    }

    fn eq_result(v: Vec<f64>) -> EquilibriumResult<f64> {
        EquilibriumResult {
            q_star: vec![],
            v_star: v,
            iterations: 0,
            residual: 0.0,
            q_der: vec![],
            v_tilde: vec![],
            tape: None,
            residual_trajectory: vec![],
        }
    }

    #[test]
    fn zero_injection_is_flat() {
        let f = FeederModel::ieee37();
        let sol = ac_power_flow(&f, &vec![0.0; f.n()], &vec![0.0; f.n()], &AcOptions::default()).unwrap();
        assert_eq!(sol.sweeps, 1);
        assert!(sol.voltages.iter().all(|v| *v == Complex64::new(f.v0, 0.0)));
    }

    #[test]
    fn single_line_matches_quadratic() {
        let (r, x, v0) = (0.01, 0.02, 1.0);
        let f = two_bus(r, x, v0);
        let (p, q) = (-0.3, -0.1);
        let sol = ac_power_flow(&f, &[p], &[q], &AcOptions::default()).unwrap();
        // |v1 − z S*|² = v0² v1 in squared magnitudes.
        let a = r * p + x * q;
        let zs2 = (r * r + x * x) * (p * p + q * q);
        let b = 2.0 * a + v0 * v0;
        let v1 = (b + (b * b - 4.0 * zs2).sqrt()) / 2.0;
        assert!((sol.squared_magnitudes()[0] - v1).abs() < 1e-9);
        assert!(sol.mismatch <= 1e-9);
    }

    #[test]
    fn collapse_detected() {
        let f = two_bus(0.5, 1.0, 1.0);
        let r = ac_power_flow(&f, &[-2.0], &[-1.0], &AcOptions::default());
        assert!(
            matches!(r, Err(Error::VoltageCollapse { bus: 1, .. }) | Err(Error::AcNonConvergence { .. })),
            "{r:?}"
        );
    }

    #[test]
    fn flat_rules_reduce_to_plain_solve() {
        let f = FeederModel::ieee37();
        let rules = RuleSet::flat(&f.der_buses());
        let s = Scenario::new(vec![-0.02; f.n()], vec![-0.01; f.n()]).unwrap();
        let eq = ac_equilibrium(&rules, &f, &s, &AcOptions::default()).unwrap();
        let plain = ac_power_flow(&f, &s.p_tilde, &s.q_tilde, &AcOptions::default()).unwrap();
        assert_eq!(eq.v_star, plain.squared_magnitudes());
        assert!(eq.q_star.iter().all(|&q| q == 0.0));
    }

    #[test]
    fn model_error_examples() {
        let a = eq_result(vec![1.0; 25]);
        let rep = model_error(std::slice::from_ref(&a), std::slice::from_ref(&a)).unwrap();
        assert_eq!(
            rep,
            ModelErrorReport {
                mean_abs: 0.0,
                max_abs: 0.0
            }
        );
        let mut v = vec![1.0; 25];
        v[7] += 1e-3;
        let rep = model_error(&[a], &[eq_result(v)]).unwrap();
        assert!((rep.max_abs - 1e-3).abs() < 1e-15);
        assert!((rep.mean_abs - 4e-5).abs() < 1e-15);
    }
}
