//! Closed-loop Volt/VAR dynamics `v^t = X q^t + ṽ`, `q^{t+1}_n = f_n(v^t_n)`,
//! iterated to a fixed point. Each step is one "layer" of the unrolled
//! recurrence; the recorded inputs let [`crate::autodiff`] backpropagate
//! through exactly the iterations that were run.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid_model::{GridModel, Scenario};
use crate::rules::{RampMask, RuleSet};
use crate::scalar::{norm2, norm_inf, Real};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StabilityReport<T> {
    /// `‖diag(α) X‖₂` over the DER buses.
    pub spectral_norm: T,
    /// `‖diag(α) X‖₂ ≤ 1 − ε`.
    pub spectral_ok: bool,
    /// `X α ≤ (1 − ε) 1` and `α_n Σ_m X_nm ≤ 1 − ε` for every DER.
    pub inner_ok: bool,
}

pub fn check_stability<T: Real>(rules: &RuleSet<T>, model: &GridModel<T>, epsilon: T) -> StabilityReport<T> {
    let x = model.x_der();
    let bound = T::one() - epsilon;
    let spectral_norm = x.scale_rows(&rules.alpha).spectral_norm();
    let x_alpha = x.matvec(&rules.alpha);
    let row_sums = x.row_sums();
    let inner_ok = x_alpha.iter().all(|&v| v <= bound) && rules.alpha.iter().zip(&row_sums).all(|(&a, &s)| a * s <= bound);
    StabilityReport {
        spectral_norm,
        spectral_ok: spectral_norm <= bound,
        inner_ok,
    }
}

/// Smallest `T` with `T ≥ (ln 2‖q̂‖₂ − ln ε₁) / ln (1−ε)⁻¹`, floored at zero.
pub fn depth_bound<T: Real>(q_hat: &[T], epsilon: T, epsilon1: T) -> Result<usize> {
    if !(epsilon1 > T::zero()) {
        return Err(Error::InvalidParameter {
            name: "epsilon1",
            value: epsilon1.to_f64_lossy(),
            reason: "accuracy target must be positive",
        });
    }
    if !(epsilon > T::zero() && epsilon < T::one()) {
        return Err(Error::InvalidParameter {
            name: "epsilon",
            value: epsilon.to_f64_lossy(),
            reason: "stability margin must lie in (0, 1)",
        });
    }
    let num = (T::lit(2.0) * norm2(q_hat)).ln() - epsilon1.ln();
    let den = -(T::one() - epsilon).ln();
    let t = (num / den).ceil();
    Ok(if t > T::zero() { t.to_f64_lossy() as usize } else { 0 })
}

#[derive(Clone, Debug)]
pub struct EquilibriumOptions<T> {
    pub max_iters: usize,
    /// Stop once `‖q^{t+1} − q^t‖₂ < tol`.
    pub tol: T,
    /// DER injections to start from; zeros when `None`.
    pub q_init: Option<Vec<T>>,
    /// Keep per-iteration inputs for backpropagation.
    pub record: bool,
}

impl<T: Real> Default for EquilibriumOptions<T> {
    fn default() -> Self {
        Self {
            max_iters: 10_000,
            tol: T::lit(1e-7),
            q_init: None,
            record: false,
        }
    }
}

impl<T: Real> EquilibriumOptions<T> {
    /// Iteration cap implied by a contraction factor of `1 − ε`.
    pub fn with_depth_cap(q_hat: &[T], epsilon: T, tol: T) -> Result<Self> {
        Ok(Self {
            max_iters: depth_bound(q_hat, epsilon, tol)? + 2,
            tol,
            ..Self::default()
        })
    }

    pub fn recording(mut self) -> Self {
        self.record = true;
        self
    }
}

/// Per-iteration record of an unrolled solve.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    /// DER voltages fed to the rules at each step, `v^0 … v^{T−1}`.
    pub inputs: Vec<Vec<T>>,
    /// Active ramps at each step, aligned with `inputs`.
    pub masks: Vec<Vec<RampMask>>,
}

impl<T> Tape<T> {
    pub fn depth(&self) -> usize {
        self.inputs.len()
    }
}

#[derive(Clone, Debug)]
pub struct EquilibriumResult<T> {
    /// Full length-N injections (zero at non-DER buses).
    pub q_star: Vec<T>,
    /// Full length-N voltages `X q* + ṽ`.
    pub v_star: Vec<T>,
    pub iterations: usize,
    /// `‖q^{T} − q^{T−1}‖∞`.
    pub residual: T,
    /// DER injections, aligned with the model's DER order.
    pub q_der: Vec<T>,
    pub v_tilde: Vec<T>,
    pub tape: Option<Tape<T>>,
    /// `‖q^{t+1} − q^t‖₂` for each step.
    pub residual_trajectory: Vec<T>,
}

pub fn equilibrium<T: Real>(
    rules: &RuleSet<T>,
    model: &GridModel<T>,
    scenario: &Scenario<T>,
    opts: &EquilibriumOptions<T>,
) -> Result<EquilibriumResult<T>> {
    let v_tilde = model.uncompensated_voltage(scenario)?;
    equilibrium_from_v_tilde(rules, model, v_tilde, opts)
}

/// Same as [`equilibrium`] but starting from precomputed uncompensated voltages.
pub fn equilibrium_from_v_tilde<T: Real>(
    rules: &RuleSet<T>,
    model: &GridModel<T>,
    v_tilde: Vec<T>,
    opts: &EquilibriumOptions<T>,
) -> Result<EquilibriumResult<T>> {
    let k = model.num_ders();
    if rules.len() != k || rules.buses != model.der_buses {
        return Err(Error::Dimension {
            what: "rule set vs DER buses",
            expected: k,
            got: rules.len(),
        });
    }
    if v_tilde.len() != model.n() {
        return Err(Error::Dimension {
            what: "uncompensated voltage",
            expected: model.n(),
            got: v_tilde.len(),
        });
    }
    if !(opts.tol > T::zero()) {
        return Err(Error::InvalidParameter {
            name: "tol",
            value: opts.tol.to_f64_lossy(),
            reason: "tolerance must be positive",
        });
    }
    let mut q = match &opts.q_init {
        Some(q0) if q0.len() != k => {
            return Err(Error::Dimension {
                what: "q_init",
                expected: k,
                got: q0.len(),
            })
        }
        Some(q0) => q0.clone(),
        None => vec![T::zero(); k],
    };
    let x = model.x_der();
    let vt_der = model.gather(&v_tilde);
    let params: Vec<_> = (0..k).map(|i| rules.get(i)).collect();
    let mut tape = opts.record.then(Tape::default);
    let mut residuals = Vec::new();
    let mut last_inf = T::infinity();
    let mut converged = false;

    for _ in 0..opts.max_iters {
        let xq = x.matvec(&q);
        let v: Vec<T> = xq.iter().zip(&vt_der).map(|(&a, &b)| a + b).collect();
        let q_next: Vec<T> = params.iter().zip(&v).map(|(p, &vi)| p.eval_relu(vi)).collect();
        let diff: Vec<T> = q_next.iter().zip(&q).map(|(&a, &b)| a - b).collect();
        let step = norm2(&diff);
        last_inf = norm_inf(&diff);
        if let Some(t) = tape.as_mut() {
            t.masks.push(params.iter().zip(&v).map(|(p, &vi)| p.ramp_mask(vi)).collect());
            t.inputs.push(v);
        }
        residuals.push(step);
        q = q_next;
        if !step.is_finite() {
            break;
        }
        if step < opts.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Divergence {
            iterations: residuals.len(),
            residuals: residuals.iter().map(|r| r.to_f64_lossy()).collect(),
        });
    }
    let v_star = model.voltage_with(&q, &v_tilde);
    Ok(EquilibriumResult {
        q_star: model.embed(&q),
        v_star,
        iterations: residuals.len(),
        residual: last_inf,
        q_der: q,
        v_tilde,
        tape,
        residual_trajectory: residuals,
    })
}

/// Equilibria for a batch of scenarios, in scenario order.
pub fn equilibria<T: Real>(
    rules: &RuleSet<T>,
    model: &GridModel<T>,
    scenarios: &[Scenario<T>],
    opts: &EquilibriumOptions<T>,
) -> Result<Vec<EquilibriumResult<T>>> {
    scenarios.par_iter().map(|s| equilibrium(rules, model, s, opts)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::rules::RuleParams;

    fn scalar_model(x: f64) -> GridModel {
        GridModel::from_parts(Matrix::from_rows(&[[x / 2.0]]), Matrix::from_rows(&[[x]]), 1.0, vec![1], vec![1.0]).unwrap()
    }

    /// Fixed point of `q = f(x q + ṽ)` by bisection on the decreasing map `q − f(xq+ṽ)`.
    fn bisect_fixed_point(p: &RuleParams, x: f64, vt: f64) -> f64 {
        let g = |q: f64| q - p.eval_piecewise(x * q + vt);
        let (mut lo, mut hi) = (-p.q_bar() - 1.0, p.q_bar() + 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn scalar_stability_examples() {
        let m = scalar_model(0.04);
        let ok = check_stability(&RuleSet::uniform(&[1], 1.0, 0.0, 0.1, 10.0), &m, 0.5);
        assert!((ok.spectral_norm - 0.4).abs() < 1e-15);
        assert!(ok.spectral_ok && ok.inner_ok);
        let bad = check_stability(&RuleSet::uniform(&[1], 1.0, 0.0, 0.1, 20.0), &m, 0.5);
        assert!(!bad.spectral_ok && !bad.inner_ok);
        let zero = check_stability(&RuleSet::uniform(&[1], 1.0, 0.0, 0.1, 0.0), &m, 0.5);
        assert!(zero.spectral_ok && zero.inner_ok);
    }

    #[test]
    fn depth_bound_examples() {
        // ‖q̂‖₂ = 0.5 → ln(1) − ln(1e−7) over ln 2 = 23.25…
        assert_eq!(depth_bound(&[0.3, 0.4], 0.5, 1e-7).unwrap(), 24);
        assert_eq!(depth_bound(&[0.3, 0.4], 0.5, 1.0).unwrap(), 0);
        assert!(depth_bound(&[0.3], 0.5, 0.0).is_err());
        assert!(depth_bound(&[0.3], 1.5, 1e-3).is_err());
    }

    #[test]
    fn depth_bound_reaches_bisection_fixed_point() {
        let p = RuleParams::new(1.0, 0.01, 0.1, 8.0);
        let x = 0.05;
        let vt = 1.06;
        let q_hat = [p.q_bar()];
        let eps = 1.0 - 8.0 * x; // contraction factor α x
        let eps1 = 1e-9;
        let t = depth_bound(&q_hat, eps, eps1).unwrap();
        let model = scalar_model(x);
        let rules = RuleSet::uniform(&[1], p.v_bar, p.delta, p.sigma, p.alpha);
        let mut q = 0.0;
        for _ in 0..t {
            q = rules.get(0).eval_relu(model.x[(0, 0)] * q + vt);
        }
        assert!((q - bisect_fixed_point(&p, x, vt)).abs() <= eps1);
    }

    #[test]
    fn open_loop_when_slopes_vanish() {
        let model = scalar_model(0.04);
        let rules = RuleSet::uniform(&[1], 1.0, 0.0, 0.1, 0.0);
        let s = Scenario::new(vec![1.0], vec![0.25]).unwrap();
        let eq = equilibrium(&rules, &model, &s, &EquilibriumOptions::default()).unwrap();
        let vt = model.uncompensated_voltage(&s).unwrap();
        assert_eq!(eq.q_star, vec![0.0]);
        assert_eq!(eq.v_star, vt);
        assert_eq!(eq.iterations, 1);
    }

    #[test]
    fn scalar_linear_segment_fixed_point() {
        let model = scalar_model(0.04);
        let rules = RuleSet::uniform(&[1], 1.0, 0.0, 0.1, 5.0);
        // ṽ = v0 + X q̃ = 1.05 with q̃ = 1.25.
        let s = Scenario::new(vec![0.0], vec![1.25]).unwrap();
        let opts = EquilibriumOptions {
            tol: 1e-13,
            ..Default::default()
        };
        let eq = equilibrium(&rules, &model, &s, &opts).unwrap();
        let oracle = bisect_fixed_point(&rules.get(0), 0.04, 1.05);
        assert!((oracle + 0.25 / 1.2).abs() < 1e-12);
        assert!((eq.q_star[0] - oracle).abs() < 1e-12);
        assert!((eq.v_star[0] - 1.041_666_666_666_666_7).abs() < 1e-12);
    }

    #[test]
    fn divergence_carries_trajectory() {
        let model = scalar_model(0.04);
        // α X = 1.2: oscillates between saturation levels.
        let rules = RuleSet::uniform(&[1], 1.0, 0.0, 0.1, 30.0);
        let s = Scenario::new(vec![0.0], vec![1.25]).unwrap();
        let opts = EquilibriumOptions {
            max_iters: 50,
            ..Default::default()
        };
        match equilibrium(&rules, &model, &s, &opts) {
            Err(Error::Divergence { iterations, residuals }) => {
                assert_eq!(iterations, 50);
                assert_eq!(residuals.len(), 50);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn tape_records_every_step() {
        let model = scalar_model(0.04);
        let rules = RuleSet::uniform(&[1], 1.0, 0.0, 0.1, 5.0);
        let s = Scenario::new(vec![0.0], vec![1.25]).unwrap();
        let opts = EquilibriumOptions::default().recording();
        let eq = equilibrium(&rules, &model, &s, &opts).unwrap();
        let tape = eq.tape.unwrap();
        assert_eq!(tape.depth(), eq.iterations);
        assert_eq!(tape.inputs[0], vec![1.05]);
        // Linear segment above the deadband: only the first ramp is on.
        assert_eq!(tape.masks[0][0], RampMask([true, false, false, false]));
    }
}
