//! Euclidean projection onto the feasible rule set in transformed coordinates
//! `ž = [v̄; c; δ; σ]` with `c = 1/α`, where every constraint is convex:
//!
//! * `v_bar_min ≤ v̄ ≤ v_bar_max`, `0 ≤ δ ≤ δ_max`, `δ + gap ≤ σ ≤ σ_max`
//! * `σ_n − δ_n ≤ q̂_n c_n`                      (saturation within capability)
//! * `c_n ≥ Σ_m X_nm / (1 − ε)`                  (row-sum stability condition)
//! * `Σ_m X_nm / c_m ≤ 1 − ε`                     (column stability condition)
//!
//! `v̄` decouples and is clamped. The remaining `3K` variables are projected by a
//! log-barrier interior-point method with damped Newton centering; iterates
//! stay strictly feasible, so the output satisfies every constraint exactly.

use crate::error::{Error, Result};
use crate::grid_model::GridModel;
use crate::linalg::{cholesky_solve, Matrix};
use crate::rules::{RuleSet, ShapeBounds};
use crate::scalar::Real;

/// Floor applied to slopes before taking reciprocals.
pub const ALPHA_MIN: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct TransformedPoint<T = f64> {
    pub v_bar: Vec<T>,
    pub c: Vec<T>,
    pub delta: Vec<T>,
    pub sigma: Vec<T>,
}

impl<T: Real> TransformedPoint<T> {
    pub fn len(&self) -> usize {
        self.c.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c.is_empty()
    }

    /// `[v̄; c; δ; σ]`.
    pub fn to_vector(&self) -> Vec<T> {
        [&self.v_bar, &self.c, &self.delta, &self.sigma]
            .into_iter()
            .flat_map(|v| v.iter().copied())
            .collect()
    }

    pub fn from_vector(v: &[T]) -> Self {
        let k = v.len() / 4;
        Self {
            v_bar: v[..k].to_vec(),
            c: v[k..2 * k].to_vec(),
            delta: v[2 * k..3 * k].to_vec(),
            sigma: v[3 * k..4 * k].to_vec(),
        }
    }
}

/// Maps slopes to `c = 1/α`. With `clamp`, slopes below [`ALPHA_MIN`] are raised
/// to it first; otherwise nonpositive slopes are rejected.
pub fn to_transformed<T: Real>(rules: &RuleSet<T>, clamp: bool) -> Result<TransformedPoint<T>> {
    let alpha_min = T::lit(ALPHA_MIN);
    let c = rules
        .alpha
        .iter()
        .map(|&a| {
            if clamp {
                Ok(T::one() / a.max(alpha_min))
            } else if a > T::zero() {
                Ok(T::one() / a)
            } else {
                Err(Error::InvalidParameter {
                    name: "alpha",
                    value: a.to_f64_lossy(),
                    reason: "slope must be positive to invert",
                })
            }
        })
        .collect::<Result<_>>()?;
    Ok(TransformedPoint {
        v_bar: rules.v_bar.clone(),
        c,
        delta: rules.delta.clone(),
        sigma: rules.sigma.clone(),
    })
}

pub fn from_transformed<T: Real>(p: &TransformedPoint<T>, buses: &[usize]) -> Result<RuleSet<T>> {
    if let Some(i) = p.c.iter().position(|&c| !(c > T::zero())) {
        return Err(Error::InvalidParameter {
            name: "c",
            value: p.c[i].to_f64_lossy(),
            reason: "inverse slope must be positive",
        });
    }
    if buses.len() != p.len() {
        return Err(Error::Dimension {
            what: "transformed point",
            expected: buses.len(),
            got: p.len(),
        });
    }
    Ok(RuleSet {
        buses: buses.to_vec(),
        v_bar: p.v_bar.clone(),
        alpha: p.c.iter().map(|&c| T::one() / c).collect(),
        delta: p.delta.clone(),
        sigma: p.sigma.clone(),
    })
}

#[derive(Clone, Debug)]
pub struct FeasibleSetSpec<T = f64> {
    /// `X` restricted to DER buses.
    pub x: Matrix<T>,
    pub epsilon: T,
    pub q_hat: Vec<T>,
    pub bounds: ShapeBounds,
}

impl<T: Real> FeasibleSetSpec<T> {
    pub fn from_model(model: &GridModel<T>, epsilon: T) -> Self {
        Self {
            x: model.x_der().clone(),
            epsilon,
            q_hat: model.q_hat.clone(),
            bounds: ShapeBounds::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.q_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q_hat.is_empty()
    }

    /// Reports specs whose constraint set is empty or ill-posed.
    pub fn check(&self) -> Result<()> {
        let k = self.len();
        let b = &self.bounds;
        if self.x.rows() != k || self.x.cols() != k {
            return Err(Error::Infeasible(format!(
                "X is {}x{} but there are {k} capabilities",
                self.x.rows(),
                self.x.cols()
            )));
        }
        if !(self.epsilon > T::zero() && self.epsilon < T::one()) {
            return Err(Error::Infeasible(format!("stability margin {} outside (0, 1)", self.epsilon)));
        }
        if !(b.v_bar_min <= b.v_bar_max) {
            return Err(Error::Infeasible("empty center-voltage interval".into()));
        }
        if !(b.delta_max >= 0.0 && b.sigma_gap < b.sigma_max) {
            return Err(Error::Infeasible(format!(
                "deadband/saturation bounds contradict: delta_max {}, gap {}, sigma_max {}",
                b.delta_max, b.sigma_gap, b.sigma_max
            )));
        }
        if let Some(i) = self.q_hat.iter().position(|&q| !(q > T::zero())) {
            return Err(Error::Infeasible(format!(
                "DER {i} has capability {} so sigma - delta >= {} cannot fit",
                self.q_hat[i], b.sigma_gap
            )));
        }
        if let Some(i) = self.x.row_sums().iter().position(|&s| !(s > T::zero())) {
            return Err(Error::Infeasible(format!("row {i} of X has nonpositive sum")));
        }
        Ok(())
    }

    /// Lower bound on `c` from the row-sum stability condition.
    pub fn c_lower(&self) -> Vec<T> {
        let denom = T::one() - self.epsilon;
        self.x.row_sums().into_iter().map(|s| s / denom).collect()
    }

    /// Largest constraint violation of `p` (zero or negative when feasible).
    pub fn max_violation(&self, p: &TransformedPoint<T>) -> T {
        let b = &self.bounds;
        let l = T::lit;
        let mut worst = T::neg_infinity();
        let c_lo = self.c_lower();
        let bound = T::one() - self.epsilon;
        for n in 0..self.len() {
            let (v, c, d, s) = (p.v_bar[n], p.c[n], p.delta[n], p.sigma[n]);
            let stab = if p.c.iter().all(|&c| c > T::zero()) {
                (0..self.len()).map(|m| self.x[(n, m)] / p.c[m]).sum::<T>() - bound
            } else {
                T::infinity()
            };
            for g in [
                l(b.v_bar_min) - v,
                v - l(b.v_bar_max),
                -d,
                d - l(b.delta_max),
                d + l(b.sigma_gap) - s,
                s - l(b.sigma_max),
                s - d - self.q_hat[n] * c,
                c_lo[n] - c,
                stab,
            ] {
                worst = worst.max(g);
            }
        }
        worst
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ProjectionOptions {
    /// Stop once the barrier duality-gap bound `m/t` falls below this.
    pub gap_tol: f64,
    /// Barrier parameter growth per outer iteration.
    pub growth: f64,
    pub max_newton: usize,
}

impl Default for ProjectionOptions {
    fn default() -> Self {
        Self {
            gap_tol: 1e-13,
            growth: 10.0,
            max_newton: 200,
        }
    }
}

/// Linear inequality `a·y ≤ rhs` over the stacked `[c; δ; σ]` variables.
struct LinearRow<T> {
    terms: Vec<(usize, T)>,
    rhs: T,
}

struct Barrier<'a, T> {
    spec: &'a FeasibleSetSpec<T>,
    rows: Vec<LinearRow<T>>,
    bound: T,
    k: usize,
}

impl<'a, T: Real> Barrier<'a, T> {
    fn new(spec: &'a FeasibleSetSpec<T>) -> Self {
        let k = spec.len();
        let b = &spec.bounds;
        let l = T::lit;
        let (ci, di, si) = (|n| n, |n| k + n, |n| 2 * k + n);
        // Stability rows are tightened by a relative 1e-12 so that rounding in
        // `α = 1/c` cannot push the recovered slopes across the exact bound.
        let tighten = T::lit(1e-12);
        let c_lo: Vec<T> = spec.c_lower().into_iter().map(|c| c * (T::one() + tighten)).collect();
        let one = T::one();
        let mut rows = Vec::with_capacity(6 * k);
        for n in 0..k {
            rows.push(LinearRow {
                terms: vec![(di(n), -one)],
                rhs: T::zero(),
            });
            rows.push(LinearRow {
                terms: vec![(di(n), one)],
                rhs: l(b.delta_max),
            });
            rows.push(LinearRow {
                terms: vec![(di(n), one), (si(n), -one)],
                rhs: -l(b.sigma_gap),
            });
            rows.push(LinearRow {
                terms: vec![(si(n), one)],
                rhs: l(b.sigma_max),
            });
            rows.push(LinearRow {
                terms: vec![(si(n), one), (di(n), -one), (ci(n), -spec.q_hat[n])],
                rhs: T::zero(),
            });
            rows.push(LinearRow {
                terms: vec![(ci(n), -one)],
                rhs: -c_lo[n],
            });
        }
        Self {
            spec,
            rows,
            bound: (T::one() - spec.epsilon) * (T::one() - tighten),
            k,
        }
    }

    fn num_constraints(&self) -> usize {
        self.rows.len() + self.k
    }

    /// Positive slacks `−f_i(y)`, or `None` outside the interior.
    fn slacks(&self, y: &[T]) -> Option<Vec<T>> {
        let mut out = Vec::with_capacity(self.num_constraints());
        for r in &self.rows {
            let s = r.rhs - r.terms.iter().map(|&(j, a)| a * y[j]).sum::<T>();
            if !(s > T::zero()) {
                return None;
            }
            out.push(s);
        }
        let c = &y[..self.k];
        for n in 0..self.k {
            let s = self.bound - (0..self.k).map(|m| self.spec.x[(n, m)] / c[m]).sum::<T>();
            if !(s > T::zero()) {
                return None;
            }
            out.push(s);
        }
        Some(out)
    }

    /// Gradient and Hessian of `t‖y − p‖² − Σ log sᵢ`.
    fn derivatives(&self, y: &[T], p: &[T], t: T, slacks: &[T]) -> (Vec<T>, Matrix<T>) {
        let dim = 3 * self.k;
        let two = T::lit(2.0);
        let mut g: Vec<T> = y.iter().zip(p).map(|(&a, &b)| two * t * (a - b)).collect();
        let mut h = Matrix::diag(&vec![two * t; dim]);
        for (r, &s) in self.rows.iter().zip(slacks) {
            // f = a·y − rhs, −log(−f): gradient a/s, Hessian a aᵀ/s².
            let inv = T::one() / s;
            for &(j, a) in &r.terms {
                g[j] += a * inv;
                for &(i, b) in &r.terms {
                    h[(i, j)] += a * b * inv * inv;
                }
            }
        }
        let c = &y[..self.k];
        for n in 0..self.k {
            let s = slacks[self.rows.len() + n];
            let inv = T::one() / s;
            // f_n = Σ_m X_nm / c_m − bound; ∂f/∂c_m = −X_nm/c_m², ∂²f/∂c_m² = 2 X_nm/c_m³.
            let grad: Vec<T> = (0..self.k).map(|m| -self.spec.x[(n, m)] / (c[m] * c[m])).collect();
            for m in 0..self.k {
                g[m] += grad[m] * inv;
                h[(m, m)] += two * self.spec.x[(n, m)] / (c[m] * c[m] * c[m]) * inv;
                for l in 0..self.k {
                    h[(m, l)] += grad[m] * grad[l] * inv * inv;
                }
            }
        }
        (g, h)
    }

    /// A strictly feasible point near `p`.
    fn interior_start(&self, p: &[T]) -> Vec<T> {
        let k = self.k;
        let b = &self.spec.bounds;
        let l = T::lit;
        let margin = 1e-3;
        let mut y = p.to_vec();
        for n in 0..k {
            let lo_d = margin * b.delta_max.max(1e-6);
            let hi_d = b.delta_max - lo_d;
            let d = p[k + n].max(l(lo_d)).min(l(hi_d.max(lo_d)));
            let room = b.sigma_max - b.sigma_gap;
            let lo_s = d + l(b.sigma_gap + margin * room);
            let hi_s = l(b.sigma_max - margin * room);
            let s = p[2 * k + n].max(lo_s).min(hi_s);
            y[k + n] = d;
            y[2 * k + n] = s;
        }
        let c_lo: Vec<T> = self.rows.iter().skip(5).step_by(6).map(|r| -r.rhs).collect();
        let pad = l(1.0 + margin);
        for n in 0..k {
            let need = ((y[2 * k + n] - y[k + n]) / self.spec.q_hat[n]).max(c_lo[n]) * pad;
            y[n] = if p[n].is_finite() { p[n].max(need) } else { need };
        }
        let worst = (0..k)
            .map(|n| (0..k).map(|m| self.spec.x[(n, m)] / y[m]).sum::<T>())
            .fold(T::zero(), T::max);
        let target = self.bound * l(1.0 - margin);
        if worst > target {
            let scale = worst / target * pad;
            y[..k].iter_mut().for_each(|c| *c *= scale);
        }
        y
    }
}

/// Cholesky factor of `h`, adding a growing diagonal shift when rounding makes
/// the (mathematically positive definite) barrier Hessian fail to factor.
fn regularized_cholesky<T: Real>(mut h: Matrix<T>) -> Result<Matrix<T>> {
    if let Some(l) = h.cholesky() {
        return Ok(l);
    }
    let n = h.rows();
    let scale = (0..n).map(|i| h[(i, i)]).fold(T::zero(), T::max);
    let mut shift = scale * T::epsilon();
    for _ in 0..12 {
        for i in 0..n {
            h[(i, i)] += shift;
        }
        if let Some(l) = h.cholesky() {
            return Ok(l);
        }
        shift *= T::lit(10.0);
    }
    Err(Error::NonFinite {
        what: "projection Newton system",
        index: 0,
    })
}

/// Projects `p` onto the transformed feasible set.
pub fn project_feasible<T: Real>(p: &TransformedPoint<T>, spec: &FeasibleSetSpec<T>) -> Result<TransformedPoint<T>> {
    project_feasible_with(p, spec, &ProjectionOptions::default())
}

pub fn project_feasible_with<T: Real>(
    p: &TransformedPoint<T>,
    spec: &FeasibleSetSpec<T>,
    opts: &ProjectionOptions,
) -> Result<TransformedPoint<T>> {
    spec.check()?;
    let k = spec.len();
    for (what, v) in [("v_bar", &p.v_bar), ("c", &p.c), ("delta", &p.delta), ("sigma", &p.sigma)] {
        if v.len() != k {
            return Err(Error::Dimension {
                what: "transformed point",
                expected: k,
                got: v.len(),
            });
        }
        if let Some(index) = v.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what: match what {
                    "v_bar" => "projection input v_bar",
                    "c" => "projection input c",
                    "delta" => "projection input delta",
                    _ => "projection input sigma",
                },
                index,
            });
        }
    }
    // The projection is the identity on the set; returning feasible inputs
    // unchanged avoids the barrier's residual offset from active constraints.
    if spec.max_violation(p) <= T::zero() {
        return Ok(p.clone());
    }
    let b = &spec.bounds;
    let v_bar = p
        .v_bar
        .iter()
        .map(|&v| v.max(T::lit(b.v_bar_min)).min(T::lit(b.v_bar_max)))
        .collect();

    let target: Vec<T> = p.c.iter().chain(&p.delta).chain(&p.sigma).copied().collect();
    let barrier = Barrier::new(spec);
    let m = T::from_usize_lossy(barrier.num_constraints());
    let mut y = barrier.interior_start(&target);
    let mut slacks = barrier
        .slacks(&y)
        .ok_or_else(|| Error::Infeasible("could not construct an interior point".into()))?;

    let growth = T::lit(opts.growth);
    let gap_tol = T::lit(opts.gap_tol);
    let two = T::lit(2.0);
    let quarter = T::lit(0.25);
    let dist2: T = y.iter().zip(&target).map(|(&a, &b)| (a - b) * (a - b)).sum();
    let mut t = (m / dist2.max(T::lit(1e-8))).max(T::one()).min(T::lit(1e6));

    loop {
        for _ in 0..opts.max_newton {
            let (g, h) = barrier.derivatives(&y, &target, t, &slacks);
            let l = regularized_cholesky(h)?;
            let neg_g: Vec<T> = g.iter().map(|&v| -v).collect();
            let dy = cholesky_solve(&l, &neg_g);
            let decrement: T = -g.iter().zip(&dy).map(|(&a, &b)| a * b).sum::<T>();
            if !decrement.is_finite() {
                return Err(Error::NonFinite {
                    what: "projection Newton decrement",
                    index: 0,
                });
            }
            if decrement <= T::lit(1e-16) {
                break;
            }
            let lin_y: T = dy.iter().zip(y.iter().zip(&target)).map(|(&d, (&a, &b))| d * (a - b)).sum();
            let dy2: T = dy.iter().map(|&d| d * d).sum();
            let mut s = T::one();
            let mut accepted = None;
            for _ in 0..80 {
                let trial: Vec<T> = y.iter().zip(&dy).map(|(&a, &d)| a + s * d).collect();
                if let Some(sl) = barrier.slacks(&trial) {
                    if decrement < T::lit(1e-8) {
                        accepted = Some((trial, sl));
                        break;
                    }
                    // Change in the barrier objective, formed without cancellation.
                    let quad = t * (two * s * lin_y + s * s * dy2);
                    let logs: T = sl.iter().zip(&slacks).map(|(&a, &b)| -((a - b) / b).ln_1p()).sum();
                    if quad + logs <= -quarter * s * decrement {
                        accepted = Some((trial, sl));
                        break;
                    }
                }
                s *= T::lit(0.5);
            }
            match accepted {
                Some((ny, sl)) => {
                    y = ny;
                    slacks = sl;
                }
                None => break,
            }
        }
        if m / t < gap_tol {
            break;
        }
        t *= growth;
    }

    Ok(TransformedPoint {
        v_bar,
        c: y[..k].to_vec(),
        delta: y[k..2 * k].to_vec(),
        sigma: y[2 * k..].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::FeederModel;
    use crate::grid_model::build_sensitivities;

    fn spec37() -> FeasibleSetSpec {
        let model: GridModel = build_sensitivities(&FeederModel::ieee37()).unwrap();
        FeasibleSetSpec::from_model(&model, 0.5)
    }

    #[test]
    fn reciprocal_map() {
        let rs = RuleSet::<f64>::uniform(&[3], 1.0, 0.01, 0.05, 1.5);
        let p = to_transformed(&rs, false).unwrap();
        assert!((p.c[0] - 0.666_666_666_666_666_6).abs() < 1e-15);
        assert_eq!(from_transformed(&p, &[3]).unwrap().alpha[0], 1.0 / (1.0 / 1.5));
    }

    #[test]
    fn zero_slope_rejected_or_clamped() {
        let rs = RuleSet::<f64>::uniform(&[3], 1.0, 0.01, 0.05, 0.0);
        assert!(to_transformed(&rs, false).is_err());
        let p = to_transformed(&rs, true).unwrap();
        assert!((p.c[0] - 1e6).abs() < 1e-6);
    }

    #[test]
    fn round_trip_relative_error() {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let a: f64 = rng.random_range(1e-3..1e3);
            let rs = RuleSet::uniform(&[1], 1.0, 0.01, 0.05, a);
            let back = from_transformed(&to_transformed(&rs, false).unwrap(), &[1]).unwrap();
            assert!((back.alpha[0] - a).abs() <= 1e-14 * a);
        }
    }

    fn feasible_point(spec: &FeasibleSetSpec) -> TransformedPoint {
        let k = spec.len();
        let c_lo = spec.c_lower();
        let mut p = TransformedPoint {
            v_bar: vec![1.0; k],
            c: c_lo.iter().map(|c| c * 2.0).collect(),
            delta: vec![0.01; k],
            sigma: vec![0.05; k],
        };
        for n in 0..k {
            p.c[n] = p.c[n].max(0.04 / spec.q_hat[n] * 1.5);
        }
        assert!(spec.max_violation(&p) < 0.0);
        p
    }

    #[test]
    fn feasible_input_is_fixed() {
        let spec = spec37();
        let p = feasible_point(&spec);
        let out = project_feasible(&p, &spec).unwrap();
        let d = crate::scalar::dist2(&p.to_vector(), &out.to_vector());
        assert!(d < 1e-9, "moved by {d}");
    }

    #[test]
    fn separable_deadband_clamp() {
        let spec = spec37();
        let mut p = feasible_point(&spec);
        p.c[0] *= 10.0;
        p.delta[0] = 0.05;
        p.sigma[0] = 0.1;
        let out = project_feasible(&p, &spec).unwrap();
        assert!((out.delta[0] - 0.03).abs() < 1e-9);
        let mut expected = p.clone();
        expected.delta[0] = 0.03;
        assert!(crate::scalar::dist2(&out.to_vector(), &expected.to_vector()) < 1e-9);
    }

    #[test]
    fn bad_specs_reported() {
        let mut spec = spec37();
        spec.epsilon = 1.0;
        let p = feasible_point(&spec37());
        assert!(matches!(project_feasible(&p, &spec), Err(Error::Infeasible(_))));
        let mut spec = spec37();
        spec.bounds.sigma_gap = 0.2;
        assert!(matches!(project_feasible(&p, &spec), Err(Error::Infeasible(_))));
        let mut spec = spec37();
        spec.q_hat[2] = 0.0;
        assert!(matches!(project_feasible(&p, &spec), Err(Error::Infeasible(_))));
    }
}
