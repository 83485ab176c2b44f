//! Reverse-mode differentiation of the sample-average Lagrangian
//!
//! `L(z; λ) = (1/S) Σ_s ℓ(q_z(θ_s)) + Σ_n λ_n ((1/S) Σ_s g_n(z; θ_s) − β)`
//!
//! through the unrolled Volt/VAR iteration. The forward pass records the rule
//! inputs of every step; the backward pass walks them in reverse, alternating
//! the rule layer (piecewise linear in both voltage and `z`) with the fixed
//! linear layer `v = X q + ṽ`.

use rayon::prelude::*;

use crate::dynamics::{equilibrium, EquilibriumOptions, EquilibriumResult};
use crate::error::{Error, Result};
use crate::grid_model::{GridModel, Scenario};
use crate::objective::{g_n, logistic_derivative, step, ChanceConfig};
use crate::rules::RuleSet;
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct LagrangianValue<T> {
    pub total: T,
    pub loss_term: T,
    /// `(1/S) Σ_s g_n` for every bus.
    pub constraint_terms: Vec<T>,
    /// `∇_z L` ordered `[v̄; α; δ; σ]`, when requested.
    pub gradient: Option<Vec<T>>,
}

/// Forward state of one scenario.
#[derive(Clone, Debug)]
pub struct ScenarioPass<T> {
    pub equilibrium: EquilibriumResult<T>,
    pub loss: T,
    pub soft: Vec<T>,
    pub hard: Vec<T>,
}

/// Recorded forward pass over a scenario batch, reusable for several
/// multiplier vectors.
#[derive(Clone, Debug)]
pub struct ForwardPass<T> {
    pub rules: RuleSet<T>,
    pub passes: Vec<ScenarioPass<T>>,
    pub cfg: ChanceConfig<T>,
}

pub fn forward<T: Real>(
    rules: &RuleSet<T>,
    model: &GridModel<T>,
    scenarios: &[Scenario<T>],
    cfg: &ChanceConfig<T>,
    opts: &EquilibriumOptions<T>,
) -> Result<ForwardPass<T>> {
    if scenarios.is_empty() {
        return Err(Error::Dimension {
            what: "scenario set",
            expected: 1,
            got: 0,
        });
    }
    let opts = EquilibriumOptions {
        record: true,
        ..opts.clone()
    };
    let passes = scenarios
        .par_iter()
        .map(|s| {
            let eq = equilibrium(rules, model, s, &opts)?;
            let loss = model.approx_losses(&eq.q_star, s)?;
            let soft = eq.v_star.iter().map(|&v| g_n(v, cfg)).collect();
            let hard = eq.v_star.iter().map(|&v| step(cfg.excursion(v))).collect();
            Ok(ScenarioPass {
                equilibrium: eq,
                loss,
                soft,
                hard,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ForwardPass {
        rules: rules.clone(),
        passes,
        cfg: *cfg,
    })
}

fn mean_columns<T: Real>(rows: impl Iterator<Item = impl AsRef<[T]>>, n: usize, count: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); n];
    for r in rows {
        for (a, &v) in acc.iter_mut().zip(r.as_ref()) {
            *a += v;
        }
    }
    let s = T::from_usize_lossy(count);
    acc.into_iter().map(|a| a / s).collect()
}

impl<T: Real> ForwardPass<T> {
    pub fn num_scenarios(&self) -> usize {
        self.passes.len()
    }

    fn n(&self) -> usize {
        self.passes[0].soft.len()
    }

    pub fn loss_term(&self) -> T {
        let s = T::from_usize_lossy(self.passes.len());
        self.passes.iter().map(|p| p.loss).sum::<T>() / s
    }

    /// Per-bus average logistic indicator.
    pub fn soft_violation(&self) -> Vec<T> {
        mean_columns(self.passes.iter().map(|p| &p.soft), self.n(), self.passes.len())
    }

    /// Per-bus empirical violation frequency.
    pub fn hard_violation(&self) -> Vec<T> {
        mean_columns(self.passes.iter().map(|p| &p.hard), self.n(), self.passes.len())
    }

    pub fn value(&self, lambda: &[T]) -> Result<LagrangianValue<T>> {
        let n = self.n();
        if lambda.len() != n {
            return Err(Error::Dimension {
                what: "multipliers",
                expected: n,
                got: lambda.len(),
            });
        }
        let loss_term = self.loss_term();
        let constraint_terms = self.soft_violation();
        let penalty: T = lambda.iter().zip(&constraint_terms).map(|(&l, &g)| l * (g - self.cfg.beta)).sum();
        Ok(LagrangianValue {
            total: loss_term + penalty,
            loss_term,
            constraint_terms,
            gradient: None,
        })
    }

    /// Gradient of one scenario's `ℓ + Σ_n λ_n g_n` w.r.t. `z`.
    pub fn scenario_gradient(&self, model: &GridModel<T>, scenario: &Scenario<T>, pass: &ScenarioPass<T>, lambda: &[T]) -> Vec<T> {
        let k = model.num_ders();
        let eq = &pass.equilibrium;
        let cfg = &self.cfg;
        let two = T::lit(2.0);

        // Output head: ∂/∂q* of ℓ = (q+q̃)ᵀR(q+q̃) and of Σ λ_n ũ((v_n − v_ref)² − r²), v = Xq + ṽ.
        let q_tot: Vec<T> = eq.q_star.iter().zip(&scenario.q_tilde).map(|(&a, &b)| a + b).collect();
        let r_q = model.r.matvec(&q_tot);
        let w: Vec<T> = eq
            .v_star
            .iter()
            .zip(lambda)
            .map(|(&v, &l)| {
                if l == T::zero() {
                    T::zero()
                } else {
                    l * logistic_derivative(cfg.excursion(v), cfg.gamma) * two * (v - cfg.v_ref())
                }
            })
            .collect();
        let xw = model.x_der_cols().tr_matvec(&w);
        let mut adj: Vec<T> = model.der_index().iter().zip(&xw).map(|(&i, &xwi)| two * r_q[i] + xwi).collect();

        let mut grad = vec![T::zero(); 4 * k];
        let tape = eq.tape.as_ref().expect("forward pass records a tape");
        let x = model.x_der();
        let rules = &self.rules;
        for v in tape.inputs.iter().rev() {
            let mut v_adj = vec![T::zero(); k];
            for i in 0..k {
                let a = adj[i];
                if a == T::zero() {
                    continue;
                }
                let p = rules.get(i).partials(v[i]);
                grad[i] += p.d_v_bar * a;
                grad[k + i] += p.d_alpha * a;
                grad[2 * k + i] += p.d_delta * a;
                grad[3 * k + i] += p.d_sigma * a;
                v_adj[i] = p.dv * a;
            }
            // v = X q + ṽ with X symmetric.
            adj = x.matvec(&v_adj);
        }
        grad
    }

    /// `∇_z L(z; λ)` averaged over scenarios in scenario order.
    pub fn gradient(&self, model: &GridModel<T>, scenarios: &[Scenario<T>], lambda: &[T]) -> Result<Vec<T>> {
        if scenarios.len() != self.passes.len() {
            return Err(Error::Dimension {
                what: "scenario set",
                expected: self.passes.len(),
                got: scenarios.len(),
            });
        }
        if lambda.len() != self.n() {
            return Err(Error::Dimension {
                what: "multipliers",
                expected: self.n(),
                got: lambda.len(),
            });
        }
        let per: Vec<Vec<T>> = scenarios
            .par_iter()
            .zip(self.passes.par_iter())
            .map(|(s, p)| self.scenario_gradient(model, s, p, lambda))
            .collect();
        let grad = mean_columns(per.iter(), 4 * model.num_ders(), per.len());
        if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                what: "Lagrangian gradient",
                index,
            });
        }
        Ok(grad)
    }
}

fn check_lambda<T: Real>(lambda: &[T]) -> Result<()> {
    if let Some(i) = lambda.iter().position(|&l| !(l >= T::zero())) {
        return Err(Error::InvalidParameter {
            name: "lambda",
            value: lambda[i].to_f64_lossy(),
            reason: "multipliers must be nonnegative",
        });
    }
    Ok(())
}

/// Value of the Lagrangian at design vector `z`.
pub fn lagrangian<T: Real>(
    z: &[T],
    lambda: &[T],
    model: &GridModel<T>,
    scenarios: &[Scenario<T>],
    cfg: &ChanceConfig<T>,
    opts: &EquilibriumOptions<T>,
) -> Result<LagrangianValue<T>> {
    check_lambda(lambda)?;
    let rules = RuleSet::from_vector(&model.der_buses, z)?;
    let opts = EquilibriumOptions {
        record: false,
        ..opts.clone()
    };
    let eqs: Vec<EquilibriumResult<T>> = scenarios
        .par_iter()
        .map(|s| equilibrium(&rules, model, s, &opts))
        .collect::<Result<_>>()?;
    let pass = ForwardPass {
        rules,
        passes: eqs
            .into_iter()
            .zip(scenarios)
            .map(|(eq, s)| {
                Ok(ScenarioPass {
                    loss: model.approx_losses(&eq.q_star, s)?,
                    soft: eq.v_star.iter().map(|&v| g_n(v, cfg)).collect(),
                    hard: eq.v_star.iter().map(|&v| step(cfg.excursion(v))).collect(),
                    equilibrium: eq,
                })
            })
            .collect::<Result<_>>()?,
        cfg: *cfg,
    };
    if pass.passes.is_empty() {
        return Err(Error::Dimension {
            what: "scenario set",
            expected: 1,
            got: 0,
        });
    }
    pass.value(lambda)
}

/// Value and gradient of the Lagrangian at design vector `z`.
pub fn lagrangian_gradient<T: Real>(
    z: &[T],
    lambda: &[T],
    model: &GridModel<T>,
    scenarios: &[Scenario<T>],
    cfg: &ChanceConfig<T>,
    opts: &EquilibriumOptions<T>,
) -> Result<LagrangianValue<T>> {
    check_lambda(lambda)?;
    let rules = RuleSet::from_vector(&model.der_buses, z)?;
    let pass = forward(&rules, model, scenarios, cfg, opts)?;
    let mut value = pass.value(lambda)?;
    value.gradient = Some(pass.gradient(model, scenarios, lambda)?);
    Ok(value)
}
