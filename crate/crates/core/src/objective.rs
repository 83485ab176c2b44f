//! Sample-average losses and voltage chance-constraint indicators.

use rayon::prelude::*;

use crate::dynamics::{equilibria, EquilibriumOptions, EquilibriumResult};
use crate::error::{Error, Result};
use crate::grid_model::{GridModel, Scenario};
use crate::rules::RuleSet;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChanceConfig<T = f64> {
    pub v_low: T,
    pub v_high: T,
    /// Allowed violation probability per bus.
    pub beta: T,
    /// Logistic sharpness.
    pub gamma: T,
}

impl<T: Real> Default for ChanceConfig<T> {
    fn default() -> Self {
        Self {
            v_low: T::lit(0.97),
            v_high: T::lit(1.03),
            beta: T::lit(0.05),
            gamma: T::lit(1e-4),
        }
    }
}

impl<T: Real> ChanceConfig<T> {
    pub fn with_beta(beta: T) -> Self {
        Self { beta, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.v_low < self.v_high) {
            return Err(Error::InvalidParameter {
                name: "v_low",
                value: self.v_low.to_f64_lossy(),
                reason: "lower voltage limit must be below the upper limit",
            });
        }
        if !(self.beta > T::zero() && self.beta <= T::one()) {
            return Err(Error::InvalidParameter {
                name: "beta",
                value: self.beta.to_f64_lossy(),
                reason: "violation budget must lie in (0, 1]",
            });
        }
        if !(self.gamma > T::zero()) {
            return Err(Error::InvalidParameter {
                name: "gamma",
                value: self.gamma.to_f64_lossy(),
                reason: "logistic sharpness must be positive",
            });
        }
        Ok(())
    }

    pub fn v_ref(&self) -> T {
        (self.v_low + self.v_high) / T::lit(2.0)
    }

    pub fn radius(&self) -> T {
        (self.v_high - self.v_low) / T::lit(2.0)
    }

    /// `(v − v_ref)² − radius²`; nonnegative iff `v` is outside the band.
    #[inline]
    pub fn excursion(&self, v: T) -> T {
        let d = v - self.v_ref();
        let r = self.radius();
        d * d - r * r
    }
}

/// Unit step, `1` for `x ≥ 0`.
#[inline]
pub fn step<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one()
    } else {
        T::zero()
    }
}

/// `1 / (1 + e^{−x/γ})`, evaluated without overflow. `logistic(x) + logistic(−x)`
/// is exactly one: the negative branch is `1 − logistic(−x)` with the
/// subtrahend in `[½, 1]`, where the subtraction is exact.
#[inline]
pub fn logistic<T: Real>(x: T, gamma: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x / gamma).exp())
    } else {
        T::one() - logistic(-x, gamma)
    }
}

/// `(1/γ) ũ (1 − ũ)`.
#[inline]
pub fn logistic_derivative<T: Real>(x: T, gamma: T) -> T {
    let u = logistic(x, gamma);
    u * (T::one() - u) / gamma
}

/// Smooth violation indicator of one bus voltage.
#[inline]
pub fn g_n<T: Real>(v: T, cfg: &ChanceConfig<T>) -> T {
    logistic(cfg.excursion(v), cfg.gamma)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViolationMode {
    /// Unit-step indicator (reporting metric).
    Hard,
    /// Logistic surrogate (optimization metric).
    Soft,
}

/// Per-bus mean violation indicator over equilibrium voltage profiles.
pub fn violation_from_voltages<T: Real>(voltages: &[&[T]], cfg: &ChanceConfig<T>, mode: ViolationMode) -> Vec<T> {
    let n = voltages.first().map_or(0, |v| v.len());
    let mut acc = vec![T::zero(); n];
    for v in voltages {
        for (a, &vi) in acc.iter_mut().zip(v.iter()) {
            *a += match mode {
                ViolationMode::Hard => step(cfg.excursion(vi)),
                ViolationMode::Soft => g_n(vi, cfg),
            };
        }
    }
    let s = T::from_usize_lossy(voltages.len().max(1));
    acc.iter_mut().for_each(|a| *a /= s);
    acc
}

fn nonempty<T>(scenarios: &[Scenario<T>]) -> Result<()> {
    if scenarios.is_empty() {
        return Err(Error::Dimension {
            what: "scenario set",
            expected: 1,
            got: 0,
        });
    }
    Ok(())
}

pub fn empirical_violation<T: Real>(
    rules: &RuleSet<T>,
    model: &GridModel<T>,
    scenarios: &[Scenario<T>],
    cfg: &ChanceConfig<T>,
    mode: ViolationMode,
    opts: &EquilibriumOptions<T>,
) -> Result<Vec<T>> {
    nonempty(scenarios)?;
    let eqs = equilibria(rules, model, scenarios, opts)?;
    let vs: Vec<&[T]> = eqs.iter().map(|e| e.v_star.as_slice()).collect();
    Ok(violation_from_voltages(&vs, cfg, mode))
}

/// Mean of the approximate losses at the given equilibria.
pub fn average_loss_at<T: Real>(model: &GridModel<T>, scenarios: &[Scenario<T>], eqs: &[EquilibriumResult<T>]) -> Result<T> {
    nonempty(scenarios)?;
    let losses: Vec<T> = scenarios
        .par_iter()
        .zip(eqs.par_iter())
        .map(|(s, e)| model.approx_losses(&e.q_star, s))
        .collect::<Result<_>>()?;
    Ok(losses.iter().copied().sum::<T>() / T::from_usize_lossy(losses.len()))
}

pub fn average_loss<T: Real>(
    rules: &RuleSet<T>,
    model: &GridModel<T>,
    scenarios: &[Scenario<T>],
    opts: &EquilibriumOptions<T>,
) -> Result<T> {
    nonempty(scenarios)?;
    let eqs = equilibria(rules, model, scenarios, opts)?;
    average_loss_at(model, scenarios, &eqs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_examples() {
        assert_eq!(step(0.0), 1.0);
        assert_eq!(step(-1e-12), 0.0);
        for x in [-3.0, -1e-300, 1e-300, 2.5] {
            assert_eq!(1.0 - step(x), step(-x));
        }
    }

    #[test]
    fn logistic_examples() {
        assert_eq!(logistic(0.0, 1e-4), 0.5);
        assert!((logistic_derivative(0.0f64, 1e-4) - 1.0 / 4e-4).abs() < 1e-9);
        let u = logistic(1e-3, 1e-4);
        assert!((u - 1.0 / (1.0 + (-10.0f64).exp())).abs() < 1e-15);
        assert!((u - 0.999_954_6).abs() < 1e-7);
    }

    #[test]
    fn logistic_saturates_without_overflow() {
        assert_eq!(logistic(1.0, 1e-6), 1.0);
        assert_eq!(logistic(-1.0, 1e-6), 0.0);
        assert_eq!(logistic_derivative(-1.0, 1e-6), 0.0);
        assert!(logistic(f64::MAX, 1e-4).is_finite());
    }

    #[test]
    fn logistic_derivative_matches_finite_differences() {
        // With h = γ/100 the O(h²) truncation error is ~8e-6 relative at x = 0,
        // so the step is taken ten times smaller.
        let gamma = 1e-4;
        let h = gamma / 1000.0;
        for k in -30..=30 {
            let x = k as f64 * gamma / 10.0;
            let fd = (logistic(x + h, gamma) - logistic(x - h, gamma)) / (2.0 * h);
            let an = logistic_derivative(x, gamma);
            assert!((fd - an).abs() <= 1e-6 * an.abs(), "x={x}: {fd} vs {an}");
        }
    }

    #[test]
    fn g_n_examples() {
        let cfg = ChanceConfig::<f64>::default();
        assert!(g_n(1.0, &cfg) < 1e-3);
        assert!((g_n(1.03, &cfg) - 0.5).abs() < 1e-10);
        assert!(g_n(1.05, &cfg) > 1.0 - 1e-6);
    }

    #[test]
    fn sharper_gamma_approaches_step() {
        let voltages: [f64; 7] = [0.95, 0.965, 0.98, 1.0, 1.02, 1.035, 1.06];
        let mut prev_err = f64::INFINITY;
        for gamma in [1e-2, 1e-3, 1e-4] {
            let cfg = ChanceConfig {
                gamma,
                ..ChanceConfig::default()
            };
            let err = voltages
                .iter()
                .map(|&v| (g_n(v, &cfg) - step(cfg.excursion(v))).abs())
                .fold(0.0, f64::max);
            assert!(err < prev_err);
            prev_err = err;
        }
        assert!(prev_err < 0.2);
    }

    #[test]
    fn hard_violation_counts() {
        let cfg = ChanceConfig::<f64>::default();
        let inside = vec![1.0, 1.01, 0.99];
        let outside = vec![1.0, 1.04, 0.99];
        let mut profiles: Vec<&[f64]> = vec![&inside; 79];
        profiles.push(&outside);
        let hard = violation_from_voltages(&profiles, &cfg, ViolationMode::Hard);
        assert_eq!(hard, vec![0.0, 0.0125, 0.0]);
        let all_in: Vec<&[f64]> = vec![&inside; 5];
        assert_eq!(violation_from_voltages(&all_in, &cfg, ViolationMode::Hard), vec![0.0; 3]);
    }

    #[test]
    fn config_validation() {
        assert!(ChanceConfig::<f64>::default().validate().is_ok());
        assert!(ChanceConfig::with_beta(0.0).validate().is_err());
        assert!(ChanceConfig::with_beta(1.0).validate().is_ok());
        let bad = ChanceConfig {
            v_low: 1.1,
            ..ChanceConfig::<f64>::default()
        };
        assert!(bad.validate().is_err());
        let c = ChanceConfig::<f64>::default();
        assert!((c.v_ref() - 1.0).abs() < 1e-15 && (c.radius() - 0.03).abs() < 1e-15);
    }
}
