//! Primal-dual solution of the sample-average design problem: projected
//! gradient descent on the rule parameters alternating with projected gradient
//! ascent on the chance-constraint multipliers.
//!
//! The forward pass computed at `z^{k+1}` for the dual update is kept and
//! reused as the forward pass of the next primal step, so each iteration
//! solves every scenario's equilibrium once.

use std::io::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{forward, ForwardPass};
use crate::dynamics::{check_stability, EquilibriumOptions};
use crate::error::{Error, Result};
use crate::grid_model::{GridModel, Scenario};
use crate::objective::ChanceConfig;
use crate::projection::{from_transformed, project_feasible, to_transformed, FeasibleSetSpec};
use crate::rules::{validate_1547, RuleSet};
use crate::scalar::{norm_inf, Real};

/// Header line of the metrics CSV format.
pub const METRICS_CSV_VERSION: &str = "# voltvar-metrics v1";

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    /// Plain projected gradient step `z − μ ∇L`.
    Sgd,
    /// Adam moments on `∇L` with step size `μ`.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Uniform initial rule parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RuleInit<T = f64> {
    pub v_bar: T,
    pub delta: T,
    pub sigma: T,
    pub alpha: T,
}

impl<T: Real> Default for RuleInit<T> {
    fn default() -> Self {
        Self {
            v_bar: T::one(),
            delta: T::lit(0.01),
            sigma: T::lit(0.03),
            alpha: T::lit(1.5),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerConfig<T = f64> {
    pub chance: ChanceConfig<T>,
    /// Stability margin.
    pub epsilon: T,
    /// Maximum number of primal-dual iterations.
    pub iterations: usize,
    /// Initial primal step size; iteration `k` uses `mu_z · decay^k`.
    pub mu_z: T,
    /// Initial dual step size; iteration `k` uses `mu_lambda · decay^k`.
    pub mu_lambda: T,
    pub decay: T,
    pub optimizer: Optimizer,
    pub init: RuleInit<T>,
    /// Stop once `‖z^{k+1} − z^k‖∞` falls below this and the hard violation
    /// is within `β + 1/S`. Zero disables early stopping.
    pub param_tol: T,
    /// Fixed-point tolerance `‖q^{t+1} − q^t‖₂` of the unrolled dynamics.
    pub equilibrium_tol: T,
    pub max_equilibrium_iters: usize,
    /// Scenarios per primal gradient; `None` uses all of them.
    pub batch_size: Option<usize>,
    /// Seed of the mini-batch sampler.
    pub seed: u64,
}

impl<T: Real> Default for TrainerConfig<T> {
    fn default() -> Self {
        Self {
            chance: ChanceConfig::default(),
            epsilon: T::lit(0.5),
            iterations: 1000,
            mu_z: T::lit(0.001),
            mu_lambda: T::lit(0.0015),
            decay: T::lit(0.99),
            optimizer: Optimizer::adam(),
            init: RuleInit::default(),
            param_tol: T::lit(1e-6),
            equilibrium_tol: T::lit(1e-7),
            max_equilibrium_iters: 10_000,
            batch_size: None,
            seed: 0,
        }
    }
}

impl<T: Real> TrainerConfig<T> {
    pub fn validate(&self) -> Result<()> {
        self.chance.validate()?;
        let positive = |name: &'static str, v: T| {
            if v > T::zero() && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidParameter {
                    name,
                    value: v.to_f64_lossy(),
                    reason: "must be positive and finite",
                })
            }
        };
        positive("mu_z", self.mu_z)?;
        positive("mu_lambda", self.mu_lambda)?;
        positive("equilibrium_tol", self.equilibrium_tol)?;
        if !(self.decay > T::zero() && self.decay <= T::one()) {
            return Err(Error::InvalidParameter {
                name: "decay",
                value: self.decay.to_f64_lossy(),
                reason: "step-size decay must lie in (0, 1]",
            });
        }
        if !(self.epsilon > T::zero() && self.epsilon < T::one()) {
            return Err(Error::InvalidParameter {
                name: "epsilon",
                value: self.epsilon.to_f64_lossy(),
                reason: "stability margin must lie in (0, 1)",
            });
        }
        if !(self.param_tol >= T::zero()) {
            return Err(Error::InvalidParameter {
                name: "param_tol",
                value: self.param_tol.to_f64_lossy(),
                reason: "must be nonnegative",
            });
        }
        if self.batch_size == Some(0) {
            return Err(Error::InvalidParameter {
                name: "batch_size",
                value: 0.0,
                reason: "mini-batches must be nonempty",
            });
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
                return Err(Error::InvalidParameter {
                    name: "optimizer",
                    value: beta1,
                    reason: "Adam needs beta1, beta2 in [0, 1) and eps > 0",
                });
            }
        }
        Ok(())
    }

    pub fn mu_z_at(&self, k: usize) -> T {
        self.mu_z * self.decay.powi(k as i32)
    }

    pub fn mu_lambda_at(&self, k: usize) -> T {
        self.mu_lambda * self.decay.powi(k as i32)
    }

    fn equilibrium_options(&self) -> EquilibriumOptions<T> {
        EquilibriumOptions {
            max_iters: self.max_equilibrium_iters,
            tol: self.equilibrium_tol,
            q_init: None,
            record: true,
        }
    }
}

/// Record of one primal-dual iteration, evaluated at `z^{k+1}` and `λ^{k+1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationMetrics<T = f64> {
    pub k: usize,
    pub loss: T,
    /// `L(z^{k+1}; λ^k)`.
    pub lagrangian: T,
    pub hard: Vec<T>,
    pub soft: Vec<T>,
    pub worst_hard: T,
    pub worst_soft: T,
    pub lambda_inf: T,
    pub mu_z: T,
    pub mu_lambda: T,
    pub step_inf: T,
}

#[derive(Debug)]
pub struct DesignResult<T = f64> {
    pub rules: RuleSet<T>,
    pub lambda: Vec<T>,
    pub lambda_trajectory: Vec<Vec<T>>,
    pub metrics: Vec<IterationMetrics<T>>,
    pub converged: bool,
    /// Error that stopped the loop early; the other fields hold the last good state.
    pub aborted: Option<Error>,
}

impl<T: Real> DesignResult<T> {
    pub fn final_metrics(&self) -> Option<&IterationMetrics<T>> {
        self.metrics.last()
    }
}

/// Maps `ẑ` to `c = 1/α` coordinates, projects, and maps back.
pub fn project_rules<T: Real>(rules: &RuleSet<T>, spec: &FeasibleSetSpec<T>) -> Result<RuleSet<T>> {
    let p = to_transformed(rules, true)?;
    let proj = project_feasible(&p, spec)?;
    from_transformed(&proj, &rules.buses)
}

/// `[z − direction]_Z`.
pub fn primal_update<T: Real>(rules: &RuleSet<T>, direction: &[T], spec: &FeasibleSetSpec<T>) -> Result<RuleSet<T>> {
    if let Some(index) = direction.iter().position(|d| !d.is_finite()) {
        return Err(Error::NonFinite {
            what: "primal step",
            index,
        });
    }
    let z: Vec<T> = rules.to_vector().iter().zip(direction).map(|(&a, &d)| a - d).collect();
    project_rules(&RuleSet::from_vector(&rules.buses, &z)?, spec)
}

/// `λ⁺ = [λ + μ (ḡ − β)]₊` entrywise.
pub fn dual_update<T: Real>(lambda: &[T], avg_g: &[T], beta: T, mu: T) -> Vec<T> {
    lambda
        .iter()
        .zip(avg_g)
        .map(|(&l, &g)| (l + mu * (g - beta)).max(T::zero()))
        .collect()
}

/// Moment state of the Adam optimizer.
#[derive(Clone, Debug)]
struct AdamState<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Real> AdamState<T> {
    fn new(n: usize) -> Self {
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
        }
    }

    fn direction(&mut self, grad: &[T], lr: T, beta1: f64, beta2: f64, eps: f64) -> Vec<T> {
        let (b1, b2, eps) = (T::lit(beta1), T::lit(beta2), T::lit(eps));
        self.t += 1;
        let c1 = T::one() - b1.powi(self.t);
        let c2 = T::one() - b2.powi(self.t);
        grad.iter()
            .enumerate()
            .map(|(i, &g)| {
                self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
                self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
                lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps)
            })
            .collect()
    }
}

fn metrics_of<T: Real>(
    pass: &ForwardPass<T>,
    lambda_old: &[T],
    lambda: &[T],
    k: usize,
    mu_z: T,
    mu_lambda: T,
    step_inf: T,
) -> Result<IterationMetrics<T>> {
    let value = pass.value(lambda_old)?;
    let hard = pass.hard_violation();
    let soft = value.constraint_terms;
    Ok(IterationMetrics {
        k,
        loss: value.loss_term,
        lagrangian: value.total,
        worst_hard: hard.iter().copied().fold(T::zero(), T::max),
        worst_soft: soft.iter().copied().fold(T::zero(), T::max),
        hard,
        soft,
        lambda_inf: norm_inf(lambda),
        mu_z,
        mu_lambda,
        step_inf,
    })
}

/// Checks the invariants every iterate must satisfy.
fn check_iterate<T: Real>(rules: &RuleSet<T>, model: &GridModel<T>, epsilon: T) -> Result<()> {
    if let Some(v) = validate_1547(rules, &model.q_hat).first() {
        return Err(Error::Infeasible(format!(
            "projected rules violate {} at bus {} by {:e}",
            v.constraint, v.bus, v.margin
        )));
    }
    if !check_stability(rules, model, epsilon).inner_ok {
        return Err(Error::Infeasible("projected rules violate the inner stability condition".into()));
    }
    Ok(())
}

/// Solves the sample-average design problem by primal-dual iterations.
pub fn run_ord<T: Real>(config: &TrainerConfig<T>, model: &GridModel<T>, scenarios: &[Scenario<T>]) -> Result<DesignResult<T>> {
    config.validate()?;
    if scenarios.is_empty() {
        return Err(Error::Dimension {
            what: "scenario set",
            expected: 1,
            got: 0,
        });
    }
    for s in scenarios {
        s.check(model.n())?;
    }
    let spec = FeasibleSetSpec::from_model(model, config.epsilon);
    let opts = config.equilibrium_options();
    let cfg = &config.chance;
    let s_inv = T::one() / T::from_usize_lossy(scenarios.len());
    let init = config.init;
    let start = RuleSet::uniform(&model.der_buses, init.v_bar, init.delta, init.sigma, init.alpha);
    let mut rules = project_rules(&start, &spec)?;
    check_iterate(&rules, model, config.epsilon)?;
    let mut pass = forward(&rules, model, scenarios, cfg, &opts)?;

    let mut lambda = vec![T::zero(); model.n()];
    let mut result = DesignResult {
        rules: rules.clone(),
        lambda: lambda.clone(),
        lambda_trajectory: vec![lambda.clone()],
        metrics: Vec::new(),
        converged: false,
        aborted: None,
    };
    let mut adam = AdamState::new(4 * model.num_ders());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    for k in 0..config.iterations {
        let mu_z = config.mu_z_at(k);
        let mu_lambda = config.mu_lambda_at(k);
        let step = (|| -> Result<Step<T>> {
            let grad = match config.batch_size {
                Some(b) if b < scenarios.len() => {
                    let idx = sample(&mut rng, scenarios.len(), b).into_vec();
                    let batch: Vec<Scenario<T>> = idx.iter().map(|&i| scenarios[i].clone()).collect();
                    forward(&rules, model, &batch, cfg, &opts)?.gradient(model, &batch, &lambda)?
                }
                _ => pass.gradient(model, scenarios, &lambda)?,
            };
            let direction = match config.optimizer {
                Optimizer::Sgd => grad.iter().map(|&g| mu_z * g).collect(),
                Optimizer::Adam { beta1, beta2, eps } => adam.direction(&grad, mu_z, beta1, beta2, eps),
            };
            let next = primal_update(&rules, &direction, &spec)?;
            check_iterate(&next, model, config.epsilon)?;
            let next_pass = forward(&next, model, scenarios, cfg, &opts)?;
            let soft = next_pass.soft_violation();
            let next_lambda = dual_update(&lambda, &soft, cfg.beta, mu_lambda);
            let step_inf = norm_inf(
                &next
                    .to_vector()
                    .iter()
                    .zip(rules.to_vector())
                    .map(|(&a, b)| a - b)
                    .collect::<Vec<_>>(),
            );
            let m = metrics_of(&next_pass, &lambda, &next_lambda, k + 1, mu_z, mu_lambda, step_inf)?;
            Ok((next, next_pass, next_lambda, m))
        })();
        let (next, next_pass, next_lambda, m) = match step {
            Ok(v) => v,
            Err(e) => {
                log::warn!("primal-dual loop aborted at iteration {}: {e}", k + 1);
                result.aborted = Some(e);
                return Ok(result);
            }
        };
        rules = next;
        pass = next_pass;
        lambda = next_lambda;
        let stop = config.param_tol > T::zero() && m.step_inf < config.param_tol && m.worst_hard <= cfg.beta + s_inv;
        result.rules = rules.clone();
        result.lambda = lambda.clone();
        result.lambda_trajectory.push(lambda.clone());
        result.metrics.push(m);
        if stop {
            result.converged = true;
            break;
        }
    }
    Ok(result)
}

/// Accepted iterate: rules, their forward pass, multipliers and metrics.
type Step<T> = (RuleSet<T>, ForwardPass<T>, Vec<T>, IterationMetrics<T>);

/// Metrics log with one row per iteration.
pub fn metrics_to_csv_string<T: Real>(metrics: &[IterationMetrics<T>]) -> String {
    let mut buf = Vec::new();
    writeln!(buf, "{METRICS_CSV_VERSION}").unwrap();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record([
            "k",
            "loss",
            "lagrangian",
            "worst_hard",
            "worst_soft",
            "lambda_inf",
            "mu_z",
            "mu_lambda",
            "step_inf",
        ])
        .unwrap();
        for m in metrics {
            let f = |x: T| x.to_f64_lossy().to_string();
            w.write_record([
                m.k.to_string(),
                f(m.loss),
                f(m.lagrangian),
                f(m.worst_hard),
                f(m.worst_soft),
                f(m.lambda_inf),
                f(m.mu_z),
                f(m.mu_lambda),
                f(m.step_inf),
            ])
            .unwrap();
        }
        w.flush().unwrap();
    }
    String::from_utf8(buf).expect("csv output is utf-8")
}

pub fn save_metrics_csv<T: Real>(metrics: &[IterationMetrics<T>], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, metrics_to_csv_string(metrics)).map_err(|e| Error::io(path, e))
}
