//! Chance-constrained design of IEEE 1547 Volt/VAR rules on radial feeders.
//!
//! The numerical core is generic over [`Real`] (`f32` or `f64`); the aliases
//! at the crate root fix it to `f64` or `f32`.

pub mod ac_validation;
pub mod autodiff;
pub mod dynamics;
pub mod error;
pub mod feeder;
pub mod grid_model;
pub mod linalg;
pub mod objective;
pub mod projection;
pub mod rules;
pub mod scalar;
pub mod scenarios;
pub mod trainer;

pub use ac_validation::{ac_equilibria, ac_equilibrium, ac_power_flow, model_error, AcOptions, AcSolution, ModelErrorReport};
pub use autodiff::{forward, lagrangian, lagrangian_gradient, ForwardPass, LagrangianValue};
pub use dynamics::{check_stability, depth_bound, equilibria, equilibrium, EquilibriumOptions, EquilibriumResult, StabilityReport};
pub use error::{Error, Result};
pub use feeder::{Bus, Der, FeederModel, Line};
pub use grid_model::{build_sensitivities, GridModel, Scenario};
pub use linalg::Matrix;
pub use objective::{average_loss, empirical_violation, ChanceConfig, ViolationMode};
pub use projection::{from_transformed, project_feasible, to_transformed, FeasibleSetSpec, TransformedPoint};
pub use rules::{validate_1547, RuleParams, RuleSet, ShapeBounds, ShapeConstraint, Violation};
pub use scalar::Real;
pub use scenarios::{generate_synthetic, LoadProfile, ScenarioSet};
pub use trainer::{run_ord, DesignResult, IterationMetrics, Optimizer, RuleInit, TrainerConfig};

pub type GridModel64 = GridModel<f64>;
pub type GridModel32 = GridModel<f32>;
pub type RuleSet64 = RuleSet<f64>;
pub type RuleSet32 = RuleSet<f32>;
pub type Scenario64 = Scenario<f64>;
pub type Scenario32 = Scenario<f32>;
pub type ChanceConfig64 = ChanceConfig<f64>;
pub type ChanceConfig32 = ChanceConfig<f32>;
pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type TrainerConfig64 = TrainerConfig<f64>;
pub type TrainerConfig32 = TrainerConfig<f32>;
pub type DesignResult64 = DesignResult<f64>;
pub type DesignResult32 = DesignResult<f32>;
