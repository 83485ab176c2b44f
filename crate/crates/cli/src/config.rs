//! Run configuration: a TOML file with every key checked and every value
//! validated before any command touches the disk.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use voltvar::ac_validation::AcOptions;
use voltvar::feeder::FeederModel;
use voltvar::objective::ChanceConfig;
use voltvar::scenarios::{generate_synthetic, LoadProfile, ScenarioSet};
use voltvar::trainer::{Optimizer, RuleInit, TrainerConfig};

use crate::error::CliError;

/// The shipped benchmark: 37-bus feeder, 80 high-solar scenarios, four budgets.
pub const BENCHMARK_TOML: &str = include_str!("../data/benchmark.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub feeder: FeederSource,
    pub scenarios: ScenarioSource,
    #[serde(default)]
    pub chance: ChanceSection,
    #[serde(default)]
    pub trainer: TrainerSection,
    #[serde(default)]
    pub ac: AcSection,
    #[serde(default)]
    pub output: OutputSection,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Exactly one of `builtin` and `path`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeederSource {
    pub builtin: Option<String>,
    pub path: Option<PathBuf>,
}

/// Either a scenario CSV (`file`) or generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSource {
    pub file: Option<PathBuf>,
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_profile")]
    pub profile: LoadProfile,
}

fn default_count() -> usize {
    80
}

fn default_profile() -> LoadProfile {
    LoadProfile::HighSolar
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChanceSection {
    pub v_low: f64,
    pub v_high: f64,
    pub gamma: f64,
    /// One design per violation budget.
    pub betas: Vec<f64>,
}

impl Default for ChanceSection {
    fn default() -> Self {
        let c = ChanceConfig::<f64>::default();
        Self {
            v_low: c.v_low,
            v_high: c.v_high,
            gamma: c.gamma,
            betas: vec![0.2, 0.15, 0.1, 0.05],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerSection {
    pub epsilon: f64,
    pub iterations: usize,
    pub mu_z: f64,
    pub mu_lambda: f64,
    pub decay: f64,
    pub optimizer: OptimizerName,
    pub param_tol: f64,
    pub equilibrium_tol: f64,
    pub max_equilibrium_iters: usize,
    pub batch_size: Option<usize>,
    pub seed: u64,
    /// Starting rule `(v̄, δ, σ, α)`, projected onto the feasible set.
    pub init: [f64; 4],
}

impl Default for TrainerSection {
    fn default() -> Self {
        let t = TrainerConfig::<f64>::default();
        Self {
            epsilon: t.epsilon,
            iterations: t.iterations,
            mu_z: t.mu_z,
            mu_lambda: t.mu_lambda,
            decay: t.decay,
            optimizer: OptimizerName::Adam,
            param_tol: t.param_tol,
            equilibrium_tol: t.equilibrium_tol,
            max_equilibrium_iters: t.max_equilibrium_iters,
            batch_size: t.batch_size,
            seed: t.seed,
            init: [t.init.v_bar, t.init.delta, t.init.sigma, t.init.alpha],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcSection {
    pub mismatch_tol: f64,
    pub max_sweeps: usize,
    pub equilibrium_tol: f64,
    pub max_equilibrium_iters: usize,
}

impl Default for AcSection {
    fn default() -> Self {
        let a = AcOptions::default();
        Self {
            mismatch_tol: a.mismatch_tol,
            max_sweeps: a.max_sweeps,
            equilibrium_tol: a.equilibrium_tol,
            max_equilibrium_iters: a.max_equilibrium_iters,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Histogram range and bin count for `evaluate`.
    pub hist_min: f64,
    pub hist_max: f64,
    pub hist_bins: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            hist_min: 0.94,
            hist_max: 1.08,
            hist_bins: 56,
        }
    }
}

impl RunConfig {
    pub fn benchmark() -> Self {
        Self::from_toml_str(BENCHMARK_TOML, "benchmark.toml", Path::new(".")).expect("shipped benchmark config is valid")
    }

    pub fn from_toml_str(text: &str, context: &str, base_dir: &Path) -> Result<Self, CliError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(0, |s| text[..s.start].matches('\n').count() + 1);
            CliError::Config(format!("{context}, line {line}: {}", e.message()))
        })?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, &path.display().to_string(), base)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        match (&self.feeder.builtin, &self.feeder.path) {
            (Some(name), None) if name != "ieee37" => return bad(format!("unknown builtin feeder `{name}` (expected: ieee37)")),
            (Some(_), None) | (None, Some(_)) => {}
            _ => return bad("[feeder] needs exactly one of `builtin` and `path`".into()),
        }
        if self.scenarios.file.is_none() && self.scenarios.count == 0 {
            return bad("[scenarios] count must be at least 1".into());
        }
        if self.chance.betas.is_empty() {
            return bad("[chance] betas must list at least one budget".into());
        }
        for &beta in &self.chance.betas {
            self.chance_config(beta)
                .validate()
                .map_err(|e| CliError::Config(format!("[chance] {e}")))?;
        }
        self.trainer_config(self.chance.betas[0])
            .validate()
            .map_err(|e| CliError::Config(format!("[trainer] {e}")))?;
        let ac = &self.ac;
        if !(ac.mismatch_tol > 0.0 && ac.equilibrium_tol > 0.0 && ac.max_sweeps > 0 && ac.max_equilibrium_iters > 0) {
            return bad("[ac] tolerances and iteration caps must be positive".into());
        }
        let o = &self.output;
        if !(o.hist_min < o.hist_max && o.hist_bins > 0) {
            return bad("[output] histogram needs hist_min < hist_max and hist_bins > 0".into());
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn chance_config(&self, beta: f64) -> ChanceConfig<f64> {
        ChanceConfig {
            v_low: self.chance.v_low,
            v_high: self.chance.v_high,
            beta,
            gamma: self.chance.gamma,
        }
    }

    pub fn trainer_config(&self, beta: f64) -> TrainerConfig<f64> {
        let t = &self.trainer;
        TrainerConfig {
            chance: self.chance_config(beta),
            epsilon: t.epsilon,
            iterations: t.iterations,
            mu_z: t.mu_z,
            mu_lambda: t.mu_lambda,
            decay: t.decay,
            optimizer: match t.optimizer {
                OptimizerName::Adam => Optimizer::adam(),
                OptimizerName::Sgd => Optimizer::Sgd,
            },
            init: RuleInit {
                v_bar: t.init[0],
                delta: t.init[1],
                sigma: t.init[2],
                alpha: t.init[3],
            },
            param_tol: t.param_tol,
            equilibrium_tol: t.equilibrium_tol,
            max_equilibrium_iters: t.max_equilibrium_iters,
            batch_size: t.batch_size,
            seed: t.seed,
        }
    }

    pub fn ac_options(&self) -> AcOptions {
        AcOptions {
            mismatch_tol: self.ac.mismatch_tol,
            max_sweeps: self.ac.max_sweeps,
            equilibrium_tol: self.ac.equilibrium_tol,
            max_equilibrium_iters: self.ac.max_equilibrium_iters,
        }
    }

    pub fn load_feeder(&self) -> Result<FeederModel, CliError> {
        match &self.feeder.path {
            Some(p) => Ok(FeederModel::load(self.resolve(p))?),
            None => Ok(FeederModel::ieee37()),
        }
    }

    pub fn load_scenarios(&self, feeder: &FeederModel) -> Result<ScenarioSet, CliError> {
        let s = &self.scenarios;
        let set = match &s.file {
            Some(p) => ScenarioSet::load(self.resolve(p))?,
            None => generate_synthetic(feeder, s.count, s.seed, s.profile)?,
        };
        if set.n() != feeder.n() {
            return Err(CliError::Config(format!(
                "scenarios have {} buses but the feeder has {}",
                set.n(),
                feeder.n()
            )));
        }
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn benchmark_parses() {
        let c = RunConfig::benchmark();
        assert_eq!(c.scenarios.count, 80);
        assert_eq!(c.chance.betas, vec![0.2, 0.15, 0.1, 0.05]);
    }

    #[test]
    fn unknown_key_is_rejected_with_line() {
        let text = "[feeder]\nbuiltin = \"ieee37\"\n[scenarios]\ncount = 5\nwobble = 1\n";
        let err = RunConfig::from_toml_str(text, "x.toml", Path::new(".")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("x.toml, line 5") && msg.contains("wobble"), "{msg}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn feeder_source_must_be_unique() {
        let text = "[feeder]\nbuiltin = \"ieee37\"\npath = \"f.toml\"\n[scenarios]\n";
        assert!(RunConfig::from_toml_str(text, "x", Path::new(".")).is_err());
        let text = "[feeder]\n[scenarios]\n";
        assert!(RunConfig::from_toml_str(text, "x", Path::new(".")).is_err());
    }

    #[test]
    fn out_of_range_beta_is_config_error() {
        let text = "[feeder]\nbuiltin = \"ieee37\"\n[scenarios]\n[chance]\nbetas = [1.5]\n";
        let err = RunConfig::from_toml_str(text, "x", Path::new(".")).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("beta"));
    }

    #[test]
    fn relative_paths_follow_config_dir() {
        let text = "[feeder]\npath = \"f.toml\"\n[scenarios]\n";
        let c = RunConfig::from_toml_str(text, "x", Path::new("/tmp/run")).unwrap();
        assert_eq!(c.resolve(c.feeder.path.as_ref().unwrap()), PathBuf::from("/tmp/run/f.toml"));
    }
}
