//! The subcommands. Each returns its report rows; files are written under
//! the output directory with versioned CSV headers so reruns overwrite
//! identically.

use std::path::{Path, PathBuf};

use voltvar::ac_validation::{ac_equilibria, ac_power_flow, model_error};
use voltvar::dynamics::{check_stability, equilibria, EquilibriumOptions, EquilibriumResult};
use voltvar::feeder::FeederModel;
use voltvar::grid_model::{build_sensitivities, GridModel, Scenario};
use voltvar::objective::{average_loss, average_loss_at, empirical_violation, violation_from_voltages, ViolationMode};
use voltvar::rules::{validate_1547, RuleSet};
use voltvar::scenarios::ScenarioSet;
use voltvar::trainer::{run_ord, save_metrics_csv};

use crate::config::RunConfig;
use crate::error::CliError;

pub const SUMMARY_CSV_VERSION: &str = "# voltvar-design-summary v1";
pub const BUS_CSV_VERSION: &str = "# voltvar-bus-violations v1";
pub const EVALUATION_CSV_VERSION: &str = "# voltvar-evaluation v1";
pub const HISTOGRAM_CSV_VERSION: &str = "# voltvar-histogram v1";
pub const AC_CSV_VERSION: &str = "# voltvar-ac-validation v1";
pub const MATRIX_CSV_VERSION: &str = "# voltvar-matrix v1";

/// File-name tag of a violation budget, e.g. `0.15`.
pub fn beta_tag(beta: f64) -> String {
    format!("{beta}")
}

pub fn rules_path(dir: &Path, beta: f64) -> PathBuf {
    dir.join(format!("rules_beta{}.csv", beta_tag(beta)))
}

pub fn metrics_path(dir: &Path, beta: f64) -> PathBuf {
    dir.join(format!("metrics_beta{}.csv", beta_tag(beta)))
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_csv(path: &Path, version: &str, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(version.as_bytes());
    buf.push(b'\n');
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header).map_err(|e| io_err(path, e))?;
        for r in rows {
            w.write_record(r).map_err(|e| io_err(path, e))?;
        }
        w.flush().map_err(|e| io_err(path, e))?;
    }
    std::fs::write(path, buf).map_err(|e| io_err(path, e))
}

fn strings<const K: usize>(h: [&str; K]) -> Vec<String> {
    h.iter().map(|s| s.to_string()).collect()
}

/// Feeder, sensitivities and scenarios named by a config.
pub struct Inputs {
    pub feeder: FeederModel,
    pub model: GridModel,
    pub scenarios: ScenarioSet,
}

impl Inputs {
    pub fn load(cfg: &RunConfig) -> Result<Self, CliError> {
        let feeder = cfg.load_feeder()?;
        let model = build_sensitivities(&feeder)?;
        let scenarios = cfg.load_scenarios(&feeder)?;
        Ok(Self { feeder, model, scenarios })
    }
}

/// One row of the design summary.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignRow {
    pub beta: f64,
    pub iterations: usize,
    pub converged: bool,
    pub loss: f64,
    pub worst_hard: f64,
    pub worst_soft: f64,
    pub lambda_inf: f64,
    pub feasible: bool,
    /// Error that stopped the run early; outputs hold the last good iterate.
    pub aborted: Option<String>,
}

/// Runs the primal-dual design once per budget.
pub fn cmd_design(cfg: &RunConfig, out: &Path) -> Result<Vec<DesignRow>, CliError> {
    let inputs = Inputs::load(cfg)?;
    create_dir(out)?;
    let (model, scenarios) = (&inputs.model, &inputs.scenarios.scenarios);
    let mut rows = Vec::new();
    for &beta in &cfg.chance.betas {
        let tc = cfg.trainer_config(beta);
        let res = run_ord(&tc, model, scenarios)?;
        res.rules.save_csv(rules_path(out, beta))?;
        save_metrics_csv(&res.metrics, metrics_path(out, beta))?;

        let opts = equilibrium_options(cfg);
        let hard = empirical_violation(&res.rules, model, scenarios, &tc.chance, ViolationMode::Hard, &opts)?;
        let soft = empirical_violation(&res.rules, model, scenarios, &tc.chance, ViolationMode::Soft, &opts)?;
        let bus_rows: Vec<Vec<String>> = (0..model.n())
            .map(|i| {
                vec![
                    (i + 1).to_string(),
                    hard[i].to_string(),
                    soft[i].to_string(),
                    res.lambda[i].to_string(),
                ]
            })
            .collect();
        write_csv(
            &out.join(format!("violations_beta{}.csv", beta_tag(beta))),
            BUS_CSV_VERSION,
            &strings(["bus", "hard", "soft", "lambda"]),
            &bus_rows,
        )?;

        let last = res.final_metrics();
        let loss = average_loss(&res.rules, model, scenarios, &opts)?;
        rows.push(DesignRow {
            beta,
            iterations: res.metrics.len(),
            converged: res.converged,
            loss,
            worst_hard: hard.iter().copied().fold(0.0, f64::max),
            worst_soft: soft.iter().copied().fold(0.0, f64::max),
            lambda_inf: last.map_or(0.0, |m| m.lambda_inf),
            feasible: validate_1547(&res.rules, &model.q_hat).is_empty() && check_stability(&res.rules, model, tc.epsilon).inner_ok,
            aborted: res.aborted.as_ref().map(|e| e.to_string()),
        });
    }
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.beta.to_string(),
                r.iterations.to_string(),
                r.converged.to_string(),
                r.loss.to_string(),
                r.worst_hard.to_string(),
                r.worst_soft.to_string(),
                r.lambda_inf.to_string(),
                r.feasible.to_string(),
                r.aborted.clone().unwrap_or_default(),
            ]
        })
        .collect();
    write_csv(
        &out.join("summary.csv"),
        SUMMARY_CSV_VERSION,
        &strings([
            "beta",
            "iterations",
            "converged",
            "loss",
            "worst_hard",
            "worst_soft",
            "lambda_inf",
            "feasible",
            "aborted",
        ]),
        &table,
    )?;
    Ok(rows)
}

fn equilibrium_options(cfg: &RunConfig) -> EquilibriumOptions<f64> {
    EquilibriumOptions {
        tol: cfg.trainer.equilibrium_tol,
        max_iters: cfg.trainer.max_equilibrium_iters,
        ..EquilibriumOptions::default()
    }
}

/// Rule sets to compare: no control, the IEEE default, then any designs.
pub fn comparison_rules(
    cfg: &RunConfig,
    model: &GridModel,
    out: &Path,
    extra: &[(String, PathBuf)],
) -> Result<Vec<(String, RuleSet)>, CliError> {
    let mut sets = vec![
        ("none".to_string(), RuleSet::flat(&model.der_buses)),
        ("default".to_string(), RuleSet::ieee_default(&model.der_buses, &model.q_hat)),
    ];
    let designed: Vec<(String, PathBuf)> = if extra.is_empty() {
        cfg.chance
            .betas
            .iter()
            .map(|&b| (format!("beta{}", beta_tag(b)), rules_path(out, b)))
            .filter(|(_, p)| p.exists())
            .collect()
    } else {
        extra.to_vec()
    };
    for (label, path) in designed {
        let rules = RuleSet::load_csv(&path)?;
        if rules.buses != model.der_buses {
            return Err(CliError::Config(format!(
                "{}: rules cover buses {:?} but the feeder's DERs are at {:?}",
                path.display(),
                rules.buses,
                model.der_buses
            )));
        }
        sets.push((label, rules));
    }
    Ok(sets)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvaluationRow {
    pub label: String,
    pub loss: f64,
    pub worst_hard: f64,
    /// Bus with the largest hard violation (1-based).
    pub worst_bus: usize,
    pub hard: Vec<f64>,
    /// Voltage counts per histogram bin, with underflow first and overflow last.
    pub histogram: Vec<usize>,
}

/// Losses, violation probabilities and voltage histograms of each rule set.
pub fn cmd_evaluate(cfg: &RunConfig, out: &Path, extra: &[(String, PathBuf)]) -> Result<Vec<EvaluationRow>, CliError> {
    let inputs = Inputs::load(cfg)?;
    create_dir(out)?;
    let (model, scenarios) = (&inputs.model, &inputs.scenarios.scenarios);
    let chance = cfg.chance_config(cfg.chance.betas[0]);
    let opts = equilibrium_options(cfg);
    let o = &cfg.output;
    let width = (o.hist_max - o.hist_min) / o.hist_bins as f64;
    let mut rows = Vec::new();
    for (label, rules) in comparison_rules(cfg, model, out, extra)? {
        let eqs = equilibria(&rules, model, scenarios, &opts)?;
        let vs: Vec<&[f64]> = eqs.iter().map(|e| e.v_star.as_slice()).collect();
        let hard = violation_from_voltages(&vs, &chance, ViolationMode::Hard);
        let loss = average_loss_at(model, scenarios, &eqs)?;
        let mut histogram = vec![0usize; o.hist_bins + 2];
        for &v in vs.iter().flat_map(|v| v.iter()) {
            let slot = if v < o.hist_min {
                0
            } else if v >= o.hist_max {
                o.hist_bins + 1
            } else {
                (((v - o.hist_min) / width) as usize).min(o.hist_bins - 1) + 1
            };
            histogram[slot] += 1;
        }
        let (worst_bus, worst_hard) = hard
            .iter()
            .enumerate()
            .fold((0, 0.0), |acc, (i, &h)| if h > acc.1 { (i + 1, h) } else { acc });
        rows.push(EvaluationRow {
            label,
            loss,
            worst_hard,
            worst_bus,
            hard,
            histogram,
        });
    }

    write_csv(
        &out.join("evaluation.csv"),
        EVALUATION_CSV_VERSION,
        &strings(["rules", "loss", "worst_hard", "worst_bus"]),
        &rows
            .iter()
            .map(|r| {
                vec![
                    r.label.clone(),
                    r.loss.to_string(),
                    r.worst_hard.to_string(),
                    r.worst_bus.to_string(),
                ]
            })
            .collect::<Vec<_>>(),
    )?;
    let mut header = vec!["bus".to_string()];
    header.extend(rows.iter().map(|r| r.label.clone()));
    let bus_rows: Vec<Vec<String>> = (0..model.n())
        .map(|i| {
            std::iter::once((i + 1).to_string())
                .chain(rows.iter().map(|r| r.hard[i].to_string()))
                .collect()
        })
        .collect();
    write_csv(&out.join("evaluation_buses.csv"), BUS_CSV_VERSION, &header, &bus_rows)?;

    let mut header = strings(["lo", "hi"]);
    header.extend(rows.iter().map(|r| r.label.clone()));
    let edge = |k: usize| o.hist_min + width * k as f64;
    let hist_rows: Vec<Vec<String>> = (0..o.hist_bins + 2)
        .map(|slot| {
            let (lo, hi) = match slot {
                0 => ("-inf".to_string(), o.hist_min.to_string()),
                s if s == o.hist_bins + 1 => (o.hist_max.to_string(), "inf".to_string()),
                s => (format!("{:.6}", edge(s - 1)), format!("{:.6}", edge(s))),
            };
            [lo, hi]
                .into_iter()
                .chain(rows.iter().map(|r| r.histogram[slot].to_string()))
                .collect()
        })
        .collect();
    write_csv(&out.join("histogram.csv"), HISTOGRAM_CSV_VERSION, &header, &hist_rows)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AcRow {
    pub label: String,
    pub mean_abs: f64,
    pub max_abs: f64,
    /// Largest power mismatch of the AC solutions at the closed-loop equilibria.
    pub max_mismatch: f64,
}

/// AC power-flow mismatch at each equilibrium's injections.
fn equilibrium_mismatch(
    feeder: &FeederModel,
    scenarios: &[Scenario],
    eqs: &[EquilibriumResult<f64>],
    cfg: &RunConfig,
) -> Result<f64, CliError> {
    let mut worst: f64 = 0.0;
    for (s, e) in scenarios.iter().zip(eqs) {
        let q: Vec<f64> = s.q_tilde.iter().zip(&e.q_star).map(|(a, b)| a + b).collect();
        worst = worst.max(ac_power_flow(feeder, &s.p_tilde, &q, &cfg.ac_options())?.mismatch);
    }
    Ok(worst)
}

/// Closed-loop voltages of the linear model against the AC model.
pub fn cmd_validate_ac(cfg: &RunConfig, out: &Path, extra: &[(String, PathBuf)]) -> Result<Vec<AcRow>, CliError> {
    let inputs = Inputs::load(cfg)?;
    create_dir(out)?;
    let (feeder, model, scenarios) = (&inputs.feeder, &inputs.model, &inputs.scenarios.scenarios);
    let opts = equilibrium_options(cfg);
    let mut rows = Vec::new();
    for (label, rules) in comparison_rules(cfg, model, out, extra)? {
        let lin = equilibria(&rules, model, scenarios, &opts)?;
        let ac = ac_equilibria(&rules, feeder, scenarios, &cfg.ac_options())?;
        let rep = model_error(&lin, &ac)?;
        rows.push(AcRow {
            label,
            mean_abs: rep.mean_abs,
            max_abs: rep.max_abs,
            max_mismatch: equilibrium_mismatch(feeder, scenarios, &ac, cfg)?,
        });
    }
    write_csv(
        &out.join("ac_validation.csv"),
        AC_CSV_VERSION,
        &strings(["rules", "mean_abs", "max_abs", "max_mismatch"]),
        &rows
            .iter()
            .map(|r| {
                vec![
                    r.label.clone(),
                    r.mean_abs.to_string(),
                    r.max_abs.to_string(),
                    r.max_mismatch.to_string(),
                ]
            })
            .collect::<Vec<_>>(),
    )?;
    Ok(rows)
}

/// Generates the configured scenario set and saves it with its metadata.
pub fn cmd_gen_scenarios(cfg: &RunConfig, path: &Path) -> Result<ScenarioSet, CliError> {
    let feeder = cfg.load_feeder()?;
    let set = cfg.load_scenarios(&feeder)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    set.save(path)?;
    Ok(set)
}

/// Writes the feeder and its `R`, `X` sensitivities.
pub fn cmd_build_model(cfg: &RunConfig, out: &Path) -> Result<GridModel, CliError> {
    let feeder = cfg.load_feeder()?;
    let model: GridModel = build_sensitivities(&feeder)?;
    create_dir(out)?;
    feeder.save(out.join("feeder.toml"))?;
    for (name, m) in [("r", &model.r), ("x", &model.x)] {
        let header: Vec<String> = (1..=m.cols()).map(|j| j.to_string()).collect();
        let rows: Vec<Vec<String>> = (0..m.rows()).map(|i| m.row(i).iter().map(|v| v.to_string()).collect()).collect();
        write_csv(&out.join(format!("{name}.csv")), MATRIX_CSV_VERSION, &header, &rows)?;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beta_tags_are_distinct() {
        assert_eq!(beta_tag(0.15), "0.15");
        assert_eq!(beta_tag(0.2), "0.2");
        assert_ne!(beta_tag(0.125), beta_tag(0.12));
    }
}
