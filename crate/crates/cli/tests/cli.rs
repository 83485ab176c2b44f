//! End-to-end behaviour of the `voltvar` binary and the command functions.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;
use voltvar::feeder::FeederModel;
use voltvar::grid_model::build_sensitivities;
use voltvar::scenarios::{generate_synthetic, LoadProfile, ScenarioSet};
use voltvar_cli::commands::comparison_rules;
use voltvar_cli::{cmd_design, cmd_evaluate, RunConfig};

fn voltvar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voltvar")).args(args).output().unwrap()
}

fn small_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let text = format!("[feeder]\nbuiltin = \"ieee37\"\n[scenarios]\ncount = 12\nseed = 5\n[trainer]\niterations = 25\n{extra}");
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn read_rows(path: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(path).unwrap();
    let (version, body) = text.split_once('\n').unwrap();
    assert!(version.starts_with("# voltvar-"), "{version}");
    csv::Reader::from_reader(body.as_bytes())
        .records()
        .map(|r| r.unwrap().iter().map(str::to_string).collect())
        .collect()
}

#[test]
fn missing_feeder_is_io_error_naming_path() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[feeder]\npath = \"nowhere/feeder.toml\"\n[scenarios]\n").unwrap();
    let out = voltvar(&["design", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nowhere/feeder.toml"), "{err}");
}

#[test]
fn unknown_key_is_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), "learning_rate = 3\n");
    let out = voltvar(&["design", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn collapsing_ac_solve_is_numerical_failure() {
    let dir = TempDir::new().unwrap();
    let feeder = FeederModel::ieee37();
    let mut set = generate_synthetic(&feeder, 3, 1, LoadProfile::EveningPeak).unwrap();
    set.scenarios = set.scenarios.iter().map(|s| s.scaled(80.0)).collect();
    set.save(dir.path().join("heavy.csv")).unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[feeder]\nbuiltin = \"ieee37\"\n[scenarios]\nfile = \"heavy.csv\"\n").unwrap();
    let out = voltvar(&[
        "validate-ac",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unit_budget_keeps_multipliers_at_zero() {
    let dir = TempDir::new().unwrap();
    let cfg = RunConfig::load(&small_config(dir.path(), "[chance]\nbetas = [1.0]\n")).unwrap();
    let rows = cmd_design(&cfg, dir.path()).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].lambda_inf, 0.0);
    assert!(rows[0].feasible && rows[0].aborted.is_none());
    for r in read_rows(&dir.path().join("violations_beta1.csv")) {
        assert_eq!(r[3], "0");
    }
}

#[test]
fn design_reruns_overwrite_identically() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), "[chance]\nbetas = [0.1]\n");
    let out = dir.path().join("out");
    let args = ["design", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    assert_eq!(voltvar(&args).status.code(), Some(0));
    let files = ["summary.csv", "rules_beta0.1.csv", "metrics_beta0.1.csv", "violations_beta0.1.csv"];
    let first: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(out.join(f)).unwrap()).collect();
    assert_eq!(voltvar(&args).status.code(), Some(0));
    for (f, bytes) in files.iter().zip(&first) {
        assert_eq!(&std::fs::read(out.join(f)).unwrap(), bytes, "{f}");
    }
}

#[test]
fn evaluation_rows_and_histogram_conserve_counts() {
    let dir = TempDir::new().unwrap();
    let cfg = RunConfig::load(&small_config(dir.path(), "[chance]\nbetas = [0.2]\n")).unwrap();
    cmd_design(&cfg, dir.path()).unwrap();
    let rows = cmd_evaluate(&cfg, dir.path(), &[]).unwrap();
    let labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["none", "default", "beta0.2"]);
    for r in &rows {
        assert_eq!(r.histogram.iter().sum::<usize>(), 36 * 12);
    }
    let hist = read_rows(&dir.path().join("histogram.csv"));
    assert_eq!(hist.len(), cfg.output.hist_bins + 2);
    for col in 2..5 {
        let total: usize = hist.iter().map(|r| r[col].parse::<usize>().unwrap()).sum();
        assert_eq!(total, 36 * 12);
    }
}

#[test]
fn default_rules_follow_the_standard() {
    let cfg = RunConfig::benchmark();
    let model = build_sensitivities(&FeederModel::ieee37()).unwrap();
    let sets = comparison_rules(&cfg, &model, Path::new("/nonexistent"), &[]).unwrap();
    let (label, rules) = &sets[1];
    assert_eq!(label, "default");
    for i in 0..rules.len() {
        let p = rules.get(i);
        assert_eq!((p.v_bar, p.delta, p.sigma), (1.0, 0.02, 0.08));
        assert!((p.q_bar() - model.q_hat[i]).abs() <= 1e-15);
    }
    assert!(sets[0].1.alpha.iter().all(|&a| a == 0.0));
}

#[test]
fn generated_scenarios_round_trip() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("sc/set.csv");
    let out = voltvar(&[
        "gen-scenarios",
        "--output",
        path.to_str().unwrap(),
        "--count",
        "7",
        "--seed",
        "2",
        "--profile",
        "mixed",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let loaded = ScenarioSet::load(&path).unwrap();
    let fresh = generate_synthetic(&FeederModel::ieee37(), 7, 2, LoadProfile::Mixed).unwrap();
    assert_eq!(loaded.scenarios, fresh.scenarios);
    assert_eq!(loaded.meta.profile, Some(LoadProfile::Mixed));
    assert_eq!(
        voltvar(&["gen-scenarios", "--output", "x.csv", "--profile", "dusk"]).status.code(),
        Some(1)
    );
}

#[test]
fn build_model_writes_symmetric_sensitivities() {
    let dir = TempDir::new().unwrap();
    let out = voltvar(&["build-model", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    for name in ["r.csv", "x.csv"] {
        let m: Vec<Vec<f64>> = read_rows(&dir.path().join(name))
            .into_iter()
            .map(|r| r.iter().map(|v| v.parse().unwrap()).collect())
            .collect();
        assert_eq!(m.len(), 36);
        for i in 0..36 {
            for j in 0..36 {
                assert_eq!(m[i][j], m[j][i]);
            }
        }
    }
    let feeder = FeederModel::load(dir.path().join("feeder.toml")).unwrap();
    assert_eq!(feeder, FeederModel::ieee37());
}
