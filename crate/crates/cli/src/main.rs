use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use voltvar::scenarios::LoadProfile;
use voltvar_cli::{cmd_build_model, cmd_design, cmd_evaluate, cmd_gen_scenarios, cmd_validate_ac, CliError, RunConfig};

/// Design Volt/VAR control rules for a distribution feeder.
///
/// Exit codes: 0 ok, 1 config error, 2 I/O error, 3 numerical failure.
#[derive(Parser)]
#[command(name = "voltvar", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML). Defaults to the shipped 37-bus benchmark.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory. Defaults to `[output] dir` of the config.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one rule set per violation budget and write rules, metrics and a summary.
    Design {
        #[command(flatten)]
        common: Common,
        /// Violation budgets to design for; overrides `[chance] betas`.
        #[arg(long, value_delimiter = ',')]
        beta: Vec<f64>,
        /// Primal-dual iteration cap; overrides `[trainer] iterations`.
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Losses, violation probabilities and voltage histograms of no control,
    /// the IEEE default rules, and each design.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Extra rule set as LABEL=PATH; defaults to the designs found in the output directory.
        #[arg(long, value_parser = parse_labeled)]
        rules: Vec<(String, PathBuf)>,
    },
    /// Compare linear-model and AC closed-loop voltages for each rule set.
    ValidateAc {
        #[command(flatten)]
        common: Common,
        /// Extra rule set as LABEL=PATH; defaults to the designs found in the output directory.
        #[arg(long, value_parser = parse_labeled)]
        rules: Vec<(String, PathBuf)>,
    },
    /// Generate a synthetic scenario set and save it as CSV plus metadata.
    GenScenarios {
        #[arg(long, short)]
        config: Option<PathBuf>,
        /// Destination CSV; metadata goes next to it as `<stem>.meta.toml`.
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// high_solar, evening_peak or mixed.
        #[arg(long)]
        profile: Option<LoadProfile>,
    },
    /// Write the feeder and its R, X sensitivity matrices.
    BuildModel {
        #[command(flatten)]
        common: Common,
        /// Feeder TOML; overrides `[feeder]`.
        #[arg(long)]
        feeder: Option<PathBuf>,
    },
}

fn parse_labeled(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((l, p)) if !l.is_empty() && !p.is_empty() => Ok((l.to_string(), PathBuf::from(p))),
        _ => Err(format!("expected LABEL=PATH, got `{s}`")),
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::benchmark()),
    }
}

fn out_dir(common: &Common, cfg: &RunConfig) -> PathBuf {
    common.out.clone().unwrap_or_else(|| cfg.resolve(&cfg.output.dir))
}

fn run(cli: Cli) -> Result<ExitCode, CliError> {
    match cli.command {
        Command::Design { common, beta, iterations } => {
            let mut cfg = load_config(&common.config)?;
            if !beta.is_empty() {
                cfg.chance.betas = beta;
            }
            if let Some(k) = iterations {
                cfg.trainer.iterations = k;
            }
            cfg.validate()?;
            let out = out_dir(&common, &cfg);
            let rows = cmd_design(&cfg, &out)?;
            println!(
                "{:>6} {:>6} {:>9} {:>12} {:>10} {:>10} {:>10}",
                "beta", "iters", "converged", "loss", "worst_hard", "worst_soft", "lambda_inf"
            );
            for r in &rows {
                println!(
                    "{:>6} {:>6} {:>9} {:>12.5e} {:>10.4} {:>10.4} {:>10.4e}",
                    r.beta, r.iterations, r.converged, r.loss, r.worst_hard, r.worst_soft, r.lambda_inf
                );
            }
            println!("wrote {}", out.display());
            let aborted: Vec<_> = rows.iter().filter_map(|r| r.aborted.as_ref().map(|e| (r.beta, e))).collect();
            for (beta, e) in &aborted {
                eprintln!("error: design for beta {beta} stopped early: {e}");
            }
            Ok(if aborted.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(3) })
        }
        Command::Evaluate { common, rules } => {
            let cfg = load_config(&common.config)?;
            let out = out_dir(&common, &cfg);
            let rows = cmd_evaluate(&cfg, &out, &rules)?;
            println!("{:>12} {:>12} {:>10} {:>5}", "rules", "loss", "worst_hard", "bus");
            for r in &rows {
                println!("{:>12} {:>12.5e} {:>10.4} {:>5}", r.label, r.loss, r.worst_hard, r.worst_bus);
            }
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::ValidateAc { common, rules } => {
            let cfg = load_config(&common.config)?;
            let out = out_dir(&common, &cfg);
            let rows = cmd_validate_ac(&cfg, &out, &rules)?;
            println!("{:>12} {:>12} {:>12} {:>12}", "rules", "mean_abs", "max_abs", "mismatch");
            for r in &rows {
                println!(
                    "{:>12} {:>12.4e} {:>12.4e} {:>12.2e}",
                    r.label, r.mean_abs, r.max_abs, r.max_mismatch
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::GenScenarios {
            config,
            output,
            count,
            seed,
            profile,
        } => {
            let mut cfg = load_config(&config)?;
            cfg.scenarios.file = None;
            cfg.scenarios.count = count.unwrap_or(cfg.scenarios.count);
            cfg.scenarios.seed = seed.unwrap_or(cfg.scenarios.seed);
            cfg.scenarios.profile = profile.unwrap_or(cfg.scenarios.profile);
            cfg.validate()?;
            let set = cmd_gen_scenarios(&cfg, &output)?;
            println!("wrote {} scenarios over {} buses to {}", set.len(), set.n(), output.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::BuildModel { common, feeder } => {
            let mut cfg = load_config(&common.config)?;
            if let Some(f) = feeder {
                cfg.feeder.builtin = None;
                cfg.feeder.path = Some(std::env::current_dir().map_err(|e| CliError::Io(e.to_string()))?.join(f));
            }
            let out = out_dir(&common, &cfg);
            let model = cmd_build_model(&cfg, &out)?;
            println!(
                "{} buses, {} DERs at {:?}; max X entry {:.4e}; wrote {}",
                model.n(),
                model.num_ders(),
                model.der_buses,
                model.x.max_abs(),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage errors count as configuration errors; help and version are not errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
