//! Command-line driver for simulation, design optimization, coarsening,
//! effect estimation, and the replication experiments.
//!
//! Every artifact-producing run writes a `manifest.json` next to its
//! outputs recording the command, seed, input digests, and output
//! digests. Estimation verifies the sampling-policy digest recorded at
//! coarsening time and refuses mismatched policies unless forced.
//!
//! Exit codes: 0 success, 1 usage error, 2 invalid configuration or I/O,
//! 3 infeasible budget, 4 degenerate data or empty pool, 5 policy digest
//! mismatch.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use frontdoor_design::config::ModelConfig;
use frontdoor_design::design::{
    backdoor_solve, cost_at, solve_budget, DesignSolution, LeverageContext,
};
use frontdoor_design::harness::{
    grid_oracle, run_calibration, run_computational_sensitivity, run_misspecification,
    run_sensitivity, ExperimentConfig, SweepSpec, SweepTarget,
};
use frontdoor_design::io::{read_csv, sha256_file, write_csv, RunManifest};
use frontdoor_design::model::{coarsen, sample_full, sample_full_quadratic, PropensityPolicy};
use frontdoor_design::{Error, Result};

#[derive(Parser)]
#[command(
    name = "fd",
    version,
    about = "Budget-constrained two-stage sampling design for front-door effect estimation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Model configuration JSON; the built-in reference model when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed for all pseudo-randomness.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic dataset and write it as CSV (all rows fully
    /// observed; apply `coarsen` to subsample).
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of records.
        #[arg(long, default_value_t = 1000)]
        n: usize,
    },
    /// Solve the budget-constrained design and write the policy as JSON.
    Design {
        #[command(flatten)]
        common: CommonArgs,
        /// Pilot dataset CSV to estimate nuisance parameters from; when
        /// omitted the design uses the true model parameters with a
        /// simulated Monte Carlo pool.
        #[arg(long)]
        pilot: Option<PathBuf>,
        /// Absolute budget per record.
        #[arg(long, conflicts_with = "budget_ratio")]
        b0: Option<f64>,
        /// Budget as a fraction of the full-sampling cost (in (0, 1]).
        #[arg(long, default_value_t = 2.0 / 3.0)]
        budget_ratio: f64,
        /// Budget matching tolerance, relative.
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        /// Monte Carlo pool size when no pilot is given.
        #[arg(long, default_value_t = 10_000)]
        pool_n: usize,
        /// Optimize only the first sampling stage (mediator-only
        /// adjustment with no second-stage cost).
        #[arg(long)]
        single_stage: bool,
        /// With --single-stage, use the constant expectation form of the
        /// propensity instead of the pointwise square-root form.
        #[arg(long, requires = "single_stage")]
        printed_form: bool,
    },
    /// Subsample a fully observed dataset under a sampling policy.
    Coarsen {
        #[command(flatten)]
        common: CommonArgs,
        /// Fully observed input dataset CSV.
        #[arg(long)]
        data: PathBuf,
        /// Design JSON produced by `design`.
        #[arg(long, conflicts_with = "constant")]
        design: Option<PathBuf>,
        /// Constant propensities `p1 p2` instead of a design file.
        #[arg(long, num_args = 2, value_names = ["P1", "P2"])]
        constant: Option<Vec<f64>>,
    },
    /// Estimate the causal effect from a coarsened dataset.
    Estimate {
        #[command(flatten)]
        common: CommonArgs,
        /// Coarsened dataset CSV.
        #[arg(long)]
        data: PathBuf,
        /// Design JSON whose policy generated the data.
        #[arg(long, conflicts_with = "constant")]
        design: Option<PathBuf>,
        /// Constant propensities `p1 p2` instead of a design file.
        #[arg(long, num_args = 2, value_names = ["P1", "P2"])]
        constant: Option<Vec<f64>>,
        /// Manifest recording the policy digest used at coarsening time;
        /// defaults to `manifest.json` next to the data file.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Confidence level for the interval.
        #[arg(long, default_value_t = 0.95)]
        level: f64,
    },
    /// Replication experiments.
    Experiment {
        #[command(subcommand)]
        which: ExperimentCommand,
    },
    /// Exhaustive constant-policy grid search (test oracle).
    Oracle {
        #[command(flatten)]
        common: CommonArgs,
        /// Absolute budget per record.
        #[arg(long)]
        b0: f64,
        /// Grid resolution in (0, 0.5].
        #[arg(long, default_value_t = 0.01)]
        grid_step: f64,
        /// Monte Carlo pool size.
        #[arg(long, default_value_t = 10_000)]
        pool_n: usize,
    },
}

#[derive(Args, Clone)]
struct ExperimentArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Full-size replication protocol instead of the quick default.
    #[arg(long)]
    paper_scale: bool,
}

#[derive(Subcommand)]
enum ExperimentCommand {
    /// Empirical versus theoretical MSE for the naive and optimized arms.
    Calibrate {
        #[command(flatten)]
        args: ExperimentArgs,
    },
    /// Design sensitivity to a rescaled parameter or covariance entry.
    Sensitivity {
        #[command(flatten)]
        args: ExperimentArgs,
        /// Which entry to sweep (e.g. beta_mt, sigma_tr_cov).
        #[arg(long)]
        target: String,
    },
    /// Scaling of the design solve with pilot sample size.
    Compsens {
        #[command(flatten)]
        args: ExperimentArgs,
    },
    /// Quadratic-mediator misspecification study.
    Misspec {
        #[command(flatten)]
        args: ExperimentArgs,
        /// Budget ratios to evaluate.
        #[arg(long, num_args = 1.., default_values_t = vec![1.2, 1.5, 2.0])]
        budgets: Vec<f64>,
    },
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("FD_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
            _ => {
                eprintln!("error: FD_THREADS must be a positive integer, got {threads:?}");
                return ExitCode::from(2);
            }
        }
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn load_config(common: &CommonArgs) -> Result<(ModelConfig, Option<String>)> {
    match &common.config {
        Some(path) => Ok((ModelConfig::load(path)?, Some(sha256_file(path)?))),
        None => Ok((ModelConfig::baseline(), None)),
    }
}

fn prepare_out(common: &CommonArgs, names: &[&str]) -> Result<()> {
    std::fs::create_dir_all(&common.out)?;
    if !common.force {
        for name in names {
            let p = common.out.join(name);
            if p.exists() {
                return Err(Error::Config(format!(
                    "output {} already exists; pass --force to overwrite",
                    p.display()
                )));
            }
        }
    }
    Ok(())
}

fn command_line() -> String {
    std::env::args().collect::<Vec<_>>().join(" ")
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

fn load_policy(design: &Option<PathBuf>, constant: &Option<Vec<f64>>) -> Result<PropensityPolicy> {
    match (design, constant) {
        (Some(path), None) => {
            let sol: DesignSolution = serde_json::from_slice(&std::fs::read(path)?)?;
            Ok(sol.policy)
        }
        (None, Some(ps)) => PropensityPolicy::constant(ps[0], ps[1]),
        (None, None) => Err(Error::Config(
            "a sampling policy is required: pass --design or --constant".into(),
        )),
        (Some(_), Some(_)) => unreachable!("clap enforces the conflict"),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { common, n } => {
            let (cfg, cfg_digest) = load_config(&common)?;
            let built = cfg.build()?;
            prepare_out(&common, &["data.csv", "manifest.json"])?;
            let full = match &built.quadratic {
                Some(q) => sample_full_quadratic(
                    &built.blocks,
                    q,
                    &built.dims,
                    &built.errors,
                    n,
                    common.seed,
                )?,
                None => sample_full(&built.blocks, &built.dims, &built.errors, n, common.seed)?,
            };
            let data_path = common.out.join("data.csv");
            write_csv(&full.to_coarsened(), &data_path)?;
            let mut manifest = RunManifest::new(command_line(), common.seed);
            manifest.config_digest = cfg_digest;
            manifest.record_output(&data_path)?;
            manifest.save(&common.out.join("manifest.json"))?;
            println!("wrote {} records to {}", n, data_path.display());
            Ok(())
        }
        Command::Design {
            common,
            pilot,
            b0,
            budget_ratio,
            tol,
            pool_n,
            single_stage,
            printed_form,
        } => {
            let (cfg, cfg_digest) = load_config(&common)?;
            let built = cfg.build()?;
            prepare_out(&common, &["design.json", "manifest.json"])?;
            let ctx = match &pilot {
                Some(path) => {
                    let data = read_csv(path, &built.dims)?;
                    LeverageContext::from_pilot(
                        &data,
                        &PropensityPolicy::full_sampling(),
                        &built.costs,
                    )?
                }
                None => LeverageContext::from_model(&built, pool_n, common.seed)?,
            };
            let b0 = match b0 {
                Some(b) => b,
                None => {
                    if !(budget_ratio > 0.0 && budget_ratio <= 1.0) {
                        return Err(Error::Config(format!(
                            "budget ratio must lie in (0, 1], got {budget_ratio}"
                        )));
                    }
                    let c_full = cost_at(&PropensityPolicy::full_sampling(), &ctx, true)?.mean;
                    budget_ratio * c_full
                }
            };
            let sol = if single_stage {
                backdoor_solve(&ctx, b0, tol, printed_form)?
            } else {
                solve_budget(&ctx, b0, tol)?
            };
            let design_path = common.out.join("design.json");
            write_json(&sol, &design_path)?;
            let mut manifest = RunManifest::new(command_line(), common.seed);
            manifest.config_digest = cfg_digest;
            manifest.policy_digest = Some(sol.policy.digest()?);
            manifest.record_output(&design_path)?;
            manifest.save(&common.out.join("manifest.json"))?;
            println!(
                "lambda* = {:.6e}, asymptotic variance = {:.6}, expected cost = {:.6} (budget {:.6})",
                sol.lambda_star, sol.var_inf, sol.expected_cost, b0
            );
            println!("wrote {}", design_path.display());
            Ok(())
        }
        Command::Coarsen {
            common,
            data,
            design,
            constant,
        } => {
            let (cfg, cfg_digest) = load_config(&common)?;
            let built = cfg.build()?;
            prepare_out(&common, &["data.csv", "manifest.json"])?;
            let policy = load_policy(&design, &constant)?;
            let input = read_csv(&data, &built.dims)?;
            let full = input.to_full()?;
            let (coarse, clips) = coarsen(&full, &policy, common.seed)?;
            let data_path = common.out.join("data.csv");
            write_csv(&coarse, &data_path)?;
            let mut manifest = RunManifest::new(command_line(), common.seed);
            manifest.config_digest = cfg_digest;
            manifest.policy_digest = Some(policy.digest()?);
            manifest.record_output(&data_path)?;
            manifest.save(&common.out.join("manifest.json"))?;
            if clips.pi1_clipped + clips.pi2_clipped > 0 {
                eprintln!(
                    "note: clipped {} first-stage and {} second-stage propensities at the floor",
                    clips.pi1_clipped, clips.pi2_clipped
                );
            }
            println!("wrote {}", data_path.display());
            Ok(())
        }
        Command::Estimate {
            common,
            data,
            design,
            constant,
            manifest,
            level,
        } => {
            let (cfg, _) = load_config(&common)?;
            let built = cfg.build()?;
            let policy = load_policy(&design, &constant)?;
            let manifest_path = manifest.clone().unwrap_or_else(|| {
                data.parent()
                    .unwrap_or(Path::new("."))
                    .join("manifest.json")
            });
            if manifest_path.exists() {
                let m = RunManifest::load(&manifest_path)?;
                if let Some(expected) = m.policy_digest {
                    let actual = policy.digest()?;
                    if expected != actual {
                        if common.force {
                            eprintln!(
                                "warning: policy digest mismatch overridden by --force \
                                 (expected {expected}, got {actual})"
                            );
                        } else {
                            return Err(Error::DigestMismatch { expected, actual });
                        }
                    }
                }
            } else if manifest.is_some() {
                return Err(Error::Config(format!(
                    "manifest {} not found",
                    manifest_path.display()
                )));
            }
            let dataset = read_csv(&data, &built.dims)?;
            let est = frontdoor_design::estimators::estimate_effect(&dataset, &policy, level)?;
            println!("{}", serde_json::to_string_pretty(&est)?);
            Ok(())
        }
        Command::Experiment { which } => run_experiment(which),
        Command::Oracle {
            common,
            b0,
            grid_step,
            pool_n,
        } => {
            let (cfg, _) = load_config(&common)?;
            let built = cfg.build()?;
            let ctx = LeverageContext::from_model(&built, pool_n, common.seed)?;
            let res = grid_oracle(&ctx, b0, grid_step)?;
            println!("{}", serde_json::to_string_pretty(&res)?);
            Ok(())
        }
    }
}

fn experiment_config(args: &ExperimentArgs) -> Result<(ExperimentConfig, Option<String>)> {
    let (model, digest) = load_config(&args.common)?;
    let cfg = if args.paper_scale {
        ExperimentConfig::paper_scale(model, args.common.seed)
    } else {
        ExperimentConfig::desk_scale(model, args.common.seed)
    };
    Ok((cfg, digest))
}

fn run_experiment(which: ExperimentCommand) -> Result<()> {
    match which {
        ExperimentCommand::Calibrate { args } => {
            let (cfg, digest) = experiment_config(&args)?;
            prepare_out(&args.common, &["calibration.csv", "manifest.json"])?;
            let res = run_calibration(&cfg)?;
            let path = args.common.out.join("calibration.csv");
            res.to_csv(&path)?;
            finish_experiment(&args, digest, &path, res.failures)
        }
        ExperimentCommand::Sensitivity { args, target } => {
            let (cfg, digest) = experiment_config(&args)?;
            prepare_out(&args.common, &["sensitivity.csv", "manifest.json"])?;
            let target = SweepTarget::parse(&target)?;
            let mut sweep = SweepSpec::new(cfg.model, target, cfg.root_seed);
            sweep.replications = if args.paper_scale { 50 } else { 20 };
            let res = run_sensitivity(&sweep)?;
            let path = args.common.out.join("sensitivity.csv");
            res.to_csv(&path)?;
            finish_experiment(&args, digest, &path, res.failures)
        }
        ExperimentCommand::Compsens { args } => {
            let (cfg, digest) = experiment_config(&args)?;
            prepare_out(&args.common, &["computational.csv", "manifest.json"])?;
            let res = run_computational_sensitivity(&cfg)?;
            let path = args.common.out.join("computational.csv");
            res.to_csv(&path)?;
            finish_experiment(&args, digest, &path, res.failures)
        }
        ExperimentCommand::Misspec { args, budgets } => {
            let (mut cfg, digest) = experiment_config(&args)?;
            prepare_out(&args.common, &["misspecification.csv", "manifest.json"])?;
            let built = cfg.model.build()?;
            let quad = match built.quadratic {
                Some(q) => q,
                None => frontdoor_design::model::QuadraticMediatorSpec {
                    linear: nalgebra::DVector::from_vec(vec![0.7, 0.2, 0.1]),
                    quadratic: nalgebra::DVector::from_vec(vec![-0.1, -0.2, -0.4]),
                },
            };
            cfg.sizes = vec![500];
            let res = run_misspecification(&cfg, &quad, &budgets)?;
            let path = args.common.out.join("misspecification.csv");
            res.to_csv(&path)?;
            finish_experiment(&args, digest, &path, res.failures)
        }
    }
}

fn finish_experiment(
    args: &ExperimentArgs,
    config_digest: Option<String>,
    table_path: &Path,
    failures: usize,
) -> Result<()> {
    let mut manifest = RunManifest::new(command_line(), args.common.seed);
    manifest.config_digest = config_digest;
    manifest.record_output(table_path)?;
    manifest.save(&args.common.out.join("manifest.json"))?;
    if failures > 0 {
        eprintln!("note: {failures} replications failed and were excluded");
    }
    println!("wrote {}", table_path.display());
    Ok(())
}
