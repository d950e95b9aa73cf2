//! Replication experiments: calibration of empirical against theoretical
//! MSE, computational scaling of the design solve, parameter/nuisance
//! sensitivity sweeps, the quadratic-mediator misspecification study,
//! and a brute-force constant-policy oracle used in testing.
//!
//! Replications are independent; each derives its seed deterministically
//! from the root seed, the experiment label, and its indices, so results
//! are bit-identical regardless of thread count.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::config::{BuiltModel, ModelConfig};
use crate::design::{cost_at, solve_budget, variance_at, LeverageContext};
use crate::estimators::{estimate_effect, fit_beta_m_quadratic, fit_beta_r, fit_beta_tc};
use crate::model::{
    coarsen, realized_cost, sample_full, sample_full_quadratic, PropensityPolicy,
    QuadraticMediatorSpec,
};
use crate::{seed, Error, Result};

/// Shared experiment settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    /// Sample sizes, positive and ascending.
    pub sizes: Vec<usize>,
    pub replications: usize,
    /// Budget divisor: the optimized arm runs at b0 = c_naive / ratio
    /// with ratio * n samples, so both arms spend the same total budget.
    pub budget_ratio: f64,
    pub root_seed: u64,
}

impl ExperimentConfig {
    /// CI-friendly defaults: shrunken replication count and grid.
    pub fn desk_scale(model: ModelConfig, root_seed: u64) -> Self {
        ExperimentConfig {
            model,
            sizes: vec![100, 250, 500, 750, 1000, 2500, 5000],
            replications: 20,
            budget_ratio: 1.5,
            root_seed,
        }
    }

    /// Full-size protocol.
    pub fn paper_scale(model: ModelConfig, root_seed: u64) -> Self {
        ExperimentConfig {
            model,
            sizes: vec![100, 250, 500, 750, 1000, 2500, 5000, 7500],
            replications: 50,
            budget_ratio: 1.5,
            root_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::Config("replications must be >= 1".into()));
        }
        if (self.sizes.is_empty() || self.sizes.windows(2).any(|w| w[0] >= w[1]))
            && self.sizes.len() != 1
        {
            return Err(Error::Config(
                "sizes must be nonempty and strictly ascending".into(),
            ));
        }
        if self.sizes.contains(&0) {
            return Err(Error::Config("sizes must be positive".into()));
        }
        if !(self.budget_ratio > 1.0) {
            return Err(Error::Config(format!(
                "budget ratio must exceed 1, got {}",
                self.budget_ratio
            )));
        }
        Ok(())
    }
}

fn subseed(root: u64, label: &str, indices: &[u64]) -> u64 {
    let bytes = seed::derive(root, label, indices);
    u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
}

/// One replication of the two-arm protocol: the naive arm measures
/// everything on n samples; the optimized arm solves the design at
/// b0 = c_naive / ratio and runs on ratio * n samples.
struct ArmOutcome {
    xi_naive: f64,
    xi_opt: f64,
    v_naive: f64,
    v_opt: f64,
    cost_naive: f64,
    cost_opt: f64,
    mean_pi1: f64,
    mean_pi2: f64,
}

fn run_two_arm_rep(
    built: &BuiltModel,
    n: usize,
    ratio: f64,
    root: u64,
    rep: u64,
    true_xi_unused: f64,
) -> Result<ArmOutcome> {
    let _ = true_xi_unused;
    // Common random numbers: the naive arm is the first n records of the
    // oversampled pool, so the two arms' estimation errors correlate and
    // the replication-mean MSE difference is far less noisy.
    let n_opt = (ratio * n as f64).round() as usize;
    let full_opt = sample_full(
        &built.blocks,
        &built.dims,
        &built.errors,
        n_opt,
        subseed(root, "two-arm-pool", &[n as u64, rep]),
    )?;
    let full = crate::model::FullDataset {
        dims: full_opt.dims,
        records: full_opt.records[..n].to_vec(),
    };
    let data = full.to_coarsened();
    let full_policy = PropensityPolicy::full_sampling();
    let est_naive = estimate_effect(&data, &full_policy, 0.95)?;
    let ctx = LeverageContext::from_pilot(&data, &full_policy, &built.costs)?;
    let v_naive = variance_at(&full_policy, &ctx)?.mean;
    let c_naive = cost_at(&full_policy, &ctx, true)?.mean;

    let sol = solve_budget(&ctx, c_naive / ratio, 1e-4)?;
    let (coarse, _) = coarsen(
        &full_opt,
        &sol.policy,
        subseed(root, "two-arm-coarsen", &[n as u64, rep]),
    )?;
    let est_opt = estimate_effect(&coarse, &sol.policy, 0.95)?;
    let cost_opt = coarse
        .records
        .iter()
        .map(|r| realized_cost(r, &built.costs))
        .sum::<f64>()
        / coarse.len() as f64;

    let mut mean_pi1 = 0.0;
    let mut mean_pi2 = 0.0;
    for p in &ctx.mc_pool {
        mean_pi1 += sol.policy.pi1_clamped(&p.x_c, p.x_t)?;
        mean_pi2 += sol.policy.pi2_clamped(&p.x_c, p.x_t, &p.x_m)?;
    }
    mean_pi1 /= ctx.mc_pool.len() as f64;
    mean_pi2 /= ctx.mc_pool.len() as f64;

    Ok(ArmOutcome {
        xi_naive: est_naive.xi_hat,
        xi_opt: est_opt.xi_hat,
        v_naive,
        v_opt: sol.var_inf,
        cost_naive: c_naive,
        cost_opt,
        mean_pi1,
        mean_pi2,
    })
}

/// Per (arm, n) calibration summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub arm: String,
    pub n: usize,
    pub replications: usize,
    pub empirical_mse: f64,
    pub theoretical_mse: f64,
    pub avg_realized_cost: f64,
    pub mean_pi1: f64,
    pub mean_pi2: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub rows: Vec<CalibrationRow>,
    pub failures: usize,
}

pub fn run_calibration(cfg: &ExperimentConfig) -> Result<CalibrationResult> {
    cfg.validate()?;
    let built = cfg.model.build()?;
    let xi = built.blocks.causal_effect();
    let mut rows = Vec::new();
    let mut failures = 0usize;
    for &n in &cfg.sizes {
        let outcomes: Vec<Result<ArmOutcome>> = (0..cfg.replications as u64)
            .into_par_iter()
            .map(|rep| run_two_arm_rep(&built, n, cfg.budget_ratio, cfg.root_seed, rep, xi))
            .collect();
        let ok: Vec<&ArmOutcome> = outcomes.iter().filter_map(|o| o.as_ref().ok()).collect();
        failures += outcomes.len() - ok.len();
        if ok.is_empty() {
            continue;
        }
        let k = ok.len() as f64;
        let mse = |f: &dyn Fn(&ArmOutcome) -> f64| {
            ok.iter().map(|o| (f(o) - xi) * (f(o) - xi)).sum::<f64>() / k
        };
        let mean = |f: &dyn Fn(&ArmOutcome) -> f64| ok.iter().map(|o| f(o)).sum::<f64>() / k;
        rows.push(CalibrationRow {
            arm: "naive".into(),
            n,
            replications: ok.len(),
            empirical_mse: mse(&|o| o.xi_naive),
            theoretical_mse: mean(&|o| o.v_naive) / n as f64,
            avg_realized_cost: mean(&|o| o.cost_naive),
            mean_pi1: 1.0,
            mean_pi2: 1.0,
        });
        let n_opt = (cfg.budget_ratio * n as f64).round();
        rows.push(CalibrationRow {
            arm: "optimized".into(),
            n,
            replications: ok.len(),
            empirical_mse: mse(&|o| o.xi_opt),
            theoretical_mse: mean(&|o| o.v_opt) / n_opt,
            avg_realized_cost: mean(&|o| o.cost_opt),
            mean_pi1: mean(&|o| o.mean_pi1),
            mean_pi2: mean(&|o| o.mean_pi2),
        });
    }
    Ok(CalibrationResult { rows, failures })
}

impl CalibrationResult {
    pub fn to_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "arm",
            "n",
            "replications",
            "empirical_mse",
            "theoretical_mse",
            "avg_realized_cost",
            "mean_pi1",
            "mean_pi2",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.arm.clone(),
                r.n.to_string(),
                r.replications.to_string(),
                r.empirical_mse.to_string(),
                r.theoretical_mse.to_string(),
                r.avg_realized_cost.to_string(),
                r.mean_pi1.to_string(),
                r.mean_pi2.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Which parameter or covariance entry a sensitivity sweep rescales.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepTarget {
    BetaTc,
    BetaMc,
    BetaRc,
    BetaMt,
    BetaRm,
    SigmaCDiag,
    SigmaCOffdiag,
    SigmaMDiag,
    SigmaMOffdiag,
    SigmaTrVarT,
    SigmaTrVarR,
    SigmaTrCov,
}

impl SweepTarget {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "beta_tc" => SweepTarget::BetaTc,
            "beta_mc" => SweepTarget::BetaMc,
            "beta_rc" => SweepTarget::BetaRc,
            "beta_mt" => SweepTarget::BetaMt,
            "beta_rm" => SweepTarget::BetaRm,
            "sigma_c_diag" => SweepTarget::SigmaCDiag,
            "sigma_c_offdiag" => SweepTarget::SigmaCOffdiag,
            "sigma_m_diag" => SweepTarget::SigmaMDiag,
            "sigma_m_offdiag" => SweepTarget::SigmaMOffdiag,
            "sigma_tr_var_t" => SweepTarget::SigmaTrVarT,
            "sigma_tr_var_r" => SweepTarget::SigmaTrVarR,
            "sigma_tr_cov" => SweepTarget::SigmaTrCov,
            other => {
                return Err(Error::Config(format!(
                    "unknown sweep target {other:?}; expected one of beta_tc, beta_mc, beta_rc, \
                     beta_mt, beta_rm, sigma_c_diag, sigma_c_offdiag, sigma_m_diag, \
                     sigma_m_offdiag, sigma_tr_var_t, sigma_tr_var_r, sigma_tr_cov"
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            SweepTarget::BetaTc => "beta_tc",
            SweepTarget::BetaMc => "beta_mc",
            SweepTarget::BetaRc => "beta_rc",
            SweepTarget::BetaMt => "beta_mt",
            SweepTarget::BetaRm => "beta_rm",
            SweepTarget::SigmaCDiag => "sigma_c_diag",
            SweepTarget::SigmaCOffdiag => "sigma_c_offdiag",
            SweepTarget::SigmaMDiag => "sigma_m_diag",
            SweepTarget::SigmaMOffdiag => "sigma_m_offdiag",
            SweepTarget::SigmaTrVarT => "sigma_tr_var_t",
            SweepTarget::SigmaTrVarR => "sigma_tr_var_r",
            SweepTarget::SigmaTrCov => "sigma_tr_cov",
        }
    }

    /// The default multiplicative grid for each target.
    pub fn default_grid(&self) -> Vec<f64> {
        let beta_grid = vec![
            0.01,
            0.05,
            0.10,
            0.15,
            0.2,
            0.25,
            1.0 / 3.0,
            0.5,
            1.0,
            2.0,
            3.0,
            4.0,
            5.0,
            10.0,
            20.0,
        ];
        match self {
            SweepTarget::BetaTc
            | SweepTarget::BetaMc
            | SweepTarget::BetaRc
            | SweepTarget::BetaMt
            | SweepTarget::BetaRm => beta_grid,
            SweepTarget::SigmaCDiag => {
                vec![0.6, 0.75, 1.0, 1.3, 1.75, 2.25, 3.0, 4.5, 7.0, 10.0, 15.0]
            }
            SweepTarget::SigmaCOffdiag => {
                (0..11).map(|i| 3.0f64.sqrt() * i as f64 / 10.0).collect()
            }
            SweepTarget::SigmaMDiag => {
                vec![0.5, 0.6, 0.8, 1.1, 1.6, 2.25, 3.0, 4.5, 7.0, 10.0, 15.0]
            }
            SweepTarget::SigmaMOffdiag => (0..11).map(|i| 0.2 * i as f64).collect(),
            SweepTarget::SigmaTrVarT => {
                vec![0.2, 0.4, 0.7, 1.0, 1.5, 2.5, 5.0, 8.0, 12.5, 20.0]
            }
            SweepTarget::SigmaTrVarR => {
                vec![0.3, 0.5, 0.7, 1.0, 1.5, 2.5, 5.0, 8.0, 12.5, 20.0]
            }
            SweepTarget::SigmaTrCov => (0..11).map(|i| 1.2 * i as f64 / 10.0).collect(),
        }
    }

    /// Baseline with the target rescaled by alpha.
    pub fn apply(&self, base: &ModelConfig, alpha: f64) -> ModelConfig {
        let mut cfg = base.clone();
        let scale_vec = |v: &mut Vec<f64>| v.iter_mut().for_each(|x| *x *= alpha);
        let scale_mat = |m: &mut Vec<Vec<f64>>| {
            m.iter_mut()
                .for_each(|row| row.iter_mut().for_each(|x| *x *= alpha))
        };
        let scale_entries = |m: &mut Vec<Vec<f64>>, diag: bool| {
            for (i, row) in m.iter_mut().enumerate() {
                for (j, x) in row.iter_mut().enumerate() {
                    if (i == j) == diag {
                        *x *= alpha;
                    }
                }
            }
        };
        fn scale_matrix(noise: &mut crate::config::NoiseConfig) -> &mut Vec<Vec<f64>> {
            match noise {
                crate::config::NoiseConfig::Gaussian { cov } => cov,
                crate::config::NoiseConfig::Mvt { scale, .. } => scale,
            }
        }
        match self {
            SweepTarget::BetaTc => scale_vec(&mut cfg.beta.t_c),
            SweepTarget::BetaMc => scale_mat(&mut cfg.beta.m_c),
            SweepTarget::BetaRc => scale_vec(&mut cfg.beta.r_c),
            SweepTarget::BetaMt => scale_vec(&mut cfg.beta.m_t),
            SweepTarget::BetaRm => scale_vec(&mut cfg.beta.r_m),
            SweepTarget::SigmaCDiag => scale_entries(scale_matrix(&mut cfg.errors.c), true),
            SweepTarget::SigmaCOffdiag => scale_entries(scale_matrix(&mut cfg.errors.c), false),
            SweepTarget::SigmaMDiag => scale_entries(scale_matrix(&mut cfg.errors.m), true),
            SweepTarget::SigmaMOffdiag => scale_entries(scale_matrix(&mut cfg.errors.m), false),
            SweepTarget::SigmaTrVarT | SweepTarget::SigmaTrVarR | SweepTarget::SigmaTrCov => {
                let scale = scale_matrix(&mut cfg.errors.tr);
                match self {
                    SweepTarget::SigmaTrVarT => scale[0][0] *= alpha,
                    SweepTarget::SigmaTrVarR => scale[1][1] *= alpha,
                    _ => {
                        scale[0][1] *= alpha;
                        scale[1][0] *= alpha;
                    }
                }
            }
        }
        cfg
    }
}

/// Sensitivity sweep specification.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSpec {
    pub base: ModelConfig,
    pub target: SweepTarget,
    pub grid: Vec<f64>,
    pub replications: usize,
    pub n: usize,
    pub budget_ratio: f64,
    pub root_seed: u64,
}

impl SweepSpec {
    pub fn new(base: ModelConfig, target: SweepTarget, root_seed: u64) -> Self {
        SweepSpec {
            base,
            grid: target.default_grid(),
            target,
            replications: 20,
            n: 500,
            budget_ratio: 1.5,
            root_seed,
        }
    }

    /// Validate positive definiteness at every grid point up front.
    pub fn validate(&self) -> Result<()> {
        for &alpha in &self.grid {
            self.target.apply(&self.base, alpha).build().map_err(|e| {
                Error::Config(format!(
                    "grid point {}={alpha} is invalid: {e}",
                    self.target.name()
                ))
            })?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub target: String,
    pub alpha: f64,
    pub replications: usize,
    pub var_opt_mean: f64,
    pub var_opt_sd: f64,
    pub rel_eff_mean: f64,
    pub rel_eff_sd: f64,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensitivityTable {
    pub rows: Vec<SensitivityRow>,
    pub failures: usize,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n.max(1.0);
    (m, v.sqrt())
}

pub fn run_sensitivity(sweep: &SweepSpec) -> Result<SensitivityTable> {
    sweep.validate()?;
    let mut rows = Vec::new();
    let mut failures = 0usize;
    for (gi, &alpha) in sweep.grid.iter().enumerate() {
        let built = sweep.target.apply(&sweep.base, alpha).build()?;
        let seeds: Vec<u64> = (0..sweep.replications as u64)
            .map(|rep| subseed(sweep.root_seed, "sensitivity", &[gi as u64, rep]))
            .collect();
        let reps: Vec<Result<(f64, f64)>> = seeds
            .par_iter()
            .map(|&s| {
                let full = sample_full(&built.blocks, &built.dims, &built.errors, sweep.n, s)?;
                let data = full.to_coarsened();
                let policy = PropensityPolicy::full_sampling();
                let ctx = LeverageContext::from_pilot(&data, &policy, &built.costs)?;
                let v_naive = variance_at(&policy, &ctx)?.mean;
                let c_naive = cost_at(&policy, &ctx, true)?.mean;
                let sol = solve_budget(&ctx, c_naive / sweep.budget_ratio, 1e-4)?;
                Ok((sol.var_inf, sol.var_inf / (sweep.budget_ratio * v_naive)))
            })
            .collect();
        let ok: Vec<(f64, f64)> = reps
            .iter()
            .filter_map(|r| r.as_ref().ok())
            .copied()
            .collect();
        failures += reps.len() - ok.len();
        if ok.is_empty() {
            continue;
        }
        let (vm, vs) = mean_sd(&ok.iter().map(|r| r.0).collect::<Vec<_>>());
        let (rm, rs) = mean_sd(&ok.iter().map(|r| r.1).collect::<Vec<_>>());
        rows.push(SensitivityRow {
            target: sweep.target.name().into(),
            alpha,
            replications: ok.len(),
            var_opt_mean: vm,
            var_opt_sd: vs,
            rel_eff_mean: rm,
            rel_eff_sd: rs,
            seeds,
        });
    }
    Ok(SensitivityTable { rows, failures })
}

impl SensitivityTable {
    pub fn to_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "target",
            "alpha",
            "replications",
            "var_opt_mean",
            "var_opt_sd",
            "rel_eff_mean",
            "rel_eff_sd",
            "seeds",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.target.clone(),
                r.alpha.to_string(),
                r.replications.to_string(),
                r.var_opt_mean.to_string(),
                r.var_opt_sd.to_string(),
                r.rel_eff_mean.to_string(),
                r.rel_eff_sd.to_string(),
                r.seeds
                    .iter()
                    .map(|s| s.to_string())
                    .collect::<Vec<_>>()
                    .join(";"),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComputationalRow {
    pub n: usize,
    pub replications: usize,
    pub lambda_mean: f64,
    pub lambda_sd: f64,
    pub var_mean: f64,
    pub var_sd: f64,
    pub cost_mean: f64,
    pub cost_sd: f64,
    pub wall_time_mean_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComputationalTable {
    pub rows: Vec<ComputationalRow>,
    pub failures: usize,
}

pub fn run_computational_sensitivity(cfg: &ExperimentConfig) -> Result<ComputationalTable> {
    cfg.validate()?;
    let built = cfg.model.build()?;
    let mut rows = Vec::new();
    let mut failures = 0usize;
    for &n in &cfg.sizes {
        // Sequential over replications so wall times are not confounded
        // by sibling threads.
        let mut lambdas = Vec::new();
        let mut vars = Vec::new();
        let mut costs = Vec::new();
        let mut times = Vec::new();
        for rep in 0..cfg.replications as u64 {
            let s = subseed(cfg.root_seed, "compsens", &[n as u64, rep]);
            let run = || -> Result<(f64, f64, f64, f64)> {
                let full = sample_full(&built.blocks, &built.dims, &built.errors, n, s)?;
                let data = full.to_coarsened();
                let policy = PropensityPolicy::full_sampling();
                let ctx = LeverageContext::from_pilot(&data, &policy, &built.costs)?;
                let c_naive = cost_at(&policy, &ctx, true)?.mean;
                let start = Instant::now();
                let sol = solve_budget(&ctx, c_naive / cfg.budget_ratio, 1e-4)?;
                let elapsed = start.elapsed().as_secs_f64();
                Ok((sol.lambda_star, sol.var_inf, c_naive, elapsed))
            };
            match run() {
                Ok((l, v, c, t)) => {
                    lambdas.push(l);
                    vars.push(v);
                    costs.push(c);
                    times.push(t);
                }
                Err(_) => failures += 1,
            }
        }
        if lambdas.is_empty() {
            continue;
        }
        let (lm, ls) = mean_sd(&lambdas);
        let (vm, vs) = mean_sd(&vars);
        let (cm, cs) = mean_sd(&costs);
        let (tm, _) = mean_sd(&times);
        rows.push(ComputationalRow {
            n,
            replications: lambdas.len(),
            lambda_mean: lm,
            lambda_sd: ls,
            var_mean: vm,
            var_sd: vs,
            cost_mean: cm,
            cost_sd: cs,
            wall_time_mean_s: tm,
        });
    }
    Ok(ComputationalTable { rows, failures })
}

impl ComputationalTable {
    pub fn to_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "n",
            "replications",
            "lambda_mean",
            "lambda_sd",
            "var_mean",
            "var_sd",
            "cost_mean",
            "cost_sd",
            "wall_time_mean_s",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.n.to_string(),
                r.replications.to_string(),
                r.lambda_mean.to_string(),
                r.lambda_sd.to_string(),
                r.var_mean.to_string(),
                r.var_sd.to_string(),
                r.cost_mean.to_string(),
                r.cost_sd.to_string(),
                r.wall_time_mean_s.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Quadratic-in-treatment estimate of the effect curve on coarsened data.
fn quadratic_effect_curve(
    data: &crate::model::CoarsenedDataset,
    policy: &PropensityPolicy,
    eval_points: &[f64],
) -> Result<Vec<f64>> {
    let tc = fit_beta_tc(data)?;
    let quad = fit_beta_m_quadratic(data, policy)?;
    let r = fit_beta_r(data, policy, &tc.eps_t, &quad.eps_m)?;
    Ok(eval_points
        .iter()
        .map(|&x| {
            let mut xi = 0.0;
            for j in 0..r.beta_rm.len() {
                xi += r.beta_rm[j] * (quad.linear[j] + 2.0 * quad.quadratic[j] * x);
            }
            xi
        })
        .collect())
}

/// Ten equally spaced evaluation points on [-0.1, 0.1], endpoints
/// included exactly.
pub fn misspec_eval_points() -> Vec<f64> {
    (0..10).map(|i| -0.1 + 0.2 * i as f64 / 9.0).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MisspecRow {
    pub budget_ratio: f64,
    pub replications: usize,
    pub mse_naive: f64,
    pub mse_optimized: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MisspecTable {
    pub rows: Vec<MisspecRow>,
    pub failures: usize,
}

/// Misspecification study: quadratic data, design optimized under the
/// linear assumption, estimation by quadratic regression, MSE of the
/// effect curve averaged over the evaluation grid.
pub fn run_misspecification(
    cfg: &ExperimentConfig,
    quad: &QuadraticMediatorSpec,
    budget_ratios: &[f64],
) -> Result<MisspecTable> {
    cfg.validate()?;
    let built = cfg.model.build()?;
    quad.validate(&built.dims)?;
    let n = cfg.sizes[0];
    let points = misspec_eval_points();
    let truth: Vec<f64> = points
        .iter()
        .map(|&x| quad.effect_at(&built.blocks.beta_rm, x))
        .collect();
    let mut rows = Vec::new();
    let mut failures = 0usize;
    for &ratio in budget_ratios {
        if !(ratio > 1.0) {
            return Err(Error::Config(format!(
                "budget ratios must exceed 1, got {ratio}"
            )));
        }
        let reps: Vec<Result<(f64, f64)>> = (0..cfg.replications as u64)
            .into_par_iter()
            .map(|rep| {
                // Seed streams keyed on the budget value itself, so each
                // budget's rows do not depend on the order of the list.
                let s_base = |label: &str| subseed(cfg.root_seed, label, &[ratio.to_bits(), rep]);
                // Common random numbers: the naive arm reuses the first n
                // records of the oversampled pool (see run_two_arm_rep).
                let n_opt = (ratio * n as f64).round() as usize;
                let full_opt = sample_full_quadratic(
                    &built.blocks,
                    quad,
                    &built.dims,
                    &built.errors,
                    n_opt,
                    s_base("misspec-pool"),
                )?;
                let full = crate::model::FullDataset {
                    dims: full_opt.dims,
                    records: full_opt.records[..n].to_vec(),
                };
                let data = full.to_coarsened();
                let policy = PropensityPolicy::full_sampling();
                let curve_naive = quadratic_effect_curve(&data, &policy, &points)?;

                // Design under the linear assumption on the same pilot.
                let ctx = LeverageContext::from_pilot(&data, &policy, &built.costs)?;
                let c_naive = cost_at(&policy, &ctx, true)?.mean;
                let sol = solve_budget(&ctx, c_naive / ratio, 1e-4)?;
                let (coarse, _) = coarsen(&full_opt, &sol.policy, s_base("misspec-coarsen"))?;
                let curve_opt = quadratic_effect_curve(&coarse, &sol.policy, &points)?;

                let mse = |curve: &[f64]| {
                    curve
                        .iter()
                        .zip(&truth)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        / truth.len() as f64
                };
                Ok((mse(&curve_naive), mse(&curve_opt)))
            })
            .collect();
        let ok: Vec<(f64, f64)> = reps
            .iter()
            .filter_map(|r| r.as_ref().ok())
            .copied()
            .collect();
        failures += reps.len() - ok.len();
        if ok.is_empty() {
            continue;
        }
        let k = ok.len() as f64;
        rows.push(MisspecRow {
            budget_ratio: ratio,
            replications: ok.len(),
            mse_naive: ok.iter().map(|r| r.0).sum::<f64>() / k,
            mse_optimized: ok.iter().map(|r| r.1).sum::<f64>() / k,
        });
    }
    Ok(MisspecTable { rows, failures })
}

impl MisspecTable {
    pub fn to_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["budget_ratio", "replications", "mse_naive", "mse_optimized"])?;
        for r in &self.rows {
            w.write_record([
                r.budget_ratio.to_string(),
                r.replications.to_string(),
                r.mse_naive.to_string(),
                r.mse_optimized.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Best constant policy found by exhaustive grid search, used as a test
/// oracle for the closed-form design.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GridOracleResult {
    pub pi1: f64,
    pub pi2: f64,
    pub variance: f64,
    pub cost: f64,
}

/// For constant policies the expected cost above the base is exactly
/// linear in pi1: E[pi1 c1 + pi1 pi2 c2] = pi1 (E[c1] + pi2 E[c2]). So
/// for every grid value of pi2 there is a unique pi1 spending the budget
/// exactly, and the search reduces to a one-dimensional sweep over pi2
/// with no budget-tolerance noise.
pub fn grid_oracle(ctx: &LeverageContext, b0: f64, grid_step: f64) -> Result<GridOracleResult> {
    if !(grid_step > 0.0 && grid_step <= 0.5) {
        return Err(Error::Config(format!(
            "grid step must lie in (0, 0.5], got {grid_step}"
        )));
    }
    let steps = (1.0 / grid_step).round() as usize;
    let mut best: Option<GridOracleResult> = None;
    for j in 1..=steps {
        let p2 = (j as f64 * grid_step).min(1.0);
        // Cost slope per unit pi1 at this pi2.
        let slope = cost_at(&PropensityPolicy::constant(1.0, p2)?, ctx, true)?.mean - ctx.costs.c0;
        let p1 = (b0 - ctx.costs.c0) / slope;
        if !(p1 > 0.0 && p1 <= 1.0 + 1e-12) {
            continue;
        }
        let p1 = p1.min(1.0);
        let policy = PropensityPolicy::constant(p1, p2)?;
        let cost = cost_at(&policy, ctx, true)?.mean;
        let var = variance_at(&policy, ctx)?.mean;
        if best.is_none_or(|b| var < b.variance) {
            best = Some(GridOracleResult {
                pi1: p1,
                pi2: p2,
                variance: var,
                cost,
            });
        }
    }
    best.ok_or_else(|| {
        Error::InfeasibleBudget(format!(
            "no constant policy on the pi2 grid meets the budget {b0}"
        ))
    })
}

/// Spearman rank correlation with a t-approximation p-value.
pub fn spearman(x: &[f64], y: &[f64]) -> (f64, f64) {
    assert_eq!(x.len(), y.len());
    let n = x.len();
    let rx = ranks(x);
    let ry = ranks(y);
    let (mx, _) = mean_sd(&rx);
    let (my, _) = mean_sd(&ry);
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for i in 0..n {
        num += (rx[i] - mx) * (ry[i] - my);
        dx += (rx[i] - mx) * (rx[i] - mx);
        dy += (ry[i] - my) * (ry[i] - my);
    }
    let rho = num / (dx * dy).sqrt();
    if n < 3 || rho.abs() >= 1.0 {
        return (rho, if rho.abs() >= 1.0 { 0.0 } else { 1.0 });
    }
    let t = rho * ((n as f64 - 2.0) / (1.0 - rho * rho)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n as f64 - 2.0).expect("valid dof");
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    (rho, p)
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("no NaN in ranks"));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CostFn, CostSpec};

    #[test]
    fn spearman_basic() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [2.0, 4.0, 6.0, 8.0, 10.0];
        let (rho, p) = spearman(&x, &y);
        assert!((rho - 1.0).abs() < 1e-12);
        assert!(p < 0.05);
        let y_rev: Vec<f64> = y.iter().rev().copied().collect();
        let (rho, _) = spearman(&x, &y_rev);
        assert!((rho + 1.0).abs() < 1e-12);
    }

    #[test]
    fn ranks_handle_ties() {
        let r = ranks(&[1.0, 2.0, 2.0, 3.0]);
        assert_eq!(r, vec![1.0, 2.5, 2.5, 4.0]);
    }

    #[test]
    fn grid_oracle_constant_leverage() {
        let costs = CostSpec {
            c0: 1.0,
            c1: CostFn::Constant { a: 1.0 },
            c2: CostFn::Constant { a: 1.0 },
        };
        let ctx = LeverageContext::constant_leverage(4.0, 1.0, costs).unwrap();
        let res = grid_oracle(&ctx, 2.0, 0.01).unwrap();
        assert!(
            (res.pi1 - 2.0 / 3.0).abs() <= 0.01 + 1e-12,
            "pi1 = {}",
            res.pi1
        );
        assert!((res.pi2 - 0.5).abs() <= 0.01 + 1e-12, "pi2 = {}", res.pi2);
        assert!((res.cost - 2.0).abs() < 1e-9, "cost = {}", res.cost);
        // Never beats the closed form by more than the grid resolution.
        let sol = solve_budget(&ctx, 2.0, 1e-8).unwrap();
        assert!(
            res.variance >= sol.var_inf - 0.05,
            "{} vs {}",
            res.variance,
            sol.var_inf
        );
        // Maximal budget: the only feasible policy is (1, 1).
        let res = grid_oracle(&ctx, 3.0, 0.05).unwrap();
        assert_eq!((res.pi1, res.pi2), (1.0, 1.0));
        // Infeasible budget reported.
        assert!(grid_oracle(&ctx, 0.5, 0.05).is_err());
    }

    #[test]
    fn sweep_validation_names_grid_point() {
        let mut sweep = SweepSpec::new(ModelConfig::baseline(), SweepTarget::SigmaTrCov, 1);
        sweep.grid = vec![0.5, 50.0];
        let err = sweep.validate().unwrap_err().to_string();
        assert!(err.contains("sigma_tr_cov=50"), "{err}");
    }

    #[test]
    fn misspec_eval_grid_endpoints() {
        let pts = misspec_eval_points();
        assert_eq!(pts.len(), 10);
        assert_eq!(pts[0], -0.1);
        assert!((pts[9] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn calibration_smoke() {
        let mut cfg = ExperimentConfig::desk_scale(ModelConfig::baseline(), 7);
        cfg.sizes = vec![100];
        cfg.replications = 1;
        let res = run_calibration(&cfg).unwrap();
        assert_eq!(res.rows.len(), 2);
        for row in &res.rows {
            assert!(row.avg_realized_cost > 0.0);
            assert!(row.empirical_mse >= 0.0);
            assert!(row.theoretical_mse > 0.0);
        }
    }

    #[test]
    fn calibration_reproducible() {
        let mut cfg = ExperimentConfig::desk_scale(ModelConfig::baseline(), 13);
        cfg.sizes = vec![250];
        cfg.replications = 3;
        let a = run_calibration(&cfg).unwrap();
        let b = run_calibration(&cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&a.rows).unwrap(),
            serde_json::to_string(&b.rows).unwrap()
        );
    }

    #[test]
    fn compsens_smoke() {
        let mut cfg = ExperimentConfig::desk_scale(ModelConfig::baseline(), 5);
        cfg.sizes = vec![100];
        cfg.replications = 1;
        let start = std::time::Instant::now();
        let res = run_computational_sensitivity(&cfg).unwrap();
        assert!(start.elapsed().as_secs() < 10);
        assert_eq!(res.rows.len(), 1);
    }

    #[test]
    fn misspec_smoke() {
        let mut cfg = ExperimentConfig::desk_scale(ModelConfig::baseline(), 3);
        cfg.sizes = vec![400];
        cfg.replications = 2;
        let quad = QuadraticMediatorSpec {
            linear: nalgebra::DVector::from_vec(vec![0.7, 0.2, 0.1]),
            quadratic: nalgebra::DVector::from_vec(vec![-0.1, -0.2, -0.4]),
        };
        let res = run_misspecification(&cfg, &quad, &[1.5]).unwrap();
        assert_eq!(res.rows.len(), 1);
        assert!(res.rows[0].mse_naive.is_finite());
        assert!(res.rows[0].mse_optimized.is_finite());
    }

    #[test]
    fn sensitivity_smoke_single_point() {
        let mut sweep = SweepSpec::new(ModelConfig::baseline(), SweepTarget::BetaMt, 11);
        sweep.grid = vec![1.0];
        sweep.replications = 2;
        sweep.n = 300;
        let table = run_sensitivity(&sweep).unwrap();
        assert_eq!(table.rows.len(), 1);
        assert!(table.rows[0].rel_eff_mean > 0.0 && table.rows[0].rel_eff_mean < 1.2);
        assert_eq!(table.rows[0].seeds.len(), 2);
    }
}
