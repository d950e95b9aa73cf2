//! Leverage functions, the asymptotic-variance functional, and the
//! budget-constrained propensity optimization.
//!
//! The optimized estimator's asymptotic variance is
//! E[g1/pi1 + g2/(pi1 pi2)] with first-stage leverage
//! g1 = beta_rM Var(eps_M) beta_rM^T eps_t^2 / Var(eps_t)^2 and
//! second-stage leverage
//! g2 = Var(eps_r | eps_t) (eps_M^T Var(eps_M)^{-1} beta_Mt)^2.
//! Minimizing it subject to E[c0 + pi1 c1 + pi1 pi2 c2] = b0 has a
//! closed-form solution per Lagrange multiplier lambda; the multiplier
//! itself is found by bisection (expected cost is continuous and
//! non-increasing in lambda).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::config::BuiltModel;
use crate::estimators::{fit_pipeline, NuisanceEstimates};
use crate::model::{sample_full, CoarsenedDataset, CostSpec, PropensityPolicy, Stage};
use crate::{Error, Result, DEFAULT_PROPENSITY_FLOOR, MAX_CONDITION_NUMBER};

/// One (possibly reweighted) draw of X_{C,t,M} over which population
/// expectations are approximated.
#[derive(Debug, Clone)]
pub struct PoolPoint {
    pub x_c: DVector<f64>,
    pub x_t: f64,
    pub x_m: DVector<f64>,
    pub weight: f64,
}

/// Everything the design optimization needs: nuisance estimates, costs,
/// a pool of mediator residuals for conditional-expectation
/// approximation, and a Monte Carlo pool of X_{C,t,M} draws.
#[derive(Debug, Clone)]
pub struct LeverageContext {
    pub nuisance: NuisanceEstimates,
    pub costs: CostSpec,
    pub eps_m_pool: Vec<DVector<f64>>,
    pub mc_pool: Vec<PoolPoint>,
    pub floor: f64,
    /// Residual-subsample size for conditional means; the same subsample
    /// (a deterministic pool prefix) is shared across evaluation points.
    pub subsample_size: usize,
}

impl LeverageContext {
    /// Simulation mode: nuisance taken from the true model, pools drawn
    /// fresh from it.
    pub fn from_model(built: &BuiltModel, pool_n: usize, seed: u64) -> Result<Self> {
        if pool_n == 0 {
            return Err(Error::EmptyPool("pool_n must be >= 1".into()));
        }
        let full = sample_full(&built.blocks, &built.dims, &built.errors, pool_n, seed)?;
        let mut mc_pool = Vec::with_capacity(pool_n);
        let mut eps_m_pool = Vec::with_capacity(pool_n);
        for rec in &full.records {
            eps_m_pool.push(
                &rec.x_m - &built.blocks.beta_mt * rec.x_t - &built.blocks.beta_mc * &rec.x_c,
            );
            mc_pool.push(PoolPoint {
                x_c: rec.x_c.clone(),
                x_t: rec.x_t,
                x_m: rec.x_m.clone(),
                weight: 1.0,
            });
        }
        let nuisance = NuisanceEstimates {
            beta_hat: built.blocks.clone(),
            gamma_hat: built.errors.gamma0(),
            sigma_c_hat: built.errors.sigma_c().clone(),
            var_t_hat: built.errors.var_t(),
            sigma_m_hat: built.errors.sigma_m().clone(),
            var_r_given_t_hat: built.errors.var_r_given_t(),
        };
        Ok(LeverageContext {
            nuisance,
            costs: built.costs.clone(),
            eps_m_pool,
            mc_pool,
            floor: DEFAULT_PROPENSITY_FLOOR,
            subsample_size: 256,
        })
    }

    /// Application mode: nuisance fitted on a pilot dataset; the pool is
    /// built from stage >= 2 pilot records reweighted by the inverse
    /// pilot propensity so expectations are population-level.
    pub fn from_pilot(
        data: &CoarsenedDataset,
        pilot_policy: &PropensityPolicy,
        costs: &CostSpec,
    ) -> Result<Self> {
        let fit = fit_pipeline(data, pilot_policy)?;
        let mut mc_pool = Vec::new();
        let mut eps_m_pool = Vec::new();
        for (i, rec) in data.records.iter().enumerate() {
            if rec.stage < Stage::Two {
                continue;
            }
            let w = 1.0 / pilot_policy.pi1_clamped(&rec.x_c, rec.x_t)?;
            eps_m_pool.push(fit.m.eps_m[i].clone().expect("stage >= 2 residual"));
            mc_pool.push(PoolPoint {
                x_c: rec.x_c.clone(),
                x_t: rec.x_t,
                x_m: rec.x_m.clone().expect("stage >= 2 x_M"),
                weight: w,
            });
        }
        if mc_pool.is_empty() {
            return Err(Error::EmptyPool(
                "pilot dataset has no stage >= 2 records".into(),
            ));
        }
        Ok(LeverageContext {
            nuisance: fit.nuisance,
            costs: costs.clone(),
            eps_m_pool,
            mc_pool,
            floor: DEFAULT_PROPENSITY_FLOOR,
            subsample_size: 256,
        })
    }

    /// Degenerate one-point context with constant leverages, used by
    /// closed-form fixtures and tests. Takes g1 = a^2, g2 = b^2 with
    /// a = sqrt(g1), b = sqrt(g2) realized through a one-dimensional
    /// model: var_t = 1, eps_t = 1, beta_rM = (a), Sigma_M = I,
    /// var_r_given_t = 1, beta_Mt = (b), eps_M = (1).
    pub fn constant_leverage(g1: f64, g2: f64, costs: CostSpec) -> Result<Self> {
        if g1 < 0.0 || g2 < 0.0 {
            return Err(Error::Config("constant leverages must be >= 0".into()));
        }
        let nuisance = NuisanceEstimates {
            beta_hat: crate::model::BlockMatrix {
                beta_tc: DVector::zeros(1),
                beta_mc: DMatrix::zeros(1, 1),
                beta_mt: DVector::from_vec(vec![g2.sqrt()]),
                beta_rc: DVector::zeros(1),
                beta_rm: DVector::from_vec(vec![g1.sqrt()]),
            },
            gamma_hat: 0.0,
            sigma_c_hat: DMatrix::identity(1, 1),
            var_t_hat: 1.0,
            sigma_m_hat: DMatrix::identity(1, 1),
            var_r_given_t_hat: 1.0,
        };
        // One pool point with eps_t = 1 and eps_M = (1): x_t = 1 and
        // x_M = beta_Mt * x_t + 1.
        let point = PoolPoint {
            x_c: DVector::zeros(1),
            x_t: 1.0,
            x_m: DVector::from_vec(vec![g2.sqrt() + 1.0]),
            weight: 1.0,
        };
        Ok(LeverageContext {
            nuisance,
            costs,
            eps_m_pool: vec![DVector::from_vec(vec![1.0])],
            mc_pool: vec![point],
            floor: DEFAULT_PROPENSITY_FLOOR,
            subsample_size: 256,
        })
    }

    /// Content digest of the pool, recorded in serialized policies.
    pub fn pool_digest(&self) -> String {
        let mut bytes = Vec::new();
        for p in &self.mc_pool {
            for v in p
                .x_c
                .iter()
                .chain([&p.x_t])
                .chain(p.x_m.iter())
                .chain([&p.weight])
            {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        crate::io::sha256_hex(&bytes)
    }
}

/// Coefficients precomputed from the nuisance estimates so leverages are
/// cheap per evaluation point.
#[derive(Debug, Clone)]
pub struct LeverageCoeffs {
    /// beta_rM Sigma_M beta_rM^T / var_t^2; g1 = a1 * eps_t^2.
    pub a1: f64,
    /// Sigma_M^{-1} beta_Mt; g2 = var_r_given_t * (eps_M . v)^2.
    pub sigma_m_inv_beta_mt: DVector<f64>,
}

impl LeverageCoeffs {
    pub fn from_nuisance(nu: &NuisanceEstimates) -> Result<Self> {
        if nu.var_t_hat <= 0.0 {
            return Err(Error::Config(format!(
                "var_t estimate must be positive, got {}",
                nu.var_t_hat
            )));
        }
        let svd = nu.sigma_m_hat.clone().svd(true, true);
        let cond = svd.singular_values.max() / svd.singular_values.min();
        if !cond.is_finite() || cond > MAX_CONDITION_NUMBER {
            return Err(Error::RankDeficient {
                system: "Sigma_M in leverage coefficients".into(),
                cond,
            });
        }
        let b = DMatrix::from_column_slice(
            nu.beta_hat.beta_mt.len(),
            1,
            nu.beta_hat.beta_mt.as_slice(),
        );
        let v = svd
            .solve(&b, 0.0)
            .map_err(|e| Error::Config(format!("Sigma_M solve: {e}")))?
            .column(0)
            .clone_owned();
        let a1 = (nu.beta_hat.beta_rm.transpose() * &nu.sigma_m_hat * &nu.beta_hat.beta_rm)[(0, 0)]
            / (nu.var_t_hat * nu.var_t_hat);
        Ok(LeverageCoeffs {
            a1,
            sigma_m_inv_beta_mt: v,
        })
    }
}

/// First-stage leverage g1(x_{C,t}).
pub fn leverage_g1(
    x_c: &DVector<f64>,
    x_t: f64,
    nu: &NuisanceEstimates,
    coeffs: &LeverageCoeffs,
) -> f64 {
    let eps_t = x_t - nu.beta_hat.beta_tc.dot(x_c);
    coeffs.a1 * eps_t * eps_t
}

/// Second-stage leverage g2(x_{C,t,M}).
pub fn leverage_g2(
    x_c: &DVector<f64>,
    x_t: f64,
    x_m: &DVector<f64>,
    nu: &NuisanceEstimates,
    coeffs: &LeverageCoeffs,
) -> f64 {
    let eps_m = x_m - &nu.beta_hat.beta_mt * x_t - &nu.beta_hat.beta_mc * x_c;
    let s = eps_m.dot(&coeffs.sigma_m_inv_beta_mt);
    nu.var_r_given_t_hat * s * s
}

/// Pool-MC approximation of E[g2 | x_{C,t}]. Because the error terms
/// factorize, eps_M is independent of (x_C, x_t) and the conditional mean
/// is a constant; it is averaged over the shared residual subsample.
pub fn conditional_g2_mean(ctx: &LeverageContext, coeffs: &LeverageCoeffs) -> Result<f64> {
    if ctx.eps_m_pool.is_empty() {
        return Err(Error::EmptyPool("eps_M pool is empty".into()));
    }
    let k = ctx.subsample_size.min(ctx.eps_m_pool.len());
    let mut acc = 0.0;
    for e in &ctx.eps_m_pool[..k] {
        let s = e.dot(&coeffs.sigma_m_inv_beta_mt);
        acc += s * s;
    }
    Ok(ctx.nuisance.var_r_given_t_hat * acc / k as f64)
}

/// Closed form of E[g2 | x_{C,t}] when the residual second moment equals
/// Sigma_M: var_r_given_t * beta_Mt^T Sigma_M^{-1} beta_Mt.
pub fn conditional_g2_mean_closed_form(nu: &NuisanceEstimates, coeffs: &LeverageCoeffs) -> f64 {
    nu.var_r_given_t_hat * nu.beta_hat.beta_mt.dot(&coeffs.sigma_m_inv_beta_mt)
}

/// E[c2 | x_{C,t}] via synthetic mediator draws from the residual
/// subsample; exact short-circuit for constant c2.
pub fn conditional_c2_mean(x_c: &DVector<f64>, x_t: f64, ctx: &LeverageContext) -> Result<f64> {
    if let Some(a) = ctx.costs.c2.is_constant() {
        return Ok(a);
    }
    if ctx.eps_m_pool.is_empty() {
        return Err(Error::EmptyPool("eps_M pool is empty".into()));
    }
    let k = ctx.subsample_size.min(ctx.eps_m_pool.len());
    let base = &ctx.nuisance.beta_hat.beta_mt * x_t + &ctx.nuisance.beta_hat.beta_mc * x_c;
    let mut acc = 0.0;
    for e in &ctx.eps_m_pool[..k] {
        acc += ctx.costs.c2_at(x_c, x_t, &(&base + e));
    }
    Ok(acc / k as f64)
}

/// Whether a closed-form policy acts on both sampling stages or only the
/// first (the single-response reduction). The printed-form variant of the
/// single-stage rule is a constant propensity; see `backdoor_solve`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PolicyMode {
    TwoStage,
    SingleStage {
        printed_form: bool,
        /// Constant propensity of the printed (expectation) form.
        #[serde(skip_serializing_if = "Option::is_none")]
        pi_const: Option<f64>,
    },
}

/// Serializable closed-form optimal policy. All evaluation inputs (the
/// nuisance snapshot, lambda, costs, conditional means and the residual
/// subsample) are stored so the sampling side re-instantiates the exact
/// same functions from the JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedFormPolicy {
    pub lambda: f64,
    pub floor: f64,
    pub mode: PolicyMode,
    pub beta_tc: Vec<f64>,
    pub beta_mt: Vec<f64>,
    /// Row-major d_M x d_C.
    pub beta_mc: Vec<Vec<f64>>,
    /// g1 coefficient: g1 = a1 * eps_t^2.
    pub a1: f64,
    pub sigma_m_inv_beta_mt: Vec<f64>,
    pub var_r_given_t: f64,
    /// E[g2 | x_{C,t}] (constant under factorized errors).
    pub eg2: f64,
    pub costs: CostSpec,
    /// Some(a) when c2 is the constant a; otherwise E[c2 | x] is averaged
    /// over the stored residual subsample.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ec2_const: Option<f64>,
    pub eps_m_subsample: Vec<Vec<f64>>,
    pub pool_digest: String,
}

impl ClosedFormPolicy {
    fn eps_t(&self, x_c: &DVector<f64>, x_t: f64) -> f64 {
        let mut e = x_t;
        for (b, x) in self.beta_tc.iter().zip(x_c.iter()) {
            e -= b * x;
        }
        e
    }

    fn g1(&self, x_c: &DVector<f64>, x_t: f64) -> f64 {
        let e = self.eps_t(x_c, x_t);
        self.a1 * e * e
    }

    fn g2(&self, x_c: &DVector<f64>, x_t: f64, x_m: &DVector<f64>) -> f64 {
        let mut s = 0.0;
        for j in 0..x_m.len() {
            let mut e = x_m[j] - self.beta_mt[j] * x_t;
            for (c, x) in self.beta_mc[j].iter().zip(x_c.iter()) {
                e -= c * x;
            }
            s += e * self.sigma_m_inv_beta_mt[j];
        }
        self.var_r_given_t * s * s
    }

    fn ec2(&self, x_c: &DVector<f64>, x_t: f64) -> f64 {
        if let Some(a) = self.ec2_const {
            return a;
        }
        let mut acc = 0.0;
        for e in &self.eps_m_subsample {
            let m = DVector::from_fn(e.len(), |j, _| {
                let mut v = self.beta_mt[j] * x_t + e[j];
                for (c, x) in self.beta_mc[j].iter().zip(x_c.iter()) {
                    v += c * x;
                }
                v
            });
            acc += self.costs.c2_at(x_c, x_t, &m);
        }
        acc / self.eps_m_subsample.len().max(1) as f64
    }

    /// Raw pi1 before floor clipping; exact zeros are mapped to a tiny
    /// positive value so the clipping layer counts them.
    pub fn pi1(&self, x_c: &DVector<f64>, x_t: f64) -> f64 {
        if let PolicyMode::SingleStage {
            printed_form: true,
            pi_const,
        } = &self.mode
        {
            return pi_const.unwrap_or(1.0).max(f64::MIN_POSITIVE);
        }
        let g1 = self.g1(x_c, x_t);
        let c1 = self.costs.c1_at(x_c, x_t);
        let raw = if matches!(self.mode, PolicyMode::SingleStage { .. }) {
            if g1 >= self.lambda * c1 {
                1.0
            } else {
                (g1 / (self.lambda * c1)).sqrt().min(1.0)
            }
        } else if g1 < self.lambda * c1 {
            let ec2 = self.ec2(x_c, x_t);
            let interior = (g1 / (self.lambda * c1)).sqrt();
            let pooled = ((g1 + self.eg2) / (self.lambda * (c1 + ec2))).sqrt();
            interior.max(pooled).min(1.0)
        } else {
            1.0
        };
        raw.max(f64::MIN_POSITIVE)
    }

    /// Raw pi2 before floor clipping. In single-stage mode the second
    /// stage is never separated from the first, so pi2 = 1.
    pub fn pi2(&self, x_c: &DVector<f64>, x_t: f64, x_m: &DVector<f64>) -> f64 {
        if matches!(self.mode, PolicyMode::SingleStage { .. }) {
            return 1.0;
        }
        let g1 = self.g1(x_c, x_t);
        let g2 = self.g2(x_c, x_t, x_m);
        let c1 = self.costs.c1_at(x_c, x_t);
        let c2 = self.costs.c2_at(x_c, x_t, x_m);
        let raw = if g1 < self.lambda * c1 {
            if g1 == 0.0 {
                // Limit of sqrt(g2 c1 / (g1 c2)) as g1 -> 0+.
                1.0
            } else {
                (g2 * c1 / (g1 * c2)).sqrt().min(1.0)
            }
        } else {
            (g2 / (self.lambda * c2)).sqrt().min(1.0)
        };
        raw.max(f64::MIN_POSITIVE)
    }
}

/// Closed-form policy for a given multiplier lambda.
pub fn optimal_policy(lambda: f64, ctx: &LeverageContext) -> Result<PropensityPolicy> {
    if !(lambda > 0.0) {
        return Err(Error::Config(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    let coeffs = LeverageCoeffs::from_nuisance(&ctx.nuisance)?;
    let eg2 = conditional_g2_mean(ctx, &coeffs)?;
    Ok(PropensityPolicy::ClosedForm(build_policy(
        lambda,
        ctx,
        &coeffs,
        eg2,
        PolicyMode::TwoStage,
    )))
}

fn build_policy(
    lambda: f64,
    ctx: &LeverageContext,
    coeffs: &LeverageCoeffs,
    eg2: f64,
    mode: PolicyMode,
) -> ClosedFormPolicy {
    let nu = &ctx.nuisance;
    let k = ctx.subsample_size.min(ctx.eps_m_pool.len());
    let ec2_const = ctx.costs.c2.is_constant();
    ClosedFormPolicy {
        lambda,
        floor: ctx.floor,
        mode,
        beta_tc: nu.beta_hat.beta_tc.as_slice().to_vec(),
        beta_mt: nu.beta_hat.beta_mt.as_slice().to_vec(),
        beta_mc: (0..nu.beta_hat.beta_mc.nrows())
            .map(|i| nu.beta_hat.beta_mc.row(i).iter().copied().collect())
            .collect(),
        a1: coeffs.a1,
        sigma_m_inv_beta_mt: coeffs.sigma_m_inv_beta_mt.as_slice().to_vec(),
        var_r_given_t: nu.var_r_given_t_hat,
        eg2,
        costs: ctx.costs.clone(),
        ec2_const,
        eps_m_subsample: if ec2_const.is_some() {
            Vec::new()
        } else {
            ctx.eps_m_pool[..k]
                .iter()
                .map(|e| e.as_slice().to_vec())
                .collect()
        },
        pool_digest: ctx.pool_digest(),
    }
}

/// Weighted pool mean with its standard error.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PoolMean {
    pub mean: f64,
    pub std_error: f64,
}

fn pool_mean<F: FnMut(&PoolPoint) -> Result<f64>>(
    pool: &[PoolPoint],
    mut f: F,
) -> Result<PoolMean> {
    if pool.is_empty() {
        return Err(Error::EmptyPool("mc_pool is empty".into()));
    }
    let mut sum_w = 0.0;
    let mut sum = 0.0;
    let mut vals = Vec::with_capacity(pool.len());
    for p in pool {
        let v = f(p)?;
        sum_w += p.weight;
        sum += p.weight * v;
        vals.push((p.weight, v));
    }
    let mean = sum / sum_w;
    let mut var = 0.0;
    for (w, v) in &vals {
        var += w * w * (v - mean) * (v - mean);
    }
    Ok(PoolMean {
        mean,
        std_error: var.sqrt() / sum_w,
    })
}

/// The coarsened-data variance functional E[g1/pi1 + g2/(pi1 pi2)] over the pool.
pub fn variance_at(policy: &PropensityPolicy, ctx: &LeverageContext) -> Result<PoolMean> {
    let coeffs = LeverageCoeffs::from_nuisance(&ctx.nuisance)?;
    pool_mean(&ctx.mc_pool, |p| {
        let g1 = leverage_g1(&p.x_c, p.x_t, &ctx.nuisance, &coeffs);
        let g2 = leverage_g2(&p.x_c, p.x_t, &p.x_m, &ctx.nuisance, &coeffs);
        let p1 = policy.pi1_clamped(&p.x_c, p.x_t)?;
        let p2 = policy.pi2_clamped(&p.x_c, p.x_t, &p.x_m)?;
        Ok(g1 / p1 + g2 / (p1 * p2))
    })
}

/// Expected per-sample cost of a policy over the pool. Single-stage
/// solves exclude the second-stage term.
pub fn cost_at(
    policy: &PropensityPolicy,
    ctx: &LeverageContext,
    include_second_stage: bool,
) -> Result<PoolMean> {
    pool_mean(&ctx.mc_pool, |p| {
        let p1 = policy.pi1_clamped(&p.x_c, p.x_t)?;
        let mut c = ctx.costs.c0 + p1 * ctx.costs.c1_at(&p.x_c, p.x_t);
        if include_second_stage {
            let p2 = policy.pi2_clamped(&p.x_c, p.x_t, &p.x_m)?;
            c += p1 * p2 * ctx.costs.c2_at(&p.x_c, p.x_t, &p.x_m);
        }
        Ok(c)
    })
}

/// Fractions of the pool at the upper propensity boundary.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BoundaryFractions {
    pub pi1_at_one: f64,
    pub pi2_at_one: f64,
}

/// Result of a budget-constrained design solve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesignSolution {
    pub lambda_star: f64,
    pub var_inf: f64,
    pub var_std_error: f64,
    pub expected_cost: f64,
    pub boundary_fractions: BoundaryFractions,
    /// Cost-normalized variance ratio against full sampling at equal
    /// total budget: var_opt * (b0 / c_full) / var_full.
    pub relative_efficiency: f64,
    /// Sample-size inflation at equal total cost, percent: 100 * c_full / b0.
    pub oversampling_percentage: f64,
    /// True when the requested budget exceeds the full-sampling cost and
    /// equality is unattainable.
    pub budget_slack: bool,
    pub policy: PropensityPolicy,
}

fn boundary_fractions(
    policy: &PropensityPolicy,
    ctx: &LeverageContext,
) -> Result<BoundaryFractions> {
    let n = ctx.mc_pool.len() as f64;
    let mut at1 = 0.0;
    let mut at2 = 0.0;
    for p in &ctx.mc_pool {
        if policy.pi1_clamped(&p.x_c, p.x_t)? >= 1.0 - 1e-12 {
            at1 += 1.0;
        }
        if policy.pi2_clamped(&p.x_c, p.x_t, &p.x_m)? >= 1.0 - 1e-12 {
            at2 += 1.0;
        }
    }
    Ok(BoundaryFractions {
        pi1_at_one: at1 / n,
        pi2_at_one: at2 / n,
    })
}

struct Solver<'a> {
    ctx: &'a LeverageContext,
    coeffs: LeverageCoeffs,
    eg2: f64,
    mode: PolicyMode,
}

impl<'a> Solver<'a> {
    fn policy(&self, lambda: f64) -> PropensityPolicy {
        let mut mode = self.mode.clone();
        if let PolicyMode::SingleStage {
            printed_form: true,
            pi_const,
        } = &mut mode
        {
            // Printed expectation form: a constant propensity.
            let mean = pool_mean(&self.ctx.mc_pool, |p| {
                let g1 = leverage_g1(&p.x_c, p.x_t, &self.ctx.nuisance, &self.coeffs);
                Ok(g1 / (lambda * self.ctx.costs.c1_at(&p.x_c, p.x_t)))
            })
            .map(|m| m.mean)
            .unwrap_or(1.0);
            *pi_const = Some(mean.min(1.0));
        }
        PropensityPolicy::ClosedForm(build_policy(lambda, self.ctx, &self.coeffs, self.eg2, mode))
    }

    fn cost(&self, lambda: f64) -> Result<f64> {
        let two_stage = matches!(self.mode, PolicyMode::TwoStage);
        Ok(cost_at(&self.policy(lambda), self.ctx, two_stage)?.mean)
    }

    fn interior_lambda(&self, b0: f64) -> Result<f64> {
        let two_stage = matches!(self.mode, PolicyMode::TwoStage);
        let m = pool_mean(&self.ctx.mc_pool, |p| {
            let g1 = leverage_g1(&p.x_c, p.x_t, &self.ctx.nuisance, &self.coeffs);
            let c1 = self.ctx.costs.c1_at(&p.x_c, p.x_t);
            let mut v = (g1 * c1).sqrt();
            if two_stage {
                let g2 = leverage_g2(&p.x_c, p.x_t, &p.x_m, &self.ctx.nuisance, &self.coeffs);
                let c2 = self.ctx.costs.c2_at(&p.x_c, p.x_t, &p.x_m);
                v += (g2 * c2).sqrt();
            }
            Ok(v)
        })?
        .mean;
        let gap = b0 - self.ctx.costs.c0;
        let lam = (m / gap) * (m / gap);
        Ok(if lam.is_finite() && lam > 0.0 {
            lam
        } else {
            1.0
        })
    }

    /// Bisection on lambda; expected cost is continuous and
    /// non-increasing in lambda, so the bracket always contains a root.
    fn solve(&self, b0: f64, tol: f64) -> Result<(f64, PropensityPolicy, f64, bool)> {
        let c0 = self.ctx.costs.c0;
        if !(b0 > c0) {
            return Err(Error::InfeasibleBudget(format!(
                "budget b0 = {b0} must exceed the base cost c0 = {c0}"
            )));
        }
        let two_stage = matches!(self.mode, PolicyMode::TwoStage);
        let c_max = cost_at(&PropensityPolicy::full_sampling(), self.ctx, two_stage)?.mean;
        if b0 >= c_max * (1.0 - tol) {
            // Full sampling is the only policy approaching the budget.
            let lambda = 1e-18;
            let policy = self.policy(lambda);
            let cost = cost_at(&policy, self.ctx, two_stage)?.mean;
            let slack = b0 > c_max * (1.0 + tol);
            return Ok((lambda, policy, cost, slack));
        }
        let mut lo = self.interior_lambda(b0)?;
        let mut hi = lo;
        // cost(lambda) decreases in lambda: expand lo downward until the
        // cost reaches b0 from above, hi upward until it falls below.
        let mut guard = 0;
        while self.cost(lo)? < b0 {
            lo /= 4.0;
            guard += 1;
            if guard > 200 {
                return Err(Error::InfeasibleBudget(format!(
                    "failed to bracket the budget b0 = {b0} from below"
                )));
            }
        }
        guard = 0;
        while self.cost(hi)? > b0 {
            hi *= 4.0;
            guard += 1;
            if guard > 200 {
                return Err(Error::InfeasibleBudget(format!(
                    "failed to bracket the budget b0 = {b0} from above"
                )));
            }
        }
        let mut mid = (lo * hi).sqrt();
        for _ in 0..500 {
            mid = (lo * hi).sqrt();
            let c = self.cost(mid)?;
            if (c - b0).abs() <= tol * b0 || (hi - lo) <= 1e-15 * lo {
                break;
            }
            if c > b0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let policy = self.policy(mid);
        let cost = cost_at(&policy, self.ctx, two_stage)?.mean;
        Ok((mid, policy, cost, false))
    }

    fn assemble(&self, b0: f64, tol: f64) -> Result<DesignSolution> {
        let (lambda_star, policy, expected_cost, budget_slack) = self.solve(b0, tol)?;
        let two_stage = matches!(self.mode, PolicyMode::TwoStage);
        let var = variance_at(&policy, self.ctx)?;
        let full = PropensityPolicy::full_sampling();
        let var_full = variance_at(&full, self.ctx)?.mean;
        let c_full = cost_at(&full, self.ctx, two_stage)?.mean;
        let b0_ratio = (b0 / c_full).min(1.0);
        Ok(DesignSolution {
            lambda_star,
            var_inf: var.mean,
            var_std_error: var.std_error,
            expected_cost,
            boundary_fractions: boundary_fractions(&policy, self.ctx)?,
            relative_efficiency: var.mean * b0_ratio / var_full,
            oversampling_percentage: 100.0 / b0_ratio,
            budget_slack,
            policy,
        })
    }
}

/// Solve the two-stage budget-constrained design problem.
pub fn solve_budget(ctx: &LeverageContext, b0: f64, tol: f64) -> Result<DesignSolution> {
    let coeffs = LeverageCoeffs::from_nuisance(&ctx.nuisance)?;
    let eg2 = conditional_g2_mean(ctx, &coeffs)?;
    Solver {
        ctx,
        coeffs,
        eg2,
        mode: PolicyMode::TwoStage,
    }
    .assemble(b0, tol)
}

/// Interior-regime initialization for the multiplier:
/// E[sqrt(g1 c1) + sqrt(g2 c2)]^2 / (b0 - c0)^2.
pub fn interior_lambda(ctx: &LeverageContext, b0: f64) -> Result<f64> {
    let coeffs = LeverageCoeffs::from_nuisance(&ctx.nuisance)?;
    let eg2 = conditional_g2_mean(ctx, &coeffs)?;
    Solver {
        ctx,
        coeffs,
        eg2,
        mode: PolicyMode::TwoStage,
    }
    .interior_lambda(b0)
}

/// Single-stage design: only the first sampling decision is optimized
/// and only c0 and c1 are paid. The default rule is the square-root form
/// pi = min(1, sqrt(g1 / (lambda c1))); `printed_form` selects the
/// constant expectation variant instead (kept for compatibility, the two
/// differ and the square-root form is the one consistent with the
/// two-stage casework).
pub fn backdoor_solve(
    ctx: &LeverageContext,
    b0: f64,
    tol: f64,
    printed_form: bool,
) -> Result<DesignSolution> {
    let nu = &ctx.nuisance;
    // Aggregate mediator variance; any positive scale is absorbed by the
    // multiplier, so the policy is invariant to this choice.
    let s_m = nu.sigma_m_hat.trace();
    let coeffs = LeverageCoeffs::from_nuisance(nu)?;
    let coeffs = LeverageCoeffs {
        a1: s_m / (nu.var_t_hat * nu.var_t_hat),
        sigma_m_inv_beta_mt: coeffs.sigma_m_inv_beta_mt,
    };
    Solver {
        ctx,
        coeffs,
        eg2: 0.0,
        mode: PolicyMode::SingleStage {
            printed_form,
            pi_const: None,
        },
    }
    .assemble(b0, tol)
}

/// Solve the design at a fraction of the full-sampling cost and report
/// the cost-normalized relative efficiency (equal-total-budget
/// comparison against always measuring everything).
pub fn relative_efficiency_report(
    ctx: &LeverageContext,
    b0_ratio: f64,
    tol: f64,
) -> Result<DesignSolution> {
    if !(b0_ratio > 0.0 && b0_ratio <= 1.0) {
        return Err(Error::InfeasibleBudget(format!(
            "budget ratio must lie in (0, 1], got {b0_ratio}"
        )));
    }
    let c_full = cost_at(&PropensityPolicy::full_sampling(), ctx, true)?.mean;
    solve_budget(ctx, b0_ratio * c_full, tol)
}
