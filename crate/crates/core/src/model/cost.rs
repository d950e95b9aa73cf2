//! Per-record measurement costs: a base cost c0 paid for every record,
//! a first-stage cost c1(x_C, x_t) paid when the mediators are measured,
//! and a second-stage cost c2(x_C, x_t, x_M) paid when the response is
//! measured.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{BlockMatrix, CoarsenedRecord, Dims, ErrorModel, PropensityPolicy, Stage};
use crate::{Error, Result};

/// Built-in cost function forms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CostFn {
    /// Constant cost a.
    Constant { a: f64 },
    /// a * ||x||_2 over the components observed so far.
    ScaledNorm { a: f64 },
}

impl CostFn {
    pub fn validate(&self, name: &str) -> Result<()> {
        let a = match self {
            CostFn::Constant { a } | CostFn::ScaledNorm { a } => *a,
        };
        if a <= 0.0 || !a.is_finite() {
            return Err(Error::Config(format!(
                "{name}: cost coefficient must be strictly positive, got {a}"
            )));
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            CostFn::Constant { a } => *a,
            CostFn::ScaledNorm { a } => {
                let ss: f64 = x.iter().map(|v| v * v).sum();
                a * ss.sqrt()
            }
        }
    }

    pub fn is_constant(&self) -> Option<f64> {
        match self {
            CostFn::Constant { a } => Some(*a),
            CostFn::ScaledNorm { .. } => None,
        }
    }
}

/// Staged measurement costs: c0 for X_{C,t}, c1(x_{C,t}) for X_M,
/// c2(x_{C,t,M}) for X_r.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSpec {
    pub c0: f64,
    pub c1: CostFn,
    pub c2: CostFn,
}

impl CostSpec {
    pub fn validate(&self) -> Result<()> {
        if self.c0 <= 0.0 || !self.c0.is_finite() {
            return Err(Error::Config(format!(
                "c0 must be strictly positive, got {}",
                self.c0
            )));
        }
        self.c1.validate("c1")?;
        self.c2.validate("c2")
    }

    pub fn c1_at(&self, x_c: &DVector<f64>, x_t: f64) -> f64 {
        let mut v: Vec<f64> = x_c.iter().copied().collect();
        v.push(x_t);
        self.c1.eval(&v)
    }

    pub fn c2_at(&self, x_c: &DVector<f64>, x_t: f64, x_m: &DVector<f64>) -> f64 {
        let mut v: Vec<f64> = x_c.iter().copied().collect();
        v.push(x_t);
        v.extend(x_m.iter().copied());
        self.c2.eval(&v)
    }
}

/// Cost actually incurred for one coarsened record.
pub fn realized_cost(record: &CoarsenedRecord, costs: &CostSpec) -> f64 {
    let mut total = costs.c0;
    if record.stage >= Stage::Two {
        total += costs.c1_at(&record.x_c, record.x_t);
    }
    if record.stage == Stage::Full {
        let x_m = record.x_m.as_ref().expect("stage FULL has x_M");
        total += costs.c2_at(&record.x_c, record.x_t, x_m);
    }
    total
}

/// Monte Carlo estimate of the expected per-sample cost
/// E[c0 + (pi1 c1)(X_{C,t}) + pi1(X_{C,t}) (pi2 c2)(X_{C,t,M})].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpectedCost {
    pub mean: f64,
    pub std_error: f64,
    pub mc_n: usize,
}

pub fn expected_cost(
    blocks: &BlockMatrix,
    dims: &Dims,
    errors: &ErrorModel,
    policy: &PropensityPolicy,
    costs: &CostSpec,
    mc_n: usize,
    seed: u64,
) -> Result<ExpectedCost> {
    if mc_n == 0 {
        return Err(Error::Config("expected_cost requires mc_n >= 1".into()));
    }
    let full = super::sample_full(blocks, dims, errors, mc_n, seed)?;
    let mut values = Vec::with_capacity(mc_n);
    for rec in &full.records {
        let p1 = policy.pi1_clamped(&rec.x_c, rec.x_t)?;
        let p2 = policy.pi2_clamped(&rec.x_c, rec.x_t, &rec.x_m)?;
        values.push(
            costs.c0
                + p1 * costs.c1_at(&rec.x_c, rec.x_t)
                + p1 * p2 * costs.c2_at(&rec.x_c, rec.x_t, &rec.x_m),
        );
    }
    let n = mc_n as f64;
    let mean = values.iter().sum::<f64>() / n;
    // Two-pass variance: immune to cancellation when all values coincide.
    let var = values.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / n;
    let std_error = if mc_n > 1 {
        (var / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(ExpectedCost {
        mean,
        std_error,
        mc_n,
    })
}
