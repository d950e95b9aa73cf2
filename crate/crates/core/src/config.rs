//! JSON model configuration: dimensions, coefficient blocks, noise
//! families, costs, and an optional quadratic mediator equation.
//!
//! Matrices are written as row-major nested arrays so configs stay
//! hand-editable. For multivariate t components the `scale` matrix is by
//! default the elliptical scale matrix (covariance = scale * df/(df-2));
//! set `"scale_is_covariance": true` to supply the covariance directly.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::model::{
    BlockMatrix, CostSpec, Dims, ErrorModel, NoiseComponent, NoiseFamily, QuadraticMediatorSpec,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DimsConfig {
    #[serde(rename = "d_C")]
    pub d_c: usize,
    #[serde(rename = "d_M")]
    pub d_m: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BetaConfig {
    #[serde(rename = "tC")]
    pub t_c: Vec<f64>,
    #[serde(rename = "MC")]
    pub m_c: Vec<Vec<f64>>,
    #[serde(rename = "Mt")]
    pub m_t: Vec<f64>,
    #[serde(rename = "rC")]
    pub r_c: Vec<f64>,
    #[serde(rename = "rM")]
    pub r_m: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum NoiseConfig {
    Gaussian {
        cov: Vec<Vec<f64>>,
    },
    Mvt {
        scale: Vec<Vec<f64>>,
        df: f64,
        #[serde(default)]
        scale_is_covariance: bool,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorsConfig {
    pub c: NoiseConfig,
    pub tr: NoiseConfig,
    pub m: NoiseConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuadraticConfig {
    pub linear: Vec<f64>,
    pub quadratic: Vec<f64>,
}

/// Top-level model configuration document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dims: DimsConfig,
    pub beta: BetaConfig,
    pub errors: ErrorsConfig,
    pub costs: CostSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quadratic_mediator: Option<QuadraticConfig>,
}

/// Fully validated in-memory model built from a [`ModelConfig`].
#[derive(Debug, Clone)]
pub struct BuiltModel {
    pub dims: Dims,
    pub blocks: BlockMatrix,
    pub errors: ErrorModel,
    pub costs: CostSpec,
    pub quadratic: Option<QuadraticMediatorSpec>,
}

fn to_matrix(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(Error::Config(format!("{name}: matrix must be nonempty")));
    }
    let ncols = rows[0].len();
    if ncols == 0 {
        return Err(Error::Config(format!(
            "{name}: matrix rows must be nonempty"
        )));
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != ncols {
            return Err(Error::Config(format!(
                "{name}: row {i} has {} entries, expected {ncols}",
                row.len()
            )));
        }
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

impl NoiseConfig {
    fn build(&self, name: &str) -> Result<NoiseComponent> {
        let family = match self {
            NoiseConfig::Gaussian { cov } => NoiseFamily::Gaussian {
                cov: to_matrix(cov, name)?,
            },
            NoiseConfig::Mvt {
                scale,
                df,
                scale_is_covariance,
            } => NoiseFamily::Mvt {
                scale: to_matrix(scale, name)?,
                df: *df,
                scale_is_covariance: *scale_is_covariance,
            },
        };
        NoiseComponent::new(family, name)
    }
}

impl ModelConfig {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        Ok(serde_json::from_slice(bytes)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read(path)?)
    }

    /// Validate every field and build the in-memory model. Errors name
    /// the offending field.
    pub fn build(&self) -> Result<BuiltModel> {
        let dims = Dims::new(self.dims.d_c, self.dims.d_m)?;
        let blocks = BlockMatrix {
            beta_tc: DVector::from_vec(self.beta.t_c.clone()),
            beta_mc: to_matrix(&self.beta.m_c, "beta.MC")?,
            beta_mt: DVector::from_vec(self.beta.m_t.clone()),
            beta_rc: DVector::from_vec(self.beta.r_c.clone()),
            beta_rm: DVector::from_vec(self.beta.r_m.clone()),
        };
        blocks.validate(&dims)?;
        let errors = ErrorModel::new(
            self.errors.c.build("errors.c")?,
            self.errors.tr.build("errors.tr")?,
            self.errors.m.build("errors.m")?,
            &dims,
        )?;
        self.costs.validate()?;
        let quadratic = match &self.quadratic_mediator {
            Some(q) => {
                let spec = QuadraticMediatorSpec {
                    linear: DVector::from_vec(q.linear.clone()),
                    quadratic: DVector::from_vec(q.quadratic.clone()),
                };
                spec.validate(&dims)?;
                Some(spec)
            }
            None => None,
        };
        Ok(BuiltModel {
            dims,
            blocks,
            errors,
            costs: self.costs.clone(),
            quadratic,
        })
    }

    /// Built-in reference simulation model: two confounders with a
    /// heavy-tailed t5 error, three mediators with correlated Gaussian
    /// errors, and confounded treatment/response errors (t5, negative
    /// cross term). Costs are c1 = 0.1 ||x_{C,t}|| and c2 = 0.5, with a
    /// base cost c0 = 0.1 small against the staged costs so partial
    /// measurement pays off.
    pub fn baseline() -> Self {
        use crate::model::CostFn;
        ModelConfig {
            dims: DimsConfig { d_c: 2, d_m: 3 },
            beta: BetaConfig {
                t_c: vec![0.5, -0.2],
                m_c: vec![vec![0.3, 0.1], vec![0.5, 0.2], vec![-0.1, 0.3]],
                m_t: vec![0.7, 0.2, 0.1],
                r_c: vec![0.2, -0.1],
                r_m: vec![0.5, 0.4, -0.3],
            },
            errors: ErrorsConfig {
                c: NoiseConfig::Mvt {
                    scale: vec![vec![1.0, 0.7], vec![0.7, 1.5]],
                    df: 5.0,
                    scale_is_covariance: false,
                },
                tr: NoiseConfig::Mvt {
                    scale: vec![vec![1.0, -0.5], vec![-0.5, 1.5]],
                    df: 5.0,
                    scale_is_covariance: false,
                },
                m: NoiseConfig::Gaussian {
                    cov: vec![
                        vec![1.0, 0.3, 0.0],
                        vec![0.3, 1.5, -0.5],
                        vec![0.0, -0.5, 1.0],
                    ],
                },
            },
            costs: CostSpec {
                c0: 0.1,
                c1: CostFn::ScaledNorm { a: 0.1 },
                c2: CostFn::Constant { a: 0.5 },
            },
            quadratic_mediator: None,
        }
    }
}
