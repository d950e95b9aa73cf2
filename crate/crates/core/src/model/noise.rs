use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Dims;
use crate::{Error, Result};

/// Distribution family of one independent noise component.
///
/// For the multivariate t family, `scale` is by default the scale matrix
/// of the elliptical distribution; the covariance then equals
/// scale * df / (df - 2). Setting `scale_is_covariance` treats the matrix
/// as the target covariance instead and rescales before sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum NoiseFamily {
    Gaussian {
        cov: DMatrix<f64>,
    },
    Mvt {
        scale: DMatrix<f64>,
        df: f64,
        #[serde(default)]
        scale_is_covariance: bool,
    },
}

/// One factor of the error distribution together with its cached
/// Cholesky factor and second moment.
#[derive(Debug, Clone)]
pub struct NoiseComponent {
    family: NoiseFamily,
    /// Lower Cholesky factor of the sampling scale matrix.
    chol: DMatrix<f64>,
    /// Covariance matrix implied by the family.
    cov: DMatrix<f64>,
    /// Degrees of freedom for t sampling, None for Gaussian.
    df: Option<f64>,
}

impl NoiseComponent {
    pub fn new(family: NoiseFamily, name: &str) -> Result<Self> {
        let (sampling_scale, cov, df) = match &family {
            NoiseFamily::Gaussian { cov } => (cov.clone(), cov.clone(), None),
            NoiseFamily::Mvt {
                scale,
                df,
                scale_is_covariance,
            } => {
                if *df <= 2.0 {
                    return Err(Error::Config(format!(
                        "{name}: multivariate t requires df > 2 for finite variance, got {df}"
                    )));
                }
                let factor = df / (df - 2.0);
                if *scale_is_covariance {
                    // Sampling scale chosen so the covariance equals `scale`.
                    (scale / factor, scale.clone(), Some(*df))
                } else {
                    (scale.clone(), scale * factor, Some(*df))
                }
            }
        };
        check_symmetric(&sampling_scale, name)?;
        let chol = nalgebra::Cholesky::new(sampling_scale)
            .ok_or_else(|| Error::Config(format!("{name}: matrix is not positive definite")))?
            .l();
        Ok(NoiseComponent {
            family,
            chol,
            cov,
            df,
        })
    }

    pub fn dim(&self) -> usize {
        self.chol.nrows()
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn family(&self) -> &NoiseFamily {
        &self.family
    }

    /// Draw one vector. Gaussian: L z. Multivariate t: L z * sqrt(df / w)
    /// with w ~ chi-square(df).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let d = self.dim();
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut x = &self.chol * z;
        if let Some(df) = self.df {
            let w: f64 = ChiSquared::new(df).expect("df > 2 checked").sample(rng);
            x *= (df / w).sqrt();
        }
        x
    }
}

fn check_symmetric(m: &DMatrix<f64>, name: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::Config(format!("{name}: matrix must be square")));
    }
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * (1.0 + m[(i, j)].abs()) {
                return Err(Error::Config(format!("{name}: matrix must be symmetric")));
            }
        }
    }
    Ok(())
}

/// Factorized noise specification P_eps = P_C (x) P_(t,r) (x) P_M.
///
/// The three components are sampled independently; the (t, r) pair is a
/// bivariate component so treatment and response errors may be dependent
/// (that dependence is the unobserved confounding).
#[derive(Debug, Clone)]
pub struct ErrorModel {
    c: NoiseComponent,
    tr: NoiseComponent,
    m: NoiseComponent,
}

impl ErrorModel {
    pub fn new(
        c: NoiseComponent,
        tr: NoiseComponent,
        m: NoiseComponent,
        dims: &Dims,
    ) -> Result<Self> {
        if c.dim() != dims.d_c() {
            return Err(Error::Shape(format!(
                "confounder noise has dim {}, expected d_C={}",
                c.dim(),
                dims.d_c()
            )));
        }
        if tr.dim() != 2 {
            return Err(Error::Shape(format!(
                "treatment/response noise must be bivariate, got dim {}",
                tr.dim()
            )));
        }
        if m.dim() != dims.d_m() {
            return Err(Error::Shape(format!(
                "mediator noise has dim {}, expected d_M={}",
                m.dim(),
                dims.d_m()
            )));
        }
        let model = ErrorModel { c, tr, m };
        if model.var_t() <= 0.0 || model.var_r_given_t() <= 0.0 {
            return Err(Error::Config(
                "treatment/response covariance must have var_t > 0 and var(eps_r | eps_t) > 0"
                    .into(),
            ));
        }
        Ok(model)
    }

    pub fn sigma_c(&self) -> &DMatrix<f64> {
        self.c.cov()
    }

    pub fn sigma_m(&self) -> &DMatrix<f64> {
        self.m.cov()
    }

    pub fn var_t(&self) -> f64 {
        self.tr.cov()[(0, 0)]
    }

    pub fn var_r(&self) -> f64 {
        self.tr.cov()[(1, 1)]
    }

    pub fn cov_tr(&self) -> f64 {
        self.tr.cov()[(0, 1)]
    }

    /// Best linear predictor coefficient of eps_r on eps_t.
    pub fn gamma0(&self) -> f64 {
        self.cov_tr() / self.var_t()
    }

    /// Residual variance of eps_r after the linear eps_t term.
    pub fn var_r_given_t(&self) -> f64 {
        self.var_r() - self.cov_tr() * self.cov_tr() / self.var_t()
    }

    pub fn components(&self) -> (&NoiseComponent, &NoiseComponent, &NoiseComponent) {
        (&self.c, &self.tr, &self.m)
    }

    /// Draw one error vector split into (eps_C, eps_t, eps_r, eps_M).
    /// The component draw order C, (t, r), M is fixed so streams are
    /// reproducible across call sites.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (DVector<f64>, f64, f64, DVector<f64>) {
        let eps_c = self.c.sample(rng);
        let eps_tr = self.tr.sample(rng);
        let eps_m = self.m.sample(rng);
        (eps_c, eps_tr[0], eps_tr[1], eps_m)
    }

    /// Full d x d covariance of the stacked error vector (C, t, M, r).
    pub fn var_eps_full(&self, dims: &Dims) -> DMatrix<f64> {
        let d = dims.total();
        let (t, m0, r) = (dims.t_index(), dims.m_start(), dims.r_index());
        let mut v = DMatrix::zeros(d, d);
        v.view_mut((0, 0), (dims.d_c(), dims.d_c()))
            .copy_from(self.sigma_c());
        v[(t, t)] = self.var_t();
        v[(t, r)] = self.cov_tr();
        v[(r, t)] = self.cov_tr();
        v[(r, r)] = self.var_r();
        v.view_mut((m0, m0), (dims.d_m(), dims.d_m()))
            .copy_from(self.sigma_m());
        v
    }
}
