use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Dimensions of the front-door model. The full variable vector is
/// ordered (X_C, X_t, X_M, X_r) with total length d_C + 1 + d_M + 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    d_c: usize,
    d_m: usize,
}

impl Dims {
    pub fn new(d_c: usize, d_m: usize) -> Result<Self> {
        if d_c == 0 || d_m == 0 {
            return Err(Error::Config(format!(
                "dims must satisfy d_C >= 1 and d_M >= 1, got d_C={d_c}, d_M={d_m}"
            )));
        }
        Ok(Dims { d_c, d_m })
    }

    pub fn d_c(&self) -> usize {
        self.d_c
    }

    pub fn d_m(&self) -> usize {
        self.d_m
    }

    pub fn total(&self) -> usize {
        self.d_c + 1 + self.d_m + 1
    }

    /// Index of the treatment coordinate in the assembled vector.
    pub fn t_index(&self) -> usize {
        self.d_c
    }

    /// Index of the first mediator coordinate.
    pub fn m_start(&self) -> usize {
        self.d_c + 1
    }

    /// Index of the response coordinate.
    pub fn r_index(&self) -> usize {
        self.d_c + 1 + self.d_m
    }
}

/// Structural coefficient blocks of the front-door model.
///
/// The assembled d x d matrix is strictly lower block-triangular in the
/// causal order C -> t -> M -> r, with zero treatment->response entry
/// (the t -> r path is confounded, not direct) and zero C-row/r-column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockMatrix {
    /// Treatment on confounders, length d_C (row vector).
    pub beta_tc: DVector<f64>,
    /// Mediators on confounders, d_M x d_C.
    pub beta_mc: DMatrix<f64>,
    /// Mediators on treatment, length d_M.
    pub beta_mt: DVector<f64>,
    /// Response on confounders, length d_C (row vector).
    pub beta_rc: DVector<f64>,
    /// Response on mediators, length d_M (row vector).
    pub beta_rm: DVector<f64>,
}

impl BlockMatrix {
    /// Check block dimensions against `dims`.
    pub fn validate(&self, dims: &Dims) -> Result<()> {
        let (d_c, d_m) = (dims.d_c(), dims.d_m());
        let checks = [
            ("beta_tC", self.beta_tc.len(), d_c),
            ("beta_Mt", self.beta_mt.len(), d_m),
            ("beta_rC", self.beta_rc.len(), d_c),
            ("beta_rM", self.beta_rm.len(), d_m),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::Shape(format!(
                    "{name} has length {got}, expected {want}"
                )));
            }
        }
        if self.beta_mc.nrows() != d_m || self.beta_mc.ncols() != d_c {
            return Err(Error::Shape(format!(
                "beta_MC is {}x{}, expected {}x{}",
                self.beta_mc.nrows(),
                self.beta_mc.ncols(),
                d_m,
                d_c
            )));
        }
        Ok(())
    }

    /// Zero blocks for the given dimensions.
    pub fn zeros(dims: &Dims) -> Self {
        BlockMatrix {
            beta_tc: DVector::zeros(dims.d_c()),
            beta_mc: DMatrix::zeros(dims.d_m(), dims.d_c()),
            beta_mt: DVector::zeros(dims.d_m()),
            beta_rc: DVector::zeros(dims.d_c()),
            beta_rm: DVector::zeros(dims.d_m()),
        }
    }

    /// Assemble the d x d coefficient matrix with the front-door zero
    /// pattern: each block in its position, zeros everywhere else.
    pub fn assemble(&self, dims: &Dims) -> Result<DMatrix<f64>> {
        self.validate(dims)?;
        let d = dims.total();
        let (t, m0, r) = (dims.t_index(), dims.m_start(), dims.r_index());
        let mut beta = DMatrix::zeros(d, d);
        for j in 0..dims.d_c() {
            beta[(t, j)] = self.beta_tc[j];
            beta[(r, j)] = self.beta_rc[j];
        }
        for i in 0..dims.d_m() {
            for j in 0..dims.d_c() {
                beta[(m0 + i, j)] = self.beta_mc[(i, j)];
            }
            beta[(m0 + i, t)] = self.beta_mt[i];
            beta[(r, m0 + i)] = self.beta_rm[i];
        }
        Ok(beta)
    }

    /// Causal effect of treatment on response: the sum over mediating
    /// paths, xi = beta_rM . beta_Mt.
    pub fn causal_effect(&self) -> f64 {
        // Left-to-right accumulation; nalgebra's dot would do the same but
        // the explicit loop pins the summation order.
        let mut xi = 0.0;
        for i in 0..self.beta_rm.len().min(self.beta_mt.len()) {
            xi += self.beta_rm[i] * self.beta_mt[i];
        }
        xi
    }
}

/// Quadratic-in-treatment mediator equation:
/// X_M = linear * X_t + quadratic * X_t^2 + beta_MC X_C + eps_M.
///
/// With `quadratic = 0` and `linear = beta_Mt` this recovers the linear
/// model exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticMediatorSpec {
    pub linear: DVector<f64>,
    pub quadratic: DVector<f64>,
}

impl QuadraticMediatorSpec {
    pub fn validate(&self, dims: &Dims) -> Result<()> {
        if self.linear.len() != dims.d_m() || self.quadratic.len() != dims.d_m() {
            return Err(Error::Shape(format!(
                "quadratic mediator coefficients must have length d_M={}",
                dims.d_m()
            )));
        }
        Ok(())
    }

    /// Linear reduction of a block matrix: linear = beta_Mt, quadratic = 0.
    pub fn linear_from(blocks: &BlockMatrix) -> Self {
        QuadraticMediatorSpec {
            linear: blocks.beta_mt.clone(),
            quadratic: DVector::zeros(blocks.beta_mt.len()),
        }
    }

    /// True effect curve xi(x_t) = beta_rM . (linear + 2 * quadratic * x_t).
    pub fn effect_at(&self, beta_rm: &DVector<f64>, x_t: f64) -> f64 {
        let mut xi = 0.0;
        for i in 0..beta_rm.len() {
            xi += beta_rm[i] * (self.linear[i] + 2.0 * self.quadratic[i] * x_t);
        }
        xi
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_blocks() -> (Dims, BlockMatrix) {
        let dims = Dims::new(2, 3).unwrap();
        let blocks = BlockMatrix {
            beta_tc: DVector::from_vec(vec![0.5, -0.2]),
            beta_mc: DMatrix::from_row_slice(3, 2, &[0.3, 0.1, 0.5, 0.2, -0.1, 0.3]),
            beta_mt: DVector::from_vec(vec![0.7, 0.2, 0.1]),
            beta_rc: DVector::from_vec(vec![0.2, -0.1]),
            beta_rm: DVector::from_vec(vec![0.5, 0.4, -0.3]),
        };
        (dims, blocks)
    }

    #[test]
    fn assemble_zero_blocks_gives_zero_matrix() {
        let dims = Dims::new(2, 3).unwrap();
        let beta = BlockMatrix::zeros(&dims).assemble(&dims).unwrap();
        assert_eq!(beta, DMatrix::zeros(7, 7));
    }

    #[test]
    fn assemble_reference_model() {
        let (dims, blocks) = reference_blocks();
        let beta = blocks.assemble(&dims).unwrap();
        #[rustfmt::skip]
        let expected = DMatrix::from_row_slice(7, 7, &[
            0.0,  0.0, 0.0, 0.0, 0.0,  0.0, 0.0,
            0.0,  0.0, 0.0, 0.0, 0.0,  0.0, 0.0,
            0.5, -0.2, 0.0, 0.0, 0.0,  0.0, 0.0,
            0.3,  0.1, 0.7, 0.0, 0.0,  0.0, 0.0,
            0.5,  0.2, 0.2, 0.0, 0.0,  0.0, 0.0,
           -0.1,  0.3, 0.1, 0.0, 0.0,  0.0, 0.0,
            0.2, -0.1, 0.0, 0.5, 0.4, -0.3, 0.0,
        ]);
        assert_eq!(beta, expected);
        // Idempotent: assembling twice yields the same matrix.
        assert_eq!(beta, blocks.assemble(&dims).unwrap());
    }

    #[test]
    fn assemble_rejects_mismatched_mediator_block() {
        let (dims, mut blocks) = reference_blocks();
        blocks.beta_mt = DVector::from_vec(vec![0.7, 0.2]);
        assert!(matches!(blocks.assemble(&dims), Err(Error::Shape(_))));
    }

    #[test]
    fn causal_effect_reference_value_is_exact() {
        let (_, blocks) = reference_blocks();
        assert_eq!(blocks.causal_effect(), 0.4);
    }

    #[test]
    fn causal_effect_degenerate_cases() {
        let (dims, mut blocks) = reference_blocks();
        blocks.beta_mt = DVector::zeros(dims.d_m());
        assert_eq!(blocks.causal_effect(), 0.0);

        let mut unit = BlockMatrix::zeros(&dims);
        unit.beta_mt[0] = 1.0;
        unit.beta_rm[0] = 1.0;
        assert_eq!(unit.causal_effect(), 1.0);
    }
}
