use super::{
    BlockMatrix, ClipStats, CoarsenedDataset, CoarsenedRecord, Dims, ErrorModel, FullDataset,
    FullRecord, PropensityPolicy, QuadraticMediatorSpec, Stage,
};
use crate::{seed, Result};
use rand::Rng;

/// Draw `n` full records from X = beta X + eps by forward substitution in
/// the causal order C -> t -> M -> r. Deterministic given the seed.
pub fn sample_full(
    blocks: &BlockMatrix,
    dims: &Dims,
    errors: &ErrorModel,
    n: usize,
    seed: u64,
) -> Result<FullDataset> {
    let quad = QuadraticMediatorSpec::linear_from(blocks);
    sample_full_quadratic(blocks, &quad, dims, errors, n, seed)
}

/// As [`sample_full`] but with a quadratic-in-treatment mediator equation
/// X_M = linear X_t + quadratic X_t^2 + beta_MC X_C + eps_M. With zero
/// quadratic coefficients (and linear = beta_Mt) the output stream is
/// bit-identical to [`sample_full`] under the same seed.
pub fn sample_full_quadratic(
    blocks: &BlockMatrix,
    quad: &QuadraticMediatorSpec,
    dims: &Dims,
    errors: &ErrorModel,
    n: usize,
    seed: u64,
) -> Result<FullDataset> {
    blocks.validate(dims)?;
    quad.validate(dims)?;
    let mut rng = seed::rng_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let (eps_c, eps_t, eps_r, eps_m) = errors.sample(&mut rng);
        let x_c = eps_c;
        let x_t = blocks.beta_tc.dot(&x_c) + eps_t;
        let mut x_m = &blocks.beta_mc * &x_c + eps_m;
        for i in 0..dims.d_m() {
            x_m[i] += quad.linear[i] * x_t + quad.quadratic[i] * x_t * x_t;
        }
        let x_r = blocks.beta_rc.dot(&x_c) + blocks.beta_rm.dot(&x_m) + eps_r;
        records.push(FullRecord { x_c, x_t, x_m, x_r });
    }
    Ok(FullDataset {
        dims: *dims,
        records,
    })
}

/// Apply the two-stage coarsening mechanism. Per record one uniform draw
/// is compared against the thresholds pi1*pi2 and pi1, so stage draws are
/// coupled monotonically across policies under a shared seed:
/// Delta = FULL with probability pi1*pi2, Delta = 2 with pi1*(1 - pi2),
/// Delta = 1 with 1 - pi1.
pub fn coarsen(
    full: &FullDataset,
    policy: &PropensityPolicy,
    seed: u64,
) -> Result<(CoarsenedDataset, ClipStats)> {
    let mut rng = seed::rng_from_u64(seed);
    let mut clips = ClipStats::default();
    let mut records = Vec::with_capacity(full.records.len());
    for rec in &full.records {
        let (p1, c1) = policy.pi1_eval(&rec.x_c, rec.x_t)?;
        let (p2, c2) = policy.pi2_eval(&rec.x_c, rec.x_t, &rec.x_m)?;
        clips.pi1_clipped += c1 as usize;
        clips.pi2_clipped += c2 as usize;
        let u: f64 = rng.gen();
        let stage = if u < p1 * p2 {
            Stage::Full
        } else if u < p1 {
            Stage::Two
        } else {
            Stage::One
        };
        records.push(CoarsenedRecord {
            stage,
            x_c: rec.x_c.clone(),
            x_t: rec.x_t,
            x_m: (stage >= Stage::Two).then(|| rec.x_m.clone()),
            x_r: (stage == Stage::Full).then_some(rec.x_r),
        });
    }
    Ok((
        CoarsenedDataset {
            dims: full.dims,
            records,
        },
        clips,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CostFn, CostSpec, NoiseComponent, NoiseFamily};
    use nalgebra::{DMatrix, DVector};

    pub(crate) fn gaussian_errors(dims: &Dims) -> ErrorModel {
        let c = NoiseComponent::new(
            NoiseFamily::Gaussian {
                cov: DMatrix::identity(dims.d_c(), dims.d_c()),
            },
            "c",
        )
        .unwrap();
        let tr = NoiseComponent::new(
            NoiseFamily::Gaussian {
                cov: DMatrix::identity(2, 2),
            },
            "tr",
        )
        .unwrap();
        let m = NoiseComponent::new(
            NoiseFamily::Gaussian {
                cov: DMatrix::identity(dims.d_m(), dims.d_m()),
            },
            "m",
        )
        .unwrap();
        ErrorModel::new(c, tr, m, dims).unwrap()
    }

    #[test]
    fn empty_sample() {
        let dims = Dims::new(2, 3).unwrap();
        let blocks = BlockMatrix::zeros(&dims);
        let errors = gaussian_errors(&dims);
        let ds = sample_full(&blocks, &dims, &errors, 0, 1).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn identical_seed_identical_stream() {
        let dims = Dims::new(2, 3).unwrap();
        let blocks = BlockMatrix::zeros(&dims);
        let errors = gaussian_errors(&dims);
        let a = sample_full(&blocks, &dims, &errors, 50, 99).unwrap();
        let b = sample_full(&blocks, &dims, &errors, 50, 99).unwrap();
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn zero_beta_identity_covariance() {
        let dims = Dims::new(2, 3).unwrap();
        let blocks = BlockMatrix::zeros(&dims);
        let errors = gaussian_errors(&dims);
        let n = 100_000;
        let ds = sample_full(&blocks, &dims, &errors, n, 7).unwrap();
        let d = dims.total();
        let mut second = DMatrix::zeros(d, d);
        for r in &ds.records {
            let x = stack(r, &dims);
            second += &x * x.transpose();
        }
        second /= n as f64;
        // Entrywise within 5 MC standard errors; for standard Gaussians
        // the SE of a second-moment entry is about sqrt(2/n) on the
        // diagonal and sqrt(1/n) off it.
        let tol = 5.0 * (2.0 / n as f64).sqrt();
        for i in 0..d {
            for j in 0..d {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (second[(i, j)] - want).abs() < tol,
                    "cov[{i},{j}] = {}",
                    second[(i, j)]
                );
            }
        }
    }

    fn stack(r: &FullRecord, dims: &Dims) -> DVector<f64> {
        let mut x = DVector::zeros(dims.total());
        for i in 0..dims.d_c() {
            x[i] = r.x_c[i];
        }
        x[dims.t_index()] = r.x_t;
        for i in 0..dims.d_m() {
            x[dims.m_start() + i] = r.x_m[i];
        }
        x[dims.r_index()] = r.x_r;
        x
    }

    #[test]
    fn quadratic_with_zero_coeffs_is_bit_identical() {
        let dims = Dims::new(2, 3).unwrap();
        let blocks = BlockMatrix {
            beta_tc: DVector::from_vec(vec![0.5, -0.2]),
            beta_mc: DMatrix::from_row_slice(3, 2, &[0.3, 0.1, 0.5, 0.2, -0.1, 0.3]),
            beta_mt: DVector::from_vec(vec![0.7, 0.2, 0.1]),
            beta_rc: DVector::from_vec(vec![0.2, -0.1]),
            beta_rm: DVector::from_vec(vec![0.5, 0.4, -0.3]),
        };
        let errors = gaussian_errors(&dims);
        let quad = QuadraticMediatorSpec::linear_from(&blocks);
        let a = sample_full(&blocks, &dims, &errors, 200, 5).unwrap();
        let b = sample_full_quadratic(&blocks, &quad, &dims, &errors, 200, 5).unwrap();
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra, rb);
        }
    }

    #[test]
    fn coarsen_full_policy_keeps_everything() {
        let dims = Dims::new(2, 3).unwrap();
        let blocks = BlockMatrix::zeros(&dims);
        let errors = gaussian_errors(&dims);
        let ds = sample_full(&blocks, &dims, &errors, 100, 3).unwrap();
        let (coarse, clips) = coarsen(&ds, &PropensityPolicy::full_sampling(), 11).unwrap();
        assert_eq!(coarse.count_stage(Stage::Full), 100);
        assert_eq!(clips, ClipStats::default());
    }

    #[test]
    fn coarsen_binomial_marginals() {
        let dims = Dims::new(2, 3).unwrap();
        let blocks = BlockMatrix::zeros(&dims);
        let errors = gaussian_errors(&dims);
        let n = 10_000;
        let ds = sample_full(&blocks, &dims, &errors, n, 3).unwrap();
        let policy = PropensityPolicy::constant(0.5, 1.0).unwrap();
        let (coarse, _) = coarsen(&ds, &policy, 17).unwrap();
        let frac1 = coarse.count_stage(Stage::One) as f64 / n as f64;
        let se = (0.5 * 0.5 / n as f64).sqrt();
        assert!((frac1 - 0.5).abs() < 3.0 * se, "stage-1 fraction {frac1}");
        assert_eq!(coarse.count_stage(Stage::Two), 0);
    }

    #[test]
    fn coarsen_covariate_dependent_marginals() {
        // pi1(x) = logistic(x_t); stage-1 frequency in x_t bins should
        // track 1 - pi1 within binomial tolerance.
        let dims = Dims::new(1, 1).unwrap();
        let blocks = BlockMatrix::zeros(&dims);
        let errors = gaussian_errors(&dims);
        let n = 40_000;
        let ds = sample_full(&blocks, &dims, &errors, n, 21).unwrap();
        // Approximate the logistic with a fine user table.
        let breaks: Vec<f64> = (-30..30).map(|i| i as f64 / 10.0).collect();
        let mids: Vec<f64> = std::iter::once(-3.05)
            .chain((-30..30).map(|i| i as f64 / 10.0 + 0.05))
            .collect();
        let p1: Vec<f64> = mids.iter().map(|m| 1.0 / (1.0 + (-m).exp())).collect();
        let p2 = vec![1.0; p1.len()];
        let policy = PropensityPolicy::UserTable { breaks, p1, p2 };
        let (coarse, _) = coarsen(&ds, &policy, 23).unwrap();

        for (lo, hi) in [(-1.0, -0.5), (-0.25, 0.25), (0.5, 1.0)] {
            let in_bin: Vec<_> = coarse
                .records
                .iter()
                .filter(|r| r.x_t >= lo && r.x_t < hi)
                .collect();
            let k = in_bin.len();
            assert!(k > 500);
            let obs = in_bin.iter().filter(|r| r.stage == Stage::One).count() as f64 / k as f64;
            let mid = (lo + hi) / 2.0;
            let expect = 1.0 - 1.0 / (1.0 + (-mid).exp());
            let se = (expect * (1.0 - expect) / k as f64).sqrt();
            // Allow 4 SE plus slack for the bin-midpoint approximation.
            assert!(
                (obs - expect).abs() < 4.0 * se + 0.03,
                "bin [{lo},{hi}): obs {obs} vs {expect}"
            );
        }
    }

    #[test]
    fn realized_cost_matches_expected_cost_in_mean() {
        let dims = Dims::new(2, 3).unwrap();
        let blocks = BlockMatrix::zeros(&dims);
        let errors = gaussian_errors(&dims);
        let costs = CostSpec {
            c0: 1.0,
            c1: CostFn::ScaledNorm { a: 0.1 },
            c2: CostFn::Constant { a: 0.5 },
        };
        let policy = PropensityPolicy::constant(0.7, 0.4).unwrap();
        let n = 50_000;
        let ds = sample_full(&blocks, &dims, &errors, n, 31).unwrap();
        let (coarse, _) = coarsen(&ds, &policy, 37).unwrap();
        let realized: f64 = coarse
            .records
            .iter()
            .map(|r| super::super::realized_cost(r, &costs))
            .sum::<f64>()
            / n as f64;
        let expected =
            super::super::expected_cost(&blocks, &dims, &errors, &policy, &costs, n, 41).unwrap();
        assert!(
            (realized - expected.mean).abs() < 6.0 * expected.std_error + 0.01,
            "realized {realized} vs expected {}",
            expected.mean
        );
    }

    #[test]
    fn expected_cost_constant_hand_value() {
        let dims = Dims::new(2, 3).unwrap();
        let blocks = BlockMatrix::zeros(&dims);
        let errors = gaussian_errors(&dims);
        let costs = CostSpec {
            c0: 1.0,
            c1: CostFn::Constant { a: 1.0 },
            c2: CostFn::Constant { a: 1.0 },
        };
        let policy = PropensityPolicy::constant(2.0 / 3.0, 0.5).unwrap();
        let got =
            super::super::expected_cost(&blocks, &dims, &errors, &policy, &costs, 100, 1).unwrap();
        assert!((got.mean - 2.0).abs() < 1e-12);
        assert!(got.std_error < 1e-12);
    }
}
