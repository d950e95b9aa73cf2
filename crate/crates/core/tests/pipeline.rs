//! End-to-end library tests: simulate, design, coarsen, estimate, and
//! property-based invariants for the data layer.

use nalgebra::DVector;
use proptest::prelude::*;

use frontdoor_design::config::ModelConfig;
use frontdoor_design::design::{solve_budget, LeverageContext};
use frontdoor_design::estimators::estimate_effect;
use frontdoor_design::io::{read_csv, write_csv};
use frontdoor_design::model::{
    coarsen, sample_full, CoarsenedDataset, CoarsenedRecord, Dims, PropensityPolicy, Stage,
};

#[test]
fn full_round_trip_recovers_the_effect() {
    let built = ModelConfig::baseline().build().unwrap();
    let n = 20_000;
    let full = sample_full(&built.blocks, &built.dims, &built.errors, n, 101).unwrap();

    // Design from a pilot, then coarsen a fresh sample under the policy.
    let pilot = full.to_coarsened();
    let full_policy = PropensityPolicy::full_sampling();
    let ctx = LeverageContext::from_pilot(&pilot, &full_policy, &built.costs).unwrap();
    let c_full = frontdoor_design::design::cost_at(&full_policy, &ctx, true)
        .unwrap()
        .mean;
    let sol = solve_budget(&ctx, c_full / 1.5, 1e-6).unwrap();
    let fresh = sample_full(&built.blocks, &built.dims, &built.errors, n, 202).unwrap();
    let (coarse, _) = coarsen(&fresh, &sol.policy, 303).unwrap();

    let est = estimate_effect(&coarse, &sol.policy, 0.95).unwrap();
    assert!(
        (est.xi_hat - 0.4).abs() < 6.0 * est.se,
        "xi_hat = {} (se {})",
        est.xi_hat,
        est.se
    );
    assert!(est.se > 0.0 && est.se < 0.1);
    assert!(est.ci.0 < est.xi_hat && est.xi_hat < est.ci.1);
    // Coarsening actually dropped stages.
    assert!(est.n_used.stage1 > 0);
    assert!(est.n_used.full > 100);
}

#[test]
fn estimate_matches_between_serialized_and_in_memory_policy() {
    let built = ModelConfig::baseline().build().unwrap();
    let full = sample_full(&built.blocks, &built.dims, &built.errors, 3000, 7).unwrap();
    let ctx = LeverageContext::from_model(&built, 2000, 8).unwrap();
    let sol = solve_budget(&ctx, 0.55, 1e-6).unwrap();
    let (coarse, _) = coarsen(&full, &sol.policy, 9).unwrap();

    let json = serde_json::to_string(&sol.policy).unwrap();
    let back: PropensityPolicy = serde_json::from_str(&json).unwrap();
    let a = estimate_effect(&coarse, &sol.policy, 0.95).unwrap();
    let b = estimate_effect(&coarse, &back, 0.95).unwrap();
    assert_eq!(a.xi_hat.to_bits(), b.xi_hat.to_bits());
    assert_eq!(a.se.to_bits(), b.se.to_bits());
}

#[test]
fn same_seed_reproduces_bit_identical_data() {
    let built = ModelConfig::baseline().build().unwrap();
    let a = sample_full(&built.blocks, &built.dims, &built.errors, 500, 42).unwrap();
    let b = sample_full(&built.blocks, &built.dims, &built.errors, 500, 42).unwrap();
    for (x, y) in a.records.iter().zip(&b.records) {
        assert_eq!(x.x_t.to_bits(), y.x_t.to_bits());
        assert_eq!(x.x_r.to_bits(), y.x_r.to_bits());
    }
    let policy = PropensityPolicy::constant(0.7, 0.6).unwrap();
    let (ca, _) = coarsen(&a, &policy, 77).unwrap();
    let (cb, _) = coarsen(&b, &policy, 77).unwrap();
    assert_eq!(ca.records, cb.records);
}

fn record_strategy(dims: Dims) -> impl Strategy<Value = CoarsenedRecord> {
    let finite = -1e12f64..1e12f64;
    (
        0usize..3,
        proptest::collection::vec(finite.clone(), dims.d_c()),
        finite.clone(),
        proptest::collection::vec(finite.clone(), dims.d_m()),
        finite,
    )
        .prop_map(move |(stage, x_c, x_t, x_m, x_r)| {
            let stage = match stage {
                0 => Stage::One,
                1 => Stage::Two,
                _ => Stage::Full,
            };
            CoarsenedRecord {
                stage,
                x_c: DVector::from_vec(x_c),
                x_t,
                x_m: (stage >= Stage::Two).then(|| DVector::from_vec(x_m)),
                x_r: (stage == Stage::Full).then_some(x_r),
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn csv_round_trip_any_dataset(
        records in proptest::collection::vec(record_strategy(Dims::new(2, 3).unwrap()), 0..40)
    ) {
        let ds = CoarsenedDataset { dims: Dims::new(2, 3).unwrap(), records };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        write_csv(&ds, &path).unwrap();
        let back = read_csv(&path, &ds.dims).unwrap();
        prop_assert_eq!(ds.records, back.records);
    }

    #[test]
    fn coarsening_presence_pattern_always_valid(seed in any::<u64>(), p1 in 0.05f64..1.0, p2 in 0.05f64..1.0) {
        let built = ModelConfig::baseline().build().unwrap();
        let full = sample_full(&built.blocks, &built.dims, &built.errors, 200, seed).unwrap();
        let policy = PropensityPolicy::constant(p1, p2).unwrap();
        let (coarse, clips) = coarsen(&full, &policy, seed ^ 0xc0a5).unwrap();
        prop_assert_eq!(coarse.len(), 200);
        prop_assert_eq!(clips.pi1_clipped + clips.pi2_clipped, 0);
        for rec in &coarse.records {
            rec.check().unwrap();
        }
        // Monotone coupling: raising propensities never demotes a record.
        let richer = PropensityPolicy::constant((p1 * 1.3).min(1.0), (p2 * 1.3).min(1.0)).unwrap();
        let (coarse2, _) = coarsen(&full, &richer, seed ^ 0xc0a5).unwrap();
        for (a, b) in coarse.records.iter().zip(&coarse2.records) {
            prop_assert!(b.stage >= a.stage);
        }
    }

    #[test]
    fn policy_digest_is_stable_and_discriminating(p1 in 0.05f64..1.0, p2 in 0.05f64..1.0) {
        let a = PropensityPolicy::constant(p1, p2).unwrap();
        let b = PropensityPolicy::constant(p1, p2).unwrap();
        prop_assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        if p1 * 0.99 >= 0.05 {
            let c = PropensityPolicy::constant(p1 * 0.99, p2).unwrap();
            prop_assert_ne!(a.digest().unwrap(), c.digest().unwrap());
        }
    }
}
