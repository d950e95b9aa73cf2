//! Linear front-door structural equation model: parameters, noise,
//! sampling, two-stage coarsening, and measurement costs.

mod blocks;
mod cost;
mod data;
mod noise;
mod policy;
mod sample;

pub use blocks::{BlockMatrix, Dims, QuadraticMediatorSpec};
pub use cost::{expected_cost, realized_cost, CostFn, CostSpec, ExpectedCost};
pub use data::{CoarsenedDataset, CoarsenedRecord, FullDataset, FullRecord, Stage};
pub use noise::{ErrorModel, NoiseComponent, NoiseFamily};
pub use policy::{ClipStats, PropensityPolicy};
pub use sample::{coarsen, sample_full, sample_full_quadratic};
