use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::Dims;
use crate::{Error, Result};

/// Coarsening stage: which prefix of (X_C, X_t, X_M, X_r) was measured.
/// Totally ordered 1 < 2 < FULL, matching the stage variable values
/// {1, 2, inf}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    One,
    Two,
    Full,
}

impl Stage {
    pub fn token(&self) -> &'static str {
        match self {
            Stage::One => "1",
            Stage::Two => "2",
            Stage::Full => "inf",
        }
    }

    pub fn from_token(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(Stage::One),
            "2" => Ok(Stage::Two),
            "inf" => Ok(Stage::Full),
            other => Err(Error::Config(format!(
                "invalid stage token {other:?}, expected 1, 2 or inf"
            ))),
        }
    }
}

/// A fully observed record (X_C, X_t, X_M, X_r).
#[derive(Debug, Clone, PartialEq)]
pub struct FullRecord {
    pub x_c: DVector<f64>,
    pub x_t: f64,
    pub x_m: DVector<f64>,
    pub x_r: f64,
}

/// Ordered collection of fully observed records.
#[derive(Debug, Clone)]
pub struct FullDataset {
    pub dims: Dims,
    pub records: Vec<FullRecord>,
}

impl FullDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// View as a coarsened dataset with every record at stage FULL.
    pub fn to_coarsened(&self) -> CoarsenedDataset {
        CoarsenedDataset {
            dims: self.dims,
            records: self
                .records
                .iter()
                .map(|r| CoarsenedRecord {
                    stage: Stage::Full,
                    x_c: r.x_c.clone(),
                    x_t: r.x_t,
                    x_m: Some(r.x_m.clone()),
                    x_r: Some(r.x_r),
                })
                .collect(),
        }
    }
}

/// One coarsened record. The presence pattern is tied to the stage:
/// x_M exists iff stage >= 2, x_r exists iff stage = FULL. There is no
/// representable state observing x_r without x_M.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarsenedRecord {
    pub stage: Stage,
    pub x_c: DVector<f64>,
    pub x_t: f64,
    pub x_m: Option<DVector<f64>>,
    pub x_r: Option<f64>,
}

impl CoarsenedRecord {
    /// Validate the stage/presence invariant.
    pub fn check(&self) -> Result<()> {
        let ok = match self.stage {
            Stage::One => self.x_m.is_none() && self.x_r.is_none(),
            Stage::Two => self.x_m.is_some() && self.x_r.is_none(),
            Stage::Full => self.x_m.is_some() && self.x_r.is_some(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "record at stage {:?} has inconsistent observed components",
                self.stage
            )))
        }
    }
}

/// Coarsened dataset sharing one set of dimensions.
#[derive(Debug, Clone)]
pub struct CoarsenedDataset {
    pub dims: Dims,
    pub records: Vec<CoarsenedRecord>,
}

impl CoarsenedDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn count_stage(&self, stage: Stage) -> usize {
        self.records.iter().filter(|r| r.stage == stage).count()
    }

    /// Convert back to a fully observed dataset; fails if any record is
    /// missing components.
    pub fn to_full(&self) -> Result<FullDataset> {
        let mut records = Vec::with_capacity(self.records.len());
        for (i, r) in self.records.iter().enumerate() {
            if r.stage != Stage::Full {
                return Err(Error::Config(format!(
                    "record {i} is at stage {} but a fully observed dataset is required",
                    r.stage.token()
                )));
            }
            records.push(FullRecord {
                x_c: r.x_c.clone(),
                x_t: r.x_t,
                x_m: r.x_m.clone().expect("full record has x_m"),
                x_r: r.x_r.expect("full record has x_r"),
            });
        }
        Ok(FullDataset {
            dims: self.dims,
            records,
        })
    }
}
