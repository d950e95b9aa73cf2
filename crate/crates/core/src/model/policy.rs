use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::design::ClosedFormPolicy;
use crate::{Error, Result, DEFAULT_PROPENSITY_FLOOR};

/// Two-stage sampling propensities pi1(x_{C,t}) and pi2(x_{C,t,M}).
///
/// Raw outputs must lie in (0, 1]; evaluation clips them to
/// [floor, 1] so inverse-probability weights stay bounded. Clipping
/// events are surfaced through [`ClipStats`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PropensityPolicy {
    Constant {
        p1: f64,
        p2: f64,
    },
    /// Closed-form optimal policy from the budget-constrained design solve.
    ClosedForm(ClosedFormPolicy),
    /// Piecewise-constant lookup on the treatment value: `breaks` are
    /// ascending thresholds; bin i covers x_t < breaks[i], the last bin
    /// everything above.
    UserTable {
        breaks: Vec<f64>,
        p1: Vec<f64>,
        p2: Vec<f64>,
    },
}

/// Count of propensity evaluations clipped to the configured floor.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipStats {
    pub pi1_clipped: usize,
    pub pi2_clipped: usize,
}

impl PropensityPolicy {
    pub fn constant(p1: f64, p2: f64) -> Result<Self> {
        for (name, p) in [("p1", p1), ("p2", p2)] {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::PolicyRange(format!(
                    "constant propensity {name}={p} outside (0, 1]"
                )));
            }
        }
        Ok(PropensityPolicy::Constant { p1, p2 })
    }

    pub fn full_sampling() -> Self {
        PropensityPolicy::Constant { p1: 1.0, p2: 1.0 }
    }

    /// Floor used when clipping this policy's outputs.
    pub fn floor(&self) -> f64 {
        match self {
            PropensityPolicy::ClosedForm(p) => p.floor,
            _ => DEFAULT_PROPENSITY_FLOOR,
        }
    }

    fn pi1_raw(&self, x_c: &DVector<f64>, x_t: f64) -> f64 {
        match self {
            PropensityPolicy::Constant { p1, .. } => *p1,
            PropensityPolicy::ClosedForm(p) => p.pi1(x_c, x_t),
            PropensityPolicy::UserTable { breaks, p1, .. } => lookup(breaks, p1, x_t),
        }
    }

    fn pi2_raw(&self, x_c: &DVector<f64>, x_t: f64, x_m: &DVector<f64>) -> f64 {
        match self {
            PropensityPolicy::Constant { p2, .. } => *p2,
            PropensityPolicy::ClosedForm(p) => p.pi2(x_c, x_t, x_m),
            PropensityPolicy::UserTable { breaks, p2, .. } => lookup(breaks, p2, x_t),
        }
    }

    /// Evaluate pi1, returning the clipped value and whether the floor bit.
    pub fn pi1_eval(&self, x_c: &DVector<f64>, x_t: f64) -> Result<(f64, bool)> {
        clip(self.pi1_raw(x_c, x_t), self.floor(), "pi1")
    }

    pub fn pi2_eval(
        &self,
        x_c: &DVector<f64>,
        x_t: f64,
        x_m: &DVector<f64>,
    ) -> Result<(f64, bool)> {
        clip(self.pi2_raw(x_c, x_t, x_m), self.floor(), "pi2")
    }

    pub fn pi1_clamped(&self, x_c: &DVector<f64>, x_t: f64) -> Result<f64> {
        Ok(self.pi1_eval(x_c, x_t)?.0)
    }

    pub fn pi2_clamped(&self, x_c: &DVector<f64>, x_t: f64, x_m: &DVector<f64>) -> Result<f64> {
        Ok(self.pi2_eval(x_c, x_t, x_m)?.0)
    }

    /// Stable content digest, used to verify that estimation weights match
    /// the policy that generated the coarsened data.
    pub fn digest(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(crate::io::sha256_hex(&bytes))
    }
}

fn lookup(breaks: &[f64], values: &[f64], x_t: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut ix = breaks.partition_point(|b| x_t >= *b);
    if ix >= values.len() {
        ix = values.len() - 1;
    }
    values[ix]
}

fn clip(raw: f64, floor: f64, which: &str) -> Result<(f64, bool)> {
    if !(raw > 0.0 && raw <= 1.0) || raw.is_nan() {
        return Err(Error::PolicyRange(format!(
            "{which} evaluated to {raw}, outside (0, 1]"
        )));
    }
    if raw < floor {
        Ok((floor, true))
    } else {
        Ok((raw, false))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_policy_validation() {
        assert!(PropensityPolicy::constant(0.5, 1.0).is_ok());
        assert!(PropensityPolicy::constant(0.0, 1.0).is_err());
        assert!(PropensityPolicy::constant(0.5, 1.5).is_err());
    }

    #[test]
    fn floor_clipping_counts() {
        let policy = PropensityPolicy::constant(1e-6, 1.0).unwrap();
        let x_c = DVector::zeros(2);
        let (p, clipped) = policy.pi1_eval(&x_c, 0.0).unwrap();
        assert_eq!(p, DEFAULT_PROPENSITY_FLOOR);
        assert!(clipped);
    }

    #[test]
    fn user_table_lookup() {
        let policy = PropensityPolicy::UserTable {
            breaks: vec![0.0],
            p1: vec![0.2, 0.8],
            p2: vec![1.0, 1.0],
        };
        let x_c = DVector::zeros(1);
        assert_eq!(policy.pi1_clamped(&x_c, -1.0).unwrap(), 0.2);
        assert_eq!(policy.pi1_clamped(&x_c, 1.0).unwrap(), 0.8);
    }

    #[test]
    fn digest_distinguishes_policies() {
        let a = PropensityPolicy::constant(0.5, 1.0).unwrap();
        let b = PropensityPolicy::constant(0.6, 1.0).unwrap();
        assert_ne!(a.digest().unwrap(), b.digest().unwrap());
        assert_eq!(a.digest().unwrap(), a.digest().unwrap());
    }
}
