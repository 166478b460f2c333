use serde::{Deserialize, Serialize};

use super::InstanceRecord;
use crate::error::{EdkError, Result};

/// Global-timestamp split boundaries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub t0: i64,
    pub t1: i64,
    #[serde(default = "default_valid_fraction")]
    pub valid_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
}

fn default_valid_fraction() -> f64 {
    0.5
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.t0 >= self.t1 {
            return Err(EdkError::Config(format!(
                "split requires t0 < t1, got t0={} t1={}",
                self.t0, self.t1
            )));
        }
        if !(self.valid_fraction > 0.0 && self.valid_fraction < 1.0) {
            return Err(EdkError::Config(format!(
                "valid_fraction must lie in (0, 1), got {}",
                self.valid_fraction
            )));
        }
        Ok(())
    }
}

/// The four disjoint partitions, each in input order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    /// `t < t0`: compressed into the knowledge base.
    pub old: Vec<InstanceRecord>,
    /// `t0 <= t < t1`: backbone training.
    pub train: Vec<InstanceRecord>,
    pub valid: Vec<InstanceRecord>,
    pub test: Vec<InstanceRecord>,
}

/// Records at or after `t1` go to validation when the seeded hash of their
/// input position falls below `valid_fraction`, otherwise to test.
pub fn temporal_split(records: &[InstanceRecord], spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    if records.is_empty() {
        return Err(EdkError::Data("cannot split an empty dataset".into()));
    }
    let mut out = Splits::default();
    for (i, r) in records.iter().enumerate() {
        if r.timestamp < spec.t0 {
            out.old.push(r.clone());
        } else if r.timestamp < spec.t1 {
            out.train.push(r.clone());
        } else if unit_hash(spec.split_seed, i as u64) < spec.valid_fraction {
            out.valid.push(r.clone());
        } else {
            out.test.push(r.clone());
        }
    }
    for (name, part) in [
        ("D_old", &out.old),
        ("D_train", &out.train),
        ("D_valid", &out.valid),
        ("D_test", &out.test),
    ] {
        if part.is_empty() {
            return Err(EdkError::Config(format!("{name} empty")));
        }
    }
    Ok(out)
}

/// SplitMix64 of `(seed, index)` mapped to `[0, 1)`.
pub(crate) fn unit_hash(seed: u64, index: u64) -> f64 {
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index)
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}
