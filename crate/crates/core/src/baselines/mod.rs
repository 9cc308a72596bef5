//! Reference merging methods that produce a single merged checkpoint.

mod dare;
mod regmean;
mod ties;
mod weighted;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use dare::{dare_preprocess, dare_preprocess_set, DARE_RNG_NAME};
pub use regmean::regmean_merge;
pub use ties::{keep_count, ties_merge, ties_merged_vector, TrimGranularity};
pub use weighted::{fisher_merge, weight_average};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::numeric::{fill, rounded_sum};
use crate::task_vector::{apply_task_vector, Array, TaskVector, TaskVectorSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Emr,
    Average,
    TaskArithmetic,
    Ties,
    Fisher,
    Regmean,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Emr,
        Method::Average,
        Method::TaskArithmetic,
        Method::Ties,
        Method::Fisher,
        Method::Regmean,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Emr => "emr",
            Method::Average => "average",
            Method::TaskArithmetic => "task_arithmetic",
            Method::Ties => "ties",
            Method::Fisher => "fisher",
            Method::Regmean => "regmean",
        }
    }

    /// Methods that operate on task vectors (and so accept DARE preprocessing).
    pub fn uses_task_vectors(self) -> bool {
        matches!(self, Method::Emr | Method::TaskArithmetic | Method::Ties)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DareConfig {
    pub drop_prob: f64,
    pub seed: u64,
}

/// Parameters for every merging method; only those relevant to `method` are read.
#[derive(Clone, Debug, PartialEq)]
pub struct MergeConfig {
    pub method: Method,
    /// Task-vector coefficient.
    pub lambda: f64,
    pub ties_keep_fraction: f64,
    pub ties_granularity: TrimGranularity,
    pub dare: Option<DareConfig>,
    /// RegMean off-diagonal multiplier.
    pub regmean_offdiag: f64,
}

impl MergeConfig {
    pub fn new(method: Method) -> Self {
        MergeConfig {
            method,
            lambda: Self::default_lambda(method),
            ties_keep_fraction: 0.2,
            ties_granularity: TrimGranularity::Global,
            dare: None,
            regmean_offdiag: 1.0,
        }
    }

    pub fn default_lambda(method: Method) -> f64 {
        match method {
            Method::TaskArithmetic => 0.3,
            _ => 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() {
            return Err(Error::config("lambda must be finite"));
        }
        if !(self.ties_keep_fraction > 0.0 && self.ties_keep_fraction <= 1.0) {
            return Err(Error::config(format!(
                "ties keep fraction must be in (0, 1], got {}",
                self.ties_keep_fraction
            )));
        }
        if !(self.regmean_offdiag > 0.0 && self.regmean_offdiag <= 1.0) {
            return Err(Error::config(format!(
                "RegMean off-diagonal multiplier must be in (0, 1], got {}",
                self.regmean_offdiag
            )));
        }
        if let Some(d) = &self.dare {
            check_drop_prob(d.drop_prob)?;
            if !self.method.uses_task_vectors() {
                return Err(Error::config(format!(
                    "DARE preprocessing applies to task-vector methods, not `{}`",
                    self.method
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn check_drop_prob(p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::config(format!("DARE drop probability must be in [0, 1), got {p}")))
    }
}

/// `Σ_t τ_t`, each element summed in an order-independent way.
pub fn sum_task_vectors(set: &TaskVectorSet, label: &str) -> Result<TaskVector> {
    if set.is_empty() {
        return Err(Error::config("at least one task vector is required"));
    }
    let tensors = set
        .schema()
        .par_iter()
        .map(|spec| {
            let cols: Vec<&[f64]> = set
                .vectors()
                .iter()
                .map(|v| v.get(&spec.name).expect("schema").data.as_slice())
                .collect();
            let mut data = vec![0.0; spec.numel()];
            fill(&mut data, |i| {
                let column: Vec<f64> = cols.iter().map(|c| c[i]).collect();
                rounded_sum(&column)
            });
            (spec.name.clone(), Array { shape: spec.shape.clone(), data })
        })
        .collect();
    Ok(TaskVector::new(label, tensors))
}

/// `base + λ Σ_t τ_t`.
pub fn task_arithmetic_merge(
    set: &TaskVectorSet,
    base: &Checkpoint,
    lambda: f64,
) -> Result<Checkpoint> {
    check_base(set, base)?;
    let sum = sum_task_vectors(set, "task_arithmetic")?;
    apply_task_vector(base, &sum, lambda)
}

/// `λ Σ_t τ_t` as a task vector, for analysis and post-hoc modulation.
pub fn task_arithmetic_vector(set: &TaskVectorSet, lambda: f64) -> Result<TaskVector> {
    Ok(sum_task_vectors(set, "task_arithmetic")?.scale(lambda))
}

pub(crate) fn check_base(set: &TaskVectorSet, base: &Checkpoint) -> Result<()> {
    if base.fingerprint() != set.base_fingerprint() {
        return Err(Error::alignment(
            "task vectors were not computed against this base checkpoint",
        ));
    }
    Ok(())
}
