//! Ties-Merging: trim each task vector to its largest entries, elect a sign
//! per element, then average the surviving entries that agree with it.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::check_base;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::numeric::{exact_sum_sign, fill, rounded_sum};
use crate::task_vector::{apply_task_vector, Array, TaskVector, TaskVectorSet};

/// Scope over which the top-k trim is ranked.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrimGranularity {
    /// Rank over the whole flattened task vector.
    #[default]
    Global,
    /// Rank within each tensor separately.
    PerTensor,
}

impl TrimGranularity {
    pub fn as_str(self) -> &'static str {
        match self {
            TrimGranularity::Global => "global",
            TrimGranularity::PerTensor => "per_tensor",
        }
    }
}

impl std::str::FromStr for TrimGranularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(TrimGranularity::Global),
            "per_tensor" | "per-tensor" => Ok(TrimGranularity::PerTensor),
            other => Err(Error::config(format!("unknown trim granularity `{other}`"))),
        }
    }
}

/// Number of entries kept out of `n`: `ceil(keep * n)`, at least one.
///
/// Products within 1e-9 of an integer are snapped to it first, so that
/// `0.2 * 10` keeps 2 rather than 3.
pub fn keep_count(keep: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    let x = keep * n as f64;
    let nearest = x.round();
    let k = if (x - nearest).abs() <= 1e-9 { nearest } else { x.ceil() };
    (k as usize).clamp(1, n)
}

fn check_keep(keep: f64) -> Result<()> {
    if keep > 0.0 && keep <= 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("ties keep fraction must be in (0, 1], got {keep}")))
    }
}

/// Zeroes all but the `keep_count(keep, len)` largest-magnitude entries.
/// Equal magnitudes favour the lower index.
fn trim_slice(values: &mut [f64], keep: f64) {
    let k = keep_count(keep, values.len());
    if k >= values.len() {
        return;
    }
    let by_rank = |&a: &usize, &b: &usize| -> Ordering {
        values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b))
    };
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.select_nth_unstable_by(k - 1, by_rank);
    let mut kept = vec![false; values.len()];
    for &i in &order[..k] {
        kept[i] = true;
    }
    for (v, keep) in values.iter_mut().zip(kept) {
        if !keep {
            *v = 0.0;
        }
    }
}

fn trim(tau: &TaskVector, keep: f64, granularity: TrimGranularity) -> TaskVector {
    let tensors: BTreeMap<String, Array> = match granularity {
        TrimGranularity::PerTensor => tau
            .tensors()
            .iter()
            .map(|(name, a)| {
                let mut data = a.data.clone();
                trim_slice(&mut data, keep);
                (name.clone(), Array { shape: a.shape.clone(), data })
            })
            .collect(),
        TrimGranularity::Global => {
            let mut flat = tau.flatten_concat();
            trim_slice(&mut flat, keep);
            let mut offset = 0;
            tau.tensors()
                .iter()
                .map(|(name, a)| {
                    let data = flat[offset..offset + a.len()].to_vec();
                    offset += a.len();
                    (name.clone(), Array { shape: a.shape.clone(), data })
                })
                .collect()
        }
    };
    TaskVector::new(tau.label(), tensors)
}

/// Mean of the entries whose sign matches the sign of their exact sum.
fn disjoint_mean(values: &[f64]) -> f64 {
    let sign = exact_sum_sign(values);
    if sign == 0 {
        return 0.0;
    }
    let agreeing: Vec<f64> = values
        .iter()
        .copied()
        .filter(|&v| (sign > 0 && v > 0.0) || (sign < 0 && v < 0.0))
        .collect();
    let count = agreeing.len() as f64;
    rounded_sum(&agreeing) / count
}

/// The Ties merged task vector before the λ coefficient is applied.
pub fn ties_merged_vector(
    set: &TaskVectorSet,
    keep: f64,
    granularity: TrimGranularity,
) -> Result<TaskVector> {
    check_keep(keep)?;
    if set.is_empty() {
        return Err(Error::config("at least one task vector is required"));
    }
    let trimmed: Vec<TaskVector> = set
        .vectors()
        .par_iter()
        .map(|tau| trim(tau, keep, granularity))
        .collect();
    let tensors = set
        .schema()
        .par_iter()
        .map(|spec| {
            let cols: Vec<&[f64]> = trimmed
                .iter()
                .map(|t| t.get(&spec.name).expect("schema").data.as_slice())
                .collect();
            let mut data = vec![0.0; spec.numel()];
            fill(&mut data, |i| {
                let column: Vec<f64> = cols.iter().map(|c| c[i]).collect();
                disjoint_mean(&column)
            });
            (spec.name.clone(), Array { shape: spec.shape.clone(), data })
        })
        .collect();
    Ok(TaskVector::new("ties", tensors))
}

/// `base + λ · ties_merged_vector(set, keep, granularity)`.
pub fn ties_merge(
    set: &TaskVectorSet,
    base: &Checkpoint,
    lambda: f64,
    keep: f64,
    granularity: TrimGranularity,
) -> Result<Checkpoint> {
    check_base(set, base)?;
    let merged = ties_merged_vector(set, keep, granularity)?;
    apply_task_vector(base, &merged, lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(vectors: &[&[f64]]) -> TaskVectorSet {
        TaskVectorSet::from_vectors(
            vectors
                .iter()
                .enumerate()
                .map(|(i, v)| TaskVector::from_flat(format!("t{i}"), &[("w", v)]))
                .collect(),
        )
        .unwrap()
    }

    fn merged(vectors: &[&[f64]], keep: f64) -> Vec<f64> {
        ties_merged_vector(&set(vectors), keep, TrimGranularity::Global)
            .unwrap()
            .flatten_concat()
    }

    /// Straightforward three-step reference: full sort for the trim, task-order
    /// accumulation for the mean.
    fn reference(vectors: &[Vec<f64>], keep: f64) -> Vec<f64> {
        let d = vectors[0].len();
        let k = ((keep * d as f64) - 1e-9).ceil().max(1.0) as usize;
        let trimmed: Vec<Vec<f64>> = vectors
            .iter()
            .map(|v| {
                let mut idx: Vec<usize> = (0..d).collect();
                idx.sort_by(|&a, &b| {
                    v[b].abs().partial_cmp(&v[a].abs()).unwrap().then(a.cmp(&b))
                });
                let mut out = vec![0.0; d];
                for &i in idx.iter().take(k) {
                    out[i] = v[i];
                }
                out
            })
            .collect();
        (0..d)
            .map(|i| {
                let total: f64 = trimmed.iter().map(|t| t[i]).sum();
                let (mut acc, mut count) = (0.0, 0);
                for t in &trimmed {
                    if t[i] != 0.0 && (t[i] > 0.0) == (total > 0.0) && total != 0.0 {
                        acc += t[i];
                        count += 1;
                    }
                }
                if count == 0 {
                    0.0
                } else {
                    acc / count as f64
                }
            })
            .collect()
    }

    #[test]
    fn hand_example() {
        assert_eq!(merged(&[&[3.0, -1.0], &[-1.0, -1.0]], 1.0), vec![3.0, -1.0]);
    }

    #[test]
    fn unanimous_signs_full_keep_is_mean() {
        assert_eq!(
            merged(&[&[1.0, -2.0, 0.5], &[3.0, -4.0, 1.5]], 1.0),
            vec![2.0, -3.0, 1.0]
        );
    }

    #[test]
    fn keep_count_rounding() {
        assert_eq!(keep_count(0.2, 10), 2);
        assert_eq!(keep_count(0.2, 11), 3);
        assert_eq!(keep_count(0.3, 10), 3);
        assert_eq!(keep_count(1e-6, 10), 1);
        assert_eq!(keep_count(1.0, 7), 7);
        assert_eq!(keep_count(0.5, 0), 0);
    }

    #[test]
    fn trim_ties_prefer_lower_index() {
        // keep 2 of 4; |2| ranks first, then the earlier of the two 1s.
        assert_eq!(merged(&[&[1.0, -1.0, 2.0, 0.5]], 0.5), vec![1.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn per_tensor_trim_differs_from_global() {
        let s = TaskVectorSet::from_vectors(vec![TaskVector::from_flat(
            "t",
            &[("a", &[10.0, 9.0]), ("b", &[1.0, 0.5])],
        )])
        .unwrap();
        let global = ties_merged_vector(&s, 0.5, TrimGranularity::Global).unwrap();
        let local = ties_merged_vector(&s, 0.5, TrimGranularity::PerTensor).unwrap();
        assert_eq!(global.flatten_concat(), vec![10.0, 9.0, 0.0, 0.0]);
        assert_eq!(local.flatten_concat(), vec![10.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn invalid_keep() {
        assert!(ties_merged_vector(&set(&[&[1.0]]), 0.0, TrimGranularity::Global).is_err());
        assert!(ties_merged_vector(&set(&[&[1.0]]), 1.5, TrimGranularity::Global).is_err());
    }

    #[test]
    fn lambda_scales_output() {
        let s = set(&[&[2.0, -4.0], &[2.0, 4.0]]);
        let v = ties_merged_vector(&s, 1.0, TrimGranularity::Global).unwrap();
        assert_eq!(v.scale(0.5).flatten_concat(), vec![1.0, 0.0]);
    }

    fn f32_vector(d: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(
            prop_oneof![
                (-4i32..=4).prop_map(|v| v as f64),
                (-1.0f32..1.0).prop_map(|v| v as f64),
            ],
            d,
        )
    }

    proptest! {
        #[test]
        fn matches_reference(
            (vectors, keep) in (1usize..=4, 1usize..=30).prop_flat_map(|(n, d)| (
                prop::collection::vec(f32_vector(d), n),
                prop_oneof![Just(1.0), Just(0.2), 0.01f64..1.0],
            ))
        ) {
            let refs: Vec<&[f64]> = vectors.iter().map(|v| v.as_slice()).collect();
            prop_assert_eq!(merged(&refs, keep), reference(&vectors, keep));
        }

        #[test]
        fn permutation_invariant(
            vectors in (2usize..=4, 1usize..=20)
                .prop_flat_map(|(n, d)| prop::collection::vec(f32_vector(d), n)),
        ) {
            let refs: Vec<&[f64]> = vectors.iter().map(|v| v.as_slice()).collect();
            let mut rev = refs.clone();
            rev.reverse();
            prop_assert_eq!(merged(&refs, 0.4), merged(&rev, 0.4));
        }
    }
}
