//! Elect, mask, rescale.
//!
//! A set of task vectors is merged into one unified task vector plus, per
//! task, a 1-bit mask and a scalar rescaler:
//!
//! 1. **Elect.** Per element, the unified sign is the sign of the sum over
//!    tasks. Its magnitude is the largest `|τ_t|` among tasks carrying that
//!    sign. A zero sum elects 0.
//! 2. **Mask.** Bit `M_t[p]` is set iff `τ_t[p]` and `τ_uni[p]` are both
//!    nonzero with the same sign.
//! 3. **Rescale.** `λ_t = Σ|τ_t| / Σ|M_t ⊙ τ_uni|` over the whole model, or 1
//!    when the denominator is 0.
//!
//! Task `t` is recovered as `τ̂_t = λ_t · M_t ⊙ τ_uni`.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::checkpoint::TensorSpec;
use crate::error::{Error, Result};
use crate::numeric::{self, sum_term_pairs, CHUNK};
use crate::store::mask::PackedMask;
use crate::task_vector::{Array, TaskVector, TaskVectorSet};

/// Per-tensor masks keyed by tensor name.
pub type Mask = BTreeMap<String, PackedMask>;

/// The elected common task vector.
#[derive(Clone, Debug, PartialEq)]
pub struct UnifiedTaskVector(TaskVector);

impl UnifiedTaskVector {
    pub const LABEL: &'static str = "unified";

    pub fn new(tensors: BTreeMap<String, Array>) -> Self {
        UnifiedTaskVector(TaskVector::new(Self::LABEL, tensors))
    }

    pub fn as_task_vector(&self) -> &TaskVector {
        &self.0
    }

    pub fn into_task_vector(self) -> TaskVector {
        self.0
    }
}

/// Whether one rescaler covers the whole model or each tensor gets its own.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RescalerScope {
    #[default]
    Global,
    PerTensor,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EmrOptions {
    pub rescaler_scope: RescalerScope,
}

/// Mask and rescaler for one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskModulator {
    pub task_label: String,
    pub mask: Mask,
    /// Whole-model rescaler.
    pub rescaler: f64,
    /// Per-tensor rescalers, present only under [`RescalerScope::PerTensor`].
    pub tensor_rescalers: Option<BTreeMap<String, f64>>,
}

impl TaskModulator {
    pub fn mask_ones(&self) -> usize {
        self.mask.values().map(PackedMask::count_ones).sum()
    }

    pub fn mask_bits(&self) -> usize {
        self.mask.values().map(PackedMask::bit_count).sum()
    }

    /// Fraction of set mask bits; 0 for an empty model.
    pub fn mask_density(&self) -> f64 {
        let bits = self.mask_bits();
        if bits == 0 {
            0.0
        } else {
            self.mask_ones() as f64 / bits as f64
        }
    }

    fn rescaler_for(&self, tensor: &str) -> f64 {
        self.tensor_rescalers
            .as_ref()
            .and_then(|m| m.get(tensor).copied())
            .unwrap_or(self.rescaler)
    }
}

/// Unified vector plus every task's modulator.
#[derive(Clone, Debug, PartialEq)]
pub struct EmrBundle {
    pub base_fingerprint: String,
    /// Names, shapes and output dtypes of the base checkpoint.
    pub schema: Vec<TensorSpec>,
    pub unified: UnifiedTaskVector,
    pub modulators: Vec<TaskModulator>,
    pub metadata: BTreeMap<String, String>,
}

impl EmrBundle {
    pub fn task_labels(&self) -> Vec<String> {
        self.modulators.iter().map(|m| m.task_label.clone()).collect()
    }

    pub fn modulator(&self, label: &str) -> Result<&TaskModulator> {
        self.modulators
            .iter()
            .find(|m| m.task_label == label)
            .ok_or_else(|| Error::UnknownTask {
                label: label.to_string(),
                available: self.task_labels(),
            })
    }

    /// Total element count of the unified vector.
    pub fn d(&self) -> usize {
        self.schema.iter().map(TensorSpec::numel).sum()
    }

    /// `λ_t · M_t ⊙ τ_uni` for the named task.
    pub fn reconstruct_task(&self, task_label: &str) -> Result<TaskVector> {
        let m = self.modulator(task_label)?;
        let tensors = self
            .unified
            .0
            .tensors()
            .par_iter()
            .map(|(name, u)| {
                let mask = &m.mask[name];
                let lambda = m.rescaler_for(name);
                (name.clone(), masked_scaled(u, mask, lambda))
            })
            .collect();
        Ok(TaskVector::new(task_label, tensors))
    }

    /// Checks internal consistency: modulators cover the unified schema.
    pub fn validate(&self) -> Result<()> {
        if self.modulators.is_empty() {
            return Err(Error::format("bundle", "bundle has no task modulators"));
        }
        let tensors = self.unified.0.tensors();
        if tensors.len() != self.schema.len() {
            return Err(Error::format("bundle", "unified vector does not match schema"));
        }
        for spec in &self.schema {
            match tensors.get(&spec.name) {
                Some(a) if a.shape == spec.shape => {}
                _ => {
                    return Err(Error::format(
                        "bundle",
                        format!("unified tensor `{}` does not match schema", spec.name),
                    ))
                }
            }
        }
        for m in &self.modulators {
            if m.mask.len() != self.schema.len() {
                return Err(Error::format(
                    "bundle",
                    format!("mask of task `{}` does not match schema", m.task_label),
                ));
            }
            for spec in &self.schema {
                match m.mask.get(&spec.name) {
                    Some(p) if p.bit_count() == spec.numel() => {}
                    _ => {
                        return Err(Error::format(
                            "bundle",
                            format!(
                                "mask of task `{}` for tensor `{}` does not match schema",
                                m.task_label, spec.name
                            ),
                        ))
                    }
                }
            }
        }
        Ok(())
    }
}

fn masked_scaled(u: &Array, mask: &PackedMask, lambda: f64) -> Array {
    let mut data = vec![0.0; u.len()];
    numeric::fill(&mut data, |i| if mask.get(i) { lambda * u.data[i] } else { 0.0 });
    Array {
        shape: u.shape.clone(),
        data,
    }
}

/// Elects the unified task vector.
pub fn elect_unified(set: &TaskVectorSet) -> Result<UnifiedTaskVector> {
    let vectors = set.vectors();
    if vectors.is_empty() {
        return Err(Error::config("cannot elect from an empty task-vector set"));
    }
    let tensors = set
        .schema()
        .par_iter()
        .map(|spec| {
            let columns: Vec<&[f64]> = vectors
                .iter()
                .map(|v| v.get(&spec.name).expect("schema checked").data.as_slice())
                .collect();
            let mut data = vec![0.0; spec.numel()];
            data.par_chunks_mut(CHUNK).enumerate().for_each(|(c, out)| {
                let start = c * CHUNK;
                let mut column = Vec::with_capacity(columns.len());
                for (j, slot) in out.iter_mut().enumerate() {
                    column.clear();
                    column.extend(columns.iter().map(|col| col[start + j]));
                    *slot = elect_element(&column);
                }
            });
            (
                spec.name.clone(),
                Array {
                    shape: spec.shape.clone(),
                    data,
                },
            )
        })
        .collect();
    Ok(UnifiedTaskVector::new(tensors))
}

/// Sign of the sum, magnitude of the largest same-signed entry.
fn elect_element(values: &[f64]) -> f64 {
    let sign = numeric::exact_sum_sign(values);
    if sign == 0 {
        return 0.0;
    }
    let mut best = 0.0f64;
    for &v in values {
        let agrees = if sign > 0 { v > 0.0 } else { v < 0.0 };
        if agrees && v.abs() > best.abs() {
            best = v;
        }
    }
    best
}

#[inline]
fn same_strict_sign(a: f64, b: f64) -> bool {
    // Sign comparison instead of `a * b > 0`, which underflows for tiny values.
    (a > 0.0 && b > 0.0) || (a < 0.0 && b < 0.0)
}

/// `M = (τ_t ⊙ reference > 0)` per tensor.
pub fn derive_mask(tau_t: &TaskVector, reference: &TaskVector) -> Result<Mask> {
    tau_t.check_schema(reference)?;
    Ok(tau_t
        .tensors()
        .par_iter()
        .map(|(name, a)| {
            let b = &reference.tensors()[name];
            (name.clone(), sign_agreement_mask(&a.data, &b.data))
        })
        .collect())
}

fn sign_agreement_mask(a: &[f64], b: &[f64]) -> PackedMask {
    let n = a.len();
    let mut bytes = vec![0u8; n.div_ceil(8)];
    bytes
        .par_chunks_mut(CHUNK / 8)
        .enumerate()
        .for_each(|(c, out)| {
            let start = c * CHUNK;
            for (k, byte) in out.iter_mut().enumerate() {
                let base = start + 8 * k;
                let mut acc = 0u8;
                for bit in 0..8.min(n - base) {
                    if same_strict_sign(a[base + bit], b[base + bit]) {
                        acc |= 1 << bit;
                    }
                }
                *byte = acc;
            }
        });
    PackedMask::from_raw_parts(n, bytes)
}

fn check_mask(mask: &Mask, tau_t: &TaskVector) -> Result<()> {
    if mask.len() != tau_t.tensors().len() {
        return Err(Error::alignment("mask does not cover the task vector's tensors"));
    }
    for (name, a) in tau_t.tensors() {
        match mask.get(name) {
            Some(m) if m.bit_count() == a.len() => {}
            _ => {
                return Err(Error::alignment(format!(
                    "mask for tensor `{name}` does not match the task vector"
                )))
            }
        }
    }
    Ok(())
}

/// Per-tensor `(Σ|τ_t|, Σ|M ⊙ reference|)`.
fn magnitude_sums(
    tau_t: &TaskVector,
    reference: &TaskVector,
    mask: &Mask,
) -> Vec<(String, (f64, f64))> {
    tau_t
        .tensors()
        .iter()
        .map(|(name, a)| {
            let b = &reference.tensors()[name].data;
            let m = &mask[name];
            let sums = sum_term_pairs(a.len(), |i| {
                let masked = if m.get(i) { b[i].abs() } else { 0.0 };
                (a.data[i].abs(), masked)
            });
            (name.clone(), sums)
        })
        .collect()
}

fn ratio_or_one(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        1.0
    } else {
        num / den
    }
}

/// Whole-model rescaler `Σ|τ_t| / Σ|M ⊙ reference|`, 1 when the denominator is 0.
pub fn derive_rescaler(tau_t: &TaskVector, reference: &TaskVector, mask: &Mask) -> Result<f64> {
    tau_t.check_schema(reference)?;
    check_mask(mask, tau_t)?;
    let sums = magnitude_sums(tau_t, reference, mask);
    let nums: Vec<f64> = sums.iter().map(|(_, (n, _))| *n).collect();
    let dens: Vec<f64> = sums.iter().map(|(_, (_, d))| *d).collect();
    Ok(ratio_or_one(
        numeric::pairwise_sum(&nums),
        numeric::pairwise_sum(&dens),
    ))
}

/// One rescaler per tensor, each with the same zero-denominator fallback.
pub fn derive_tensor_rescalers(
    tau_t: &TaskVector,
    reference: &TaskVector,
    mask: &Mask,
) -> Result<BTreeMap<String, f64>> {
    tau_t.check_schema(reference)?;
    check_mask(mask, tau_t)?;
    Ok(magnitude_sums(tau_t, reference, mask)
        .into_iter()
        .map(|(name, (n, d))| (name, ratio_or_one(n, d)))
        .collect())
}

/// Runs election, then mask and rescaler derivation for every task.
pub fn emr_merge(set: &TaskVectorSet, options: &EmrOptions) -> Result<EmrBundle> {
    let unified = elect_unified(set)?;
    let reference = unified.as_task_vector();
    let modulators = set
        .vectors()
        .iter()
        .map(|tau| {
            let mask = derive_mask(tau, reference)?;
            let rescaler = derive_rescaler(tau, reference, &mask)?;
            let tensor_rescalers = match options.rescaler_scope {
                RescalerScope::Global => None,
                RescalerScope::PerTensor => Some(derive_tensor_rescalers(tau, reference, &mask)?),
            };
            Ok(TaskModulator {
                task_label: tau.label().to_string(),
                mask,
                rescaler,
                tensor_rescalers,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EmrBundle {
        base_fingerprint: set.base_fingerprint().to_string(),
        schema: set.schema().to_vec(),
        unified,
        modulators,
        metadata: BTreeMap::new(),
    })
}

/// Output of [`modulate`].
#[derive(Clone, Debug, PartialEq)]
pub struct Modulated {
    pub mask: Mask,
    pub rescaler: f64,
    pub vector: TaskVector,
}

/// Masks and rescales an arbitrary merged task vector toward `tau_t`.
///
/// With `merged` set to the elected unified vector this reproduces
/// [`EmrBundle::reconstruct_task`].
pub fn modulate(merged: &TaskVector, tau_t: &TaskVector) -> Result<Modulated> {
    let mask = derive_mask(tau_t, merged)?;
    let rescaler = derive_rescaler(tau_t, merged, &mask)?;
    let tensors = merged
        .tensors()
        .par_iter()
        .map(|(name, u)| (name.clone(), masked_scaled(u, &mask[name], rescaler)))
        .collect();
    Ok(Modulated {
        mask,
        rescaler,
        vector: TaskVector::new(tau_t.label(), tensors),
    })
}

/// Mask density in `[0, 1]` for each task, in bundle order.
pub fn mask_densities(bundle: &EmrBundle) -> Vec<(String, f64)> {
    bundle
        .modulators
        .iter()
        .map(|m| (m.task_label.clone(), m.mask_density()))
        .collect()
}
