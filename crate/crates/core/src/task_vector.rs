//! Task vectors: per-tensor differences between a finetuned checkpoint and
//! its pretrained base.
//!
//! Values are held as f64. The difference of two f32 weights is always exact
//! in f64, so `base + (model - base)` reproduces `model` bit for bit after the
//! final cast.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use crate::checkpoint::{
    encode, validate_aligned, Checkpoint, ComputeDType, Tensor, TensorSpec,
};
use crate::error::{Error, Result};

/// Dense f64 values with a shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if crate::checkpoint::numel(&shape) != data.len() {
            return Err(Error::alignment(format!(
                "shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        Ok(Array { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = crate::checkpoint::numel(&shape);
        Array {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskVector {
    label: String,
    tensors: BTreeMap<String, Array>,
}

impl TaskVector {
    pub fn new(label: impl Into<String>, tensors: BTreeMap<String, Array>) -> Self {
        TaskVector {
            label: label.into(),
            tensors,
        }
    }

    /// Convenience constructor from `(name, values)` pairs of 1-D tensors.
    pub fn from_flat(label: impl Into<String>, tensors: &[(&str, &[f64])]) -> Self {
        let map = tensors
            .iter()
            .map(|(name, values)| {
                (
                    name.to_string(),
                    Array {
                        shape: vec![values.len()],
                        data: values.to_vec(),
                    },
                )
            })
            .collect();
        TaskVector::new(label, map)
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn tensors(&self) -> &BTreeMap<String, Array> {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.tensors.get(name)
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Array::len).sum()
    }

    /// Same names and shapes, every element zero.
    pub fn zeros_like(&self, label: impl Into<String>) -> TaskVector {
        let tensors = self
            .tensors
            .iter()
            .map(|(n, a)| (n.clone(), Array::zeros(a.shape.clone())))
            .collect();
        TaskVector::new(label, tensors)
    }

    /// Row-major tensors concatenated in lexicographic name order.
    pub fn flatten_concat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for a in self.tensors.values() {
            out.extend_from_slice(&a.data);
        }
        out
    }

    /// Errors unless `other` has exactly the same names and shapes.
    pub fn check_schema(&self, other: &TaskVector) -> Result<()> {
        if self.tensors.len() != other.tensors.len()
            || self.tensors.keys().ne(other.tensors.keys())
        {
            let ours: BTreeSet<_> = self.tensors.keys().collect();
            let theirs: BTreeSet<_> = other.tensors.keys().collect();
            let diff: Vec<_> = ours.symmetric_difference(&theirs).collect();
            return Err(Error::alignment(format!(
                "task vectors `{}` and `{}` differ in tensor names: {diff:?}",
                self.label, other.label
            )));
        }
        for (name, a) in &self.tensors {
            let b = &other.tensors[name];
            if a.shape != b.shape {
                return Err(Error::alignment(format!(
                    "tensor `{name}` has shape {:?} in `{}` but {:?} in `{}`",
                    a.shape, self.label, b.shape, other.label
                )));
            }
        }
        Ok(())
    }

    pub fn scale(&self, coeff: f64) -> TaskVector {
        let tensors = self
            .tensors
            .iter()
            .map(|(n, a)| {
                (
                    n.clone(),
                    Array {
                        shape: a.shape.clone(),
                        data: a.data.iter().map(|v| v * coeff).collect(),
                    },
                )
            })
            .collect();
        TaskVector::new(self.label.clone(), tensors)
    }
}

/// `model - base`, both read under `compute`, difference in f64.
pub fn compute_task_vector(
    model: &Checkpoint,
    base: &Checkpoint,
    label: impl Into<String>,
    compute: ComputeDType,
) -> Result<TaskVector> {
    validate_aligned(base, std::slice::from_ref(model))?;
    let tensors = base
        .tensors()
        .par_iter()
        .map(|(name, bt)| {
            let b = bt.values(compute);
            let m = model.get(name).expect("aligned").values(compute);
            let data = m.iter().zip(&b).map(|(m, b)| m - b).collect();
            (name.clone(), Array::new(bt.shape().to_vec(), data).expect("aligned"))
        })
        .collect();
    Ok(TaskVector::new(label, tensors))
}

/// `base + coeff * tau`, cast back to each base tensor's dtype.
///
/// Elements whose increment is zero keep the base bytes untouched.
pub fn apply_task_vector(base: &Checkpoint, tau: &TaskVector, coeff: f64) -> Result<Checkpoint> {
    check_against_checkpoint(tau, base)?;
    let tensors: Vec<(String, Tensor)> = base
        .tensors()
        .par_iter()
        .map(|(name, bt)| {
            let delta = &tau.tensors[name].data;
            let mut values = bt.to_f64_vec();
            let mut touched = false;
            for (v, d) in values.iter_mut().zip(delta) {
                let inc = coeff * d;
                if inc != 0.0 {
                    *v += inc;
                    touched = true;
                }
            }
            let tensor = if touched {
                Tensor::new(bt.dtype(), bt.shape().to_vec(), encode(bt.dtype(), &values))
                    .expect("same shape")
            } else {
                bt.clone()
            };
            (name.clone(), tensor)
        })
        .collect();
    let mut out = Checkpoint::new().with_metadata(base.metadata().clone());
    for (name, t) in tensors {
        out.insert(name, t);
    }
    Ok(out)
}

fn check_against_checkpoint(tau: &TaskVector, base: &Checkpoint) -> Result<()> {
    if tau.tensors.len() != base.len() {
        return Err(Error::alignment(format!(
            "task vector `{}` has {} tensors, base has {}",
            tau.label,
            tau.tensors.len(),
            base.len()
        )));
    }
    for (name, bt) in base.iter() {
        match tau.tensors.get(name) {
            None => {
                return Err(Error::alignment(format!(
                    "task vector `{}` is missing tensor `{name}`",
                    tau.label
                )))
            }
            Some(a) if a.shape != bt.shape() => {
                return Err(Error::alignment(format!(
                    "tensor `{name}` has shape {:?} in task vector `{}`, base has {:?}",
                    a.shape,
                    tau.label,
                    bt.shape()
                )))
            }
            Some(_) => {}
        }
    }
    Ok(())
}

/// Task vectors of several models against one base.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskVectorSet {
    base_fingerprint: String,
    schema: Vec<TensorSpec>,
    vectors: Vec<TaskVector>,
    d: usize,
}

impl TaskVectorSet {
    /// Builds the set from labelled finetuned checkpoints.
    pub fn from_checkpoints(
        base: &Checkpoint,
        models: &[(String, Checkpoint)],
        compute: ComputeDType,
    ) -> Result<Self> {
        let vectors = models
            .iter()
            .enumerate()
            .map(|(idx, (label, m))| {
                compute_task_vector(m, base, label.clone(), compute).map_err(|e| match e {
                    Error::Alignment(msg) => {
                        Error::Alignment(msg.replace("model 0", &format!("model {idx} (`{label}`)")))
                    }
                    other => other,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        TaskVectorSet::new(base.fingerprint(), base.schema(), vectors)
    }

    /// Assembles a set from precomputed vectors; all must match `schema`.
    pub fn new(
        base_fingerprint: impl Into<String>,
        schema: Vec<TensorSpec>,
        vectors: Vec<TaskVector>,
    ) -> Result<Self> {
        let mut labels = BTreeSet::new();
        for v in &vectors {
            if !labels.insert(v.label()) {
                return Err(Error::config(format!("duplicate task label `{}`", v.label())));
            }
            if v.tensors.len() != schema.len() {
                return Err(Error::alignment(format!(
                    "task vector `{}` has {} tensors, schema has {}",
                    v.label(),
                    v.tensors.len(),
                    schema.len()
                )));
            }
            for spec in &schema {
                match v.tensors.get(&spec.name) {
                    Some(a) if a.shape == spec.shape => {}
                    Some(a) => {
                        return Err(Error::alignment(format!(
                            "tensor `{}` has shape {:?} in `{}`, schema has {:?}",
                            spec.name,
                            a.shape,
                            v.label(),
                            spec.shape
                        )))
                    }
                    None => {
                        return Err(Error::alignment(format!(
                            "task vector `{}` is missing tensor `{}`",
                            v.label(),
                            spec.name
                        )))
                    }
                }
            }
        }
        let d = schema.iter().map(TensorSpec::numel).sum();
        Ok(TaskVectorSet {
            base_fingerprint: base_fingerprint.into(),
            schema,
            vectors,
            d,
        })
    }

    /// A set with no base checkpoint, for in-memory experiments. Schema dtypes
    /// are F32 and the fingerprint is derived from the schema alone.
    pub fn from_vectors(vectors: Vec<TaskVector>) -> Result<Self> {
        let first = vectors
            .first()
            .ok_or_else(|| Error::config("at least one task vector is required"))?;
        let schema: Vec<TensorSpec> = first
            .tensors()
            .iter()
            .map(|(name, a)| TensorSpec {
                name: name.clone(),
                dtype: crate::checkpoint::DType::F32,
                shape: a.shape.clone(),
            })
            .collect();
        let mut zero_base = Checkpoint::new();
        for spec in &schema {
            zero_base.insert(
                spec.name.clone(),
                Tensor::from_f64(spec.dtype, spec.shape.clone(), &vec![0.0; spec.numel()])?,
            );
        }
        TaskVectorSet::new(zero_base.fingerprint(), schema, vectors)
    }

    pub fn base_fingerprint(&self) -> &str {
        &self.base_fingerprint
    }

    pub fn schema(&self) -> &[TensorSpec] {
        &self.schema
    }

    pub fn vectors(&self) -> &[TaskVector] {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Total element count per task vector.
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn labels(&self) -> Vec<String> {
        self.vectors.iter().map(|v| v.label.clone()).collect()
    }

    /// Replaces the vectors (e.g. after preprocessing), keeping base and schema.
    pub fn with_vectors(&self, vectors: Vec<TaskVector>) -> Result<Self> {
        TaskVectorSet::new(self.base_fingerprint.clone(), self.schema.clone(), vectors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::DType;
    use proptest::prelude::*;

    fn f32_ckpt(entries: &[(&str, &[f32])]) -> Checkpoint {
        let mut c = Checkpoint::new();
        for (name, v) in entries {
            c.insert(*name, Tensor::from_f32(vec![v.len()], v).unwrap());
        }
        c
    }

    #[test]
    fn subtracts_base() {
        let tau = compute_task_vector(
            &f32_ckpt(&[("w", &[3.0, 1.0])]),
            &f32_ckpt(&[("w", &[1.0, 1.0])]),
            "t",
            ComputeDType::F32,
        )
        .unwrap();
        assert_eq!(tau.get("w").unwrap().data, vec![2.0, 0.0]);
    }

    #[test]
    fn model_equal_to_base_gives_zeros() {
        let c = f32_ckpt(&[("a", &[0.3, -7.0]), ("b", &[1e-3])]);
        let tau = compute_task_vector(&c, &c, "t", ComputeDType::F32).unwrap();
        assert!(tau.flatten_concat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mixed_precision_difference_matches_f64_reference() {
        let base_vals: Vec<f32> = (0..200).map(|i| (i as f32 * 0.37).sin() * 10.0).collect();
        let model_vals: Vec<f64> = (0..200).map(|i| (i as f64 * 0.11).cos() * 10.0).collect();
        let mut model = Checkpoint::new();
        model.insert("w", Tensor::from_f64(DType::F16, vec![200], &model_vals).unwrap());
        let base = f32_ckpt(&[("w", &base_vals)]);
        let tau = compute_task_vector(&model, &base, "t", ComputeDType::F32).unwrap();

        // Reference: decode the stored F16 bits independently via `half`.
        let m16 = model.get("w").unwrap().bytes();
        for (i, &got) in tau.get("w").unwrap().data.iter().enumerate() {
            let h = half::f16::from_le_bytes([m16[2 * i], m16[2 * i + 1]]);
            let reference = f64::from(h) - base_vals[i] as f64;
            assert!((got - reference).abs() < 1e-3);
        }
    }

    #[test]
    fn apply_inverts_compute() {
        let base = f32_ckpt(&[("w", &[0.1, -2.0, 1e-8, 3.5e4])]);
        let model = f32_ckpt(&[("w", &[0.7, -2.000_001, -4e-9, 3.4e4])]);
        let tau = compute_task_vector(&model, &base, "t", ComputeDType::F32).unwrap();
        assert_eq!(apply_task_vector(&base, &tau, 1.0).unwrap(), model);
    }

    #[test]
    fn zero_coefficient_keeps_base() {
        let base = f32_ckpt(&[("w", &[1.0, -0.0, 2.5])]);
        let tau = TaskVector::from_flat("t", &[("w", &[5.0, 5.0, 5.0])]);
        assert_eq!(apply_task_vector(&base, &tau, 0.0).unwrap(), base);
    }

    #[test]
    fn half_coefficient() {
        let base = f32_ckpt(&[("w", &[1.0])]);
        let tau = TaskVector::from_flat("t", &[("w", &[2.0])]);
        let out = apply_task_vector(&base, &tau, 0.5).unwrap();
        assert_eq!(out.get("w").unwrap().to_f64_vec(), vec![2.0]);
    }

    #[test]
    fn apply_schema_mismatch() {
        let base = f32_ckpt(&[("w", &[1.0, 2.0])]);
        let tau = TaskVector::from_flat("t", &[("w", &[2.0])]);
        assert_eq!(apply_task_vector(&base, &tau, 1.0).unwrap_err().exit_code(), 3);
        let tau = TaskVector::from_flat("t", &[("v", &[2.0, 1.0])]);
        assert!(apply_task_vector(&base, &tau, 1.0).is_err());
    }

    #[test]
    fn flatten_is_lexicographic() {
        let t = TaskVector::from_flat("t", &[("b", &[3.0]), ("a", &[1.0, 2.0])]);
        assert_eq!(t.flatten_concat(), vec![1.0, 2.0, 3.0]);
        let t = TaskVector::new("e", BTreeMap::new());
        assert!(t.flatten_concat().is_empty());
    }

    #[test]
    fn set_d_matches_flatten_length() {
        let base = f32_ckpt(&[("a", &[0.0; 3]), ("b", &[0.0; 4])]);
        let m = f32_ckpt(&[("a", &[1.0; 3]), ("b", &[2.0; 4])]);
        let set =
            TaskVectorSet::from_checkpoints(&base, &[("m".into(), m)], ComputeDType::F32).unwrap();
        assert_eq!(set.d(), 7);
        assert_eq!(set.vectors()[0].flatten_concat().len(), set.d());
    }

    #[test]
    fn set_rejects_duplicate_labels() {
        let base = f32_ckpt(&[("a", &[0.0])]);
        let models = vec![("x".to_string(), base.clone()), ("x".to_string(), base.clone())];
        let err = TaskVectorSet::from_checkpoints(&base, &models, ComputeDType::F32).unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn alignment_error_names_model() {
        let base = f32_ckpt(&[("a", &[0.0]), ("b", &[0.0])]);
        let bad = f32_ckpt(&[("a", &[0.0])]);
        let models = vec![("ok".to_string(), base.clone()), ("bad".to_string(), bad)];
        let msg = TaskVectorSet::from_checkpoints(&base, &models, ComputeDType::F32)
            .unwrap_err()
            .to_string();
        assert!(msg.contains("model 1") && msg.contains("`b`"), "{msg}");
    }

    #[test]
    fn f64_inputs_rounded_under_f32_compute() {
        let mut base = Checkpoint::new();
        base.insert("w", Tensor::from_f64(DType::F64, vec![1], &[0.0]).unwrap());
        let mut model = Checkpoint::new();
        model.insert("w", Tensor::from_f64(DType::F64, vec![1], &[0.1]).unwrap());
        let t32 = compute_task_vector(&model, &base, "t", ComputeDType::F32).unwrap();
        let t64 = compute_task_vector(&model, &base, "t", ComputeDType::F64).unwrap();
        assert_eq!(t32.get("w").unwrap().data[0], 0.1f32 as f64);
        assert_eq!(t64.get("w").unwrap().data[0], 0.1);
    }

    proptest! {
        #[test]
        fn apply_compute_identity_all_f32(
            pairs in prop::collection::vec((-1e3f32..1e3, -1e3f32..1e3), 1..64)
        ) {
            let (b, m): (Vec<f32>, Vec<f32>) = pairs.into_iter().unzip();
            let base = f32_ckpt(&[("w", &b)]);
            let model = f32_ckpt(&[("w", &m)]);
            let tau = compute_task_vector(&model, &base, "t", ComputeDType::F32).unwrap();
            prop_assert_eq!(apply_task_vector(&base, &tau, 1.0).unwrap(), model);
        }

        #[test]
        fn compute_is_linear(
            pairs in prop::collection::vec((-8000i32..8000, -8000i32..8000), 1..64)
        ) {
            // Dyadic values keep base + delta exact in f32.
            let b: Vec<f32> = pairs.iter().map(|p| p.0 as f32 / 8.0).collect();
            let delta: Vec<f32> = pairs.iter().map(|p| p.1 as f32 / 8.0).collect();
            let m: Vec<f32> = b.iter().zip(&delta).map(|(b, d)| b + d).collect();
            let tau = compute_task_vector(&f32_ckpt(&[("w", &m)]), &f32_ckpt(&[("w", &b)]), "t", ComputeDType::F32).unwrap();
            for (i, &v) in tau.get("w").unwrap().data.iter().enumerate() {
                prop_assert_eq!(v, delta[i] as f64);
            }
        }
    }
}
