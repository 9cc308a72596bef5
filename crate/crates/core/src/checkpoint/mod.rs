//! Checkpoint containers: typed dense tensors keyed by name, stored in the
//! safetensors layout.
//!
//! ```text
//! [u64 LE header length N][N bytes JSON header][data region]
//! ```
//!
//! The header maps each tensor name to `{"dtype", "shape", "data_offsets"}`,
//! offsets relative to the start of the data region, plus an optional
//! `"__metadata__"` string map.

mod safetensors;
mod tensor;

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use safetensors::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint};
pub use tensor::{ComputeDType, DType, Tensor};

pub(crate) use tensor::{encode, numel};

/// Ordered tensor map. Iteration is lexicographic by name, the canonical
/// order used by every downstream flattening and file layout.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, Tensor>,
    metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_metadata(mut self, metadata: BTreeMap<String, String>) -> Self {
        self.metadata = metadata;
        self
    }

    /// Inserts a tensor, returning the previous tensor of that name if any.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn metadata_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.metadata
    }

    /// Total element count over all tensors.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Schema (name, dtype, shape) in canonical order.
    pub fn schema(&self) -> Vec<TensorSpec> {
        self.tensors
            .iter()
            .map(|(name, t)| TensorSpec {
                name: name.clone(),
                dtype: t.dtype(),
                shape: t.shape().to_vec(),
            })
            .collect()
    }

    /// SHA-256 over every tensor's name, dtype, shape and data bytes in
    /// canonical order. Metadata does not participate.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            hasher.update((name.len() as u64).to_le_bytes());
            hasher.update(name.as_bytes());
            hasher.update(t.dtype().as_str().as_bytes());
            hasher.update((t.shape().len() as u64).to_le_bytes());
            for &dim in t.shape() {
                hasher.update((dim as u64).to_le_bytes());
            }
            hasher.update((t.bytes().len() as u64).to_le_bytes());
            hasher.update(t.bytes());
        }
        format!("sha256:{}", hex::encode(hasher.finalize()))
    }
}

/// Name, dtype and shape of one tensor.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }
}

/// Result of a successful [`validate_aligned`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignmentSummary {
    /// Common tensor names in canonical order.
    pub names: Vec<String>,
    /// Total parameter count.
    pub d: usize,
}

/// Checks that every model carries exactly the base's tensor names with
/// identical shapes. Dtypes may differ.
pub fn validate_aligned(base: &Checkpoint, models: &[Checkpoint]) -> Result<AlignmentSummary> {
    if models.is_empty() {
        return Err(Error::alignment("at least one model is required"));
    }
    for (idx, model) in models.iter().enumerate() {
        check_same_schema(base, model, idx)?;
    }
    Ok(AlignmentSummary {
        names: base.tensors.keys().cloned().collect(),
        d: base.numel(),
    })
}

fn check_same_schema(base: &Checkpoint, model: &Checkpoint, idx: usize) -> Result<()> {
    for (name, bt) in &base.tensors {
        match model.tensors.get(name) {
            None => {
                return Err(Error::alignment(format!(
                    "model {idx} is missing tensor `{name}` present in base"
                )))
            }
            Some(mt) if mt.shape() != bt.shape() => {
                return Err(Error::alignment(format!(
                    "model {idx} tensor `{name}` has shape {:?}, base has {:?}",
                    mt.shape(),
                    bt.shape()
                )))
            }
            Some(_) => {}
        }
    }
    if let Some(extra) = model.names().find(|n| !base.tensors.contains_key(*n)) {
        return Err(Error::alignment(format!(
            "model {idx} has extra tensor `{extra}` absent from base"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ckpt(entries: &[(&str, Vec<usize>)]) -> Checkpoint {
        let mut c = Checkpoint::new();
        for (name, shape) in entries {
            let n = numel(shape);
            c.insert(*name, Tensor::from_f32(shape.clone(), &vec![0.5; n]).unwrap());
        }
        c
    }

    #[test]
    fn aligned_counts_parameters() {
        let base = ckpt(&[("w", vec![2, 2])]);
        let models = vec![ckpt(&[("w", vec![2, 2])]), ckpt(&[("w", vec![2, 2])])];
        let s = validate_aligned(&base, &models).unwrap();
        assert_eq!(s.d, 4);
        assert_eq!(s.names, vec!["w".to_string()]);
    }

    #[test]
    fn missing_tensor_is_named() {
        let base = ckpt(&[("b", vec![2]), ("w", vec![2])]);
        let err = validate_aligned(&base, &[ckpt(&[("w", vec![2])])]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("`b`") && msg.contains("model 0"), "{msg}");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn extra_tensor_is_named() {
        let base = ckpt(&[("w", vec![2])]);
        let good = ckpt(&[("w", vec![2])]);
        let bad = ckpt(&[("w", vec![2]), ("z", vec![1])]);
        let msg = validate_aligned(&base, &[good, bad]).unwrap_err().to_string();
        assert!(msg.contains("`z`") && msg.contains("model 1"), "{msg}");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let base = ckpt(&[("w", vec![2, 2])]);
        let msg = validate_aligned(&base, &[ckpt(&[("w", vec![4])])])
            .unwrap_err()
            .to_string();
        assert!(msg.contains("shape") && msg.contains("`w`"), "{msg}");
    }

    #[test]
    fn dtype_differences_allowed() {
        let base = ckpt(&[("w", vec![2])]);
        let mut m = Checkpoint::new();
        m.insert("w", Tensor::from_f64(DType::F16, vec![2], &[1.0, 2.0]).unwrap());
        assert!(validate_aligned(&base, &[m]).is_ok());
    }

    #[test]
    fn summary_symmetric_in_model_order() {
        let base = ckpt(&[("a", vec![3]), ("b", vec![1, 2])]);
        let m1 = ckpt(&[("a", vec![3]), ("b", vec![1, 2])]);
        let mut m2 = m1.clone();
        m2.insert("a", Tensor::from_f64(DType::F64, vec![3], &[1.0, 2.0, 3.0]).unwrap());
        let s1 = validate_aligned(&base, &[m1.clone(), m2.clone()]).unwrap();
        let s2 = validate_aligned(&base, &[m2, m1]).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn fingerprint_tracks_data_not_metadata() {
        let a = ckpt(&[("w", vec![2])]);
        let mut b = a.clone();
        b.metadata_mut().insert("k".into(), "v".into());
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.insert("w", Tensor::from_f32(vec![2], &[0.5, 0.25]).unwrap());
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
