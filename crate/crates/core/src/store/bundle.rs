//! Bundle container.
//!
//! ```text
//! [4B magic "EMRB"][u32 LE version][u64 LE index length][index JSON]
//! [unified data region][mask data region]
//! ```
//!
//! The index lists tasks, the tensor schema, rescalers, and byte ranges of
//! every unified tensor and task mask, each relative to the start of its
//! region. Unified values are little-endian F64; masks are packed LSB-first.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mask::{packed_len, Padding, PackedMask};
use crate::checkpoint::{DType, TensorSpec};
use crate::emr::{EmrBundle, TaskModulator, UnifiedTaskVector};
use crate::error::{Error, Result};
use crate::task_vector::Array;

pub const MAGIC: &[u8; 4] = b"EMRB";
pub const VERSION: u32 = 1;
/// Fixed prelude: magic, version, index length.
pub const PRELUDE_LEN: usize = 16;

const WHAT: &str = "bundle";
const UNIFIED_DTYPE: DType = DType::F64;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Index {
    base_fingerprint: Option<String>,
    tasks: Vec<String>,
    tensors: Vec<TensorSpec>,
    rescalers: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tensor_rescalers: Option<BTreeMap<String, BTreeMap<String, f64>>>,
    unified_dtype: DType,
    unified_offsets: BTreeMap<String, [u64; 2]>,
    mask_offsets: BTreeMap<String, BTreeMap<String, [u64; 2]>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    metadata: BTreeMap<String, String>,
}

/// Byte accounting of an encoded bundle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleSizes {
    /// Prelude plus JSON index.
    pub header_bytes: u64,
    pub unified_bytes: u64,
    pub mask_bytes: u64,
    /// Rescalers as F64 (they live in the index).
    pub rescaler_bytes: u64,
    pub total_bytes: u64,
}

impl BundleSizes {
    /// Mask bits plus one F64 rescaler per task.
    pub fn modulator_bytes(&self) -> u64 {
        self.mask_bytes + self.rescaler_bytes
    }
}

/// Bytes of N separate F32 task vectors of `d` elements.
pub fn separate_f32_bytes(tasks: usize, d: usize) -> u64 {
    (tasks as u64) * (d as u64) * 4
}

pub fn save_bundle(bundle: &EmrBundle, path: impl AsRef<Path>) -> Result<BundleSizes> {
    let path = path.as_ref();
    let (bytes, sizes) = encode_bundle(bundle)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(sizes)
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<EmrBundle> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bundle(&bytes).map(|(b, _)| b).map_err(|e| match e {
        Error::Format { what, msg } => Error::Format {
            what,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

pub fn encode_bundle(bundle: &EmrBundle) -> Result<(Vec<u8>, BundleSizes)> {
    bundle.validate()?;
    if bundle.base_fingerprint.is_empty() {
        return Err(Error::format(WHAT, "base fingerprint absent"));
    }

    let unified = bundle.unified.as_task_vector();
    let mut unified_offsets = BTreeMap::new();
    let mut unified_data = Vec::with_capacity(bundle.d() * UNIFIED_DTYPE.size());
    for spec in &bundle.schema {
        let a = &unified.tensors()[&spec.name];
        let begin = unified_data.len() as u64;
        for v in &a.data {
            unified_data.extend_from_slice(&v.to_le_bytes());
        }
        unified_offsets.insert(spec.name.clone(), [begin, unified_data.len() as u64]);
    }

    let mut mask_offsets = BTreeMap::new();
    let mut mask_data = Vec::new();
    let mut rescalers = BTreeMap::new();
    let mut tensor_rescalers = BTreeMap::new();
    for m in &bundle.modulators {
        let mut offsets = BTreeMap::new();
        for spec in &bundle.schema {
            let begin = mask_data.len() as u64;
            mask_data.extend_from_slice(m.mask[&spec.name].as_bytes());
            offsets.insert(spec.name.clone(), [begin, mask_data.len() as u64]);
        }
        mask_offsets.insert(m.task_label.clone(), offsets);
        rescalers.insert(m.task_label.clone(), m.rescaler);
        if let Some(per) = &m.tensor_rescalers {
            tensor_rescalers.insert(m.task_label.clone(), per.clone());
        }
    }
    for &v in rescalers.values().chain(tensor_rescalers.values().flat_map(|m| m.values())) {
        if !v.is_finite() {
            return Err(Error::format(WHAT, "rescaler is not finite"));
        }
    }

    let index = Index {
        base_fingerprint: Some(bundle.base_fingerprint.clone()),
        tasks: bundle.task_labels(),
        tensors: bundle.schema.clone(),
        rescalers,
        tensor_rescalers: (!tensor_rescalers.is_empty()).then_some(tensor_rescalers),
        unified_dtype: UNIFIED_DTYPE,
        unified_offsets,
        mask_offsets,
        metadata: bundle.metadata.clone(),
    };
    let index = serde_json::to_vec(&index).expect("index serializes");

    let mut out =
        Vec::with_capacity(PRELUDE_LEN + index.len() + unified_data.len() + mask_data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(index.len() as u64).to_le_bytes());
    out.extend_from_slice(&index);
    out.extend_from_slice(&unified_data);
    out.extend_from_slice(&mask_data);

    let sizes = BundleSizes {
        header_bytes: (PRELUDE_LEN + index.len()) as u64,
        unified_bytes: unified_data.len() as u64,
        mask_bytes: mask_data.len() as u64,
        rescaler_bytes: 8 * bundle.modulators.len() as u64,
        total_bytes: out.len() as u64,
    };
    Ok((out, sizes))
}

pub fn decode_bundle(bytes: &[u8]) -> Result<(EmrBundle, BundleSizes)> {
    if bytes.len() < PRELUDE_LEN {
        return Err(Error::format(WHAT, "truncated prelude"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(WHAT, "bad magic (expected \"EMRB\")"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::format(
            WHAT,
            format!("unsupported version {version} (expected {VERSION})"),
        ));
    }
    let index_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let index_end = (PRELUDE_LEN as u64)
        .checked_add(index_len)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| Error::format(WHAT, "truncated index"))? as usize;
    let index: Index = serde_json::from_slice(&bytes[PRELUDE_LEN..index_end])
        .map_err(|e| Error::format(WHAT, format!("index JSON: {e}")))?;

    let base_fingerprint = match index.base_fingerprint {
        Some(fp) if !fp.is_empty() => fp,
        _ => return Err(Error::format(WHAT, "base fingerprint absent")),
    };
    if index.unified_dtype != UNIFIED_DTYPE {
        return Err(Error::format(
            WHAT,
            format!("unsupported unified dtype {}", index.unified_dtype),
        ));
    }
    if index.tasks.is_empty() {
        return Err(Error::format(WHAT, "no tasks"));
    }

    let mut names = std::collections::BTreeSet::new();
    for spec in &index.tensors {
        if !names.insert(spec.name.as_str()) {
            return Err(Error::format(WHAT, format!("duplicate tensor `{}`", spec.name)));
        }
    }
    let schema: Vec<TensorSpec> = {
        let mut s = index.tensors.clone();
        s.sort_by(|a, b| a.name.cmp(&b.name));
        s
    };

    let unified_len: u64 = schema
        .iter()
        .map(|s| (s.numel() * UNIFIED_DTYPE.size()) as u64)
        .sum();
    let mask_len_per_task: u64 = schema.iter().map(|s| packed_len(s.numel()) as u64).sum();
    let mask_len = mask_len_per_task
        .checked_mul(index.tasks.len() as u64)
        .ok_or_else(|| Error::format(WHAT, "mask region size overflows"))?;
    let expected_total = index_end as u64 + unified_len + mask_len;
    if (bytes.len() as u64) < expected_total {
        return Err(Error::format(
            WHAT,
            format!(
                "truncated data: expected {expected_total} bytes, file has {}",
                bytes.len()
            ),
        ));
    }
    if (bytes.len() as u64) > expected_total {
        return Err(Error::format(WHAT, "trailing bytes after mask region"));
    }
    let unified_region = &bytes[index_end..index_end + unified_len as usize];
    let mask_region = &bytes[index_end + unified_len as usize..];

    // Unified tensors must tile their region in schema order.
    if index.unified_offsets.len() != schema.len() {
        return Err(Error::format(WHAT, "unified_offsets do not match tensors"));
    }
    let mut cursor = 0u64;
    let mut unified = BTreeMap::new();
    for spec in &schema {
        let want = (spec.numel() * UNIFIED_DTYPE.size()) as u64;
        let range = *index.unified_offsets.get(&spec.name).ok_or_else(|| {
            Error::format(WHAT, format!("no unified offsets for tensor `{}`", spec.name))
        })?;
        check_range(range, cursor, want, &format!("unified tensor `{}`", spec.name))?;
        let raw = &unified_region[range[0] as usize..range[1] as usize];
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        unified.insert(spec.name.clone(), Array::new(spec.shape.clone(), data)?);
        cursor = range[1];
    }

    let mut seen = std::collections::BTreeSet::new();
    let mut modulators = Vec::with_capacity(index.tasks.len());
    let mut cursor = 0u64;
    for task in &index.tasks {
        if !seen.insert(task.as_str()) {
            return Err(Error::format(WHAT, format!("duplicate task `{task}`")));
        }
        let offsets = index
            .mask_offsets
            .get(task)
            .ok_or_else(|| Error::format(WHAT, format!("no mask offsets for task `{task}`")))?;
        if offsets.len() != schema.len() {
            return Err(Error::format(
                WHAT,
                format!("mask offsets of task `{task}` do not match tensors"),
            ));
        }
        let mut mask = BTreeMap::new();
        for spec in &schema {
            let want = packed_len(spec.numel()) as u64;
            let range = *offsets.get(&spec.name).ok_or_else(|| {
                Error::format(
                    WHAT,
                    format!("no mask offsets for task `{task}` tensor `{}`", spec.name),
                )
            })?;
            check_range(range, cursor, want, &format!("mask `{task}`/`{}`", spec.name))?;
            let raw = mask_region[range[0] as usize..range[1] as usize].to_vec();
            let packed = PackedMask::from_bytes(spec.numel(), raw, Padding::Strict)
                .map_err(|e| Error::format(WHAT, format!("mask `{task}`/`{}`: {e}", spec.name)))?;
            mask.insert(spec.name.clone(), packed);
            cursor = range[1];
        }
        let rescaler = *index
            .rescalers
            .get(task)
            .ok_or_else(|| Error::format(WHAT, format!("no rescaler for task `{task}`")))?;
        let tensor_rescalers = index
            .tensor_rescalers
            .as_ref()
            .map(|all| {
                all.get(task).cloned().ok_or_else(|| {
                    Error::format(WHAT, format!("no per-tensor rescalers for task `{task}`"))
                })
            })
            .transpose()?;
        modulators.push(TaskModulator {
            task_label: task.clone(),
            mask,
            rescaler,
            tensor_rescalers,
        });
    }
    if index.mask_offsets.len() != index.tasks.len() || index.rescalers.len() != index.tasks.len()
    {
        return Err(Error::format(WHAT, "index lists entries for undeclared tasks"));
    }

    let bundle = EmrBundle {
        base_fingerprint,
        schema,
        unified: UnifiedTaskVector::new(unified),
        modulators,
        metadata: index.metadata,
    };
    bundle.validate()?;
    let sizes = BundleSizes {
        header_bytes: index_end as u64,
        unified_bytes: unified_len,
        mask_bytes: mask_len,
        rescaler_bytes: 8 * index.tasks.len() as u64,
        total_bytes: bytes.len() as u64,
    };
    Ok((bundle, sizes))
}

fn check_range(range: [u64; 2], cursor: u64, want: u64, what: &str) -> Result<()> {
    if range[0] != cursor {
        return Err(Error::format(
            WHAT,
            format!("{what} starts at {} but the previous range ends at {cursor}", range[0]),
        ));
    }
    if range[1] < range[0] || range[1] - range[0] != want {
        return Err(Error::format(
            WHAT,
            format!("{what} spans {:?}, expected {want} bytes", range),
        ));
    }
    Ok(())
}

/// Sizes of an existing bundle file, read from its prelude and index.
pub fn inspect_sizes(path: impl AsRef<Path>) -> Result<(EmrBundle, BundleSizes)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bundle(&bytes)
}
