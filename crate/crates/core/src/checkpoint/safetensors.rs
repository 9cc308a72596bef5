use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Checkpoint, DType, Tensor};
use crate::error::{Error, Result};

const WHAT: &str = "checkpoint";
const METADATA_KEY: &str = "__metadata__";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Format { what, msg } => Error::Format {
            what,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(ckpt)).map_err(|e| Error::io(path, e))
}

/// Parses a safetensors byte buffer.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 {
        return Err(Error::format(WHAT, "file shorter than the 8-byte header length"));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let header_end = 8u64
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| Error::format(WHAT, "header length exceeds file size"))?
        as usize;
    let header = std::str::from_utf8(&bytes[8..header_end])
        .map_err(|e| Error::format(WHAT, format!("header is not UTF-8: {e}")))?;
    let header: BTreeMap<String, Value> = serde_json::from_str(header)
        .map_err(|e| Error::format(WHAT, format!("header JSON: {e}")))?;
    let data = &bytes[header_end..];

    let mut metadata = BTreeMap::new();
    let mut entries = Vec::with_capacity(header.len());
    for (name, value) in header {
        if name == METADATA_KEY {
            metadata = serde_json::from_value(value)
                .map_err(|e| Error::format(WHAT, format!("__metadata__: {e}")))?;
            continue;
        }
        let entry: HeaderEntry = serde_json::from_value(value)
            .map_err(|e| Error::format(WHAT, format!("entry `{name}`: {e}")))?;
        entries.push((name, entry));
    }

    let mut spans = Vec::with_capacity(entries.len());
    let mut tensors = BTreeMap::new();
    for (name, entry) in entries {
        let dtype: DType = entry.dtype.parse()?;
        let [begin, end] = entry.data_offsets;
        if begin > end {
            return Err(Error::format(
                WHAT,
                format!("tensor `{name}` has reversed data_offsets [{begin}, {end}]"),
            ));
        }
        if end > data.len() as u64 {
            return Err(Error::format(
                WHAT,
                format!(
                    "tensor `{name}`: offset out of bounds ({end} > data region of {} bytes)",
                    data.len()
                ),
            ));
        }
        let (begin, end) = (begin as usize, end as usize);
        let tensor = Tensor::new(dtype, entry.shape, data[begin..end].to_vec())
            .map_err(|e| Error::format(WHAT, format!("tensor `{name}`: {e}")))?;
        spans.push((begin, end, name.clone()));
        tensors.insert(name, tensor);
    }

    // Data ranges must tile the data region exactly.
    spans.sort();
    let mut cursor = 0usize;
    for (begin, end, name) in &spans {
        if *begin < cursor {
            return Err(Error::format(
                WHAT,
                format!("tensor `{name}` overlaps the previous tensor's data range"),
            ));
        }
        if *begin > cursor {
            return Err(Error::format(
                WHAT,
                format!("gap in data region before tensor `{name}` (at byte {cursor})"),
            ));
        }
        cursor = *end;
    }
    if cursor != data.len() {
        return Err(Error::format(
            WHAT,
            format!(
                "data region has {} trailing bytes not owned by any tensor",
                data.len() - cursor
            ),
        ));
    }

    Ok(Checkpoint { tensors, metadata })
}

/// Serializes a checkpoint; tensors are laid out contiguously in name order.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut header = serde_json::Map::new();
    if !ckpt.metadata.is_empty() {
        header.insert(
            METADATA_KEY.to_string(),
            serde_json::to_value(&ckpt.metadata).expect("string map"),
        );
    }
    let mut offset = 0u64;
    for (name, t) in &ckpt.tensors {
        let len = t.bytes().len() as u64;
        let entry = HeaderEntry {
            dtype: t.dtype().as_str().to_string(),
            shape: t.shape().to_vec(),
            data_offsets: [offset, offset + len],
        };
        header.insert(name.clone(), serde_json::to_value(entry).expect("entry"));
        offset += len;
    }
    let mut header = serde_json::to_string(&Value::Object(header)).expect("header JSON");
    // Pad to 8-byte alignment as the reference writer does.
    while header.len() % 8 != 0 {
        header.push(' ');
    }

    let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for t in ckpt.tensors.values() {
        out.extend_from_slice(t.bytes());
    }
    out
}
