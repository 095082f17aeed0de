//! Reader and writer for the safetensors container.
//!
//! Layout: an 8-byte little-endian header length `N`, `N` bytes of JSON
//! mapping each tensor name to `{"dtype", "shape", "data_offsets"}` (plus an
//! optional `"__metadata__"` string map), then the raw data buffer. Reading
//! accepts F32, F16 and BF16 and upcasts to `f32`; writing always emits F32
//! with names in lexicographic order and the header space-padded to a
//! multiple of 8 bytes, so equal checkpoints produce equal bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rpam_core::{Checkpoint, Tensor};
use serde_json::{Map, Value};
use thiserror::Error;

const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Error)]
pub enum SafetensorsError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("tensor `{name}`: unknown dtype `{dtype}`")]
    UnknownDtype { name: String, dtype: String },
    #[error("invalid data offsets: {0}")]
    InvalidOffsets(String),
    #[error("truncated file: {0}")]
    Truncated(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dtype {
    F32,
    F16,
    Bf16,
}

impl Dtype {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "F32" => Some(Self::F32),
            "F16" => Some(Self::F16),
            "BF16" => Some(Self::Bf16),
            _ => None,
        }
    }

    fn size(self) -> usize {
        match self {
            Self::F32 => 4,
            Self::F16 | Self::Bf16 => 2,
        }
    }

    fn decode(self, bytes: &[u8]) -> Vec<f32> {
        match self {
            Self::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
            Self::F16 => bytes
                .chunks_exact(2)
                .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
            Self::Bf16 => bytes
                .chunks_exact(2)
                .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
        }
    }
}

struct Entry {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    begin: usize,
    end: usize,
}

fn malformed(msg: impl Into<String>) -> SafetensorsError {
    SafetensorsError::MalformedHeader(msg.into())
}

fn parse_usize_array(v: &Value, what: &str, name: &str) -> Result<Vec<usize>, SafetensorsError> {
    let arr = v
        .as_array()
        .ok_or_else(|| malformed(format!("tensor `{name}`: `{what}` is not an array")))?;
    arr.iter()
        .map(|x| {
            x.as_u64()
                .and_then(|u| usize::try_from(u).ok())
                .ok_or_else(|| malformed(format!("tensor `{name}`: `{what}` has a non-integer entry")))
        })
        .collect()
}

fn parse_entry(name: &str, v: &Value) -> Result<Entry, SafetensorsError> {
    let obj = v
        .as_object()
        .ok_or_else(|| malformed(format!("tensor `{name}` is not an object")))?;
    let dtype_str = obj
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| malformed(format!("tensor `{name}` has no string `dtype`")))?;
    let dtype = Dtype::parse(dtype_str).ok_or_else(|| SafetensorsError::UnknownDtype {
        name: name.into(),
        dtype: dtype_str.into(),
    })?;
    let shape = parse_usize_array(
        obj.get("shape")
            .ok_or_else(|| malformed(format!("tensor `{name}` has no `shape`")))?,
        "shape",
        name,
    )?;
    let offsets = parse_usize_array(
        obj.get("data_offsets")
            .ok_or_else(|| malformed(format!("tensor `{name}` has no `data_offsets`")))?,
        "data_offsets",
        name,
    )?;
    let [begin, end] = offsets[..] else {
        return Err(malformed(format!(
            "tensor `{name}`: `data_offsets` must have two entries"
        )));
    };
    Ok(Entry {
        name: name.into(),
        dtype,
        shape,
        begin,
        end,
    })
}

fn parse_metadata(v: &Value) -> Result<BTreeMap<String, String>, SafetensorsError> {
    let obj = v
        .as_object()
        .ok_or_else(|| malformed("`__metadata__` is not an object"))?;
    obj.iter()
        .map(|(k, v)| {
            v.as_str()
                .map(|s| (k.clone(), s.to_owned()))
                .ok_or_else(|| malformed(format!("metadata value for `{k}` is not a string")))
        })
        .collect()
}

/// Parse an in-memory safetensors file.
pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, SafetensorsError> {
    if bytes.len() < 8 {
        return Err(SafetensorsError::Truncated(format!(
            "{} bytes, need at least 8 for the header length",
            bytes.len()
        )));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    if n == 0 {
        return Err(malformed("header length is 0"));
    }
    let available = (bytes.len() - 8) as u64;
    if n > available {
        return Err(SafetensorsError::Truncated(format!(
            "header length {n} exceeds the {available} bytes after the length prefix"
        )));
    }
    let n = n as usize;
    let header = std::str::from_utf8(&bytes[8..8 + n])
        .map_err(|e| malformed(format!("header is not UTF-8: {e}")))?;
    let root: Map<String, Value> = match serde_json::from_str(header) {
        Ok(Value::Object(m)) => m,
        Ok(_) => return Err(malformed("header is not a JSON object")),
        Err(e) => return Err(malformed(format!("header is not valid JSON: {e}"))),
    };

    let mut metadata = BTreeMap::new();
    let mut entries = Vec::with_capacity(root.len());
    for (name, v) in &root {
        if name == METADATA_KEY {
            metadata = parse_metadata(v)?;
        } else {
            entries.push(parse_entry(name, v)?);
        }
    }

    let buffer = &bytes[8 + n..];
    for e in &entries {
        if e.begin > e.end {
            return Err(SafetensorsError::InvalidOffsets(format!(
                "tensor `{}` has begin {} after end {}",
                e.name, e.begin, e.end
            )));
        }
        let numel = e
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| malformed(format!("tensor `{}` shape overflows", e.name)))?;
        let expected = numel
            .checked_mul(e.dtype.size())
            .ok_or_else(|| malformed(format!("tensor `{}` byte size overflows", e.name)))?;
        if e.end - e.begin != expected {
            return Err(SafetensorsError::InvalidOffsets(format!(
                "tensor `{}` spans {} bytes, shape {:?} needs {expected}",
                e.name,
                e.end - e.begin,
                e.shape
            )));
        }
    }
    let mut order: Vec<&Entry> = entries.iter().collect();
    order.sort_by_key(|e| (e.begin, e.end));
    let mut cursor = 0usize;
    for e in &order {
        if e.begin < cursor {
            return Err(SafetensorsError::InvalidOffsets(format!(
                "tensor `{}` starts at {} inside the previous tensor (ends at {cursor})",
                e.name, e.begin
            )));
        }
        if e.begin > cursor {
            return Err(SafetensorsError::InvalidOffsets(format!(
                "gap of {} bytes before tensor `{}`",
                e.begin - cursor,
                e.name
            )));
        }
        cursor = e.end;
    }
    if cursor > buffer.len() {
        return Err(SafetensorsError::Truncated(format!(
            "data buffer has {} bytes, tensors need {cursor}",
            buffer.len()
        )));
    }
    if cursor < buffer.len() {
        return Err(SafetensorsError::InvalidOffsets(format!(
            "{} trailing bytes not covered by any tensor",
            buffer.len() - cursor
        )));
    }

    let mut ckpt = Checkpoint::new();
    for e in entries {
        let data = e.dtype.decode(&buffer[e.begin..e.end]);
        let t = Tensor::new(e.shape, data).expect("byte span checked against shape");
        ckpt.insert(e.name, t);
    }
    ckpt.metadata = metadata;
    Ok(ckpt)
}

/// Serialize as F32 safetensors. Deterministic for a given checkpoint.
pub fn to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut header = Map::new();
    if !ckpt.metadata.is_empty() {
        let meta: Map<String, Value> = ckpt
            .metadata
            .iter()
            .map(|(k, v)| (k.clone(), Value::String(v.clone())))
            .collect();
        header.insert(METADATA_KEY.into(), Value::Object(meta));
    }
    let mut offset = 0usize;
    for (name, t) in ckpt.iter() {
        let len = t.numel() * 4;
        header.insert(
            name.clone(),
            serde_json::json!({
                "dtype": "F32",
                "shape": t.dims(),
                "data_offsets": [offset, offset + len],
            }),
        );
        offset += len;
    }
    let mut json = serde_json::to_vec(&Value::Object(header)).expect("header serializes");
    while !json.len().is_multiple_of(8) {
        json.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + json.len() + offset);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in ckpt.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, SafetensorsError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| SafetensorsError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_bytes(&bytes)
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), SafetensorsError> {
    let path = path.as_ref();
    fs::write(path, to_bytes(ckpt)).map_err(|source| SafetensorsError::Io {
        path: path.display().to_string(),
        source,
    })
}
