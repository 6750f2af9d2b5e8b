//! `.fbank` / `.lbnk` binary envelopes.
//!
//! ```text
//! magic    [u8; 4]   "FBNK" | "LBNK"
//! version  u32 LE    1
//! hdr_len  u64 LE
//! header   hdr_len bytes of UTF-8 JSON
//! payload  little-endian arrays, layout given by the header
//! ```
//!
//! Feature payload: image features (f32, row-major), text features in
//! `class_names` order (f32), then labels (u32) when `has_labels`.
//! Logit payload: logits (f64, row-major), then labels (u32).

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{ClassSplit, FeatureBank, LogitBank, Schema, Split};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const FEATURE_MAGIC: [u8; 4] = *b"FBNK";
pub const LOGIT_MAGIC: [u8; 4] = *b"LBNK";
pub const FORMAT_VERSION: u32 = 1;

const PREAMBLE: usize = 16;

#[derive(Serialize, Deserialize)]
struct FeatureHeader {
    model_id: String,
    dataset_id: String,
    split: Split,
    feature_dim: usize,
    n_samples: usize,
    class_names: Vec<String>,
    has_labels: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_split: Option<ClassSplit>,
}

#[derive(Serialize, Deserialize)]
struct LogitHeader {
    model_id: String,
    dataset_id: String,
    split: Split,
    n_samples: usize,
    schema: Vec<String>,
    n_task: usize,
    has_labels: bool,
}

pub(crate) fn envelope(magic: [u8; 4], header: &[u8], payload: &[u8]) -> Vec<u8> {
    envelope_versioned(magic, FORMAT_VERSION, header, payload)
}

pub(crate) fn envelope_versioned(magic: [u8; 4], version: u32, header: &[u8], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload.len());
    out.extend_from_slice(&magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header);
    out.extend_from_slice(payload);
    out
}

/// Split an envelope into `(header JSON bytes, payload, payload offset)`.
pub(crate) fn open_envelope<'a>(
    bytes: &'a [u8],
    magic: [u8; 4],
    version: u32,
) -> Result<(&'a [u8], &'a [u8], u64)> {
    if bytes.len() < 4 || bytes[..4] != magic {
        return Err(Error::format(
            0,
            format!(
                "bad magic: expected {:?}, found {:?}",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(&bytes[..bytes.len().min(4)])
            ),
        ));
    }
    if bytes.len() < PREAMBLE {
        return Err(Error::format(bytes.len() as u64, "truncated preamble"));
    }
    let found = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if found != version {
        return Err(Error::format(
            4,
            format!("unsupported version {found}, expected {version}"),
        ));
    }
    let hdr_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let end = (PREAMBLE as u64).checked_add(hdr_len).filter(|e| *e <= bytes.len() as u64);
    let Some(end) = end else {
        return Err(Error::format(
            8,
            format!(
                "header length {hdr_len} exceeds file size {}",
                bytes.len()
            ),
        ));
    };
    let end = end as usize;
    Ok((&bytes[PREAMBLE..end], &bytes[end..], end as u64))
}

fn parse_header<T: for<'de> Deserialize<'de>>(raw: &[u8]) -> Result<T> {
    serde_json::from_slice(raw).map_err(|e| Error::format(PREAMBLE as u64, format!("bad header JSON: {e}")))
}

fn check_payload_len(
    payload: &[u8],
    offset: u64,
    expected: usize,
    n_samples: usize,
    per_sample: usize,
    fixed: usize,
) -> Result<()> {
    if payload.len() == expected {
        return Ok(());
    }
    let room = if per_sample == 0 || payload.len() < fixed {
        0
    } else {
        (payload.len() - fixed) / per_sample
    };
    Err(Error::format(
        offset + payload.len().min(expected) as u64,
        format!(
            "header declares n_samples = {n_samples} ({expected} payload bytes) but payload has {} bytes (room for {room} samples)",
            payload.len()
        ),
    ))
}

fn f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect()
}

fn f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect()
}

fn u32s(bytes: &[u8]) -> Vec<u32> {
    bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect()
}

pub(crate) fn encode_feature_bank(bank: &FeatureBank) -> Vec<u8> {
    let header = FeatureHeader {
        model_id: bank.model_id.clone(),
        dataset_id: bank.dataset_id.clone(),
        split: bank.split,
        feature_dim: bank.feature_dim,
        n_samples: bank.n_samples(),
        class_names: bank.text_features.keys().cloned().collect(),
        has_labels: bank.labels.is_some(),
        class_split: bank.class_split.clone(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut payload = Vec::new();
    for v in &bank.image_features {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    for t in bank.text_features.values() {
        for v in t {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(labels) = &bank.labels {
        for l in labels {
            payload.extend_from_slice(&l.to_le_bytes());
        }
    }
    envelope(FEATURE_MAGIC, &header, &payload)
}

pub(crate) fn decode_feature_bank(bytes: &[u8]) -> Result<FeatureBank> {
    let (raw, payload, offset) = open_envelope(bytes, FEATURE_MAGIC, FORMAT_VERSION)?;
    let h: FeatureHeader = parse_header(raw)?;
    if h.feature_dim == 0 {
        return Err(Error::format(PREAMBLE as u64, "feature_dim must be positive"));
    }
    let d = h.feature_dim;
    let per_sample = 4 * d + if h.has_labels { 4 } else { 0 };
    let text_bytes = 4 * d * h.class_names.len();
    let expected = per_sample * h.n_samples + text_bytes;
    check_payload_len(payload, offset, expected, h.n_samples, per_sample, text_bytes)?;

    let img_end = 4 * d * h.n_samples;
    let image_features = f32s(&payload[..img_end]);
    let text_all = f32s(&payload[img_end..img_end + text_bytes]);
    let mut text_features = IndexMap::with_capacity(h.class_names.len());
    for (i, name) in h.class_names.iter().enumerate() {
        if text_features
            .insert(name.clone(), text_all[i * d..(i + 1) * d].to_vec())
            .is_some()
        {
            return Err(Error::format(PREAMBLE as u64, format!("duplicate class `{name}`")));
        }
    }
    let labels = h
        .has_labels
        .then(|| u32s(&payload[img_end + text_bytes..]));
    FeatureBank::new(
        h.model_id,
        h.dataset_id,
        h.split,
        d,
        image_features,
        labels,
        text_features,
        h.class_split,
    )
}

pub fn write_bank(bank: &FeatureBank, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_feature_bank(bank))?;
    Ok(())
}

pub fn read_bank(path: impl AsRef<Path>) -> Result<FeatureBank> {
    decode_feature_bank(&fs::read(path)?)
}

pub(crate) fn encode_logit_bank(bank: &LogitBank) -> Vec<u8> {
    let header = LogitHeader {
        model_id: bank.model_id.clone(),
        dataset_id: bank.dataset_id.clone(),
        split: bank.split,
        n_samples: bank.n_samples(),
        schema: bank.schema.classes().to_vec(),
        n_task: bank.schema.n_task(),
        has_labels: bank.labels.is_some(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut payload = Vec::new();
    for v in bank.logits.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(labels) = &bank.labels {
        for l in labels {
            payload.extend_from_slice(&l.to_le_bytes());
        }
    }
    envelope(LOGIT_MAGIC, &header, &payload)
}

pub(crate) fn decode_logit_bank(bytes: &[u8]) -> Result<LogitBank> {
    let (raw, payload, offset) = open_envelope(bytes, LOGIT_MAGIC, FORMAT_VERSION)?;
    let h: LogitHeader = parse_header(raw)?;
    let m = h.schema.len();
    let per_sample = 8 * m + if h.has_labels { 4 } else { 0 };
    let expected = per_sample * h.n_samples;
    check_payload_len(payload, offset, expected, h.n_samples, per_sample, 0)?;
    let logit_end = 8 * m * h.n_samples;
    let logits = Matrix::new(h.n_samples, m, f64s(&payload[..logit_end]))?;
    let labels = h.has_labels.then(|| u32s(&payload[logit_end..]));
    let schema = Schema::new(h.schema, h.n_task)?;
    LogitBank::new(h.model_id, h.dataset_id, h.split, schema, logits, labels)
}

pub fn write_logit_bank(bank: &LogitBank, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_logit_bank(bank))?;
    Ok(())
}

pub fn read_logit_bank(path: impl AsRef<Path>) -> Result<LogitBank> {
    decode_logit_bank(&fs::read(path)?)
}
