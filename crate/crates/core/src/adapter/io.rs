//! The `.tmad` adapter file.
//!
//! Same envelope as the bank formats (magic `"TMAD"`, u32 version, u64
//! header length, JSON header); the payload is every parameter as f64 LE in
//! the order skew, in-basis, out-basis (when present), layer-norm gain and
//! bias, linear1 weight and bias, linear2 weight and bias.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Adapter, Provenance, ResidualMlp, TransitionMatrix};
use crate::banks::format::{envelope_versioned, open_envelope};
use crate::banks::Schema;
use crate::diffkit::Activation;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, SkewSymmetric};

pub const ADAPTER_MAGIC: [u8; 4] = *b"TMAD";
pub const ADAPTER_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct AdapterHeader {
    d: usize,
    m: usize,
    hidden: usize,
    activation: Activation,
    tau_student: f64,
    tau_teacher: f64,
    schema: Vec<String>,
    n_task: usize,
    has_in_basis: bool,
    has_out_basis: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

pub fn encode_adapter(adapter: &Adapter) -> Vec<u8> {
    let t = &adapter.transition;
    let mlp = &adapter.mlp;
    let header = AdapterHeader {
        d: t.d(),
        m: t.m(),
        hidden: mlp.hidden(),
        activation: mlp.activation,
        tau_student: adapter.tau_student,
        tau_teacher: adapter.tau_teacher,
        schema: adapter.schema.classes().to_vec(),
        n_task: adapter.schema.n_task(),
        has_in_basis: t.in_basis().is_some(),
        has_out_basis: t.out_basis().is_some(),
        provenance: adapter.provenance.clone(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut blocks: Vec<&Matrix> = vec![t.skew().as_matrix()];
    blocks.extend(t.in_basis());
    blocks.extend(t.out_basis());
    blocks.extend([&mlp.ln_gain, &mlp.ln_bias, &mlp.w1, &mlp.b1, &mlp.w2, &mlp.b2]);
    let mut payload = Vec::with_capacity(blocks.iter().map(|b| b.data().len() * 8).sum());
    for b in blocks {
        for v in b.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    envelope_versioned(ADAPTER_MAGIC, ADAPTER_VERSION, &header, &payload)
}

pub fn decode_adapter(bytes: &[u8]) -> Result<Adapter> {
    let (raw, payload, offset) = open_envelope(bytes, ADAPTER_MAGIC, ADAPTER_VERSION)?;
    let h: AdapterHeader = serde_json::from_slice(raw)
        .map_err(|e| Error::format(16, format!("bad header JSON: {e}")))?;
    if h.d < h.m || h.m != h.schema.len() || h.hidden == 0 {
        return Err(Error::format(
            16,
            format!(
                "inconsistent header: d = {}, m = {}, hidden = {}, schema has {} classes",
                h.d,
                h.m,
                h.hidden,
                h.schema.len()
            ),
        ));
    }
    let (d, hd) = (h.d, h.hidden);
    let mut shapes = vec![(d, d)];
    if h.has_in_basis {
        shapes.push((d, d));
    }
    if h.has_out_basis {
        shapes.push((d, d));
    }
    shapes.extend([(1, d), (1, d), (d, hd), (1, hd), (hd, d), (1, d)]);
    let expected: usize = shapes.iter().map(|(r, c)| r * c * 8).sum();
    if payload.len() != expected {
        return Err(Error::format(
            offset + payload.len().min(expected) as u64,
            format!(
                "header declares {expected} parameter bytes but payload has {}",
                payload.len()
            ),
        ));
    }
    let mut cursor = 0usize;
    let mut blocks = Vec::with_capacity(shapes.len());
    for (r, c) in shapes {
        let start = cursor;
        let data: Vec<f64> = payload[cursor..cursor + r * c * 8]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        cursor += r * c * 8;
        let m = Matrix::new(r, c, data)
            .map_err(|e| Error::format(offset + start as u64, e.to_string()))?;
        blocks.push(m);
    }
    let mut blocks = blocks.into_iter();
    let mut next = || blocks.next().expect("block count matches shapes");
    let skew = SkewSymmetric::new(next()).map_err(|e| Error::format(offset, e.to_string()))?;
    let in_basis = h.has_in_basis.then(&mut next);
    let out_basis = h.has_out_basis.then(&mut next);
    let transition = TransitionMatrix::with_bases(skew, h.m, in_basis, out_basis)?;
    let mlp = ResidualMlp {
        ln_gain: next(),
        ln_bias: next(),
        w1: next(),
        b1: next(),
        w2: next(),
        b2: next(),
        activation: h.activation,
    };
    let schema = Schema::new(h.schema, h.n_task).map_err(|e| Error::format(16, e.to_string()))?;
    for (name, t) in [("student", h.tau_student), ("teacher", h.tau_teacher)] {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::format(16, format!("{name} temperature must be positive, got {t}")));
        }
    }
    Ok(Adapter {
        transition,
        mlp,
        tau_student: h.tau_student,
        tau_teacher: h.tau_teacher,
        schema,
        provenance: h.provenance,
    })
}

pub fn adapter_serialize(adapter: &Adapter, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_adapter(adapter))?;
    Ok(())
}

pub fn adapter_load(path: impl AsRef<Path>) -> Result<Adapter> {
    decode_adapter(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::adapter_init;

    fn trained_like() -> Adapter {
        let mut a = adapter_init(5, 4, 9).unwrap();
        a.update_params(|id, p| {
            if id != crate::diffkit::ParamId::Skew {
                for (k, v) in p.data_mut().iter_mut().enumerate() {
                    *v += 1e-3 * (k as f64).sin();
                }
            }
        })
        .unwrap();
        a
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let a = trained_like();
        let back = decode_adapter(&encode_adapter(&a)).unwrap();
        assert_eq!(a, back);
        let z = Matrix::from_fn(3, 4, |i, j| 0.1 * (i + 2 * j) as f64);
        let (x, y) = (a.forward(&z).unwrap(), back.forward(&z).unwrap());
        assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn bases_and_provenance_survive() {
        let mut a = trained_like();
        let r = crate::numerics::mat_exp(&SkewSymmetric::from_upper(5, |i, j| 0.1 * (i + j) as f64));
        a.transition = a.transition.rebased(&r, true, false).unwrap();
        a.provenance = Some(Provenance {
            source_model_id: "weak".into(),
            target_model_id: "strong".into(),
            beta: 500.0,
            mode: "basis_change".into(),
            basis_feature: "input_h".into(),
            apply: "projection_only".into(),
            logit_slice: "full".into(),
        });
        assert_eq!(decode_adapter(&encode_adapter(&a)).unwrap(), a);
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let bytes = encode_adapter(&trained_like());
        let err = decode_adapter(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }

    #[test]
    fn version_and_magic_are_checked() {
        let mut bytes = encode_adapter(&trained_like());
        bytes[4] = 2;
        assert!(matches!(decode_adapter(&bytes), Err(Error::Format { offset: 4, .. })));
        bytes[0] = b'X';
        assert!(matches!(decode_adapter(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.tmad");
        let a = trained_like();
        adapter_serialize(&a, &path).unwrap();
        assert_eq!(adapter_load(&path).unwrap(), a);
    }
}
