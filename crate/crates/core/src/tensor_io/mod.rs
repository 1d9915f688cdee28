//! Reading and writing model weights, adapters and activation captures.
//!
//! All tensors live in safetensors-compatible archives: an 8-byte little-endian
//! header length, a JSON header mapping names to dtype/shape/offsets, then the
//! row-major payload. Payloads are written as `f32`; everything is widened to
//! `f64` on load.

mod activations;
mod adapter;
mod model;

pub use activations::{load_activations, save_activations, ActivationSet, DEFAULT_POOLING};
pub use adapter::{load_adapter, save_adapter, sidecar_path, AdapterBundle, AdapterSidecar, LoraPair, Module};
pub use model::{
    load_model, save_model, LayerWeights, Manifest, ModelSpec, ModelWeights, Orientation,
    StorageOrientation,
};

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::{Error, Matrix, Result};

/// A tensor as decoded from an archive, widened to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl RawTensor {
    pub fn from_matrix(m: &Matrix) -> Self {
        let data = (0..m.nrows())
            .flat_map(|r| m.row(r).iter().copied().collect::<Vec<_>>())
            .collect();
        RawTensor {
            shape: vec![m.nrows(), m.ncols()],
            data,
        }
    }

    /// Interprets a rank-2 tensor as a matrix.
    pub fn to_matrix(&self, name: &str) -> Result<Matrix> {
        match self.shape.as_slice() {
            [r, c] => Ok(Matrix::from_row_slice(*r, *c, &self.data)),
            _ => Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: vec![0, 0],
                found: self.shape.clone(),
            }),
        }
    }
}

/// In-memory view of one archive file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    pub tensors: BTreeMap<String, RawTensor>,
    pub metadata: BTreeMap<String, String>,
}

impl Archive {
    pub fn insert_matrix(&mut self, name: impl Into<String>, m: &Matrix) {
        self.tensors.insert(name.into(), RawTensor::from_matrix(m));
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?
            .to_matrix(name)
    }

    /// Decodes an archive from bytes, rejecting non-finite payload values.
    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |detail: String| Error::Archive {
            path: origin.to_path_buf(),
            detail,
        };
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| bad(e.to_string()))?;
        let st = SafeTensors::deserialize(bytes).map_err(|e| bad(e.to_string()))?;
        let metadata = header
            .metadata()
            .clone()
            .unwrap_or_default()
            .into_iter()
            .collect();
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            let data = decode_payload(&name, &view).map_err(|e| match e {
                Error::Archive { detail, .. } => bad(detail),
                other => other,
            })?;
            if let Some(index) = data.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { name, index });
            }
            tensors.insert(
                name,
                RawTensor {
                    shape: view.shape().to_vec(),
                    data,
                },
            );
        }
        Ok(Archive { tensors, metadata })
    }

    /// Encodes the archive with `f32` payloads. Output is byte-deterministic:
    /// tensors are laid out in name order and header keys are sorted, which
    /// `safetensors::serialize` does not guarantee for metadata.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut header = serde_json::Map::new();
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            let begin = payload.len();
            payload.extend(t.data.iter().flat_map(|v| (*v as f32).to_le_bytes()));
            header.insert(
                name.clone(),
                serde_json::json!({"dtype": "F32", "shape": t.shape, "data_offsets": [begin, payload.len()]}),
            );
        }
        if !self.metadata.is_empty() {
            header.insert("__metadata__".into(), serde_json::json!(self.metadata));
        }
        let mut text = serde_json::to_string(&header).map_err(|e| Error::Numeric(format!("cannot encode header: {e}")))?;
        // pad so the payload starts 8-byte aligned
        while text.len() % 8 != 0 {
            text.push(' ');
        }
        let mut out = Vec::with_capacity(8 + text.len() + payload.len());
        out.extend((text.len() as u64).to_le_bytes());
        out.extend(text.as_bytes());
        out.extend(payload);
        Ok(out)
    }
}

fn decode_payload(name: &str, view: &TensorView<'_>) -> Result<Vec<f64>> {
    let bytes = view.data();
    let unsupported = || Error::Archive {
        path: Default::default(),
        detail: format!("tensor `{name}` has unsupported dtype {:?}", view.dtype()),
    };
    let out = match view.dtype() {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect(),
        _ => return Err(unsupported()),
    };
    Ok(out)
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Archive::decode(&bytes, path)
}

pub fn write_archive(path: &Path, archive: &Archive) -> Result<()> {
    let bytes = archive.encode()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads a vocabulary file: a JSON array of token strings, index = embedding row.
pub fn load_vocab(path: &Path) -> Result<Vec<String>> {
    read_json(path)
}

pub fn save_vocab(path: &Path, vocab: &[String]) -> Result<()> {
    write_json(path, &vocab)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_keeps_f32_values() {
        let mut a = Archive::default();
        let m = Matrix::from_row_slice(2, 3, &[1.0, -2.5, 3.25, 0.0, 1e-3_f32 as f64, 7.0]);
        a.insert_matrix("w", &m);
        a.metadata.insert("k".into(), "v".into());
        let bytes = a.encode().unwrap();
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + header_len]).unwrap();
        assert_eq!(header["w"]["dtype"], "F32");
        assert_eq!(header["w"]["shape"], serde_json::json!([2, 3]));
        let back = Archive::decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.matrix("w").unwrap(), m);
    }

    #[test]
    fn encoding_is_stable_and_readable_by_safetensors() {
        let build = || {
            let mut a = Archive::default();
            for name in ["b", "a", "c.d"] {
                a.insert_matrix(name, &Matrix::from_fn(3, 2, |r, c| (r * 2 + c) as f64 * 0.5));
            }
            for (k, v) in [("z", "1"), ("m", "2"), ("corpus_id", "x"), ("pooling", "mean")] {
                a.metadata.insert(k.into(), v.into());
            }
            a.encode().unwrap()
        };
        let bytes = build();
        assert_eq!(bytes, build());
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        assert_eq!((8 + header_len) % 8, 0);
        let st = SafeTensors::deserialize(&bytes).unwrap();
        let mut names = st.names();
        names.sort();
        assert_eq!(names, vec!["a", "b", "c.d"]);
        let view = st.tensor("b").unwrap();
        assert_eq!(view.shape(), &[3, 2]);
        assert_eq!(&view.data()[4..8], &0.5f32.to_le_bytes());
    }

    #[test]
    fn decode_rejects_nan() {
        let mut a = Archive::default();
        a.insert_matrix("bad", &Matrix::from_row_slice(1, 2, &[0.0, f64::NAN]));
        let bytes = a.encode().unwrap();
        match Archive::decode(&bytes, Path::new("mem")) {
            Err(Error::NonFinite { name, index }) => {
                assert_eq!(name, "bad");
                assert_eq!(index, 1);
            }
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn decode_rejects_garbage() {
        assert!(matches!(
            Archive::decode(b"not an archive", Path::new("mem")),
            Err(Error::Archive { .. })
        ));
    }
}
