//! Single-file model archive.
//!
//! Layout: the 8-byte magic `PKCKPT01`, a little-endian `u64` manifest
//! length, the JSON manifest, then every tensor as raw little-endian `f64`.
//! The manifest holds layer specs, coupling groups, run-length encoded
//! masks, training-state scalars, and a tensor index of names and byte
//! offsets relative to the start of the payload section.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CouplingGroup, LayerMask, LayerParams, LayerSpec, MaskStore, ModelGraph};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PKCKPT01";
pub const FORMAT_VERSION: u32 = 1;

/// Scalars describing where in a run the checkpoint was taken.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub epoch: u64,
    pub iteration: u64,
    pub seed: u64,
    pub cumulative_p: f64,
    pub accuracy: Option<f64>,
}

/// Alternating run lengths starting with a run of `first`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub first: bool,
    pub runs: Vec<usize>,
}

impl Rle {
    pub fn encode(bits: &[bool]) -> Self {
        let first = bits.first().copied().unwrap_or(true);
        let mut runs = Vec::new();
        let mut cur = first;
        let mut n = 0;
        for &b in bits {
            if b == cur {
                n += 1;
            } else {
                runs.push(n);
                cur = b;
                n = 1;
            }
        }
        if n > 0 {
            runs.push(n);
        }
        Self { first, runs }
    }

    pub fn decode(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.runs.iter().sum());
        let mut bit = self.first;
        for &n in &self.runs {
            out.extend(std::iter::repeat_n(bit, n));
            bit = !bit;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct MaskRecord {
    units: Rle,
    weights: Rle,
    bias: Rle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    couplings: Vec<CouplingGroup>,
    masks: Vec<MaskRecord>,
    state: TrainingState,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelGraph,
    pub state: TrainingState,
}

pub fn to_bytes(model: &ModelGraph, state: &TrainingState) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    for (l, p) in model.layers().iter().zip(model.params()) {
        for (suffix, t) in [("weight", &p.weight), ("bias", &p.bias)] {
            let bytes = t.numel() as u64 * 8;
            tensors.push(TensorEntry {
                name: format!("{}.{suffix}", l.name),
                shape: t.shape().to_vec(),
                offset: payload.len() as u64,
                len: bytes,
            });
            for x in t.data() {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        input_shape: model.input_shape().to_vec(),
        layers: model.layers().to_vec(),
        couplings: model.couplings().to_vec(),
        masks: model
            .masks()
            .iter()
            .map(|m| MaskRecord {
                units: Rle::encode(&m.units),
                weights: Rle::encode(&m.weights),
                bias: Rle::encode(&m.bias),
            })
            .collect(),
        state: state.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let bad = |field: &'static str, detail: String| Error::Format {
        path: path.to_path_buf(),
        field,
        detail,
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("magic", "not a prunekit checkpoint".into()));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if mlen > body.len() {
        return Err(bad(
            "manifest",
            format!("declares {mlen} bytes, {} available", body.len()),
        ));
    }
    let manifest: Manifest =
        serde_json::from_slice(&body[..mlen]).map_err(|e| bad("manifest", e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(bad(
            "manifest",
            format!("unsupported format version {}", manifest.format_version),
        ));
    }
    let payload = &body[mlen..];
    if manifest.tensors.len() != 2 * manifest.layers.len() {
        return Err(bad(
            "tensors",
            "expected a weight and a bias tensor per layer".into(),
        ));
    }
    let mut read = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let (lo, n) = (e.offset as usize, e.len as usize);
        let count: usize = e.shape.iter().product();
        if n != count * 8 || lo.checked_add(n).is_none_or(|hi| hi > payload.len()) {
            return Err(bad(
                "payload",
                format!("tensor {} is truncated or mis-sized", e.name),
            ));
        }
        let data = payload[lo..lo + n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        read.push(Tensor::new(e.shape.clone(), data)?);
    }
    let mut it = read.into_iter();
    let params: Vec<LayerParams> = (0..manifest.layers.len())
        .map(|_| LayerParams {
            weight: it.next().expect("counted"),
            bias: it.next().expect("counted"),
        })
        .collect();
    let mut model = ModelGraph::new(
        manifest.input_shape,
        manifest.layers,
        params,
        manifest.couplings,
    )?;
    let masks = MaskStore::from_layers(
        manifest
            .masks
            .iter()
            .map(|m| LayerMask {
                units: m.units.decode(),
                weights: m.weights.decode(),
                bias: m.bias.decode(),
            })
            .collect(),
    );
    model
        .set_masks(masks)
        .map_err(|e| bad("masks", e.to_string()))?;
    Ok(Checkpoint {
        model,
        state: manifest.state,
    })
}

pub fn save(path: impl AsRef<Path>, model: &ModelGraph, state: &TrainingState) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(model, state)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}
