//! Binary policy checkpoints.
//!
//! Layout: `DYCK` magic, `u32` format version, `u64` header length, a JSON
//! header, then every parameter as a little-endian `f64` in tensor-table
//! order. Reloading is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::BinSpec;
use crate::error::{Error, Result};
use crate::frontend::Frontend;
use crate::policy::{PolicyHyper, PolicyParams};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DYCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Free-form stage label, e.g. `sft` or `dpo`.
    pub tag: String,
    pub step: u64,
    pub bin_spec: BinSpec,
    pub frontend: Frontend,
    pub params: PolicyParams,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    tag: String,
    step: u64,
    hyperparams: PolicyHyper,
    bin_spec_hash: String,
    bin_spec: String,
    frontend: Frontend,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn new(tag: impl Into<String>, bin_spec: BinSpec, frontend: Frontend, params: PolicyParams) -> Self {
        Self {
            tag: tag.into(),
            step: 0,
            bin_spec,
            frontend,
            params,
        }
    }

    pub fn bin_spec_hash(&self) -> String {
        self.bin_spec.hash()
    }

    /// Refuse to pair checkpoints trained against different tokenizations.
    pub fn ensure_compatible(&self, other: &Checkpoint) -> Result<()> {
        if self.bin_spec_hash() != other.bin_spec_hash() {
            return Err(Error::Incompatible(format!(
                "bin spec hash {} differs from {}",
                self.bin_spec_hash(),
                other.bin_spec_hash()
            )));
        }
        if self.frontend.vocab != other.frontend.vocab {
            return Err(Error::Incompatible("text vocabularies differ".into()));
        }
        if self.params.hyper() != other.params.hyper() {
            return Err(Error::Incompatible("policy hyperparameters differ".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            version: CHECKPOINT_VERSION,
            tag: self.tag.clone(),
            step: self.step,
            hyperparams: self.params.hyper().clone(),
            bin_spec_hash: self.bin_spec_hash(),
            bin_spec: serde_json::to_string(&self.bin_spec).expect("bin spec serializes"),
            frontend: self.frontend.clone(),
            tensors: self
                .params
                .tensors()
                .map(|(name, s)| TensorEntry {
                    name: name.to_string(),
                    shape: [s.rows, s.cols],
                    offset: s.offset,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.params.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in &self.params.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::format("checkpoint", m);
        if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| Error::format("checkpoint header", e))?;
        let bin_spec = BinSpec::from_json(&header.bin_spec)?;
        if bin_spec.hash() != header.bin_spec_hash {
            return Err(bad("bin spec does not match its recorded hash"));
        }
        let payload = &bytes[16 + hlen..];
        if payload.len() % 8 != 0 {
            return Err(bad("payload is not a whole number of f64 values"));
        }
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let params = PolicyParams::from_data(header.hyperparams, data)?;
        for (entry, (name, slot)) in header.tensors.iter().zip(params.tensors()) {
            if entry.name != name || entry.offset != slot.offset || entry.shape != [slot.rows, slot.cols] {
                return Err(bad(&format!("tensor table mismatch at {}", entry.name)));
            }
        }
        Ok(Self {
            tag: header.tag,
            step: header.step,
            bin_spec,
            frontend: header.frontend,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
