//! Binary container for weights and compensation matrices.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "UNIATTN\0"
//! version   u32      1
//! meta_len  u64
//! meta      meta_len bytes of UTF-8 JSON (Manifest)
//! payload   row-major f64 tensors, back to back
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use uniattn_core::model::{ModelConfig, Weights};
use uniattn_core::uniattn::{CompensationMeta, CompensationSet};
use uniattn_core::Matrix;

use crate::error::{CliError, Result};
use crate::output::write_atomic;

pub const MAGIC: &[u8; 8] = b"UNIATTN\0";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Offset into the payload, in bytes.
    pub byte_offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compensation: Option<CompensationMeta>,
    pub tensors: Vec<TensorRecord>,
}

/// Ordered named tensors plus a manifest header.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub config: ModelConfig,
    pub compensation: Option<CompensationMeta>,
    pub tensors: Vec<(String, Matrix)>,
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let records = self
            .tensors
            .iter()
            .map(|(name, m)| {
                let r = TensorRecord { name: name.clone(), rows: m.rows(), cols: m.cols(), byte_offset: offset };
                offset += (m.data().len() * 8) as u64;
                r
            })
            .collect();
        let manifest = Manifest { config: self.config.clone(), compensation: self.compensation.clone(), tensors: records };
        let meta = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(HEADER_LEN + meta.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for (_, m) in &self.tensors {
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
            return Err("bad magic".into());
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let meta_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let meta_end = HEADER_LEN.checked_add(meta_len).filter(|&e| e <= bytes.len()).ok_or("truncated manifest")?;
        let manifest: Manifest =
            serde_json::from_slice(&bytes[HEADER_LEN..meta_end]).map_err(|e| format!("manifest: {e}"))?;
        let payload = &bytes[meta_end..];
        let mut expected = 0u64;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for r in &manifest.tensors {
            if r.byte_offset != expected {
                return Err(format!("tensor {} at offset {}, expected {expected}", r.name, r.byte_offset));
            }
            let n = r.rows.checked_mul(r.cols).ok_or("tensor size overflow")?;
            let start = r.byte_offset as usize;
            let end = start + n * 8;
            if end > payload.len() {
                return Err(format!("tensor {} runs past the payload", r.name));
            }
            let data = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((r.name.clone(), Matrix::new(r.rows, r.cols, data).map_err(|e| e.to_string())?));
            expected = end as u64;
        }
        if expected as usize != payload.len() {
            return Err(format!("payload has {} bytes, manifest covers {expected}", payload.len()));
        }
        Ok(Self { config: manifest.config, compensation: manifest.compensation, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CliError::Missing(path.to_path_buf()),
            _ => CliError::io(path, e),
        })?;
        Self::from_bytes(&bytes).map_err(|detail| CliError::Corrupt { path: path.to_path_buf(), detail })
    }
}

/// Model state as stored in a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub weights: Weights,
    pub compensation: Option<CompensationSet>,
}

impl Checkpoint {
    pub fn to_container(&self) -> Container {
        let mut tensors: Vec<(String, Matrix)> =
            self.weights.named().into_iter().map(|(n, m)| (n, m.clone())).collect();
        if let Some(c) = &self.compensation {
            tensors.extend(c.entries().iter().map(|(l, m)| (format!("wc.{l}"), m.clone())));
        }
        Container {
            config: self.config.clone(),
            compensation: self.compensation.as_ref().map(|c| c.meta.clone()),
            tensors,
        }
    }

    pub fn from_container(c: Container) -> std::result::Result<Self, String> {
        c.config.validate().map_err(|e| e.to_string())?;
        let mut weights = Weights::zeros_like(&c.config);
        let mut by_name: BTreeMap<String, Matrix> = c.tensors.into_iter().collect();
        for (name, slot) in weights.named_mut() {
            let m = by_name.remove(&name).ok_or_else(|| format!("tensor {name} missing"))?;
            if m.shape() != slot.shape() {
                return Err(format!("tensor {name} is {:?}, expected {:?}", m.shape(), slot.shape()));
            }
            *slot = m;
        }
        let mut wc = BTreeMap::new();
        for (name, m) in by_name {
            let layer = name
                .strip_prefix("wc.")
                .and_then(|l| l.parse::<usize>().ok())
                .ok_or_else(|| format!("unexpected tensor {name}"))?;
            wc.insert(layer, m);
        }
        let compensation = match c.compensation {
            Some(meta) => {
                let set = CompensationSet::from_entries(wc, meta);
                set.validate_for(&c.config).map_err(|e| e.to_string())?;
                Some(set)
            }
            None if wc.is_empty() => None,
            None => return Err("wc tensors present without compensation metadata".into()),
        };
        Ok(Self { config: c.config, weights, compensation })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
            .map_err(|detail| CliError::Corrupt { path: path.to_path_buf(), detail })
    }
}
