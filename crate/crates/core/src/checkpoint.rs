//! Binary checkpoint format.
//!
//! All integers little-endian:
//!
//! | field    | encoding                                                  |
//! |----------|-----------------------------------------------------------|
//! | magic    | `QMB1`                                                    |
//! | version  | u32                                                       |
//! | config   | u64 byte length + canonical run config text (UTF-8)       |
//! | metadata | u64 byte length + `key = value` lines (UTF-8)             |
//! | tensors  | u32 count, then per tensor sorted by name: u32 name length, name, u32 ndim, u64 dims, f32 payload |
//! | checksum | SHA-256 of every preceding byte                           |
//!
//! Parameters are held in f64 and stored as f32; that rounding is the only
//! lossy step, so save → load → save is byte-identical.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::QMambaConfig;
use crate::params::ParamStore;
use crate::styleprompt::backbone_checksum;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"QMB1";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Which parameters a checkpoint carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    /// Every parameter of the model.
    Full,
    /// Only the tuned adapter (and optionally head) parameters, tied to a
    /// backbone by its checksum.
    Adapters,
}

impl CheckpointKind {
    fn name(self) -> &'static str {
        match self {
            CheckpointKind::Full => "full",
            CheckpointKind::Adapters => "adapters",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<StoredTensor>,
}

impl Checkpoint {
    /// Snapshot of the parameters selected by `kind`. Adapter checkpoints
    /// hold the trainable parameters and record the backbone checksum.
    pub fn capture(config: &RunConfig, store: &ParamStore, kind: CheckpointKind) -> Self {
        let mut meta = BTreeMap::new();
        meta.insert("kind".to_string(), kind.name().to_string());
        if kind == CheckpointKind::Adapters {
            meta.insert("backbone_sha256".to_string(), backbone_checksum(store));
        }
        let mut tensors: Vec<StoredTensor> = store
            .iter()
            .filter(|(_, p)| kind == CheckpointKind::Full || p.trainable)
            .map(|(_, p)| StoredTensor {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.data().iter().map(|&v| v as f32).collect(),
            })
            .collect();
        tensors.sort_by(|a, b| a.name.cmp(&b.name));
        Self { config: config.clone(), meta, tensors }
    }

    pub fn kind(&self) -> CheckpointKind {
        match self.meta.get("kind").map(String::as_str) {
            Some("adapters") => CheckpointKind::Adapters,
            _ => CheckpointKind::Full,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let put_text = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u64).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        put_text(&mut out, &self.config.to_text());
        let meta: String = self.meta.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        put_text(&mut out, &meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for d in &t.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Decodes a checkpoint. With `expected`, the stored architecture must
    /// match before the tensor table is read.
    pub fn from_bytes(bytes: &[u8], expected: Option<&QMambaConfig>) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let config_text = r.text()?;
        let config = RunConfig::parse(&config_text).map_err(|e| Error::Checkpoint(format!("stored config: {e}")))?;
        if let Some(want) = expected {
            if *want != config.model {
                return Err(Error::Config(format!(
                    "checkpoint architecture does not match the requested one\n--- stored\n{}--- requested\n{}",
                    config.model_text(),
                    RunConfig { model: want.clone(), train: config.train.clone() }.model_text()
                )));
            }
        }
        if bytes.len() < DIGEST_LEN
            || Sha256::digest(&bytes[..bytes.len() - DIGEST_LEN])[..] != bytes[bytes.len() - DIGEST_LEN..]
        {
            return Err(Error::Checkpoint("checksum mismatch, file is corrupt".into()));
        }
        let meta_text = r.text()?;
        let meta = meta_text
            .lines()
            .filter_map(|l| l.split_once(" = ").map(|(k, v)| (k.to_string(), v.to_string())))
            .collect();
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflow")))?;
            let raw = r.take(len.checked_mul(4).ok_or_else(|| Error::Checkpoint("payload overflow".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.push(StoredTensor { name, shape, data });
        }
        if r.pos != bytes.len() - DIGEST_LEN {
            return Err(Error::Checkpoint("trailing bytes before checksum".into()));
        }
        Ok(Self { config, meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path, expected: Option<&QMambaConfig>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes, expected)
    }

    /// Writes the stored tensors into `store`. A full checkpoint must cover
    /// every parameter; an adapter checkpoint requires the store's backbone
    /// to match the recorded checksum.
    pub fn restore(&self, store: &mut ParamStore) -> Result<()> {
        if self.kind() == CheckpointKind::Adapters {
            let want = self.meta.get("backbone_sha256").map(String::as_str).unwrap_or("");
            if backbone_checksum(store) != want {
                return Err(Error::Checkpoint("adapter checkpoint was tuned against a different backbone".into()));
            }
        } else if self.tensors.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {} parameters",
                self.tensors.len(),
                store.len()
            )));
        }
        for t in &self.tensors {
            let id = store.find(&t.name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", t.name)))?;
            let dst = store.get_mut(id);
            if dst.shape() != t.shape.as_slice() {
                return Err(Error::Checkpoint(format!("{}: stored {:?}, model {:?}", t.name, t.shape, dst.shape())));
            }
            *dst = Tensor::new(&t.shape, t.data.iter().map(|&v| v as f64).collect())?;
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn text(&mut self) -> Result<String> {
        let n = usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("header is not UTF-8".into()))
    }
}
