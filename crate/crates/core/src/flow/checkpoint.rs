//! Checkpoint container.
//!
//! ```text
//! "NFCK" | version u32 | header_len u64 | header JSON | f32-LE sections
//! ```
//!
//! The header is canonical JSON `{"config", "sections": [{"name", "shape"}],
//! "meta"}`; section payloads follow in header order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{FlowConfig, FlowError, FlowModel, Real};
use crate::io_util::write_atomic;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: FlowConfig,
    pub sections: Vec<Section>,
    pub meta: BTreeMap<String, Value>,
}

#[derive(Serialize, Deserialize)]
struct SectionHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: FlowConfig,
    sections: Vec<SectionHeader>,
    meta: BTreeMap<String, Value>,
}

impl Checkpoint {
    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    /// Model parameters plus arbitrary extra sections (e.g. optimizer moments).
    pub fn from_model<T: Real>(model: &FlowModel<T>, meta: BTreeMap<String, Value>) -> Self {
        let sections = model
            .blocks()
            .into_iter()
            .map(|(name, p)| Section { name, shape: p.shape.clone(), data: p.data.iter().map(|v| v.f32()).collect() })
            .collect();
        Self { config: model.config().clone(), sections, meta }
    }

    pub fn to_model<T: Real>(&self) -> Result<FlowModel<T>, FlowError> {
        let mut model = FlowModel::<T>::new(self.config.clone(), 0)?;
        for (name, p) in model.blocks_mut() {
            let s = self
                .section(&name)
                .ok_or_else(|| FlowError::Checkpoint(format!("missing section {name}")))?;
            if s.shape != p.shape {
                return Err(FlowError::Checkpoint(format!(
                    "section {name} has shape {:?}, model expects {:?}",
                    s.shape, p.shape
                )));
            }
            p.data = s.data.iter().map(|&v| T::of_f32(v)).collect();
        }
        Ok(model)
    }
}

pub fn write_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let header = Header {
        config: ck.config.clone(),
        sections: ck.sections.iter().map(|s| SectionHeader { name: s.name.clone(), shape: s.shape.clone() }).collect(),
        meta: ck.meta.clone(),
    };
    let json = serde_json::to_vec(&header).expect("serializable header");
    let payload: usize = ck.sections.iter().map(|s| s.data.len() * 4).sum();
    let mut out = Vec::with_capacity(16 + json.len() + payload);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for s in &ck.sections {
        for v in &s.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint, FlowError> {
    let bad = |m: String| FlowError::Checkpoint(m);
    if bytes.len() < 16 {
        return Err(bad(format!("{} bytes is shorter than the fixed header", bytes.len())));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad(format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < hlen {
        return Err(bad("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("header: {e}")))?;
    header.config.validate()?;
    let mut rest = &body[hlen..];
    let mut sections = Vec::with_capacity(header.sections.len());
    for sh in header.sections {
        let n: usize = sh.shape.iter().product();
        if rest.len() < n * 4 {
            return Err(bad(format!("section {} truncated", sh.name)));
        }
        let data = rest[..n * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        rest = &rest[n * 4..];
        sections.push(Section { name: sh.name, shape: sh.shape, data });
    }
    if !rest.is_empty() {
        return Err(bad(format!("{} trailing bytes", rest.len())));
    }
    Ok(Checkpoint { config: header.config, sections, meta: header.meta })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), FlowError> {
    write_atomic(path, &write_checkpoint(ck))
        .map_err(|e| FlowError::Io { path: path.display().to_string(), message: e.to_string() })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, FlowError> {
    let bytes = std::fs::read(path).map_err(|e| FlowError::Io { path: path.display().to_string(), message: e.to_string() })?;
    read_checkpoint(&bytes)
}
