//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "HYSGCKPT"
//! version    u32      currently 1
//! header_len u32
//! header     JSON     CheckpointHeader
//! payload    f32 * n  tensors in header order
//! crc32      u32      over everything before it
//! ```

use std::path::Path;

use hydroseg_core::model::{Module, StateKind, SupervisedModel, UNetConfig};
use hydroseg_core::trainer::SegmentationModel;
use serde::{Deserialize, Serialize};

use crate::error::{format_err, io_err, Result};

pub const MAGIC: &[u8; 8] = b"HYSGCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    SelfSupervised,
    Supervised,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub buffer: bool,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: ModelKind,
    pub model: UNetConfig,
    /// Output classes of the prediction head; absent for supervised models.
    pub n_class: Option<usize>,
    pub init_seed: u64,
    pub epochs: usize,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub enum LoadedModel {
    SelfSupervised(SegmentationModel),
    Supervised(SupervisedModel<f32>),
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: LoadedModel,
    /// Hex CRC of the file, used to identify the checkpoint in records.
    pub id: String,
}

fn collect(module: &dyn Module<f32>) -> (Vec<TensorEntry>, Vec<f32>) {
    let mut entries = Vec::new();
    let mut data = Vec::new();
    module.for_each_state("", &mut |name, kind, v| {
        entries.push(TensorEntry { name: name.to_owned(), buffer: kind == StateKind::Buffer, len: v.len() });
        data.extend_from_slice(v);
    });
    (entries, data)
}

fn encode(header: &CheckpointHeader, data: &[f32]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(20 + json.len() + data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn write(path: &Path, bytes: &[u8]) -> Result<String> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, bytes).map_err(io_err(path))?;
    Ok(format!("{:08x}", crc32fast::hash(bytes)))
}

/// Saves the inference model; returns the checkpoint id.
pub fn save_segmentation(path: &Path, model: &SegmentationModel, init_seed: u64, epochs: usize) -> Result<String> {
    let (tensors, data) = collect(model);
    let header = CheckpointHeader {
        kind: ModelKind::SelfSupervised,
        model: model.encoder.config,
        n_class: Some(model.n_class()),
        init_seed,
        epochs,
        tensors,
    };
    write(path, &encode(&header, &data)?)
}

pub fn save_supervised(path: &Path, model: &SupervisedModel<f32>, init_seed: u64, epochs: usize) -> Result<String> {
    let (tensors, data) = collect(model);
    let header = CheckpointHeader {
        kind: ModelKind::Supervised,
        model: model.encoder.config,
        n_class: None,
        init_seed,
        epochs,
        tensors,
    };
    write(path, &encode(&header, &data)?)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode(&bytes).map_err(|m| format_err(path, m))
}

fn decode(bytes: &[u8]) -> Result<Checkpoint, String> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err("not a hydroseg checkpoint".into());
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err("checksum mismatch, file is corrupt".into());
    }
    let header_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let json = body.get(16..16 + header_len).ok_or("truncated header")?;
    let header: CheckpointHeader = serde_json::from_slice(json).map_err(|e| format!("bad header: {e}"))?;
    let payload = &body[16 + header_len..];
    let expected: usize = header.tensors.iter().map(|t| t.len).sum();
    if payload.len() != expected * 4 {
        return Err(format!("payload holds {} bytes, header describes {expected} floats", payload.len()));
    }
    let values: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();

    let model = match header.kind {
        ModelKind::SelfSupervised => {
            let n_class = header.n_class.ok_or("self-supervised checkpoint without n_class")?;
            let mut m = SegmentationModel::new(header.model, n_class, header.init_seed).map_err(|e| e.to_string())?;
            fill(&mut m, &header.tensors, &values)?;
            LoadedModel::SelfSupervised(m)
        }
        ModelKind::Supervised => {
            let mut m = SupervisedModel::<f32>::new(header.model, header.init_seed).map_err(|e| e.to_string())?;
            fill(&mut m, &header.tensors, &values)?;
            LoadedModel::Supervised(m)
        }
    };
    Ok(Checkpoint { header, model, id: format!("{:08x}", crc32fast::hash(bytes)) })
}

fn fill(module: &mut dyn Module<f32>, entries: &[TensorEntry], values: &[f32]) -> Result<(), String> {
    let mut idx = 0;
    let mut offset = 0;
    let mut problem = None;
    module.for_each_state_mut("", &mut |name, kind, dst| {
        if problem.is_some() {
            return;
        }
        match entries.get(idx) {
            Some(e) if e.name == name && e.len == dst.len() && e.buffer == (kind == StateKind::Buffer) => {
                dst.copy_from_slice(&values[offset..offset + e.len]);
                offset += e.len;
            }
            Some(e) => problem = Some(format!("tensor {idx} is {} ({}), model expects {name} ({})", e.name, e.len, dst.len())),
            None => problem = Some(format!("missing tensor {name}")),
        }
        idx += 1;
    });
    if let Some(p) = problem {
        return Err(p);
    }
    if idx != entries.len() {
        return Err(format!("checkpoint holds {} tensors, model has {idx}", entries.len()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use hydroseg_core::trainer::stack;
    use hydroseg_core::Grid;

    fn tiles() -> Vec<Grid<f32>> {
        (0..2).map(|s| Grid::from_fn(16, 16, |r, c| ((r * 16 + c + s * 7) % 13) as f32 / 13.0)).collect()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut model = SegmentationModel::new(UNetConfig::default(), 6, 42).unwrap();
        // Move buffers away from their initial values so they must be restored.
        model.for_each_state_mut("", &mut |_, _, v| v.iter_mut().enumerate().for_each(|(i, x)| *x += i as f32 * 1e-3));
        let id = save_segmentation(&path, &model, 42, 3).unwrap();
        let ck = load(&path).unwrap();
        assert_eq!(ck.id, id);
        assert_eq!(ck.header.epochs, 3);
        let LoadedModel::SelfSupervised(back) = ck.model else { panic!("wrong kind") };
        assert_eq!(back, model);
        let x = stack(&tiles()).unwrap();
        let a = model.logits(&x).unwrap();
        let b = back.logits(&x).unwrap();
        assert!(a.data.iter().zip(&b.data).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn supervised_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ckpt");
        let model = SupervisedModel::<f32>::new(UNetConfig::default(), 9).unwrap();
        save_supervised(&path, &model, 9, 0).unwrap();
        let LoadedModel::Supervised(back) = load(&path).unwrap().model else { panic!("wrong kind") };
        assert_eq!(back, model);
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = SegmentationModel::new(UNetConfig::default(), 4, 1).unwrap();
        save_segmentation(&path, &model, 1, 0).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        assert!(load(&path).unwrap_err().to_string().contains("checksum"));
        std::fs::write(&path, &bytes[..10]).unwrap();
        assert!(load(&path).is_err());
        std::fs::write(&path, b"GARBAGE!xxxxxxxxxxxxxxxx").unwrap();
        assert!(load(&path).is_err());
    }
}
