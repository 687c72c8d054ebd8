//! Binary checkpoint files.
//!
//! Layout (little-endian):
//! magic `AGTF` (4 bytes), format version (u32), JSON header length (u64)
//! followed by the UTF-8 header, tensor count (u64), then per tensor:
//! name length (u16) + UTF-8 name, rank (u8), one u64 per dimension, and the
//! raw 32-bit float data. Tensors are written sorted by name; optimizer
//! moments ride along as `<param>.m` / `<param>.v`.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParameterSet};
use crate::scalar::Scalar;

use super::adam::AdamState;
use super::TrainConfig;

pub const MAGIC: [u8; 4] = *b"AGTF";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epoch: u64,
    pub global_step: u64,
    pub best_val_loss: Option<f64>,
    pub plateau_since: u64,
    pub lr: f64,
    pub vocab_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    /// Name -> (shape, raw f32 data), params and optimizer moments together.
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

fn truncated(what: &str) -> Error {
    Error::Checkpoint(format!("truncated file while reading {what}"))
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| truncated(what))
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(&MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        let header = serde_json::to_vec(&self.header)
            .map_err(|e| Error::Checkpoint(format!("header serialization failed: {e}")))?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, (shape, data)) in &self.tensors {
            let name_bytes = name.as_bytes();
            w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
            w.write_all(name_bytes)?;
            w.write_all(&[shape.len() as u8])?;
            for &dim in shape {
                w.write_all(&(dim as u64).to_le_bytes())?;
            }
            for &v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        read_exact_or(&mut r, &mut magic, "magic")?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {magic:?}, expected {MAGIC:?}"
            )));
        }
        let mut v4 = [0u8; 4];
        read_exact_or(&mut r, &mut v4, "format version")?;
        let version = u32::from_le_bytes(v4);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let mut v8 = [0u8; 8];
        read_exact_or(&mut r, &mut v8, "header length")?;
        let header_len = u64::from_le_bytes(v8) as usize;
        let mut header_bytes = vec![0u8; header_len];
        read_exact_or(&mut r, &mut header_bytes, "header")?;
        let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
            .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;

        read_exact_or(&mut r, &mut v8, "tensor count")?;
        let count = u64::from_le_bytes(v8) as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let mut v2 = [0u8; 2];
            read_exact_or(&mut r, &mut v2, "tensor name length")?;
            let mut name_bytes = vec![0u8; u16::from_le_bytes(v2) as usize];
            read_exact_or(&mut r, &mut name_bytes, "tensor name")?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let mut rank = [0u8; 1];
            read_exact_or(&mut r, &mut rank, "tensor rank")?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                read_exact_or(&mut r, &mut v8, "tensor dimension")?;
                shape.push(u64::from_le_bytes(v8) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            let mut f4 = [0u8; 4];
            for _ in 0..numel {
                read_exact_or(&mut r, &mut f4, &format!("data of tensor {name}"))?;
                data.push(f32::from_le_bytes(f4));
            }
            tensors.insert(name, (shape, data));
        }
        Ok(Checkpoint { header, tensors })
    }

    /// Snapshot the current parameters and optimizer moments.
    pub fn from_training_state<T: Scalar>(
        header: CheckpointHeader,
        params: &ParameterSet<T>,
        adam: &AdamState<T>,
    ) -> Checkpoint {
        let mut tensors = BTreeMap::new();
        for (name, p) in params.iter() {
            let data: Vec<f32> = p.data().iter().map(|v| v.to_f() as f32).collect();
            tensors.insert(name.clone(), (p.shape().to_vec(), data));
            if let Some(m) = adam.m.get(name) {
                tensors.insert(
                    format!("{name}.m"),
                    (p.shape().to_vec(), m.iter().map(|v| v.to_f() as f32).collect()),
                );
            }
            if let Some(v) = adam.v.get(name) {
                tensors.insert(
                    format!("{name}.v"),
                    (p.shape().to_vec(), v.iter().map(|v| v.to_f() as f32).collect()),
                );
            }
        }
        Checkpoint { header, tensors }
    }

    /// Split stored tensors back into model parameters and optimizer state,
    /// validating names and shapes against the header's model config.
    pub fn unpack<T: Scalar>(&self) -> Result<(ParameterSet<T>, AdamState<T>)> {
        let config: &ModelConfig = &self.header.model;
        let mut params: BTreeMap<String, (Vec<usize>, Vec<T>)> = BTreeMap::new();
        let mut adam = AdamState::new();
        adam.t = self.header.global_step;
        for (name, (shape, data)) in &self.tensors {
            let values: Vec<T> = data.iter().map(|&v| T::from_f(v as f64)).collect();
            if let Some(base) = name.strip_suffix(".m") {
                adam.m.insert(base.to_string(), values);
            } else if let Some(base) = name.strip_suffix(".v") {
                adam.v.insert(base.to_string(), values);
            } else {
                params.insert(name.clone(), (shape.clone(), values));
            }
        }
        let params = ParameterSet::from_tensors(config, params)?;
        for (kind, moments) in [("m", &adam.m), ("v", &adam.v)] {
            for (name, buf) in moments {
                let expected = params.get(name).numel();
                if buf.len() != expected {
                    return Err(Error::Checkpoint(format!(
                        "moment {name}.{kind} has {} elements, parameter has {expected}",
                        buf.len()
                    )));
                }
            }
        }
        Ok((params, adam))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AggMethod;

    fn toy_header() -> CheckpointHeader {
        CheckpointHeader {
            model: ModelConfig {
                d_model: 8,
                n_heads: 2,
                n_enc: 2,
                n_dec: 2,
                d_ff: 16,
                dropout: 0.0,
                agg_layers: 1,
                agg_method: AggMethod::Attention,
                use_pointer: true,
                vocab_size: 20,
                max_positions: 16,
            },
            train: TrainConfig::default(),
            epoch: 3,
            global_step: 12,
            best_val_loss: Some(1.25),
            plateau_since: 1,
            lr: 5e-4,
            vocab_hash: "abc123".into(),
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let header = toy_header();
        let params = ParameterSet::<f32>::init(&header.model, 9);
        let mut adam = AdamState::new();
        for (name, p) in params.iter() {
            adam.m.insert(name.clone(), vec![0.25; p.numel()]);
            adam.v.insert(name.clone(), vec![0.5; p.numel()]);
        }
        let ck = Checkpoint::from_training_state(header, &params, &adam);

        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        ck.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn unpack_round_trips_parameters_bit_exactly() {
        let header = toy_header();
        let params = ParameterSet::<f32>::init(&header.model, 9);
        let ck = Checkpoint::from_training_state(header, &params, &AdamState::new());
        let (restored, adam) = ck.unpack::<f32>().unwrap();
        assert_eq!(adam.t, 12);
        for (name, p) in params.iter() {
            assert_eq!(p.to_vec(), restored.get(name).to_vec(), "{name}");
        }
    }

    #[test]
    fn truncated_file_fails_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let header = toy_header();
        let params = ParameterSet::<f32>::init(&header.model, 9);
        let ck = Checkpoint::from_training_state(header, &params, &AdamState::new());
        let path = dir.path().join("full.ckpt");
        ck.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(Checkpoint::load(&cut), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v9.ckpt");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&MAGIC);
        bytes.extend_from_slice(&9u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }
}
