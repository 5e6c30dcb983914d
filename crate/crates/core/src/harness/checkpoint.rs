//! Model checkpoints.
//!
//! Layout: `b"DPAC"`, `u32` format version, `u64` index length, a JSON index
//! (backbone config, parameter names and shapes, statistics names and
//! widths), then one tensor record per parameter followed by a mean and a
//! variance record per batch-norm statistics entry.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DpaError, Result};
use crate::model::{BackboneConfig, Model};
use crate::tensor::{read_tensor, write_tensor, DType};
use crate::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DPAC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StatsEntry {
    name: String,
    channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Index {
    config: BackboneConfig,
    params: Vec<ParamEntry>,
    stats: Vec<StatsEntry>,
}

fn index_of(model: &Model) -> Index {
    Index {
        config: model.config().clone(),
        params: model
            .store
            .params()
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
        stats: model
            .store
            .all_stats()
            .iter()
            .map(|(name, s)| StatsEntry {
                name: name.clone(),
                channels: s.mean.len(),
            })
            .collect(),
    }
}

pub fn write_checkpoint<W: Write>(out: &mut W, model: &Model) -> Result<()> {
    let index = serde_json::to_vec(&index_of(model)).map_err(|e| DpaError::Format(e.to_string()))?;
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(index.len() as u64).to_le_bytes())?;
    out.write_all(&index)?;
    for p in model.store.params() {
        write_tensor(out, &p.value, DType::F64)?;
    }
    for (_, s) in model.store.all_stats() {
        write_tensor(out, &Tensor::vector(&s.mean), DType::F64)?;
        write_tensor(out, &Tensor::vector(&s.var), DType::F64)?;
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut out, model)?;
    out.flush()?;
    Ok(())
}

fn read_index<R: Read>(input: &mut R) -> Result<Index> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(DpaError::Format("not a checkpoint (bad magic)".into()));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(DpaError::CheckpointMismatch(format!(
            "format version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut buf = vec![0u8; len];
    input.read_exact(&mut buf)?;
    serde_json::from_slice(&buf).map_err(|e| DpaError::Format(format!("checkpoint index: {e}")))
}

/// Reads a checkpoint and rebuilds the model it describes.
pub fn read_checkpoint<R: Read>(input: &mut R) -> Result<Model> {
    let index = read_index(input)?;
    let mut model = Model::build(&index.config, 0)?;
    if index_of(&model) != index {
        return Err(DpaError::CheckpointMismatch(
            "parameter layout differs from the layout its config builds".into(),
        ));
    }
    for p in model.store.params_mut() {
        let t = read_tensor(input)?;
        if t.shape() != p.value.shape() {
            return Err(DpaError::CheckpointMismatch(format!(
                "{}: stored shape {:?}, expected {:?}",
                p.name,
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t;
    }
    for (name, s) in model.store.all_stats_mut() {
        for target in [&mut s.mean, &mut s.var] {
            let t = read_tensor(input)?;
            if t.numel() != target.len() {
                return Err(DpaError::CheckpointMismatch(format!(
                    "{name}: stored {} statistics, expected {}",
                    t.numel(),
                    target.len()
                )));
            }
            target.copy_from_slice(t.data());
        }
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(DpaError::Format("trailing bytes after checkpoint".into()));
    }
    Ok(model)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

/// Loads a checkpoint and checks that it was trained with `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &BackboneConfig) -> Result<Model> {
    let model = load_checkpoint(path)?;
    if model.config() != expected {
        return Err(DpaError::CheckpointMismatch(format!(
            "checkpoint built for {:?}, run expects {:?}",
            model.config(),
            expected
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn small() -> BackboneConfig {
        BackboneConfig {
            stage_channels: vec![4, 8],
            blocks_per_stage: vec![1, 1],
            input_size: (8, 8),
            dpa_after_stage: BTreeSet::from([1]),
            num_classes: 3,
            ..BackboneConfig::default()
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let mut model = Model::build(&small(), 3).unwrap();
        model.store.all_stats_mut()[0].1.mean[1] = 0.125;
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &model).unwrap();
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back.store, model.store);
        assert_eq!(back.config(), model.config());
        let mut again = Vec::new();
        write_checkpoint(&mut again, &back).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn rejects_bad_input() {
        let model = Model::build(&small(), 3).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &model).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&mut bad.as_slice()), Err(DpaError::Format(_))));

        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(read_checkpoint(&mut bad.as_slice()), Err(DpaError::CheckpointMismatch(_))));

        let short = &buf[..buf.len() - 3];
        assert!(read_checkpoint(&mut &short[..]).is_err());

        let mut long = buf.clone();
        long.push(0);
        assert!(matches!(read_checkpoint(&mut long.as_slice()), Err(DpaError::Format(_))));
    }

    #[test]
    fn config_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &Model::build(&small(), 1).unwrap()).unwrap();
        assert!(load_checkpoint_for(&path, &small()).is_ok());
        let other = BackboneConfig {
            dpa_after_stage: BTreeSet::new(),
            ..small()
        };
        assert!(matches!(
            load_checkpoint_for(&path, &other),
            Err(DpaError::CheckpointMismatch(_))
        ));
    }
}
