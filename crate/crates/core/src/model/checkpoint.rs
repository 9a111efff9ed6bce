//! Checkpoint files.
//!
//! Layout: one line of JSON (the header, terminated by `\n`) followed by
//! every tensor as little-endian `f64` values, row-major, in header order.
//! Header offsets are byte offsets from the start of the data block.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, Model};
use crate::config::{ModelConfig, ThresholdMode, TrainMode};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

const FORMAT: &str = "paraformer-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub offset: u64,
    pub shape: [usize; 2],
}

/// What the checkpoint was trained as; used to pick the inference path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub mode: TrainMode,
    pub threshold_mode: ThresholdMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub architecture: Architecture,
    pub config: ModelConfig,
    pub meta: Option<CheckpointMeta>,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes(model: &Model, meta: Option<CheckpointMeta>) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut offset = 0u64;
    for (name, m) in model.params().iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            offset,
            shape: [m.rows(), m.cols()],
        });
        offset += 8 * m.data().len() as u64;
    }
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        architecture: model.architecture(),
        config: model.config().clone(),
        meta,
        tensors,
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    for (_, m) in model.params().iter() {
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_reader(reader: impl Read) -> Result<(Model, Option<CheckpointMeta>)> {
    let mut reader = BufReader::new(reader);
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(Error::Parse {
            offset: line.len() as u64,
            message: "checkpoint header is not newline-terminated".into(),
        });
    }
    let header: Header = serde_json::from_slice(&line[..line.len() - 1]).map_err(|e| {
        Error::Parse {
            offset: e.column() as u64,
            message: format!("checkpoint header: {e}"),
        }
    })?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint {} v{}",
            header.format, header.version
        )));
    }
    let mut data = Vec::new();
    reader.read_to_end(&mut data)?;

    let mut model = Model::new(header.config.clone(), header.architecture)?;
    if header.tensors.len() != model.params().len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, config implies {}",
            header.tensors.len(),
            model.params().len()
        )));
    }
    let header_len = line.len() as u64;
    for entry in &header.tensors {
        let id = model.params().id(&entry.name).ok_or_else(|| {
            Error::Checkpoint(format!("unknown tensor {}", entry.name))
        })?;
        let expected = model.params().get(id).shape();
        if expected != (entry.shape[0], entry.shape[1]) {
            return Err(Error::Checkpoint(format!(
                "tensor {} has shape {:?}, config implies {:?}",
                entry.name, entry.shape, expected
            )));
        }
        let n = entry.shape[0] * entry.shape[1];
        let start = entry.offset as usize;
        let end = start + 8 * n;
        if end > data.len() {
            return Err(Error::Parse {
                offset: header_len + data.len() as u64,
                message: format!("data for tensor {} is truncated", entry.name),
            });
        }
        let values = data[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        *model.params_mut().get_mut(id) = Matrix::from_vec(entry.shape[0], entry.shape[1], values);
    }
    Ok((model, header.meta))
}

pub fn save(model: &Model, meta: Option<CheckpointMeta>, path: &Path) -> Result<()> {
    let bytes = to_bytes(model, meta);
    let mut f = fs::File::create(path).map_err(|e| Error::file(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::file(path, e))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model, Option<CheckpointMeta>)> {
    let f = fs::File::open(path).map_err(|e| Error::file(path, e))?;
    from_reader(f)
}
