//! Single-file checkpoints: one line of JSON (model config, data metadata,
//! array manifest) followed by little-endian f64 arrays in manifest order.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::DataTask;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

const FORMAT: &str = "transject-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// What the model was trained on; `analyze` needs it to tokenize new data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataMeta {
    pub task: DataTask,
    pub symbols: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub config: ModelConfig,
    pub data: Option<DataMeta>,
    pub arrays: Vec<ArrayEntry>,
}

impl Header {
    pub fn total_scalars(&self) -> usize {
        self.arrays.iter().map(|a| a.shape.iter().product::<usize>()).sum()
    }
}

pub fn header_of(model: &Model, data: Option<DataMeta>) -> Header {
    Header {
        format: FORMAT.into(),
        config: model.config(),
        data,
        arrays: model
            .params()
            .iter()
            .map(|p| ArrayEntry { name: p.name().to_string(), shape: p.shape().to_vec() })
            .collect(),
    }
}

pub fn save(path: &Path, model: &Model, data: Option<DataMeta>) -> Result<()> {
    let header = serde_json::to_string(&header_of(model, data)).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut buf = Vec::with_capacity(header.len() + 1 + 8 * model.count_parameters());
    buf.extend_from_slice(header.as_bytes());
    buf.push(b'\n');
    for p in model.params() {
        for v in p.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    // write-then-rename so a crash never leaves a truncated best checkpoint
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_header(path: &Path) -> Result<Header> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut line = String::new();
    BufReader::new(f).read_line(&mut line).map_err(|e| Error::io(path, e))?;
    parse_header(&line)
}

fn parse_header(line: &str) -> Result<Header> {
    let header: Header = serde_json::from_str(line.trim_end()).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format != FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format {:?}", header.format)));
    }
    Ok(header)
}

/// Rebuilds the model from the header config and overwrites every
/// parameter with the stored arrays.
pub fn load(path: &Path) -> Result<(Model, Header)> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let header = parse_header(&line)?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
    if rest.len() != 8 * header.total_scalars() {
        return Err(Error::Checkpoint(format!(
            "expected {} bytes of arrays, found {}",
            8 * header.total_scalars(),
            rest.len()
        )));
    }
    let mut model = Model::new(header.config.clone())?;
    let mut params = model.params_mut();
    if params.len() != header.arrays.len() {
        return Err(Error::Checkpoint(format!(
            "model has {} arrays, checkpoint {}",
            params.len(),
            header.arrays.len()
        )));
    }
    let mut values = rest.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    for (p, entry) in params.iter_mut().zip(&header.arrays) {
        if p.name() != entry.name || p.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "array {} {:?} does not match model parameter {} {:?}",
                entry.name,
                entry.shape,
                p.name(),
                p.shape()
            )));
        }
        let data: Vec<f64> = values.by_ref().take(p.numel()).collect();
        p.assign(data)?;
    }
    Ok((model, header))
}
