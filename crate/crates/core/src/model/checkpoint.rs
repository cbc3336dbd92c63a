//! Binary checkpoints: a TOML header with the model config and input grid,
//! followed by every named parameter block with its shape.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{ModelConfig, Network, NetworkParams};
use super::tensor::Tensor;
use crate::codec::{open_frame, write_frame, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::raster::GridGeometry;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"OSISCKPT";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub grid: GridGeometry,
    pub params: NetworkParams,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    grid: GridGeometry,
}

pub fn checkpoint_to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let header = toml::to_string(&Header {
        model: ckpt.model.clone(),
        grid: ckpt.grid,
    })
    .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let mut w = ByteWriter::new();
    w.str(&header);
    w.u32(ckpt.params.tensors.len() as u32);
    for (name, t) in ckpt.params.names.iter().zip(&ckpt.params.tensors) {
        w.str(name);
        w.u8(t.shape.len() as u8);
        for &d in &t.shape {
            w.u32(d as u32);
        }
        for &v in &t.data {
            w.f64(v);
        }
    }
    Ok(write_frame(MAGIC, CHECKPOINT_VERSION, &w.into_inner()))
}

fn read_block(r: &mut ByteReader<'_>) -> Result<(String, Tensor)> {
    let name = r.str("block name")?;
    let rank = r.u8("block rank")? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32("block shape")? as usize);
    }
    let n: usize = shape.iter().product();
    if n > r.remaining() / 8 {
        return Err(Error::Truncated("parameter block"));
    }
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(r.f64("parameter")?);
    }
    Ok((name, Tensor { shape, data }))
}

/// Parses a checkpoint and checks every block against the layout implied by
/// its own config.
pub fn checkpoint_from_bytes(data: &[u8]) -> Result<Checkpoint> {
    let mut r = open_frame(data, MAGIC, "checkpoint", CHECKPOINT_VERSION)?;
    let header: Header = toml::from_str(&r.str("checkpoint header")?)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    header.grid.validate()?;
    let count = r.u32("block count")? as usize;
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for _ in 0..count {
        let (n, t) = read_block(&mut r)?;
        names.push(n);
        tensors.push(t);
    }
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} unread bytes in checkpoint body", r.remaining())));
    }
    let params = NetworkParams { names, tensors };
    Network::new(header.model.clone())?.check_params(&params)?;
    if !params.all_finite() {
        return Err(Error::NonFinite("checkpoint parameters".into()));
    }
    Ok(Checkpoint {
        model: header.model,
        grid: header.grid,
        params,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_bytes(ckpt)?).map_err(|e| Error::at(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let data = std::fs::read(path).map_err(|e| Error::at(path, e))?;
    checkpoint_from_bytes(&data)
}
