//! `CSGW1` checkpoint container.
//!
//! Layout (little-endian): magic `CSGW1`; `u32` length and UTF-8 JSON header
//! holding the model config and free-form metadata; `u32` tensor count; then
//! per tensor a `u32`-prefixed name, `u32` rank, `u32` dims and `f32` data.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CoSegNet, ModelConfig};
use crate::nn::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 5] = b"CSGW1";

/// Names with this prefix carry optimizer state rather than weights.
pub const OPTIMIZER_PREFIX: &str = "optim.";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &CoSegNet, meta: serde_json::Value, extra: Vec<(String, Tensor)>) -> Self {
        let mut tensors: Vec<(String, Tensor)> =
            model.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        tensors.extend(extra);
        Self { config: model.config().clone(), meta, tensors }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header { model: self.config.clone(), meta: self.meta.clone() })
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, header.len())?;
        out.extend_from_slice(&header);
        put_u32(&mut out, self.tensors.len())?;
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape().len())?;
            for &d in t.shape() {
                put_u32(&mut out, d)?;
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 5];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a CSGW1 checkpoint".into()));
        }
        let n = get_u32(&mut r, "header length")?;
        let mut header = vec![0u8; n];
        read_exact(&mut r, &mut header, "header")?;
        let header: Header =
            serde_json::from_slice(&header).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let count = get_u32(&mut r, "tensor count")?;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let len = get_u32(&mut r, "name length")?;
            let mut name = vec![0u8; len];
            read_exact(&mut r, &mut name, "tensor name")?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = get_u32(&mut r, &name)?;
            let shape = (0..rank).map(|_| get_u32(&mut r, &name)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let mut raw = vec![0u8; numel * 4];
            read_exact(&mut r, &mut raw, &name)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { config: header.model, meta: header.meta, tensors })
    }

    /// Rebuilds the model; returns it with the optimizer-state tensors.
    pub fn into_model(self) -> Result<(CoSegNet, Vec<(String, Tensor)>)> {
        let mut model = CoSegNet::new(self.config)?;
        let mut seen = vec![false; model.params().len()];
        let mut extra = Vec::new();
        for (name, t) in self.tensors {
            if name.starts_with(OPTIMIZER_PREFIX) {
                extra.push((name, t));
                continue;
            }
            let id = model
                .params()
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} does not belong to the configured model")))?;
            model.params_mut().set(&name, t)?;
            seen[id.index()] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            let id = model.params().ids().nth(i).expect("index in range");
            return Err(Error::Checkpoint(format!("tensor {} missing from checkpoint", model.params().name(id))));
        }
        Ok((model, extra))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn read_exact(r: &mut &[u8], buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Checkpoint(format!("truncated while reading {what}")))
}

fn get_u32(r: &mut &[u8], what: &str) -> Result<usize> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b) as usize)
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = ck.encode()?;
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes)
}
