//! Checkpoints: `model.json` (decimal text, 9 significant digits per f32)
//! and `model.bin`.
//!
//! `model.bin` layout, all integers little-endian `u32`:
//!
//! ```text
//! magic "DTCN" | version | config_len | config JSON (UTF-8)
//! n_tensors | n_tensors x (name_len | name | ndim | dims...)
//! f32 LE data of every tensor, in table order
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::block::ResidualBlockParams;
use super::model::TcnModel;
use super::TcnConfig;
use crate::error::{Error, Result};

pub const BIN_MAGIC: &[u8; 4] = b"DTCN";
pub const BIN_VERSION: u32 = 1;
const JSON_FORMAT: &str = "drowsy-tcn";

#[derive(Serialize, Deserialize)]
struct JsonCheckpoint {
    format: String,
    version: u32,
    config: TcnConfig,
    blocks: Vec<ResidualBlockParams<f32>>,
    head_weights: Vec<f32>,
    head_bias: Vec<f32>,
}

struct NamedTensor<'a> {
    name: String,
    dims: Vec<usize>,
    data: &'a [f32],
}

fn tensor_table(m: &TcnModel<f32>) -> Vec<NamedTensor<'_>> {
    let mut t = Vec::new();
    for (i, b) in m.blocks.iter().enumerate() {
        let (co, ci, k) = (b.c_out, b.c_in, b.kernel_size);
        t.push(NamedTensor {
            name: format!("block{i}.conv_weights"),
            dims: vec![co, ci, k],
            data: &b.conv_weights,
        });
        for (n, d) in [
            ("conv_bias", &b.conv_bias),
            ("bn_gamma", &b.bn_gamma),
            ("bn_beta", &b.bn_beta),
            ("bn_running_mean", &b.bn_running_mean),
            ("bn_running_var", &b.bn_running_var),
        ] {
            t.push(NamedTensor {
                name: format!("block{i}.{n}"),
                dims: vec![co],
                data: d,
            });
        }
        if let Some(d) = &b.downsample_weights {
            t.push(NamedTensor {
                name: format!("block{i}.downsample_weights"),
                dims: vec![co, ci, 1],
                data: d,
            });
        }
    }
    let c = m.config.channels_per_block;
    let k = m.config.num_classes;
    t.push(NamedTensor {
        name: "head_weights".into(),
        dims: vec![k, c],
        data: &m.head_weights,
    });
    t.push(NamedTensor {
        name: "head_bias".into(),
        dims: vec![k],
        data: &m.head_bias,
    });
    t
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Data(format!("{v} does not fit the u32 header field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn to_bin(m: &TcnModel<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(BIN_MAGIC);
    put_u32(&mut out, BIN_VERSION as usize)?;
    let cfg = crate::json::to_string_f64_exact(&m.config)?;
    put_u32(&mut out, cfg.len())?;
    out.extend_from_slice(cfg.as_bytes());
    let table = tensor_table(m);
    put_u32(&mut out, table.len())?;
    for t in &table {
        put_u32(&mut out, t.name.len())?;
        out.extend_from_slice(t.name.as_bytes());
        put_u32(&mut out, t.dims.len())?;
        for &d in &t.dims {
            put_u32(&mut out, d)?;
        }
    }
    for t in &table {
        for v in t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Data("model.bin is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn from_bin(bytes: &[u8]) -> Result<TcnModel<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != BIN_MAGIC {
        return Err(Error::Data("not a model.bin file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != BIN_VERSION as usize {
        return Err(Error::Mismatch(format!("unsupported model.bin version {version}")));
    }
    let cfg_len = r.u32()?;
    let config: TcnConfig = serde_json::from_slice(r.take(cfg_len)?)?;
    config.validate().map_err(|e| Error::Mismatch(e.to_string()))?;

    // Build a skeleton with the expected table, then check the file's table
    // against it entry by entry.
    let mut model = TcnModel::<f32>::new(config, 0)?;
    let expected: Vec<(String, Vec<usize>)> = tensor_table(&model).into_iter().map(|t| (t.name, t.dims)).collect();
    let n = r.u32()?;
    if n != expected.len() {
        return Err(Error::Mismatch(format!("{n} tensors in file, config implies {}", expected.len())));
    }
    for (name, dims) in &expected {
        let len = r.u32()?;
        let got_name = String::from_utf8_lossy(r.take(len)?).into_owned();
        let ndim = r.u32()?;
        let got_dims = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        if &got_name != name || &got_dims != dims {
            return Err(Error::Mismatch(format!(
                "tensor {got_name} {got_dims:?} where config expects {name} {dims:?}"
            )));
        }
    }
    for group in model_slices_mut(&mut model) {
        for v in group.iter_mut() {
            let b = r.take(4)?;
            *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Mismatch("trailing bytes after tensor data".into()));
    }
    model.validate()?;
    Ok(model)
}

/// Mutable views in [`tensor_table`] order.
fn model_slices_mut(m: &mut TcnModel<f32>) -> Vec<&mut [f32]> {
    let mut out: Vec<&mut [f32]> = Vec::new();
    for b in &mut m.blocks {
        out.push(&mut b.conv_weights);
        out.push(&mut b.conv_bias);
        out.push(&mut b.bn_gamma);
        out.push(&mut b.bn_beta);
        out.push(&mut b.bn_running_mean);
        out.push(&mut b.bn_running_var);
        if let Some(d) = &mut b.downsample_weights {
            out.push(d);
        }
    }
    out.push(&mut m.head_weights);
    out.push(&mut m.head_bias);
    out
}

pub fn to_json(m: &TcnModel<f32>) -> Result<String> {
    crate::json::to_string_f64_exact(&JsonCheckpoint {
        format: JSON_FORMAT.into(),
        version: BIN_VERSION,
        config: m.config.clone(),
        blocks: m.blocks.clone(),
        head_weights: m.head_weights.clone(),
        head_bias: m.head_bias.clone(),
    })
}

pub fn from_json(text: &str) -> Result<TcnModel<f32>> {
    let c: JsonCheckpoint = serde_json::from_str(text)?;
    if c.format != JSON_FORMAT {
        return Err(Error::Data(format!("unknown checkpoint format {:?}", c.format)));
    }
    TcnModel::from_parts(c.config, c.blocks, c.head_weights, c.head_bias)
}

/// Writes `model.json` and `model.bin` into `dir`.
pub fn save_checkpoint(model: &TcnModel<f32>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("model.json"), to_json(model)?)?;
    let mut w = BufWriter::new(fs::File::create(dir.join("model.bin"))?);
    w.write_all(&to_bin(model)?)?;
    w.flush()?;
    Ok(())
}

/// Loads a checkpoint file (`.json` or `.bin`) or a directory holding
/// `model.json`. The result is in Eval mode.
pub fn load_checkpoint(path: &Path) -> Result<TcnModel<f32>> {
    if path.is_dir() {
        return load_checkpoint(&path.join("model.json"));
    }
    match path.extension().and_then(|e| e.to_str()) {
        Some("bin") => from_bin(&fs::read(path)?),
        _ => from_json(&fs::read_to_string(path)?),
    }
}
