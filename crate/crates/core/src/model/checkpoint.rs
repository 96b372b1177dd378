//! Sectioned binary checkpoint container.
//!
//! Layout: the 5 magic bytes `PTHK1`, then one section per tensor in the
//! order of [`ToyDecoder::named_tensors`]:
//!
//! ```text
//! u32 LE  name length in bytes
//! bytes   UTF-8 tensor name
//! u32 LE  rank
//! u64 LE  dims[rank]
//! f64 LE  data, row-major, prod(dims) values
//! ```
//!
//! The sequence ends at end of file; there is no tensor-count field.

use std::collections::HashMap;
use std::io::{Read, Write};

use crate::matrix::Matrix;
use crate::rope::{PathEmbeddingTable, RotaryParams};
use crate::{Error, Result};

use super::{LayerWeights, ModelConfig, ToyDecoder};

pub const CHECKPOINT_MAGIC: [u8; 5] = *b"PTHK1";

pub fn save_checkpoint<W: Write>(model: &ToyDecoder, w: &mut W) -> Result<()> {
    w.write_all(&CHECKPOINT_MAGIC)?;
    for (name, dims, data) in model.named_tensors() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(dims.len() as u32).to_le_bytes())?;
        for d in &dims {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for x in &data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Read a little-endian u32, or `None` at a clean end of stream.
fn read_u32_or_eof<R: Read>(r: &mut R) -> Result<Option<u32>> {
    let mut buf = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            if filled == 0 {
                return Ok(None);
            }
            return Err(Error::BadCheckpoint("truncated section header".into()));
        }
        filled += n;
    }
    Ok(Some(u32::from_le_bytes(buf)))
}

fn read_exact_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::BadCheckpoint("truncated dimension field".into()))?;
    Ok(u64::from_le_bytes(buf))
}

type TensorMap = HashMap<String, (Vec<usize>, Vec<f64>)>;

fn read_tensors<R: Read>(r: &mut R) -> Result<TensorMap> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .map_err(|_| Error::BadCheckpoint("missing magic bytes".into()))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadCheckpoint(format!(
            "bad magic bytes {magic:?}, expected {CHECKPOINT_MAGIC:?}"
        )));
    }
    let mut map = TensorMap::new();
    while let Some(name_len) = read_u32_or_eof(r)? {
        let mut name_buf = vec![0u8; name_len as usize];
        r.read_exact(&mut name_buf)
            .map_err(|_| Error::BadCheckpoint("truncated tensor name".into()))?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::BadCheckpoint("tensor name is not UTF-8".into()))?;
        let rank = read_u32_or_eof(r)?
            .ok_or_else(|| Error::BadCheckpoint("truncated rank field".into()))?;
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            dims.push(read_exact_u64(r)? as usize);
        }
        let count: usize = dims.iter().product();
        let mut data = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            r.read_exact(&mut buf).map_err(|_| {
                Error::BadCheckpoint(format!("truncated data for tensor '{name}'"))
            })?;
            data.push(f64::from_le_bytes(buf));
        }
        if map.insert(name.clone(), (dims, data)).is_some() {
            return Err(Error::BadCheckpoint(format!("duplicate tensor '{name}'")));
        }
    }
    Ok(map)
}

fn take_tensor(map: &mut TensorMap, name: &str, dims: &[usize]) -> Result<Vec<f64>> {
    let (got_dims, data) = map
        .remove(name)
        .ok_or_else(|| Error::BadCheckpoint(format!("missing tensor '{name}'")))?;
    if got_dims != dims {
        return Err(Error::BadCheckpoint(format!(
            "tensor '{name}' has dims {got_dims:?}, expected {dims:?}"
        )));
    }
    Ok(data)
}

/// Rebuild a decoder from a checkpoint, validating every shape against the
/// config.
pub fn load_checkpoint<R: Read>(config: &ModelConfig, r: &mut R) -> Result<ToyDecoder> {
    config.validate()?;
    let mut map = read_tensors(r)?;
    let d = config.model_dim();
    let ff = config.ff_dim();
    let vocab = config.vocab_size;

    let embed = Matrix::from_vec(vocab, d, take_tensor(&mut map, "embed", &[vocab, d])?);
    let unembed = Matrix::from_vec(vocab, d, take_tensor(&mut map, "unembed", &[vocab, d])?);
    let mut layers = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        layers.push(LayerWeights {
            attn_norm: take_tensor(&mut map, &format!("layer{i}.attn_norm"), &[d])?,
            wq: Matrix::from_vec(d, d, take_tensor(&mut map, &format!("layer{i}.wq"), &[d, d])?),
            wk: Matrix::from_vec(d, d, take_tensor(&mut map, &format!("layer{i}.wk"), &[d, d])?),
            wv: Matrix::from_vec(d, d, take_tensor(&mut map, &format!("layer{i}.wv"), &[d, d])?),
            wo: Matrix::from_vec(d, d, take_tensor(&mut map, &format!("layer{i}.wo"), &[d, d])?),
            mlp_norm: take_tensor(&mut map, &format!("layer{i}.mlp_norm"), &[d])?,
            w_up: Matrix::from_vec(
                ff,
                d,
                take_tensor(&mut map, &format!("layer{i}.w_up"), &[ff, d])?,
            ),
            w_down: Matrix::from_vec(
                d,
                ff,
                take_tensor(&mut map, &format!("layer{i}.w_down"), &[d, ff])?,
            ),
        });
    }
    let final_norm = take_tensor(&mut map, "final_norm", &[d])?;
    let path_flat = take_tensor(
        &mut map,
        "path_embed",
        &[config.max_paths, config.head_dim],
    )?;
    let rows: Vec<Vec<f64>> = path_flat
        .chunks(config.head_dim)
        .map(<[f64]>::to_vec)
        .collect();
    if let Some(name) = map.keys().next() {
        return Err(Error::BadCheckpoint(format!("unexpected tensor '{name}'")));
    }
    Ok(ToyDecoder {
        config: config.clone(),
        rotary: RotaryParams::new(config.head_dim, config.rope_base)?,
        embed,
        unembed,
        layers,
        final_norm,
        path_embed: PathEmbeddingTable::from_rows(rows)?,
    })
}
