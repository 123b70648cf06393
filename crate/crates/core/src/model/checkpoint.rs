// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary weight container: magic, version, JSON config block, named arrays.
//!
//! Layout (little endian): 8-byte magic, `u32` version, `u64` config length
//! and config JSON, `u64` array count, then per array a `u32` name length,
//! the UTF-8 name, `u32` rank, `u64` dims and raw `f64` values.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CorpusManifest, ModelConfig, ModelWeights, VisualAdapter};
use crate::error::{Error, Result};
use crate::numerics::DenseArray;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"BOXCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    corpus: CorpusManifest,
}

fn all_arrays(w: &ModelWeights) -> Vec<(String, &DenseArray)> {
    let mut v = w.named();
    v.push(("adapter.projection".into(), &w.adapter.projection));
    v.push(("adapter.mean_embedding".into(), &w.adapter.mean_embedding));
    v
}

pub fn write_checkpoint(w: &ModelWeights, mut out: impl Write) -> Result<()> {
    out.write_all(&CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let header = serde_json::to_vec(&Header {
        config: w.config.clone(),
        corpus: w.adapter.corpus,
    })?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    let arrays = all_arrays(w);
    out.write_all(&(arrays.len() as u64).to_le_bytes())?;
    for (name, a) in arrays {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(a.ndim() as u32).to_le_bytes())?;
        for &d in a.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in a.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn bounded(n: u64, limit: u64, what: &str) -> Result<usize> {
    if n > limit {
        return Err(Error::Format(format!("{what} of {n} exceeds {limit}")));
    }
    Ok(n as usize)
}

pub fn read_checkpoint(mut r: impl Read) -> Result<ModelWeights> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let hlen = bounded(read_u64(&mut r)?, 1 << 20, "config block")?;
    let mut hbuf = vec![0u8; hlen];
    r.read_exact(&mut hbuf)?;
    let header: Header = serde_json::from_slice(&hbuf)?;
    header.config.validate()?;
    let count = bounded(read_u64(&mut r)?, 1 << 20, "array count")?;
    let mut arrays = BTreeMap::new();
    for _ in 0..count {
        let nlen = bounded(read_u32(&mut r)? as u64, 4096, "array name")?;
        let mut nbuf = vec![0u8; nlen];
        r.read_exact(&mut nbuf)?;
        let name = String::from_utf8(nbuf).map_err(|_| Error::Format("array name is not UTF-8".into()))?;
        let ndim = bounded(read_u32(&mut r)? as u64, 8, "rank")?;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(bounded(read_u64(&mut r)?, 1 << 32, "dimension")?);
        }
        let len = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b));
        let len = bounded(len.map_or(u64::MAX, |l| l as u64), 1 << 31, "array size")?;
        let mut raw = vec![0u8; len * 8];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if arrays.insert(name.clone(), DenseArray::new(shape, data)?).is_some() {
            return Err(Error::Format(format!("duplicate array {name}")));
        }
    }
    let mut take = |name: &str| {
        arrays
            .remove(name)
            .ok_or_else(|| Error::Format(format!("missing array {name}")))
    };
    let adapter = VisualAdapter {
        projection: take("adapter.projection")?,
        mean_embedding: take("adapter.mean_embedding")?,
        corpus: header.corpus,
    };
    let mut w = ModelWeights::zeros(&header.config, adapter);
    for (name, slot) in w.named_mut() {
        let a = take(&name)?;
        if a.shape() != slot.shape() {
            return Err(Error::Format(format!("{name}: shape {:?}, expected {:?}", a.shape(), slot.shape())));
        }
        *slot = a;
    }
    if let Some(extra) = arrays.keys().next() {
        return Err(Error::Format(format!("unexpected array {extra}")));
    }
    w.validate()?;
    Ok(w)
}

pub fn save_checkpoint(w: &ModelWeights, path: &Path) -> Result<()> {
    write_checkpoint(w, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelWeights> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
