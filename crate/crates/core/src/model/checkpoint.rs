//! Weight checkpoints.
//!
//! Layout (little-endian): magic `TSLBCKPT`, u32 version, u32-prefixed model
//! config JSON, u8 extras (bit 0 halting, bit 1 decision networks), u32
//! section count, then per section a u32-prefixed UTF-8 name, u32 rank, u32
//! dims and f32 values.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tslab_autodiff::Tensor;

use super::config::ModelConfig;
use super::params::{Extras, ModelWeights};
use crate::binio::*;
use crate::error::{CoreError, Result};

const MAGIC: &[u8; 8] = b"TSLBCKPT";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(w: &mut W, cfg: &ModelConfig, weights: &ModelWeights<f32>) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    let json = serde_json::to_vec(cfg).map_err(|e| CoreError::Format(e.to_string()))?;
    put_bytes(w, &json)?;
    let ex = weights.extras();
    put_u8(w, ex.halting as u8 | (ex.decisions as u8) << 1)?;
    let mut sections = Vec::new();
    weights.visit(&mut |name, t| sections.push((name, t.clone())));
    put_u32(w, len32(sections.len())?)?;
    for (name, t) in sections {
        put_bytes(w, name.as_bytes())?;
        put_u32(w, len32(t.rank())?)?;
        for &d in t.shape() {
            put_u32(w, len32(d)?)?;
        }
        put_f32s(w, t.data())?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(ModelConfig, ModelWeights<f32>)> {
    expect_magic(r, MAGIC)?;
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(CoreError::Format(format!("unsupported checkpoint version {version}")));
    }
    let cfg: ModelConfig = serde_json::from_slice(&get_bytes(r, 1 << 20)?)
        .map_err(|e| CoreError::Format(format!("config block: {e}")))?;
    cfg.validate()?;
    let flags = get_u8(r)?;
    let extras = Extras { halting: flags & 1 != 0, decisions: flags & 2 != 0 };
    let count = get_u32(r)? as usize;
    let mut found: HashMap<String, Tensor<f32>> = HashMap::new();
    for _ in 0..count {
        let name = String::from_utf8(get_bytes(r, 256)?).map_err(|e| CoreError::Format(e.to_string()))?;
        let rank = get_u32(r)? as usize;
        if rank > 4 {
            return Err(CoreError::Format(format!("section {name} has rank {rank}")));
        }
        let shape: Vec<usize> = (0..rank).map(|_| get_u32(r).map(|d| d as usize)).collect::<Result<_>>()?;
        let data = get_f32s(r, shape.iter().product())?;
        found.insert(name, Tensor::new(shape, data)?);
    }
    let mut weights = ModelWeights::<f32>::init(&cfg, extras, &mut ChaCha8Rng::seed_from_u64(0));
    let mut missing = Vec::new();
    let mut mismatched = Vec::new();
    weights.visit_mut(&mut |name, t| match found.remove(&name) {
        Some(v) if v.shape() == t.shape() => *t = v,
        Some(v) => mismatched.push(format!("{name}: {:?} vs {:?}", v.shape(), t.shape())),
        None => missing.push(name),
    });
    if !missing.is_empty() || !mismatched.is_empty() || !found.is_empty() {
        let mut extra: Vec<_> = found.into_keys().collect();
        extra.sort();
        return Err(CoreError::Format(format!(
            "checkpoint sections do not match the config: missing {missing:?}, mismatched {mismatched:?}, unexpected {extra:?}"
        )));
    }
    Ok((cfg, weights))
}

pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, weights: &ModelWeights<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, cfg, weights)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelWeights<f32>)> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_with_extras() {
        let cfg = ModelConfig { depth: 2, embed_dim: 8, heads: 2, image_size: 8, patch_size: 4, ..ModelConfig::default() };
        let w = ModelWeights::<f32>::init(
            &cfg,
            Extras { halting: true, decisions: true },
            &mut ChaCha8Rng::seed_from_u64(9),
        );
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &cfg, &w).unwrap();
        let (c2, w2) = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(c2, cfg);
        assert_eq!(w2, w);
    }

    #[test]
    fn truncated_file_is_an_error() {
        let cfg = ModelConfig { depth: 1, embed_dim: 4, heads: 1, image_size: 4, patch_size: 2, ..ModelConfig::default() };
        let w = ModelWeights::<f32>::init(&cfg, Extras::default(), &mut ChaCha8Rng::seed_from_u64(1));
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &cfg, &w).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_checkpoint(&mut buf.as_slice()), Err(CoreError::Format(_))));
    }
}
