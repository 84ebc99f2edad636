//! Binary checkpoint, all integers and floats little-endian:
//!
//! ```text
//! b"MATCNCKP"  u32 version
//! u32 len, config text (UTF-8, `key = value` lines)
//! u32 tensor count
//! per tensor: u32 len, name (UTF-8)  u32 ndim  u64 × ndim dims  f64 × numel data
//! ```
//!
//! Model parameters come first in store order, then the profile
//! normaliser as `normalizer.mean` and `normalizer.std`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{HarnessError, Result, RunConfig};
use crate::preprocess::{ProfileNormalizer, PROFILE_DIM};
use crate::siamese::SiameseModel;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MATCNCKP";
pub const VERSION: u32 = 1;
const NORM_MEAN: &str = "normalizer.mean";
const NORM_STD: &str = "normalizer.std";

fn corrupt(msg: impl Into<String>) -> HarnessError {
    HarnessError::Checkpoint(msg.into())
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    Ok(w.write_all(s.as_bytes())?)
}

fn write_tensor<W: Write>(w: &mut W, name: &str, t: &Tensor) -> Result<()> {
    write_str(w, name)?;
    write_u32(w, t.ndim() as u32)?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_checkpoint<W: Write>(
    mut w: W,
    config: &RunConfig,
    model: &SiameseModel,
    normalizer: &ProfileNormalizer,
) -> Result<()> {
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    write_str(&mut w, &config.to_text())?;
    write_u32(&mut w, (model.params.len() + 2) as u32)?;
    for (name, t) in model.params.iter() {
        write_tensor(&mut w, name, t)?;
    }
    write_tensor(&mut w, NORM_MEAN, &Tensor::vector(normalizer.mean.to_vec()))?;
    write_tensor(&mut w, NORM_STD, &Tensor::vector(normalizer.std.to_vec()))?;
    w.flush()?;
    Ok(())
}

pub fn save_checkpoint(
    path: &Path,
    config: &RunConfig,
    model: &SiameseModel,
    normalizer: &ProfileNormalizer,
) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), config, model, normalizer)
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| corrupt(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r)?))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|e| corrupt(format!("truncated string: {e}")))?;
    String::from_utf8(buf).map_err(|_| corrupt("string is not UTF-8"))
}

fn read_tensor<R: Read>(r: &mut R) -> Result<(String, Tensor)> {
    let name = read_str(r)?;
    let ndim = read_u32(r)? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(u64::from_le_bytes(read_exact(r)?) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(f64::from_le_bytes(read_exact(r)?));
    }
    let t = Tensor::new(shape, data).map_err(|e| corrupt(e.to_string()))?;
    Ok((name, t))
}

/// Parse a checkpoint and rebuild the model from its embedded config.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(RunConfig, SiameseModel, ProfileNormalizer)> {
    let magic: [u8; 8] = read_exact(&mut r)?;
    if &magic != MAGIC {
        return Err(corrupt("not a checkpoint (bad magic)"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported checkpoint version {version}")));
    }
    let config = RunConfig::from_text(&read_str(&mut r)?)?;
    let count = read_u32(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        tensors.push(read_tensor(&mut r)?);
    }

    let mut normalizer = ProfileNormalizer::default();
    for (name, slot) in [(NORM_STD, &mut normalizer.std), (NORM_MEAN, &mut normalizer.mean)] {
        let idx = tensors
            .iter()
            .rposition(|(n, _)| n == name)
            .ok_or_else(|| corrupt(format!("missing {name}")))?;
        let (_, t) = tensors.remove(idx);
        if t.len() != PROFILE_DIM {
            return Err(corrupt(format!("{name} has {} values", t.len())));
        }
        slot.copy_from_slice(t.data());
    }

    let mut model = SiameseModel::new(&config.model, 0).map_err(|e| HarnessError::Config(e.to_string()))?;
    model
        .load_tensors(tensors)
        .map_err(|e| HarnessError::Checkpoint(e.to_string()))?;
    Ok((config, model, normalizer))
}

pub fn load_checkpoint(path: &Path) -> Result<(RunConfig, SiameseModel, ProfileNormalizer)> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        let mut c = RunConfig::default();
        c.model.d = 8;
        c.model.n_heads = 2;
        c.model.n_blocks = 1;
        c
    }

    #[test]
    fn bytes_round_trip() {
        let c = small();
        let m = SiameseModel::new(&c.model, 5).unwrap();
        let mut n = ProfileNormalizer::default();
        n.mean[3] = 0.1 + 0.2;
        n.std[0] = 1.0 / 3.0;
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &c, &m, &n).unwrap();
        let (c2, m2, n2) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(c2, c);
        assert_eq!(n2, n);
        assert_eq!(m2.params.names(), m.params.names());
        for (a, b) in m.params.tensors().iter().zip(m2.params.tensors()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        let mut again = Vec::new();
        write_checkpoint(&mut again, &c2, &m2, &n2).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_checkpoint(&b"NOTACKPT\x01\0\0\0"[..]).is_err());
        let c = small();
        let m = SiameseModel::new(&c.model, 5).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &c, &m, &ProfileNormalizer::default()).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_checkpoint(buf.as_slice()), Err(HarnessError::Checkpoint(_))));
    }
}
