//! Binary named-tensor checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  "SQCKPT01"
//! count   u32      number of tensors
//! tensor  repeated `count` times:
//!   name_len u32, name (UTF-8), rank u32, dims rank x u64,
//!   data product(dims) x f64 (IEEE-754 bits)
//! ```
//!
//! Parameters are stored under `theta/`, `w/` and `target/` prefixes
//! followed by the segment names of the world model and critic.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use seqcomm_core::nets::Segment;
use seqcomm_core::trainer::{Params, Trainer};

pub const MAGIC: &[u8; 8] = b"SQCKPT01";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn write_to(out: &mut impl Write, tensors: &[NamedTensor]) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&u32::try_from(tensors.len())?.to_le_bytes())?;
    for t in tensors {
        if t.shape.iter().product::<usize>() != t.data.len() {
            bail!("tensor {} has {} values for shape {:?}", t.name, t.data.len(), t.shape);
        }
        out.write_all(&u32::try_from(t.name.len())?.to_le_bytes())?;
        out.write_all(t.name.as_bytes())?;
        out.write_all(&u32::try_from(t.shape.len())?.to_le_bytes())?;
        for &d in &t.shape {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in &t.data {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(input: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(input: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_from(input: &mut impl Read) -> Result<Vec<NamedTensor>> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).context("truncated checkpoint header")?;
    if &magic != MAGIC {
        bail!("not a checkpoint file");
    }
    let count = read_u32(input)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = read_u32(input)? as usize;
        let mut name = vec![0u8; len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).context("tensor name is not UTF-8")?;
        let rank = read_u32(input)? as usize;
        let shape = (0..rank).map(|_| read_u64(input).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| read_u64(input).map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
        out.push(NamedTensor { name, shape, data });
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        bail!("trailing bytes after the last tensor");
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let mut buf = Vec::new();
    write_to(&mut buf, tensors)?;
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}

pub fn load(path: &Path) -> Result<Vec<NamedTensor>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    read_from(&mut bytes.as_slice()).with_context(|| format!("parsing {}", path.display()))
}

fn split(prefix: &str, flat: &[f64], manifest: &[Segment], out: &mut Vec<NamedTensor>) {
    for s in manifest {
        out.push(NamedTensor {
            name: format!("{}/{}", prefix, s.name),
            shape: s.shape.clone(),
            data: flat[s.range()].to_vec(),
        });
    }
}

/// Named tensors of every parameter of a trainer's networks.
pub fn params_to_tensors(trainer: &Trainer, params: &Params) -> Vec<NamedTensor> {
    let (model, critic) = trainer.manifest();
    let mut out = Vec::new();
    split("theta", &params.theta, &model, &mut out);
    split("w", &params.w, &critic, &mut out);
    split("target", &params.target, &critic, &mut out);
    out
}

fn join(prefix: &str, tensors: &[NamedTensor], manifest: &[Segment]) -> Result<Vec<f64>> {
    let len = manifest.iter().map(|s| s.range().end).max().unwrap_or(0);
    let mut flat = vec![0.0; len];
    for s in manifest {
        let name = format!("{}/{}", prefix, s.name);
        let t = tensors.iter().find(|t| t.name == name).ok_or_else(|| anyhow!("checkpoint lacks {}", name))?;
        if t.shape != s.shape {
            bail!("{} has shape {:?}, the network expects {:?}", name, t.shape, s.shape);
        }
        flat[s.range()].copy_from_slice(&t.data);
    }
    Ok(flat)
}

/// Parameters for `trainer`'s networks from named tensors.
pub fn tensors_to_params(trainer: &Trainer, tensors: &[NamedTensor]) -> Result<Params> {
    let (model, critic) = trainer.manifest();
    let expected = model.len() + 2 * critic.len();
    if tensors.len() != expected {
        bail!("checkpoint has {} tensors, the configured networks have {}", tensors.len(), expected);
    }
    Ok(Params {
        theta: join("theta", tensors, &model)?,
        w: join("w", tensors, &critic)?,
        target: join("target", tensors, &critic)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn special_values_round_trip_bit_exactly() {
        let t = vec![
            NamedTensor { name: "a".into(), shape: vec![2, 2], data: vec![-0.0, f64::MIN_POSITIVE, 1e308, 0.1] },
            NamedTensor { name: "empty".into(), shape: vec![0], data: vec![] },
            NamedTensor { name: "scalar".into(), shape: vec![], data: vec![f64::NAN] },
        ];
        let mut buf = Vec::new();
        write_to(&mut buf, &t).unwrap();
        let back = read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in t.iter().zip(&back) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.data), bits(&b.data));
        }
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let t = vec![NamedTensor { name: "a".into(), shape: vec![3], data: vec![1.0, 2.0, 3.0] }];
        let mut buf = Vec::new();
        write_to(&mut buf, &t).unwrap();
        assert!(read_from(&mut &buf[..buf.len() - 1]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_from(&mut extra.as_slice()).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_from(&mut bad.as_slice()).is_err());
    }

    #[test]
    fn inconsistent_shape_is_rejected() {
        let t = vec![NamedTensor { name: "a".into(), shape: vec![2], data: vec![1.0] }];
        assert!(write_to(&mut Vec::new(), &t).is_err());
    }
}
