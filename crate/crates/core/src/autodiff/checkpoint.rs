//! The `SCCK` checkpoint format.
//!
//! Little-endian layout:
//!
//! ```text
//! "SCCK"  u32 version = 1  u64 iteration  u32 parameter count
//! per parameter: u16 name length, UTF-8 name, u8 rank, rank × u32 dims, f32 values
//! per parameter, same order: f32 first moments, then f32 second moments
//! ```
//!
//! The Adam step counter is the iteration count.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::adam::AdamState;
use super::params::ParamSet;
use super::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"SCCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub params: ParamSet<f32>,
    pub adam: AdamState<f32>,
}

impl Checkpoint {
    /// A checkpoint with fresh optimizer state.
    pub fn fresh(params: ParamSet<f32>) -> Self {
        let adam = AdamState::new(&params);
        Checkpoint {
            iteration: 0,
            params,
            adam,
        }
    }
}

fn put_f32s<W: Write>(w: &mut W, values: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn get_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn get<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

pub fn write_checkpoint<W: Write>(mut w: W, ckpt: &Checkpoint) -> Result<()> {
    if ckpt.adam.first_moment.len() != ckpt.params.len() {
        return Err(Error::Shape("checkpoint: optimizer state does not match parameters".into()));
    }
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&ckpt.iteration.to_le_bytes())?;
    w.write_all(&(ckpt.params.len() as u32).to_le_bytes())?;
    for (name, t) in ckpt.params.iter() {
        let len = u16::try_from(name.len()).map_err(|_| Error::format("SCCK", "parameter name too long"))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[t.shape().len() as u8])?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        put_f32s(&mut w, t.data())?;
    }
    for (m, v) in ckpt.adam.first_moment.iter().zip(&ckpt.adam.second_moment) {
        put_f32s(&mut w, m)?;
        put_f32s(&mut w, v)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    if &get::<4, _>(&mut r)? != MAGIC {
        return Err(Error::format("SCCK", "bad magic"));
    }
    let version = u32::from_le_bytes(get(&mut r)?);
    if version != VERSION {
        return Err(Error::format("SCCK", format!("unsupported version {version}")));
    }
    let iteration = u64::from_le_bytes(get(&mut r)?);
    let count = u32::from_le_bytes(get(&mut r)?) as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(get(&mut r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::format("SCCK", "name is not UTF-8"))?;
        let rank = get::<1, _>(&mut r)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(get(&mut r)?) as usize);
        }
        let n: usize = shape.iter().product();
        let values = get_f32s(&mut r, n)?;
        let tensor = Tensor::new(shape, values).map_err(|e| Error::format("SCCK", format!("`{name}`: {e}")))?;
        params.insert(name, tensor)?;
    }
    let mut adam = AdamState::new(&params);
    adam.step = iteration;
    for (i, (_, t)) in params.iter().enumerate() {
        adam.first_moment[i] = get_f32s(&mut r, t.numel())?;
        adam.second_moment[i] = get_f32s(&mut r, t.numel())?;
    }
    Ok(Checkpoint {
        iteration,
        params,
        adam,
    })
}

pub fn write_checkpoint_file(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, ckpt)?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint_file(path: impl AsRef<Path>) -> Result<Checkpoint> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
