//! `RPDB` flat binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"RPDB" | version: u32
//! repeated until EOF:
//!   name_len: u32 | name: utf-8 bytes | ndim: u32 | dims: u32 * ndim | payload: f32 * prod(dims)
//! ```
//!
//! Integer state (step counters, RNG positions) is carried in ordinary
//! records by splitting each `u64` into four 16-bit limbs, which `f32`
//! represents exactly.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{NumError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RPDB";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Record {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            name: name.into(),
            shape,
            data,
        }
    }

    pub fn from_tensor<T: Real>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        Self::new(
            name,
            t.shape().to_vec(),
            t.data().iter().map(|v| v.to_f64c() as f32).collect(),
        )
    }

    pub fn to_tensor<T: Real>(&self, expected_shape: &[usize]) -> Result<Tensor<T>> {
        if self.shape != expected_shape {
            return Err(NumError::Checkpoint(format!(
                "record `{}` has shape {:?}, expected {:?}",
                self.name, self.shape, expected_shape
            )));
        }
        Tensor::new(
            self.shape.clone(),
            self.data.iter().map(|&v| T::of(f64::from(v))).collect(),
        )
    }

    pub fn from_u64s(name: impl Into<String>, values: &[u64]) -> Self {
        let data = values
            .iter()
            .flat_map(|&v| (0..4).map(move |i| ((v >> (16 * i)) & 0xffff) as f32))
            .collect::<Vec<_>>();
        Self::new(name, vec![values.len(), 4], data)
    }

    pub fn to_u64s(&self) -> Result<Vec<u64>> {
        if self.shape.len() != 2 || self.shape[1] != 4 {
            return Err(NumError::Checkpoint(format!(
                "record `{}` is not a u64 record",
                self.name
            )));
        }
        self.data
            .chunks_exact(4)
            .map(|limbs| {
                limbs.iter().enumerate().try_fold(0u64, |acc, (i, &l)| {
                    if l < 0.0 || l > 65535.0 || l.fract() != 0.0 {
                        Err(NumError::Checkpoint(format!(
                            "record `{}` holds a corrupt limb {l}",
                            self.name
                        )))
                    } else {
                        Ok(acc | ((l as u64) << (16 * i)))
                    }
                })
            })
            .collect()
    }
}

pub fn write_records<W: Write>(mut w: W, records: &[Record]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for r in records {
        let name = r.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(r.shape.len() as u32).to_le_bytes())?;
        for &d in &r.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(r.data.len() * 4);
        for v in &r.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records<R: Read>(mut r: R) -> Result<Vec<Record>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(NumError::Checkpoint("bad magic bytes".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(NumError::Checkpoint(format!("unsupported version {version}")));
    }
    let mut records = Vec::new();
    while cur.pos < bytes.len() {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| NumError::Checkpoint("record name is not utf-8".into()))?
            .to_string();
        let ndim = cur.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let payload = cur.take(len * 4)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        records.push(Record { name, shape, data });
    }
    Ok(records)
}

pub fn save(path: impl AsRef<Path>, records: &[Record]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_records(std::io::BufWriter::new(file), records)
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<Record>> {
    let file = std::fs::File::open(path)?;
    read_records(std::io::BufReader::new(file))
}

/// Looks up a record by exact name.
pub fn find<'a>(records: &'a [Record], name: &str) -> Result<&'a Record> {
    records
        .iter()
        .find(|r| r.name == name)
        .ok_or_else(|| NumError::Checkpoint(format!("missing record `{name}`")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| NumError::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
