//! Flat binary checkpoint of named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "SDFGCKPT"
//! version    u32      1
//! scalar     u32      bytes per value (4 or 8)
//! count      u32      number of entries
//! entry*     name_len u32, name utf-8, ndim u32, dims u64 * ndim,
//!            values   scalar * prod(dims), little-endian
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const MAGIC: &[u8; 8] = b"SDFGCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Values widened to f64; narrowing happens when restoring.
    pub values: Vec<f64>,
}

impl Entry {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            shape,
            values,
        }
    }

    pub fn from_tensor<T: Real>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        Self::new(name, vec![t.rows(), t.cols()], t.to_f64())
    }

    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        let (r, c) = match self.shape.as_slice() {
            [r, c] => (*r, *c),
            [n] => (*n, 1),
            [] => (1, 1),
            other => {
                return Err(Error::Checkpoint(format!(
                    "entry `{}` has rank {} (expected <= 2)",
                    self.name,
                    other.len()
                )))
            }
        };
        Ok(Tensor::from_f64(r, c, &self.values))
    }
}

pub fn encode<T: Real>(entries: &[Entry]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(T::BYTES as u32).to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &d in &e.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &e.values {
            T::c(v).write_le(&mut out);
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<Entry>> {
    let mut cur = Cursor { buf, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let width = cur.u32()? as usize;
    if width != 4 && width != 8 {
        return Err(Error::Checkpoint(format!("unsupported scalar width {width}")));
    }
    let count = cur.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("entry name: {e}")))?
            .to_string();
        let ndim = cur.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| cur.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = cur.take(n * width)?;
        let values = raw
            .chunks_exact(width)
            .map(|b| if width == 4 { f32::read_le(b) as f64 } else { f64::read_le(b) })
            .collect();
        entries.push(Entry { name, shape, values });
    }
    if cur.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes after last entry".into()));
    }
    Ok(entries)
}

pub fn write_file<T: Real>(path: &Path, entries: &[Entry]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode::<T>(entries))?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<Entry>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode(&buf)
}

const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";
const STEP_ENTRY: &str = "adam.step";

impl<T: Real> ParamStore<T> {
    /// Parameters, optimizer moments and the step count as checkpoint entries.
    pub fn to_entries(&self) -> Vec<Entry> {
        let mut out = Vec::with_capacity(3 * self.slots.len() + 1);
        for s in &self.slots {
            out.push(Entry::from_tensor(&s.name, &s.value));
        }
        for s in &self.slots {
            out.push(Entry::from_tensor(format!("{M_PREFIX}{}", s.name), &s.m));
            out.push(Entry::from_tensor(format!("{V_PREFIX}{}", s.name), &s.v));
        }
        out.push(Entry::new(STEP_ENTRY, vec![1], vec![self.step as f64]));
        out
    }

    /// Overwrites parameters (and optimizer state when present) from entries.
    /// Every registered parameter must be present with a matching shape.
    pub fn load_entries(&mut self, entries: &[Entry]) -> Result<()> {
        let find = |name: &str| entries.iter().find(|e| e.name == name);
        for s in &mut self.slots {
            let e = find(&s.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", s.name)))?;
            let t = e.to_tensor::<T>()?;
            if t.shape() != s.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, checkpoint {:?}",
                    s.name,
                    s.value.shape(),
                    e.shape
                )));
            }
            s.value = t;
            if let Some(m) = find(&format!("{M_PREFIX}{}", s.name)) {
                s.m = m.to_tensor()?;
            }
            if let Some(v) = find(&format!("{V_PREFIX}{}", s.name)) {
                s.v = v.to_tensor()?;
            }
        }
        if let Some(step) = find(STEP_ENTRY) {
            self.step = step.values.first().copied().unwrap_or(0.0) as u64;
        }
        Ok(())
    }
}
