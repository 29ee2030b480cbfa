//! Named-tensor container used for model checkpoints and feature dumps.
//!
//! ```text
//! "MDNC" | version u32 | count u32 | count × (
//!     name_len u16 | name utf-8 | dtype u8 | ndim u8 | dims u32 × ndim | values
//! )
//! ```
//! All integers and values are little-endian. Dtype 0 is 32-bit float,
//! dtype 1 is 64-bit float.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MDNC";
pub const FORMAT_VERSION: u32 = 1;

/// A tensor as stored, in its on-disk precision.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => StoredTensor::F32(t.cast()),
            DType::F64 => StoredTensor::F64(t.cast()),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    /// Convert to the requested precision (exact when it matches the stored one).
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        }
    }
}

/// Ordered list of uniquely named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    entries: Vec<(String, StoredTensor)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_named<T: Scalar>(named: &[(String, Tensor<T>)]) -> Result<Self> {
        let mut c = Container::new();
        for (name, t) in named {
            c.push(name.clone(), t)?;
        }
        Ok(c)
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) -> Result<()> {
        self.push_stored(name.into(), StoredTensor::from_tensor(t))
    }

    pub fn push_stored(&mut self, name: String, t: StoredTensor) -> Result<()> {
        if name.len() > u16::MAX as usize {
            return Err(Error::Parameter(format!("tensor name of {} bytes is too long", name.len())));
        }
        if t.shape().len() > u8::MAX as usize || t.shape().iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::Parameter(format!("tensor {name}: shape {:?} cannot be stored", t.shape())));
        }
        if self.get(&name).is_some() {
            return Err(Error::Parameter(format!("duplicate tensor name {name}")));
        }
        self.entries.push((name, t));
        Ok(())
    }

    pub fn entries(&self) -> &[(String, StoredTensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Option<Tensor<T>> {
        self.get(name).map(StoredTensor::to_tensor)
    }

    /// Every entry converted to one precision.
    pub fn to_named<T: Scalar>(&self) -> Vec<(String, Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.clone(), t.to_tensor())).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype().tag());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match t {
                StoredTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
                StoredTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        decode_inner(bytes).map_err(|msg| Error::Format { path: PathBuf::from("<memory>"), msg })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        decode_inner(&bytes).map_err(|msg| Error::Format { path: path.to_path_buf(), msg })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated while reading {what} at byte {}", self.pos)),
        }
    }

    fn u8(&mut self, what: &str) -> std::result::Result<u8, String> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

fn read_values<T: Scalar>(r: &mut Reader<'_>, shape: Vec<usize>, name: &str) -> std::result::Result<Tensor<T>, String> {
    let count = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or("element count overflows")?;
    let width = T::DTYPE.size();
    let raw = r.take(count.checked_mul(width).ok_or("byte count overflows")?, name)?;
    let data = raw.chunks_exact(width).map(T::read_le).collect();
    Tensor::new(shape, data).map_err(|e| format!("tensor {name}: {e}"))
}

fn decode_inner(bytes: &[u8]) -> std::result::Result<Container, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err("bad magic, not an MDNC container".into());
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(format!("unsupported format version {version}"));
    }
    let count = r.u32("tensor count")?;
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| format!("tensor name at byte {} is not UTF-8", r.pos - len))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(format!("duplicate tensor name {name}"));
        }
        let tag = r.u8("dtype")?;
        let dtype = DType::from_tag(tag).ok_or_else(|| format!("tensor {name}: unknown dtype tag {tag}"))?;
        let ndim = r.u8("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("dims")? as usize);
        }
        let t = match dtype {
            DType::F32 => StoredTensor::F32(read_values(&mut r, shape, &name)?),
            DType::F64 => StoredTensor::F64(read_values(&mut r, shape, &name)?),
        };
        entries.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(Container { entries })
}
