//! `OBRT` binary container: an ordered list of named little-endian tensors.
//!
//! Layout:
//!
//! ```text
//! "OBRT" | version: u16 | count: u32 |
//!   per entry: name_len: u16 | name (UTF-8) | dtype: u8 | ndim: u8 | dims: u64 × ndim | payload
//! ```
//!
//! All integers and payload values are little-endian. Dtype codes are
//! `0 = f64`, `1 = f32`, `2 = i8`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const MAGIC: &[u8; 4] = b"OBRT";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F64,
    F32,
    I8,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F64 => 0,
            DType::F32 => 1,
            DType::I8 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F64),
            1 => Some(DType::F32),
            2 => Some(DType::I8),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
            DType::I8 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F64 => "f64",
            DType::F32 => "f32",
            DType::I8 => "i8",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub payload: Vec<u8>,
}

impl Tensor {
    pub fn new(
        name: impl Into<String>,
        dtype: DType,
        shape: Vec<usize>,
        payload: Vec<u8>,
    ) -> Result<Self> {
        let t = Self {
            name: name.into(),
            dtype,
            shape,
            payload,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn from_f64(name: impl Into<String>, shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        let payload = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self::new(name, DType::F64, shape, payload)
    }

    pub fn from_f32(name: impl Into<String>, shape: Vec<usize>, values: &[f32]) -> Result<Self> {
        let payload = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self::new(name, DType::F32, shape, payload)
    }

    pub fn from_i8(name: impl Into<String>, shape: Vec<usize>, values: &[i8]) -> Result<Self> {
        let payload = values.iter().map(|v| *v as u8).collect();
        Self::new(name, DType::I8, shape, payload)
    }

    pub fn from_matrix(name: impl Into<String>, m: &Matrix) -> Result<Self> {
        Self::from_f64(name, vec![m.rows(), m.cols()], m.as_slice())
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn expected_len(&self) -> Option<usize> {
        self.shape
            .iter()
            .try_fold(self.dtype.size(), |acc, &d| acc.checked_mul(d))
    }

    fn validate(&self) -> Result<()> {
        if self.name.len() > u16::MAX as usize {
            return Err(Error::Format(format!(
                "entry name of {} bytes exceeds u16",
                self.name.len()
            )));
        }
        if self.shape.len() > u8::MAX as usize {
            return Err(Error::Format(format!(
                "entry '{}' has too many dimensions",
                self.name
            )));
        }
        match self.expected_len() {
            Some(n) if n == self.payload.len() => Ok(()),
            _ => Err(Error::Format(format!(
                "entry '{}': payload of {} bytes does not match shape {:?} of {}",
                self.name,
                self.payload.len(),
                self.shape,
                self.dtype.name()
            ))),
        }
    }

    /// Values widened to `f64`, whatever the stored dtype.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match self.dtype {
            DType::F64 => self
                .payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            DType::F32 => self
                .payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::I8 => self.payload.iter().map(|&b| b as i8 as f64).collect(),
        }
    }

    pub fn to_i8_vec(&self) -> Result<Vec<i8>> {
        if self.dtype != DType::I8 {
            return Err(Error::Format(format!(
                "entry '{}' is {}, expected i8",
                self.name,
                self.dtype.name()
            )));
        }
        Ok(self.payload.iter().map(|&b| b as i8).collect())
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        let (rows, cols) = match self.shape.as_slice() {
            [r, c] => (*r, *c),
            other => {
                return Err(Error::Format(format!(
                    "entry '{}' has shape {other:?}, expected a matrix",
                    self.name
                )))
            }
        };
        Matrix::from_vec(rows, cols, self.to_f64_vec())
            .map_err(|e| Error::Format(format!("entry '{}': {e}", self.name)))
    }

    fn has_non_finite(&self) -> bool {
        match self.dtype {
            DType::I8 => false,
            _ => self.to_f64_vec().iter().any(|v| !v.is_finite()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    entries: Vec<Tensor>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, tensor: Tensor) -> Result<()> {
        if self.get(&tensor.name).is_some() {
            return Err(Error::Format(format!("duplicate entry name '{}'", tensor.name)));
        }
        tensor.validate()?;
        self.entries.push(tensor);
        Ok(())
    }

    pub fn push_matrix(&mut self, name: &str, m: &Matrix) -> Result<()> {
        self.push(Tensor::from_matrix(name, m)?)
    }

    pub fn entries(&self) -> &[Tensor] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("missing entry '{name}'")))
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        self.require(name)?.to_matrix()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(
            HEADER_LEN + self.entries.iter().map(|e| e.payload.len() + 64).sum::<usize>(),
        );
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.entries.len())
            .map_err(|_| Error::Format("too many entries".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for e in &self.entries {
            e.validate()?;
            if e.has_non_finite() {
                return Err(Error::NonFinite(format!("entry '{}'", e.name)));
            }
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dtype.code());
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&e.payload);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "header")?;
        if magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}, expected \"OBRT\"")));
        }
        let version = r.u16("header")?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = r.u32("header")?;
        let mut container = TensorContainer::new();
        for idx in 0..count {
            let at = format!("entry #{idx}");
            let name_len = r.u16(&at)? as usize;
            let name = std::str::from_utf8(r.take(name_len, &at)?)
                .map_err(|_| Error::Format(format!("{at}: name is not UTF-8")))?
                .to_string();
            let at = format!("entry '{name}'");
            let code = r.u8(&at)?;
            let dtype = DType::from_code(code)
                .ok_or_else(|| Error::Format(format!("{at}: unknown dtype code {code}")))?;
            let ndim = r.u8(&at)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let d = usize::try_from(r.u64(&at)?)
                    .map_err(|_| Error::Format(format!("{at}: dimension overflows usize")))?;
                shape.push(d);
            }
            let len = shape
                .iter()
                .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("{at}: shape {shape:?} overflows")))?;
            let payload = r.take(len, &at)?.to_vec();
            container.push(Tensor {
                name,
                dtype,
                shape,
                payload,
            })?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last entry",
                bytes.len() - r.pos
            )));
        }
        Ok(container)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, ctx: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!(
                "truncated file in {ctx}: needed {n} bytes at offset {}, {} available",
                self.pos,
                self.bytes.len() - self.pos
            ))),
        }
    }

    fn u8(&mut self, ctx: &str) -> Result<u8> {
        Ok(self.take(1, ctx)?[0])
    }

    fn u16(&mut self, ctx: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, ctx)?.try_into().unwrap()))
    }

    fn u32(&mut self, ctx: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, ctx)?.try_into().unwrap()))
    }

    fn u64(&mut self, ctx: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, ctx)?.try_into().unwrap()))
    }
}

pub fn write_container(container: &TensorContainer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = container.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: impl AsRef<Path>) -> Result<TensorContainer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    TensorContainer::from_bytes(&bytes)
}
