//! Binary parameter snapshots.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"MAXLCKPT"  u32 version
//! u32 len, descriptor (UTF-8, `key=value` lines)
//! u32 count
//! count x { u32 len, name (UTF-8); u32 ndim; ndim x u64 dim; prod(dims) x f64 }
//! ```

use std::path::Path;

use super::params::ParamSet;
use crate::autograd::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MAXLCKPT";
pub const VERSION: u32 = 1;
const MAX_NDIM: usize = 8;

/// Named tensors plus a free-form descriptor of the model they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub descriptor: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(descriptor: impl Into<String>) -> Self {
        Self {
            descriptor: descriptor.into(),
            tensors: Vec::new(),
        }
    }

    /// Appends every parameter of `params`, prefixing names with `prefix`.
    pub fn push_params(&mut self, prefix: &str, params: &ParamSet) {
        for (n, t) in params.names().iter().zip(params.values()) {
            self.tensors.push((format!("{prefix}{n}"), t.clone()));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Value of `key` in the descriptor's `key=value` lines.
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.descriptor
            .lines()
            .filter_map(|l| l.split_once('='))
            .find(|(k, _)| k.trim() == key)
            .map(|(_, v)| v.trim())
    }

    /// Overwrites `params` with the tensors stored under `prefix`. Every
    /// parameter must be present with a matching shape.
    pub fn load_params(&self, prefix: &str, params: &mut ParamSet) -> Result<()> {
        let names: Vec<String> = params.names().to_vec();
        for (i, n) in names.iter().enumerate() {
            let key = format!("{prefix}{n}");
            let t = self.get(&key).ok_or_else(|| Error::Format {
                what: "checkpoint",
                detail: format!("missing tensor `{key}`"),
            })?;
            let dst = &mut params.values_mut()[i];
            if t.shape() != dst.shape() {
                return Err(Error::Format {
                    what: "checkpoint",
                    detail: format!("`{key}` has shape {:?}, expected {:?}", t.shape(), dst.shape()),
                });
            }
            *dst = t.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.descriptor);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic = r.take(8, "magic")?;
        if magic != MAGIC {
            return Err(Error::BadMagic {
                path: "checkpoint".into(),
                expected: u32::from_be_bytes(*b"MAXL"),
                found: u32::from_be_bytes(magic[..4].try_into().expect("4 bytes")),
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(fmt_err(format!("unsupported version {version}")));
        }
        let descriptor = r.string("descriptor")?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::new();
        for i in 0..count {
            let name = r.string("tensor name")?;
            let ndim = r.u32("rank")? as usize;
            if ndim > MAX_NDIM {
                return Err(fmt_err(format!("tensor {i} has rank {ndim}")));
            }
            let mut shape = Vec::with_capacity(ndim);
            let mut n: usize = 1;
            for _ in 0..ndim {
                let d = usize::try_from(r.u64("dimension")?).map_err(|_| fmt_err("dimension overflow".into()))?;
                n = n
                    .checked_mul(d)
                    .ok_or_else(|| fmt_err("element count overflow".into()))?;
                shape.push(d);
            }
            let nbytes = n
                .checked_mul(8)
                .ok_or_else(|| fmt_err("element count overflow".into()))?;
            let raw = r.take(nbytes, "tensor values")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::from_parts(shape, data)));
        }
        if r.pos != bytes.len() {
            return Err(fmt_err(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { descriptor, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::BadMagic { expected, found, .. } => Error::BadMagic {
                path: path.to_path_buf(),
                expected,
                found,
            },
            Error::Truncated { detail, .. } => Error::Truncated {
                path: path.to_path_buf(),
                detail,
            },
            other => other,
        })
    }
}

fn fmt_err(detail: String) -> Error {
    Error::Format {
        what: "checkpoint",
        detail,
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Truncated {
                path: "checkpoint".into(),
                detail: format!("{what} needs {n} bytes at offset {}", self.pos),
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| fmt_err(format!("{what} is not UTF-8")))
    }
}
