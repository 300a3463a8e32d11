//! `ADNZ` model files.
//!
//! Layout (little-endian):
//!
//! ```text
//! "ADNZ"            4 bytes magic
//! version           u8 (currently 1)
//! topology length   u32, followed by that many bytes of UTF-8 TOML
//! tensor count      u32
//! per tensor:       u32 ndim, ndim x u32 dims, prod(dims) x f32 values
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::genome::Topology;
use super::network::NetworkInstance;
use super::ModelError;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ADNZ";
pub const FORMAT_VERSION: u8 = 1;

pub fn encode(net: &NetworkInstance) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    let topo = net.topology().to_toml();
    out.extend_from_slice(&(topo.len() as u32).to_le_bytes());
    out.extend_from_slice(topo.as_bytes());
    out.extend_from_slice(&(net.params().len() as u32).to_le_bytes());
    for p in net.params() {
        out.extend_from_slice(&(p.shape().len() as u32).to_le_bytes());
        for &d in p.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.buf.len() - self.pos < n {
            return Err(ModelError::Format(format!(
                "truncated at byte {} (need {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<NetworkInstance, ModelError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(ModelError::Format("bad magic, not an ADNZ model".into()));
    }
    let version = c.take(1)?[0];
    if version != FORMAT_VERSION {
        return Err(ModelError::Format(format!("unsupported format version {version}")));
    }
    let tlen = c.u32()? as usize;
    let text = std::str::from_utf8(c.take(tlen)?)
        .map_err(|e| ModelError::Format(format!("topology is not UTF-8: {e}")))?;
    let topology = Topology::from_toml(text)?;
    let count = c.u32()? as usize;
    let mut params = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let ndim = c.u32()? as usize;
        if ndim > 8 {
            return Err(ModelError::Format(format!("tensor rank {ndim} too large")));
        }
        let shape = (0..ndim).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(4).ok_or_else(|| ModelError::Format("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        params.push(Tensor::new(&shape, data)?);
    }
    if c.pos != bytes.len() {
        return Err(ModelError::Format(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    NetworkInstance::from_parts(topology, params)
}

pub fn save_model(path: impl AsRef<Path>, net: &NetworkInstance) -> Result<(), ModelError> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))?;
    f.write_all(&encode(net))
        .map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<NetworkInstance, ModelError> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}
