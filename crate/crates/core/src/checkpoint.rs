//! Binary checkpoints.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "FGINET01" | version | config length | config text (UTF-8, canonical)
//! | record count | records...
//! record = name length | name | rank | extents... | f32 data (LE)
//! ```
//!
//! Records cover every parameter and every batch-norm buffer, in model
//! order, parameters first.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use fgi_tensor::Tensor;

use crate::error::{Error, Result};
use crate::model::{FgiNet, ModelConfig};

pub const MAGIC: &[u8; 8] = b"FGINET01";
pub const VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_record(buf: &mut Vec<u8>, name: &str, t: &Tensor<f32>) -> Result<()> {
    put_u32(buf, name.len())?;
    buf.extend_from_slice(name.as_bytes());
    put_u32(buf, t.rank())?;
    for &d in t.shape() {
        put_u32(buf, d)?;
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn to_bytes(net: &FgiNet<f32>) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(4 * net.store.num_params() + 65536);
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION as usize)?;
    let config = net.config.to_text();
    put_u32(&mut buf, config.len())?;
    buf.extend_from_slice(config.as_bytes());
    put_u32(&mut buf, net.store.params().len() + net.store.buffers().len())?;
    for p in net.store.params() {
        put_record(&mut buf, &p.name, &p.value)?;
    }
    for b in net.store.buffers() {
        put_record(&mut buf, &b.name, &b.value)?;
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format(format!("truncated checkpoint while reading {what} at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }
}

/// Rebuilds the model described by the embedded config and fills in every
/// stored tensor. Any mismatch fails without returning a partial model.
pub fn from_bytes(bytes: &[u8]) -> Result<FgiNet<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Format("not an FGI-Net checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32("config length")?;
    let text = std::str::from_utf8(r.take(len, "config")?).map_err(|_| Error::Format("config is not UTF-8".into()))?;
    let config = ModelConfig::from_text(text).map_err(|e| Error::Format(format!("embedded config: {e}")))?;
    let mut net = FgiNet::<f32>::build_seeded(&config, 0).map_err(|e| Error::Format(format!("embedded config: {e}")))?;
    let count = r.u32("record count")?;
    let expected = net.store.params().len() + net.store.buffers().len();
    if count != expected {
        return Err(Error::Format(format!("checkpoint has {count} tensors, config needs {expected}")));
    }
    let mut seen = HashSet::new();
    for _ in 0..count {
        let n = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(n, "name")?).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?.to_string();
        let rank = r.u32("rank")?;
        let shape = (0..rank).map(|_| r.u32("extent")).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?, &name)?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate tensor `{name}`")));
        }
        let target = if let Some(id) = net.store.find_param(&name) {
            net.store.value_mut(id)
        } else if let Some(id) = net.store.find_buffer(&name) {
            net.store.buffer_mut(id)
        } else {
            return Err(Error::Format(format!("tensor `{name}` does not belong to the embedded config")));
        };
        if target.shape() != shape.as_slice() {
            return Err(Error::Format(format!("tensor `{name}` has shape {shape:?}, config needs {:?}", target.shape())));
        }
        target.data_mut().copy_from_slice(&data);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after the last tensor", bytes.len() - r.pos)));
    }
    Ok(net)
}

pub fn save(net: &FgiNet<f32>, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(net)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<FgiNet<f32>> {
    from_bytes(&fs::read(path)?)
}
