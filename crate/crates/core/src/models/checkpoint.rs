//! Model checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "IFFNNCKP"
//! version    u32      1
//! spec_len   u32      length of the canonical spec text
//! spec       bytes    UTF-8, as written by ModelSpec::to_text
//! n_params   u32
//! n_params times:
//!   name_len u32, name bytes (UTF-8)
//!   rank     u32, then rank x u64 extents
//!   data     product(extents) x f64
//! ```
//!
//! Parameters appear in layout order. Loading re-checks every name and shape
//! against the layout derived from the embedded spec.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Model, ModelError, ModelSpec};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"IFFNNCKP";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(model: &Model, mut out: W) -> Result<(), ModelError> {
    let spec = model.spec().to_text();
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(spec.len() as u32).to_le_bytes())?;
    out.write_all(spec.as_bytes())?;
    out.write_all(&(model.params().len() as u32).to_le_bytes())?;
    for (name, t) in model.named_params() {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        out.write_all(&t.to_le_bytes())?;
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.buf.len() - self.pos < n {
            return Err(ModelError::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String, ModelError> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| ModelError::Checkpoint("invalid UTF-8".into()))
    }
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Model, ModelError> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let spec_len = cur.u32()? as usize;
    let spec = ModelSpec::from_text(&cur.string(spec_len)?)?;
    let n = cur.u32()? as usize;
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = cur.u32()? as usize;
        let name = cur.string(name_len)?;
        let rank = cur.u32()? as usize;
        let shape: Vec<usize> = (0..rank)
            .map(|_| cur.u64().map(|d| d as usize))
            .collect::<Result<_, _>>()?;
        let len: usize = shape.iter().product();
        let data = cur
            .take(len * 8)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        params.push((name, Tensor::new(&shape, data)?));
    }
    if cur.pos != buf.len() {
        return Err(ModelError::Checkpoint("trailing bytes".into()));
    }
    Model::from_params(&spec, params)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), ModelError> {
    let mut bytes = Vec::new();
    write_checkpoint(model, &mut bytes)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model, ModelError> {
    read_checkpoint(fs::File::open(path)?)
}
