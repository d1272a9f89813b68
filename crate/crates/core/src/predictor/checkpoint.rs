//! Binary parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        4 bytes  "ACMP"
//! version      u32      1
//! in_channels  u32
//! base_width   u32
//! bridge       u32      residual blocks in the bridge
//! batch_norm   u8       0 or 1
//! count        u32      number of tensors
//! per tensor, in declaration order:
//!   name_len   u16
//!   name       name_len bytes, UTF-8
//!   ndim       u32
//!   dims       ndim x u32
//!   data       prod(dims) x f32
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::network::{Descriptor, ParamTensor, PredictorParams};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ACMP";
const VERSION: u32 = 1;

pub fn write_checkpoint(params: &PredictorParams, out: &mut impl Write) -> std::io::Result<()> {
    let d = params.descriptor();
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    for v in [d.in_channels, d.base_width, d.bridge_blocks] {
        out.write_all(&(v as u32).to_le_bytes())?;
    }
    out.write_all(&[u8::from(d.batch_norm)])?;
    out.write_all(&(params.tensors().len() as u32).to_le_bytes())?;
    for t in params.tensors() {
        out.write_all(&(t.name.len() as u16).to_le_bytes())?;
        out.write_all(t.name.as_bytes())?;
        out.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &s in &t.shape {
            out.write_all(&(s as u32).to_le_bytes())?;
        }
        for &v in &t.data {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
}

pub fn read_checkpoint(input: impl Read) -> Result<PredictorParams> {
    let mut r = Reader { inner: input };
    if &r.bytes::<4>()? != MAGIC {
        return Err(Error::Checkpoint("not a parameter checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let in_channels = r.u32()? as usize;
    let base_width = r.u32()? as usize;
    let bridge_blocks = r.u32()? as usize;
    let batch_norm = match r.bytes::<1>()?[0] {
        0 => false,
        1 => true,
        b => return Err(Error::Checkpoint(format!("bad batch-norm flag {b}"))),
    };
    let descriptor = Descriptor {
        in_channels,
        base_width,
        bridge_blocks,
        batch_norm,
    };
    let expected = PredictorParams::zeros(descriptor)?;
    let count = r.u32()? as usize;
    if count != expected.tensors().len() {
        return Err(Error::Checkpoint(format!(
            "descriptor implies {} tensors, file has {count}",
            expected.tensors().len()
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for slot in expected.tensors() {
        let len = u16::from_le_bytes(r.bytes()?) as usize;
        let mut name = vec![0u8; len];
        r.inner
            .read_exact(&mut name)
            .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        if ndim > 8 {
            return Err(Error::Checkpoint(format!("tensor `{name}` has {ndim} dimensions")));
        }
        let shape = (0..ndim).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        if shape != slot.shape {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {shape:?}, expected {:?}",
                slot.shape
            )));
        }
        let data = (0..slot.data.len())
            .map(|_| r.bytes::<4>().map(|b| f64::from(f32::from_le_bytes(b))))
            .collect::<Result<Vec<_>>>()?;
        tensors.push(ParamTensor {
            name,
            shape,
            data,
            trainable: slot.trainable,
        });
    }
    PredictorParams::from_tensors(descriptor, tensors).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save_checkpoint(params: &PredictorParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(params, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<PredictorParams> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(file))
}
