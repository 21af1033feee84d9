//! Binary model container.
//!
//! Layout (all multi-byte integers little-endian):
//!
//! ```text
//! magic            4 bytes  "DLAB"
//! version          u32      currently 1
//! n_classes        u32
//! input rank       u32
//! input dims       u32 * rank
//! layer count      u32
//! per layer:
//!   tag            u8       0 dense, 1 conv2d, 2 relu, 3 flatten
//!   dense:         in u32, out u32
//!   conv2d:        in_ch, out_ch, kernel, stride, pad (u32 each)
//! parameter data   f64 * n, little-endian, tensors in layer order
//!                  (weight then bias per parameterized layer)
//! momentum data    f64 * n, same order and shapes as the parameters
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::array::DenseArray;
use crate::error::{Error, Result};
use crate::nn::{Layer, Model, ModelSpec, ModelState};

pub const CONTAINER_MAGIC: [u8; 4] = *b"DLAB";
pub const CONTAINER_VERSION: u32 = 1;

/// Writes spec, parameters and momentum buffers to `path`.
pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let spec = model.spec();
    w.write_all(&CONTAINER_MAGIC)?;
    w.write_all(&CONTAINER_VERSION.to_le_bytes())?;
    w.write_all(&(spec.n_classes as u32).to_le_bytes())?;
    w.write_all(&(spec.input_shape.len() as u32).to_le_bytes())?;
    for &d in &spec.input_shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    w.write_all(&(spec.layers.len() as u32).to_le_bytes())?;
    for layer in &spec.layers {
        match *layer {
            Layer::Dense { in_dim, out_dim } => {
                w.write_all(&[0u8])?;
                w.write_all(&(in_dim as u32).to_le_bytes())?;
                w.write_all(&(out_dim as u32).to_le_bytes())?;
            }
            Layer::Conv2d { in_ch, out_ch, kernel, stride, pad } => {
                w.write_all(&[1u8])?;
                for v in [in_ch, out_ch, kernel, stride, pad] {
                    w.write_all(&(v as u32).to_le_bytes())?;
                }
            }
            Layer::Relu => w.write_all(&[2u8])?,
            Layer::Flatten => w.write_all(&[3u8])?,
        }
    }
    for tensor in model.state().params.iter().chain(&model.state().momentum) {
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::FormatAtByte { offset: self.offset, msg: msg.into() }
    }

    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| self.fail(format!("expected {N} more bytes")))?;
        self.offset += N as u64;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes::<4>()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes::<8>()?))
    }
}

/// Reads a model back; rejects wrong magic, version or truncated data with
/// the offending byte offset.
pub fn load_model(path: &Path) -> Result<Model> {
    let mut r = Cursor { inner: BufReader::new(File::open(path)?), offset: 0 };
    let magic: [u8; 4] = r.bytes()?;
    if magic != CONTAINER_MAGIC {
        return Err(Error::FormatAtByte { offset: 0, msg: format!("bad magic {magic:02x?}") });
    }
    let version = r.u32()?;
    if version != CONTAINER_VERSION {
        return Err(Error::FormatAtByte {
            offset: 4,
            msg: format!("unsupported container version {version}"),
        });
    }
    let n_classes = r.u32()? as usize;
    let rank = r.u32()? as usize;
    if rank > 8 {
        return Err(r.fail(format!("implausible input rank {rank}")));
    }
    let mut input_shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        input_shape.push(r.u32()? as usize);
    }
    let n_layers = r.u32()? as usize;
    if n_layers > 1024 {
        return Err(r.fail(format!("implausible layer count {n_layers}")));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let tag = r.u8()?;
        layers.push(match tag {
            0 => Layer::Dense { in_dim: r.u32()? as usize, out_dim: r.u32()? as usize },
            1 => Layer::Conv2d {
                in_ch: r.u32()? as usize,
                out_ch: r.u32()? as usize,
                kernel: r.u32()? as usize,
                stride: r.u32()? as usize,
                pad: r.u32()? as usize,
            },
            2 => Layer::Relu,
            3 => Layer::Flatten,
            other => return Err(r.fail(format!("unknown layer tag {other}"))),
        });
    }
    let spec = ModelSpec { input_shape, layers, n_classes };
    spec.validate()?;

    let shapes = spec.param_shapes();
    let mut read_tensors = |r: &mut Cursor<_>| -> Result<Vec<DenseArray>> {
        shapes
            .iter()
            .map(|shape| {
                let n: usize = shape.iter().product();
                let mut data = Vec::with_capacity(n);
                for _ in 0..n {
                    data.push(r.f64()?);
                }
                DenseArray::new(shape.clone(), data)
            })
            .collect()
    };
    let params = read_tensors(&mut r)?;
    let momentum = read_tensors(&mut r)?;

    let mut rest = [0u8; 1];
    if r.inner.read(&mut rest)? != 0 {
        return Err(r.fail("trailing bytes after momentum data"));
    }
    Model::new(spec, ModelState { params, momentum })
}
