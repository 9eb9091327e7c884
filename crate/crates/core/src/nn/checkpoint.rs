// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary checkpoint format.
//!
//! ```text
//! "ABLT"            magic
//! u32               format version (1)
//! u32               layer count
//! per layer:
//!   u8              kind (0 dense, 1 conv2d, 2 maxpool, 3 flatten)
//!   u32 × 3         in_shape (channels, height, width)
//!   u32 × k         kind parameters (dense: units; conv2d: filters,
//!                   kernel_h, kernel_w, stride, padding; maxpool: size)
//!   u8              activation (0 none, 1 relu, 2 softmax)
//!   u8              has_bias
//! f32 blob          per parametrized layer: weights row-major, then bias
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use super::{Activation, LayerKind, LayerSpec, Network, Params, Shape};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"ABLT";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(net: &Network) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + net.parameter_count() * 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(net.layers().len() as u32).to_le_bytes());
    let put = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    for layer in net.layers() {
        let (tag, extra): (u8, Vec<usize>) = match layer.kind {
            LayerKind::Dense { units } => (0, vec![units]),
            LayerKind::Conv2d {
                filters,
                kernel_h,
                kernel_w,
                stride,
                padding,
            } => (1, vec![filters, kernel_h, kernel_w, stride, padding]),
            LayerKind::MaxPool { size } => (2, vec![size]),
            LayerKind::Flatten => (3, vec![]),
        };
        out.push(tag);
        let s = layer.in_shape;
        for v in [s.channels, s.height, s.width].into_iter().chain(extra) {
            put(&mut out, v);
        }
        out.push(match layer.activation {
            Activation::None => 0,
            Activation::Relu => 1,
            Activation::Softmax => 2,
        });
        out.push(u8::from(layer.has_bias));
    }
    for i in 0..net.layers().len() {
        if let Some(p) = net.params(i) {
            for &w in &p.weights {
                out.extend_from_slice(&w.to_le_bytes());
            }
            if let Some(b) = &p.bias {
                for &v in b {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::TruncatedBlob {
                context: format!(
                    "{what}: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let b = self.take(n.saturating_mul(4), what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::CheckpointMagic {
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let version = r.u32("format version")? as u32;
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let count = r.u32("layer count")?;
    let mut layers = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let what = format!("layer {i} descriptor");
        let tag = r.u8(&what)?;
        let in_shape = Shape::new(r.u32(&what)?, r.u32(&what)?, r.u32(&what)?);
        let kind = match tag {
            0 => LayerKind::Dense { units: r.u32(&what)? },
            1 => LayerKind::Conv2d {
                filters: r.u32(&what)?,
                kernel_h: r.u32(&what)?,
                kernel_w: r.u32(&what)?,
                stride: r.u32(&what)?,
                padding: r.u32(&what)?,
            },
            2 => LayerKind::MaxPool { size: r.u32(&what)? },
            3 => LayerKind::Flatten,
            other => return Err(Error::CheckpointShape(format!("layer {i}: unknown kind tag {other}"))),
        };
        let activation = match r.u8(&what)? {
            0 => Activation::None,
            1 => Activation::Relu,
            2 => Activation::Softmax,
            other => return Err(Error::CheckpointShape(format!("layer {i}: unknown activation {other}"))),
        };
        let has_bias = match r.u8(&what)? {
            0 => false,
            1 => true,
            other => return Err(Error::CheckpointShape(format!("layer {i}: has_bias byte {other}"))),
        };
        layers.push(LayerSpec {
            kind,
            in_shape,
            activation,
            has_bias,
        });
    }
    super::validate_architecture(&layers).map_err(|e| Error::CheckpointShape(e.to_string()))?;
    let mut params = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        params.push(match layer.weight_dims() {
            None => None,
            Some((rows, cols)) => {
                let w = r.f32s(rows * cols, &format!("layer {i} weights"))?;
                let weights = Array2::from_shape_vec((rows, cols), w).expect("sized above");
                let bias = if layer.has_bias {
                    Some(Array1::from(r.f32s(rows, &format!("layer {i} bias"))?))
                } else {
                    None
                };
                Some(Params { weights, bias })
            }
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::CheckpointShape(format!(
            "{} trailing bytes after the parameter blob",
            bytes.len() - r.pos
        )));
    }
    Network::from_parameters(layers, params).map_err(|e| Error::CheckpointShape(e.to_string()))
}

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    // write-then-rename so a crash never leaves a half-written checkpoint
    let tmp = path.with_extension("ablt.tmp");
    fs::write(&tmp, encode(net))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    decode(&fs::read(path)?)
}
