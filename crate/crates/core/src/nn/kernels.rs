// SPDX-License-Identifier: MIT OR Apache-2.0

//! Low-level tensor kernels for convolution and pooling.
//!
//! Activations are stored as `(batch, channels * height * width)` matrices in
//! channel-major order. Convolution lowers to a GEMM through im2col.

use ndarray::{Array2, ArrayView2};

/// Geometry of one 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn out_positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn input_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Input pixel offset for a patch element, or `None` inside the padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky).checked_sub(self.padding)?;
        let ix = (ox * self.stride + kx).checked_sub(self.padding)?;
        (iy < self.height && ix < self.width).then_some((iy, ix))
    }
}

/// Unfold a batch into a `(batch * out_positions, patch_len)` matrix.
pub(crate) fn im2col(x: ArrayView2<'_, f32>, g: &ConvGeometry) -> Array2<f32> {
    let n = x.nrows();
    let positions = g.out_positions();
    let patch = g.patch_len();
    let hw = g.height * g.width;
    let mut cols = Array2::<f32>::zeros((n * positions, patch));
    let cols_flat = cols.as_slice_mut().expect("standard layout");
    for s in 0..n {
        let sample = x.row(s);
        let sample = sample.as_slice().expect("contiguous activation row");
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = (s * positions + oy * g.out_w + ox) * patch;
                let dst = &mut cols_flat[row..row + patch];
                let mut k = 0;
                for c in 0..g.channels {
                    let plane = &sample[c * hw..(c + 1) * hw];
                    for ky in 0..g.kernel_h {
                        for kx in 0..g.kernel_w {
                            if let Some((iy, ix)) = g.source(oy, ox, ky, kx) {
                                dst[k] = plane[iy * g.width + ix];
                            }
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back to the input layout.
pub(crate) fn col2im(dcols: ArrayView2<'_, f32>, n: usize, g: &ConvGeometry) -> Array2<f32> {
    let positions = g.out_positions();
    let patch = g.patch_len();
    let hw = g.height * g.width;
    let mut dx = Array2::<f32>::zeros((n, g.input_len()));
    let src = dcols.as_slice().expect("standard layout");
    for s in 0..n {
        let mut sample = dx.row_mut(s);
        let sample = sample.as_slice_mut().expect("contiguous row");
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = (s * positions + oy * g.out_w + ox) * patch;
                let patch_grad = &src[row..row + patch];
                let mut k = 0;
                for c in 0..g.channels {
                    for ky in 0..g.kernel_h {
                        for kx in 0..g.kernel_w {
                            if let Some((iy, ix)) = g.source(oy, ox, ky, kx) {
                                sample[c * hw + iy * g.width + ix] += patch_grad[k];
                            }
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// `(batch * positions, filters)` → `(batch, filters * positions)`.
pub(crate) fn rows_to_channel_major(z: &Array2<f32>, n: usize, positions: usize) -> Array2<f32> {
    let filters = z.ncols();
    let mut out = Array2::<f32>::zeros((n, filters * positions));
    let zs = z.as_slice().expect("standard layout");
    let os = out.as_slice_mut().expect("standard layout");
    for s in 0..n {
        for p in 0..positions {
            let src = &zs[(s * positions + p) * filters..(s * positions + p + 1) * filters];
            for (f, &v) in src.iter().enumerate() {
                os[s * filters * positions + f * positions + p] = v;
            }
        }
    }
    out
}

/// Inverse of [`rows_to_channel_major`].
pub(crate) fn channel_major_to_rows(d: ArrayView2<'_, f32>, filters: usize, positions: usize) -> Array2<f32> {
    let n = d.nrows();
    let mut out = Array2::<f32>::zeros((n * positions, filters));
    let ds = d.as_slice().expect("standard layout");
    let os = out.as_slice_mut().expect("standard layout");
    for s in 0..n {
        for f in 0..filters {
            let src = &ds[s * filters * positions + f * positions..][..positions];
            for (p, &v) in src.iter().enumerate() {
                os[(s * positions + p) * filters + f] = v;
            }
        }
    }
    out
}

/// Non-overlapping max pooling with window = stride = `size`.
///
/// Returns the pooled activations and, per output element, the flat input
/// offset (within its sample row) of the selected maximum. Ties keep the
/// first element in scan order.
pub(crate) fn max_pool(
    x: ArrayView2<'_, f32>,
    channels: usize,
    height: usize,
    width: usize,
    size: usize,
) -> (Array2<f32>, Vec<u32>) {
    let n = x.nrows();
    let (oh, ow) = (height / size, width / size);
    let out_len = channels * oh * ow;
    let mut out = Array2::<f32>::zeros((n, out_len));
    let mut argmax = vec![0u32; n * out_len];
    for s in 0..n {
        let src = x.row(s);
        let src = src.as_slice().expect("contiguous row");
        let mut dst = out.row_mut(s);
        let dst = dst.as_slice_mut().expect("contiguous row");
        let arg = &mut argmax[s * out_len..(s + 1) * out_len];
        for c in 0..channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_at = 0usize;
                    for dy in 0..size {
                        for dx in 0..size {
                            let at = c * height * width + (oy * size + dy) * width + ox * size + dx;
                            if src[at] > best {
                                best = src[at];
                                best_at = at;
                            }
                        }
                    }
                    let o = c * oh * ow + oy * ow + ox;
                    dst[o] = best;
                    arg[o] = best_at as u32;
                }
            }
        }
    }
    (out, argmax)
}

pub(crate) fn max_pool_backward(dout: ArrayView2<'_, f32>, argmax: &[u32], in_len: usize) -> Array2<f32> {
    let n = dout.nrows();
    let out_len = dout.ncols();
    let mut dx = Array2::<f32>::zeros((n, in_len));
    for s in 0..n {
        let g = dout.row(s);
        let arg = &argmax[s * out_len..(s + 1) * out_len];
        let mut row = dx.row_mut(s);
        for (o, &at) in arg.iter().enumerate() {
            row[at as usize] += g[o];
        }
    }
    dx
}
