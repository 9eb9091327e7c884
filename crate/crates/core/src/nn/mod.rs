// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minimal dense/convolutional classifier.
//!
//! A [`Network`] is an ordered list of [`LayerSpec`]s plus one weight matrix
//! (and optional bias vector) per parametrized layer. Every parametrized
//! layer stores its weights as a `(units, fan_in)` matrix: for dense layers a
//! row is one unit's incoming weights, for conv layers a row is one filter
//! flattened as `in_channels × kernel_h × kernel_w`. Ablation therefore always
//! means zeroing rows.
//!
//! The last layer must be a dense softmax layer; [`Network::forward`]
//! returns class probabilities.

pub mod arch;
pub mod checkpoint;
pub(crate) mod kernels;
pub mod train;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use kernels::ConvGeometry;

pub use arch::{desk_cnn, paper_mlp};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use train::{train, EpochStats, TrainConfig, Trainer};

/// Channel-major activation shape. Plain vectors are `(n, 1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub const fn vector(len: usize) -> Self {
        Self::new(len, 1, 1)
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Softmax,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerKind {
    Dense {
        units: usize,
    },
    Conv2d {
        filters: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    },
    /// Non-overlapping pooling, window = stride = `size`.
    MaxPool {
        size: usize,
    },
    Flatten,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_shape: Shape,
    pub activation: Activation,
    pub has_bias: bool,
}

impl LayerSpec {
    pub fn dense(inputs: usize, units: usize, activation: Activation, has_bias: bool) -> Self {
        Self {
            kind: LayerKind::Dense { units },
            in_shape: Shape::vector(inputs),
            activation,
            has_bias,
        }
    }

    pub fn conv2d(
        in_shape: Shape,
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        activation: Activation,
        has_bias: bool,
    ) -> Self {
        Self {
            kind: LayerKind::Conv2d {
                filters,
                kernel_h: kernel,
                kernel_w: kernel,
                stride,
                padding,
            },
            in_shape,
            activation,
            has_bias,
        }
    }

    pub fn max_pool(in_shape: Shape, size: usize) -> Self {
        Self {
            kind: LayerKind::MaxPool { size },
            in_shape,
            activation: Activation::None,
            has_bias: false,
        }
    }

    pub fn flatten(in_shape: Shape) -> Self {
        Self {
            kind: LayerKind::Flatten,
            in_shape,
            activation: Activation::None,
            has_bias: false,
        }
    }

    pub fn out_shape(&self) -> Result<Shape> {
        let i = self.in_shape;
        match self.kind {
            LayerKind::Dense { units } => {
                if i.height != 1 || i.width != 1 {
                    return Err(Error::Config(format!("dense layer needs a vector input, got {i}")));
                }
                if units == 0 {
                    return Err(Error::Config("dense layer with zero units".into()));
                }
                Ok(Shape::vector(units))
            }
            LayerKind::Conv2d {
                filters,
                kernel_h,
                kernel_w,
                stride,
                padding,
            } => {
                if filters == 0 || kernel_h == 0 || kernel_w == 0 || stride == 0 {
                    return Err(Error::Config("conv2d parameters must be positive".into()));
                }
                let ph = i.height + 2 * padding;
                let pw = i.width + 2 * padding;
                if ph < kernel_h || pw < kernel_w {
                    return Err(Error::Config(format!(
                        "kernel {kernel_h}x{kernel_w} larger than padded input {i}"
                    )));
                }
                Ok(Shape::new(
                    filters,
                    (ph - kernel_h) / stride + 1,
                    (pw - kernel_w) / stride + 1,
                ))
            }
            LayerKind::MaxPool { size } => {
                if size == 0 || i.height < size || i.width < size {
                    return Err(Error::Config(format!("pool size {size} invalid for {i}")));
                }
                Ok(Shape::new(i.channels, i.height / size, i.width / size))
            }
            LayerKind::Flatten => Ok(Shape::vector(i.len())),
        }
    }

    /// `(rows, cols)` of the weight matrix, `None` for parameter-free layers.
    pub fn weight_dims(&self) -> Option<(usize, usize)> {
        match self.kind {
            LayerKind::Dense { units } => Some((units, self.in_shape.len())),
            LayerKind::Conv2d {
                filters,
                kernel_h,
                kernel_w,
                ..
            } => Some((filters, self.in_shape.channels * kernel_h * kernel_w)),
            LayerKind::MaxPool { .. } | LayerKind::Flatten => None,
        }
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.kind, LayerKind::Dense { .. })
    }

    pub fn is_conv(&self) -> bool {
        matches!(self.kind, LayerKind::Conv2d { .. })
    }

    pub(crate) fn conv_geometry(&self) -> Option<ConvGeometry> {
        let LayerKind::Conv2d {
            kernel_h,
            kernel_w,
            stride,
            padding,
            ..
        } = self.kind
        else {
            return None;
        };
        let out = self.out_shape().ok()?;
        Some(ConvGeometry {
            channels: self.in_shape.channels,
            height: self.in_shape.height,
            width: self.in_shape.width,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h: out.height,
            out_w: out.width,
        })
    }
}

/// Check that an architecture is well formed.
pub fn validate_architecture(arch: &[LayerSpec]) -> Result<()> {
    let Some(last) = arch.last() else {
        return Err(Error::Config("empty architecture".into()));
    };
    let mut prev: Option<Shape> = None;
    for (i, layer) in arch.iter().enumerate() {
        let out = layer
            .out_shape()
            .map_err(|e| Error::Config(format!("layer {i}: {e}")))?;
        if let Some(p) = prev {
            if p != layer.in_shape {
                return Err(Error::Config(format!(
                    "layer {i} expects input {} but layer {} produces {}",
                    layer.in_shape,
                    i - 1,
                    p
                )));
            }
        }
        if layer.activation == Activation::Softmax && i + 1 != arch.len() {
            return Err(Error::Config(format!(
                "softmax on layer {i}; only the final layer may use softmax"
            )));
        }
        if layer.has_bias && layer.weight_dims().is_none() {
            return Err(Error::Config(format!("layer {i} has no parameters to bias")));
        }
        prev = Some(out);
    }
    if !(last.is_dense() && last.activation == Activation::Softmax) {
        return Err(Error::Config("final layer must be a dense softmax classifier".into()));
    }
    Ok(())
}

/// Trainable parameters of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// `(units or filters, fan_in)`.
    pub weights: Array2<f32>,
    pub bias: Option<Array1<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<LayerSpec>,
    params: Vec<Option<Params>>,
    frozen: Vec<bool>,
}

/// Weights ~ N(0, 1/fan_in), biases zero; deterministic in `seed`.
pub fn init_network(arch: &[LayerSpec], seed: u64) -> Result<Network> {
    validate_architecture(arch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = arch
        .iter()
        .map(|layer| {
            layer.weight_dims().map(|(rows, cols)| {
                let normal = Normal::new(0.0f32, 1.0 / (cols as f32).sqrt()).expect("positive standard deviation");
                let weights = Array2::from_shape_simple_fn((rows, cols), || normal.sample(&mut rng));
                let bias = layer.has_bias.then(|| Array1::zeros(rows));
                Params { weights, bias }
            })
        })
        .collect();
    Ok(Network {
        layers: arch.to_vec(),
        params,
        frozen: vec![false; arch.len()],
    })
}

/// Per-layer state kept by a training forward pass.
pub(crate) enum Cache {
    Dense { input: Array2<f32> },
    Conv { cols: Array2<f32> },
    Pool { argmax: Vec<u32>, in_len: usize },
    Flatten,
}

pub(crate) struct Trace {
    pub caches: Vec<Cache>,
    /// Post-activation output of every layer.
    pub outputs: Vec<Array2<f32>>,
}

impl Network {
    /// Assemble a network from explicit parameters, validating every shape.
    pub fn from_parameters(arch: Vec<LayerSpec>, params: Vec<Option<Params>>) -> Result<Self> {
        validate_architecture(&arch)?;
        if params.len() != arch.len() {
            return Err(Error::Config(format!(
                "{} parameter slots for {} layers",
                params.len(),
                arch.len()
            )));
        }
        for (i, (layer, p)) in arch.iter().zip(&params).enumerate() {
            match (layer.weight_dims(), p) {
                (None, None) => {}
                (Some(dims), Some(p)) => {
                    if p.weights.dim() != dims {
                        return Err(Error::Config(format!(
                            "layer {i}: weights {:?}, expected {dims:?}",
                            p.weights.dim()
                        )));
                    }
                    match (&p.bias, layer.has_bias) {
                        (Some(b), true) if b.len() == dims.0 => {}
                        (None, false) => {}
                        _ => return Err(Error::Config(format!("layer {i}: bias does not match has_bias"))),
                    }
                }
                _ => return Err(Error::Config(format!("layer {i}: parameter presence mismatch"))),
            }
        }
        let frozen = vec![false; arch.len()];
        Ok(Self {
            layers: arch,
            params,
            frozen,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer(&self, index: usize) -> Option<&LayerSpec> {
        self.layers.get(index)
    }

    pub fn params(&self, index: usize) -> Option<&Params> {
        self.params.get(index).and_then(Option::as_ref)
    }

    pub(crate) fn params_mut(&mut self, index: usize) -> Option<&mut Params> {
        self.params.get_mut(index).and_then(Option::as_mut)
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].in_shape.len()
    }

    pub fn classes(&self) -> usize {
        self.layers
            .last()
            .and_then(LayerSpec::weight_dims)
            .map_or(0, |(rows, _)| rows)
    }

    pub fn is_frozen(&self, index: usize) -> bool {
        self.frozen.get(index).copied().unwrap_or(false)
    }

    pub fn set_frozen(&mut self, index: usize, frozen: bool) {
        if let Some(f) = self.frozen.get_mut(index) {
            *f = frozen;
        }
    }

    /// Freeze every layer with index `< index` and unfreeze the rest.
    pub fn freeze_below(&mut self, index: usize) {
        for (i, f) in self.frozen.iter_mut().enumerate() {
            *f = i < index;
        }
    }

    pub fn frozen_flags(&self) -> &[bool] {
        &self.frozen
    }

    /// Lowest layer that receives gradient updates.
    pub(crate) fn lowest_trainable(&self) -> Option<usize> {
        (0..self.layers.len()).find(|&i| self.params[i].is_some() && !self.frozen[i])
    }

    pub fn parameter_count(&self) -> usize {
        self.params
            .iter()
            .flatten()
            .map(|p| p.weights.len() + p.bias.as_ref().map_or(0, Array1::len))
            .sum()
    }

    /// Class probabilities for a `(batch, input_len)` matrix.
    pub fn forward(&self, batch: &Array2<f32>) -> Result<Array2<f32>> {
        self.forward_from(0, batch)
    }

    /// Run layers `start..` on activations that feed layer `start`.
    pub fn forward_from(&self, start: usize, activations: &Array2<f32>) -> Result<Array2<f32>> {
        self.check_input(start, activations)?;
        let mut x = self.apply_layer(start, activations.view(), None);
        for i in start + 1..self.layers.len() {
            x = self.apply_layer(i, x.view(), None);
        }
        Ok(x)
    }

    /// Activations feeding layer `layer` (the output of layer `layer - 1`).
    pub fn activations_before(&self, layer: usize, batch: &Array2<f32>) -> Result<Array2<f32>> {
        self.check_input(0, batch)?;
        let mut x = batch.clone();
        for i in 0..layer.min(self.layers.len()) {
            x = self.apply_layer(i, x.view(), None);
        }
        Ok(x)
    }

    fn check_input(&self, start: usize, x: &Array2<f32>) -> Result<()> {
        let layer = self
            .layers
            .get(start)
            .ok_or_else(|| Error::Config(format!("no layer {start}")))?;
        if x.ncols() != layer.in_shape.len() {
            return Err(Error::Data(format!(
                "batch has {} features, layer {start} expects {}",
                x.ncols(),
                layer.in_shape.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite input value".into()));
        }
        Ok(())
    }

    pub(crate) fn forward_trace(&self, batch: &Array2<f32>) -> Result<Trace> {
        self.check_input(0, batch)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut outputs: Vec<Array2<f32>> = Vec::with_capacity(self.layers.len());
        for i in 0..self.layers.len() {
            let input = if i == 0 { batch.view() } else { outputs[i - 1].view() };
            let mut cache = None;
            let out = self.apply_layer(i, input, Some(&mut cache));
            caches.push(cache.expect("trace requested"));
            outputs.push(out);
        }
        Ok(Trace { caches, outputs })
    }

    fn apply_layer(&self, i: usize, x: ArrayView2<'_, f32>, cache: Option<&mut Option<Cache>>) -> Array2<f32> {
        let layer = &self.layers[i];
        let n = x.nrows();
        let mut z = match layer.kind {
            LayerKind::Dense { .. } => {
                let p = self.params[i].as_ref().expect("dense params");
                let mut z = x.dot(&p.weights.t());
                if let Some(b) = &p.bias {
                    z += b;
                }
                if let Some(c) = cache {
                    *c = Some(Cache::Dense { input: x.to_owned() });
                }
                z
            }
            LayerKind::Conv2d { .. } => {
                let p = self.params[i].as_ref().expect("conv params");
                let g = layer.conv_geometry().expect("validated conv");
                let cols = kernels::im2col(x, &g);
                let mut zr = cols.dot(&p.weights.t());
                if let Some(b) = &p.bias {
                    zr += b;
                }
                if let Some(c) = cache {
                    *c = Some(Cache::Conv { cols });
                }
                kernels::rows_to_channel_major(&zr, n, g.out_positions())
            }
            LayerKind::MaxPool { size } => {
                let s = layer.in_shape;
                let (out, argmax) = kernels::max_pool(x, s.channels, s.height, s.width, size);
                if let Some(c) = cache {
                    *c = Some(Cache::Pool {
                        argmax,
                        in_len: s.len(),
                    });
                }
                out
            }
            LayerKind::Flatten => {
                if let Some(c) = cache {
                    *c = Some(Cache::Flatten);
                }
                x.to_owned()
            }
        };
        match layer.activation {
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Softmax => softmax_rows(&mut z),
            Activation::None => {}
        }
        z
    }

    /// Copy of `self` with layer `index` removed from the computation by
    /// deleting the given unit rows and the matching input columns of the
    /// next dense layer. Only defined for a dense layer followed by a dense
    /// layer.
    pub fn without_units(&self, index: usize, units: &[usize]) -> Result<Network> {
        let (layer, next) = match (self.layers.get(index), self.layers.get(index + 1)) {
            (Some(l), Some(n)) if l.is_dense() && n.is_dense() => (*l, *n),
            _ => {
                return Err(Error::Spec(format!(
                    "layer {index} must be a dense layer followed by a dense layer"
                )))
            }
        };
        let p = self.params(index).expect("dense params");
        let q = self.params(index + 1).expect("dense params");
        let keep: Vec<usize> = (0..p.weights.nrows()).filter(|u| !units.contains(u)).collect();
        let mut layers = self.layers.clone();
        let mut params = self.params.clone();
        layers[index] = LayerSpec::dense(layer.in_shape.len(), keep.len(), layer.activation, layer.has_bias);
        layers[index + 1] = LayerSpec::dense(
            keep.len(),
            next.weight_dims().expect("dense").0,
            next.activation,
            next.has_bias,
        );
        params[index] = Some(Params {
            weights: p.weights.select(Axis(0), &keep),
            bias: p.bias.as_ref().map(|b| b.select(Axis(0), &keep)),
        });
        params[index + 1] = Some(Params {
            weights: q.weights.select(Axis(1), &keep),
            bias: q.bias.clone(),
        });
        Network::from_parameters(layers, params)
    }

    /// Row `unit` of layer `index`'s weight matrix.
    pub fn incoming_weights(&self, index: usize, unit: usize) -> Option<Vec<f32>> {
        let p = self.params(index)?;
        (unit < p.weights.nrows()).then(|| p.weights.slice(s![unit, ..]).to_vec())
    }
}

/// Row-wise softmax with max subtraction; normalizer accumulated in f64.
pub fn softmax_rows(z: &mut Array2<f32>) {
    for mut row in z.rows_mut() {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.iter().map(|&v| f64::from(v)).sum();
        row.mapv_inplace(|v| (f64::from(v) / sum) as f32);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_init_shapes_and_statistics() {
        let net = init_network(&paper_mlp(), 1).unwrap();
        let w = &net.params(0).unwrap().weights;
        assert_eq!(w.dim(), (20, 784));
        let n = w.len() as f64;
        let mean: f64 = w.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let sigma = 1.0 / 784f64.sqrt();
        assert!(mean.abs() < 3.0 * sigma / n.sqrt(), "mean {mean}");
        let var: f64 = w.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
        assert!((var.sqrt() / sigma - 1.0).abs() < 0.03);
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_network(&paper_mlp(), 7).unwrap();
        let b = init_network(&paper_mlp(), 7).unwrap();
        assert_eq!(a, b);
        let c = init_network(&paper_mlp(), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn shape_mismatch_is_configuration_error() {
        let arch = vec![
            LayerSpec::dense(784, 20, Activation::Relu, false),
            LayerSpec::dense(30, 10, Activation::Softmax, false),
        ];
        assert!(matches!(init_network(&arch, 1), Err(Error::Config(_))));
    }

    #[test]
    fn softmax_only_on_last_layer() {
        let arch = vec![
            LayerSpec::dense(4, 3, Activation::Softmax, false),
            LayerSpec::dense(3, 2, Activation::Softmax, false),
        ];
        assert!(matches!(init_network(&arch, 1), Err(Error::Config(_))));
    }

    #[test]
    fn zero_input_gives_uniform_output() {
        let net = init_network(&paper_mlp(), 3).unwrap();
        let out = net.forward(&Array2::zeros((5, 784))).unwrap();
        assert_eq!(out.dim(), (5, 10));
        for &p in &out {
            assert!((p - 0.1).abs() < 1e-7);
        }
    }

    #[test]
    fn rows_sum_to_one() {
        let net = init_network(&desk_cnn(), 3).unwrap();
        let x = Array2::from_shape_fn((4, 784), |(i, j)| ((i * 31 + j * 17) % 255) as f32 / 255.0);
        let out = net.forward(&x).unwrap();
        assert_eq!(out.dim(), (4, 10));
        for row in out.rows() {
            let s: f64 = row.iter().map(|&v| f64::from(v)).sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn non_finite_input_rejected() {
        let net = init_network(&paper_mlp(), 3).unwrap();
        let mut x = Array2::zeros((2, 784));
        x[[1, 5]] = f32::NAN;
        assert!(matches!(net.forward(&x), Err(Error::Data(_))));
    }

    #[test]
    fn forward_from_matches_full_forward() {
        let net = init_network(&desk_cnn(), 11).unwrap();
        let x = Array2::from_shape_fn((3, 784), |(i, j)| ((i + j) % 13) as f32 / 13.0);
        let full = net.forward(&x).unwrap();
        for start in 0..net.layers().len() {
            let acts = net.activations_before(start, &x).unwrap();
            assert_eq!(net.forward_from(start, &acts).unwrap(), full);
        }
    }
}
