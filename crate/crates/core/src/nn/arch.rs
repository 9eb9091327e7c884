// SPDX-License-Identifier: MIT OR Apache-2.0

//! Named architectures.

use super::{Activation, LayerSpec, Shape};
use crate::error::{Error, Result};

/// 784-20-10-10 ReLU MLP with a softmax output and no biases anywhere.
pub fn paper_mlp() -> Vec<LayerSpec> {
    vec![
        LayerSpec::dense(784, 20, Activation::Relu, false),
        LayerSpec::dense(20, 10, Activation::Relu, false),
        LayerSpec::dense(10, 10, Activation::Softmax, false),
    ]
}

/// Small CNN for 28×28 digits:
/// conv16-pool-conv32-pool-conv64-flatten-dense10, 3×3 kernels, biased convs.
///
/// Layer indices: 0 conv16, 1 pool, 2 conv32, 3 pool, 4 conv64, 5 flatten, 6 dense.
pub fn desk_cnn() -> Vec<LayerSpec> {
    let input = Shape::new(1, 28, 28);
    let c1 = LayerSpec::conv2d(input, 16, 3, 1, 0, Activation::Relu, true);
    let p1 = LayerSpec::max_pool(Shape::new(16, 26, 26), 2);
    let c2 = LayerSpec::conv2d(Shape::new(16, 13, 13), 32, 3, 1, 0, Activation::Relu, true);
    let p2 = LayerSpec::max_pool(Shape::new(32, 11, 11), 2);
    let c3 = LayerSpec::conv2d(Shape::new(32, 5, 5), 64, 3, 1, 0, Activation::Relu, true);
    let flat = LayerSpec::flatten(Shape::new(64, 3, 3));
    let out = LayerSpec::dense(576, 10, Activation::Softmax, true);
    vec![c1, p1, c2, p2, c3, flat, out]
}

pub fn by_name(name: &str) -> Result<Vec<LayerSpec>> {
    match name {
        "mlp" => Ok(paper_mlp()),
        "cnn" => Ok(desk_cnn()),
        other => Err(Error::Config(format!(
            "unknown architecture {other:?} (expected \"mlp\" or \"cnn\")"
        ))),
    }
}
