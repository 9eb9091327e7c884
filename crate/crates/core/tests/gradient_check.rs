// SPDX-License-Identifier: MIT OR Apache-2.0

//! Backpropagation against central finite differences of an independent,
//! loop-based f64 forward pass.

use ablatron::nn::train::loss_and_gradients;
use ablatron::nn::{init_network, Activation, LayerKind, LayerSpec, Network, Shape};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// f64 copy of one layer's parameters: weights row-major, then bias.
#[derive(Clone)]
struct RefParams {
    w: Vec<f64>,
    b: Option<Vec<f64>>,
}

fn ref_params(net: &Network) -> Vec<Option<RefParams>> {
    (0..net.layers().len())
        .map(|i| {
            net.params(i).map(|p| RefParams {
                w: p.weights.iter().map(|&v| f64::from(v)).collect(),
                b: p.bias.as_ref().map(|b| b.iter().map(|&v| f64::from(v)).collect()),
            })
        })
        .collect()
}

fn ref_layer(layer: &LayerSpec, p: Option<&RefParams>, x: &[f64]) -> Vec<f64> {
    let s = layer.in_shape;
    let mut z = match layer.kind {
        LayerKind::Dense { units } => {
            let p = p.unwrap();
            (0..units)
                .map(|u| {
                    let dot: f64 = (0..x.len()).map(|j| p.w[u * x.len() + j] * x[j]).sum();
                    dot + p.b.as_ref().map_or(0.0, |b| b[u])
                })
                .collect()
        }
        LayerKind::Conv2d {
            filters,
            kernel_h,
            kernel_w,
            stride,
            padding,
        } => {
            let p = p.unwrap();
            let oh = (s.height + 2 * padding - kernel_h) / stride + 1;
            let ow = (s.width + 2 * padding - kernel_w) / stride + 1;
            let mut out = vec![0.0; filters * oh * ow];
            for f in 0..filters {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = p.b.as_ref().map_or(0.0, |b| b[f]);
                        for c in 0..s.channels {
                            for ky in 0..kernel_h {
                                for kx in 0..kernel_w {
                                    let iy = (oy * stride + ky) as isize - padding as isize;
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if iy < 0 || ix < 0 || iy >= s.height as isize || ix >= s.width as isize {
                                        continue;
                                    }
                                    let wi = f * s.channels * kernel_h * kernel_w + (c * kernel_h + ky) * kernel_w + kx;
                                    let xi = c * s.height * s.width + iy as usize * s.width + ix as usize;
                                    acc += p.w[wi] * x[xi];
                                }
                            }
                        }
                        out[f * oh * ow + oy * ow + ox] = acc;
                    }
                }
            }
            out
        }
        LayerKind::MaxPool { size } => {
            let (oh, ow) = (s.height / size, s.width / size);
            let mut out = vec![f64::NEG_INFINITY; s.channels * oh * ow];
            for c in 0..s.channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        for dy in 0..size {
                            for dx in 0..size {
                                let v = x[c * s.height * s.width + (oy * size + dy) * s.width + ox * size + dx];
                                let o = &mut out[c * oh * ow + oy * ow + ox];
                                *o = o.max(v);
                            }
                        }
                    }
                }
            }
            out
        }
        LayerKind::Flatten => x.to_vec(),
    };
    match layer.activation {
        Activation::Relu => z.iter_mut().for_each(|v| *v = v.max(0.0)),
        Activation::Softmax => {
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            z.iter_mut().for_each(|v| *v = (*v - m).exp());
            let sum: f64 = z.iter().sum();
            z.iter_mut().for_each(|v| *v /= sum);
        }
        Activation::None => {}
    }
    z
}

fn ref_loss(layers: &[LayerSpec], params: &[Option<RefParams>], batch: &Array2<f32>, labels: &[u8]) -> f64 {
    let mut total = 0.0;
    for (row, &label) in batch.rows().into_iter().zip(labels) {
        let mut x: Vec<f64> = row.iter().map(|&v| f64::from(v)).collect();
        for (layer, p) in layers.iter().zip(params) {
            x = ref_layer(layer, p.as_ref(), &x);
        }
        total -= x[usize::from(label)].ln();
    }
    total / labels.len() as f64
}

fn nudge(p: &mut Option<RefParams>, bias: bool, k: usize, by: f64) {
    let p = p.as_mut().unwrap();
    if bias {
        p.b.as_mut().unwrap()[k] += by;
    } else {
        p.w[k] += by;
    }
}

fn random_batch(n: usize, features: usize, classes: usize, seed: u64) -> (Array2<f32>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_simple_fn((n, features), || rng.random::<f32>());
    let y = (0..n).map(|_| rng.random_range(0..classes) as u8).collect();
    (x, y)
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

fn check(net: &Network, seed: u64) {
    let (batch, labels) = random_batch(6, net.input_len(), net.classes(), seed);
    let (loss, _, grads) = loss_and_gradients(net, &batch, &labels).unwrap();
    let params = ref_params(net);
    let layers = net.layers();
    let base = ref_loss(layers, &params, &batch, &labels);
    assert!((loss / labels.len() as f64 - base).abs() < 1e-5 * base.max(1.0));

    let h = 1e-6;
    let mut checked = 0;
    for (i, g) in grads.layers.iter().enumerate() {
        let Some(p) = &params[i] else {
            assert!(g.is_none(), "layer {i} has no parameters but got a gradient");
            continue;
        };
        let (dw, db) = g.as_ref().expect("trainable layer has a gradient");
        let numeric = |bias: bool, k: usize| {
            let mut plus = params.clone();
            let mut minus = params.clone();
            nudge(&mut plus[i], bias, k, h);
            nudge(&mut minus[i], bias, k, -h);
            (ref_loss(layers, &plus, &batch, &labels) - ref_loss(layers, &minus, &batch, &labels)) / (2.0 * h)
        };
        let analytic: Vec<f64> = dw.iter().map(|&v| f64::from(v)).collect();
        let fd: Vec<f64> = (0..p.w.len()).map(|k| numeric(false, k)).collect();
        let e = relative_error(&analytic, &fd);
        assert!(e < 1e-4, "layer {i} weights: relative error {e:e}");
        if let (Some(db), Some(b)) = (db, &p.b) {
            let analytic: Vec<f64> = db.iter().map(|&v| f64::from(v)).collect();
            let fd: Vec<f64> = (0..b.len()).map(|k| numeric(true, k)).collect();
            let e = relative_error(&analytic, &fd);
            assert!(e < 1e-4, "layer {i} bias: relative error {e:e}");
        }
        checked += 1;
    }
    assert!(checked >= 2);
}

fn with_bias_noise(net: Network, seed: u64) -> Network {
    // zero biases would hide a bias-gradient bug behind symmetric kinks
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = net.layers().to_vec();
    let params = (0..layers.len())
        .map(|i| {
            net.params(i).cloned().map(|mut p| {
                if let Some(b) = p.bias.as_mut() {
                    b.mapv_inplace(|_| rng.random_range(-0.1f32..0.1));
                }
                p
            })
        })
        .collect();
    Network::from_parameters(layers, params).unwrap()
}

#[test]
fn dense_network_gradients() {
    let arch = vec![
        LayerSpec::dense(12, 7, Activation::Relu, true),
        LayerSpec::dense(7, 5, Activation::Relu, false),
        LayerSpec::dense(5, 4, Activation::Softmax, true),
    ];
    for seed in 0..3 {
        check(&with_bias_noise(init_network(&arch, seed).unwrap(), seed), seed + 100);
    }
}

#[test]
fn conv_network_gradients() {
    let arch = vec![
        LayerSpec::conv2d(Shape::new(2, 6, 6), 3, 3, 1, 1, Activation::Relu, true),
        LayerSpec::max_pool(Shape::new(3, 6, 6), 2),
        LayerSpec::conv2d(Shape::new(3, 3, 3), 4, 3, 2, 1, Activation::Relu, true),
        LayerSpec::flatten(Shape::new(4, 2, 2)),
        LayerSpec::dense(16, 3, Activation::Softmax, true),
    ];
    for seed in 0..3 {
        check(&with_bias_noise(init_network(&arch, seed).unwrap(), seed), seed + 200);
    }
}

#[test]
fn frozen_layers_get_no_gradient() {
    let arch = vec![
        LayerSpec::dense(12, 7, Activation::Relu, true),
        LayerSpec::dense(7, 5, Activation::Relu, true),
        LayerSpec::dense(5, 4, Activation::Softmax, true),
    ];
    let mut net = init_network(&arch, 9).unwrap();
    net.freeze_below(2);
    let (batch, labels) = random_batch(4, 12, 4, 1);
    let (_, _, g) = loss_and_gradients(&net, &batch, &labels).unwrap();
    assert!(g.layers[0].is_none() && g.layers[1].is_none());
    assert!(g.layers[2].is_some());
}
