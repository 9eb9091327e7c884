// SPDX-License-Identifier: MIT OR Apache-2.0

//! Mini-batch SGD on softmax cross-entropy with per-layer freezing.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{kernels, Activation, Cache, LayerKind, Network};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::evaluation::evaluate;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            learning_rate: 0.1,
            seed: 1,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be a positive real".into()));
        }
        Ok(())
    }
}

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub test_top5: Option<f64>,
}

/// Weight gradient and optional bias gradient of one layer.
pub type LayerGradient = (Array2<f32>, Option<Array1<f32>>);

/// Per-layer parameter gradients (`None` for parameter-free or frozen layers).
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<Option<LayerGradient>>,
}

/// Summed cross-entropy, correct-prediction count and gradients of the
/// *mean* loss over one batch. Frozen layers get no gradient.
pub fn loss_and_gradients(net: &Network, batch: &Array2<f32>, labels: &[u8]) -> Result<(f64, usize, Gradients)> {
    if batch.nrows() != labels.len() || labels.is_empty() {
        return Err(Error::Data(format!(
            "{} rows but {} labels",
            batch.nrows(),
            labels.len()
        )));
    }
    let classes = net.classes();
    if let Some(&bad) = labels.iter().find(|&&l| usize::from(l) >= classes) {
        return Err(Error::Data(format!("label {bad} outside [0, {classes})")));
    }
    let trace = net.forward_trace(batch)?;
    let probs = trace.outputs.last().expect("non-empty network");
    let n = labels.len();

    let mut loss = 0.0f64;
    let mut correct = 0usize;
    for (row, &label) in probs.rows().into_iter().zip(labels) {
        let p = f64::from(row[usize::from(label)]);
        loss -= p.max(f64::from(f32::MIN_POSITIVE)).ln();
        if !p.is_finite() {
            loss = f64::NAN;
        }
        if crate::evaluation::argmax(row.as_slice().expect("contiguous")) == usize::from(label) {
            correct += 1;
        }
    }

    let mut grads = Gradients {
        layers: vec![None; net.layers().len()],
    };
    let Some(lowest) = net.lowest_trainable() else {
        return Ok((loss, correct, grads));
    };

    // softmax + cross-entropy: dL/dz = (p - onehot) / n
    let mut delta = probs.clone();
    for (mut row, &label) in delta.rows_mut().into_iter().zip(labels) {
        row[usize::from(label)] -= 1.0;
    }
    delta.mapv_inplace(|v| v / n as f32);

    for i in (lowest..net.layers().len()).rev() {
        let layer = &net.layers()[i];
        if i + 1 != net.layers().len() && layer.activation == Activation::Relu {
            // relu'(z) = 1 iff z > 0, i.e. iff the output is positive
            ndarray::Zip::from(&mut delta).and(&trace.outputs[i]).for_each(|d, &a| {
                if a <= 0.0 {
                    *d = 0.0;
                }
            });
        }
        let trainable = !net.is_frozen(i);
        let need_input_grad = i > lowest;
        match (&layer.kind, &trace.caches[i]) {
            (LayerKind::Dense { .. }, Cache::Dense { input }) => {
                let p = net.params(i).expect("dense params");
                if trainable {
                    let dw = delta.t().dot(input);
                    let db = p.bias.as_ref().map(|_| delta.sum_axis(Axis(0)));
                    grads.layers[i] = Some((dw, db));
                }
                if need_input_grad {
                    delta = delta.dot(&p.weights);
                }
            }
            (LayerKind::Conv2d { filters, .. }, Cache::Conv { cols }) => {
                let p = net.params(i).expect("conv params");
                let g = layer.conv_geometry().expect("validated conv");
                let dz = kernels::channel_major_to_rows(delta.view(), *filters, g.out_positions());
                if trainable {
                    let dw = dz.t().dot(cols);
                    let db = p.bias.as_ref().map(|_| dz.sum_axis(Axis(0)));
                    grads.layers[i] = Some((dw, db));
                }
                if need_input_grad {
                    let dcols = dz.dot(&p.weights);
                    delta = kernels::col2im(dcols.view(), n, &g);
                }
            }
            (LayerKind::MaxPool { .. }, Cache::Pool { argmax, in_len }) => {
                if need_input_grad {
                    delta = kernels::max_pool_backward(delta.view(), argmax, *in_len);
                }
            }
            (LayerKind::Flatten, Cache::Flatten) => {}
            _ => unreachable!("cache kind always matches layer kind"),
        }
    }
    Ok((loss, correct, grads))
}

/// Plain SGD step on every layer that has a gradient.
pub fn apply_gradients(net: &mut Network, grads: &Gradients, learning_rate: f32) {
    for (i, g) in grads.layers.iter().enumerate() {
        let (Some((dw, db)), false) = (g, net.is_frozen(i)) else {
            continue;
        };
        let p = net.params_mut(i).expect("gradient implies params");
        p.weights.scaled_add(-learning_rate, dw);
        if let (Some(b), Some(db)) = (p.bias.as_mut(), db) {
            b.scaled_add(-learning_rate, db);
        }
    }
}

/// Epoch-at-a-time SGD driver. Owns the network and the shuffling stream.
pub struct Trainer<'a> {
    net: Network,
    data: &'a LabeledDataset,
    cfg: TrainConfig,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    epochs_done: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(net: Network, data: &'a LabeledDataset, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::Data("empty training set".into()));
        }
        if data.feature_len() != net.input_len() {
            return Err(Error::Data(format!(
                "dataset has {} features, network expects {}",
                data.feature_len(),
                net.input_len()
            )));
        }
        if data.classes() > net.classes() {
            return Err(Error::Data(format!(
                "dataset has {} classes, network outputs {}",
                data.classes(),
                net.classes()
            )));
        }
        Ok(Self {
            net,
            data,
            cfg,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            order: (0..data.len()).collect(),
            epochs_done: 0,
        })
    }

    /// One pass over the data; returns (mean loss, training accuracy).
    pub fn run_epoch(&mut self) -> Result<(f64, f64)> {
        let epoch = self.epochs_done + 1;
        if self.cfg.shuffle {
            self.order.shuffle(&mut self.rng);
        }
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        let labels = self.data.labels();
        for chunk in self.order.chunks(self.cfg.batch_size) {
            let batch = self.data.batch(chunk);
            let batch_labels: Vec<u8> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, ok, grads) = loss_and_gradients(&self.net, &batch, &batch_labels)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            loss_sum += loss;
            correct += ok;
            apply_gradients(&mut self.net, &grads, self.cfg.learning_rate);
        }
        self.epochs_done = epoch;
        let n = self.data.len() as f64;
        Ok((loss_sum / n, correct as f64 / n))
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn into_network(self) -> Network {
        self.net
    }
}

/// Train for `cfg.epochs` epochs. When `eval` is given, top-1/top-5 test
/// accuracy is recorded after every epoch.
pub fn train(
    net: &Network,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    eval: Option<&LabeledDataset>,
) -> Result<(Network, Vec<EpochStats>)> {
    let mut trainer = Trainer::new(net.clone(), data, *cfg)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let (train_loss, train_accuracy) = trainer.run_epoch()?;
        let (test_accuracy, test_top5) = match eval {
            Some(test) => {
                let report = evaluate(trainer.network(), test, &[1, 5])?;
                (Some(report.overall_accuracy), report.top_k(5))
            }
            None => (None, None),
        };
        log::debug!(
            "epoch {}: loss {train_loss:.5} train acc {train_accuracy:.4} test acc {test_accuracy:?}",
            trainer.epochs_done()
        );
        history.push(EpochStats {
            epoch: trainer.epochs_done(),
            train_loss,
            train_accuracy,
            test_accuracy,
            test_top5,
        });
    }
    Ok((trainer.into_network(), history))
}
