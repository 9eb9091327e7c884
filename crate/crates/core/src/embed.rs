// SPDX-License-Identifier: MIT OR Apache-2.0

//! Exact t-SNE.
//!
//! O(N²) per iteration: Gaussian input affinities calibrated per point by a
//! binary search on entropy, symmetrized and early-exaggerated, a Student-t
//! kernel in 2-D, and gradient descent with momentum and per-coordinate
//! gains. The embedding is re-centred after every step.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_POINTS: usize = 5000;
const ENTROPY_TOLERANCE: f64 = 1e-5;
const MAX_BISECTIONS: usize = 50;
const MIN_GAIN: f64 = 0.01;
const P_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub momentum_switch_iter: usize,
    /// KL divergence is recorded every `kl_every` iterations.
    pub kl_every: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch_iter: 250,
            kl_every: 10,
            seed: 1,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self, points: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if points < 3 {
            return bad(format!("t-SNE needs at least 3 points, got {points}"));
        }
        if points > MAX_POINTS {
            return bad(format!("exact t-SNE is capped at {MAX_POINTS} points, got {points}"));
        }
        if !(self.perplexity > 1.0) {
            return bad(format!("perplexity {} must exceed 1", self.perplexity));
        }
        if self.perplexity >= (points - 1) as f64 {
            return bad(format!(
                "perplexity {} must be below the point count minus one ({})",
                self.perplexity,
                points - 1
            ));
        }
        if self.iterations == 0 || self.exaggeration_iters >= self.iterations {
            return bad("iterations must be positive and exceed exaggeration_iters".into());
        }
        if !(self.learning_rate > 0.0) || !(self.early_exaggeration >= 1.0) || self.kl_every == 0 {
            return bad("learning_rate > 0, early_exaggeration >= 1 and kl_every > 0 required".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    /// `(N, 2)`.
    pub coordinates: Array2<f64>,
    /// `(iteration, KL(P || Q))` recorded every `kl_every` iterations and at the end.
    pub kl_history: Vec<(usize, f64)>,
    /// Rows whose perplexity could not be reached (uniform fallback).
    pub degenerate_rows: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerplexityResult {
    pub beta: f64,
    pub probabilities: Vec<f64>,
    /// Natural-log entropy of `probabilities`.
    pub entropy: f64,
    /// Target not reachable; probabilities fell back to uniform.
    pub degenerate: bool,
}

fn row_distribution(distances: &[f64], min: f64, beta: f64) -> (Vec<f64>, f64) {
    let mut p: Vec<f64> = distances.iter().map(|&d| (-(d - min) * beta).exp()).collect();
    let sum: f64 = p.iter().sum();
    let mut weighted = 0.0;
    for (pi, &d) in p.iter_mut().zip(distances) {
        *pi /= sum;
        weighted += *pi * (d - min);
    }
    // H = ln(sum) + beta·E[d - min]; with the shift, ln(sum) is over shifted terms
    let entropy = sum.ln() + beta * weighted;
    (p, entropy)
}

/// Binary search on the Gaussian precision `beta` so that the conditional
/// distribution over `distances` (squared distances to the other points)
/// has perplexity `target` (entropy `ln(target)`).
pub fn perplexity_search(distances: &[f64], target: f64) -> Result<PerplexityResult> {
    if distances.len() < 2 || distances.iter().any(|d| !d.is_finite() || *d < 0.0) {
        return Err(Error::Data(
            "perplexity search needs >= 2 finite nonnegative distances".into(),
        ));
    }
    if !(target >= 1.0) {
        return Err(Error::Config(format!("target perplexity {target} below 1")));
    }
    let goal = target.ln();
    let min = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    let mut beta = 1.0;
    let (mut p, mut h) = row_distribution(distances, min, beta);
    for _ in 0..MAX_BISECTIONS {
        if (h - goal).abs() <= ENTROPY_TOLERANCE {
            break;
        }
        if h > goal {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = (beta + lo) / 2.0;
        }
        (p, h) = row_distribution(distances, min, beta);
    }
    if (h - goal).abs() <= ENTROPY_TOLERANCE {
        return Ok(PerplexityResult {
            beta,
            probabilities: p,
            entropy: h,
            degenerate: false,
        });
    }
    let n = distances.len();
    Ok(PerplexityResult {
        beta,
        probabilities: vec![1.0 / n as f64; n],
        entropy: (n as f64).ln(),
        degenerate: true,
    })
}

fn squared_distances(data: &Array2<f64>) -> Array2<f64> {
    let n = data.nrows();
    let mut d = Array2::zeros((n, n));
    d.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut row)| {
            let xi = data.row(i);
            for j in 0..n {
                if j != i {
                    row[j] = xi.iter().zip(data.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
                }
            }
        });
    d
}

/// Symmetrized joint affinities `P` (sums to 1) and the degenerate rows.
pub fn joint_probabilities(data: &Array2<f64>, perplexity: f64) -> Result<(Array2<f64>, Vec<usize>)> {
    let n = data.nrows();
    let d = squared_distances(data);
    let rows: Vec<PerplexityResult> = (0..n)
        .into_par_iter()
        .map(|i| {
            let others: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| d[[i, j]]).collect();
            perplexity_search(&others, perplexity)
        })
        .collect::<Result<_>>()?;
    let mut p = Array2::zeros((n, n));
    let mut degenerate = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        if r.degenerate {
            degenerate.push(i);
        }
        let mut k = 0;
        for j in 0..n {
            if j != i {
                p[[i, j]] = r.probabilities[k];
                k += 1;
            }
        }
    }
    let pt = p.t().to_owned();
    let mut joint = (p + pt) / (2.0 * n as f64);
    joint.mapv_inplace(|v| v.max(P_FLOOR));
    for i in 0..n {
        joint[[i, i]] = 0.0;
    }
    Ok((joint, degenerate))
}

/// Student-t numerators `1 / (1 + |y_i - y_j|²)` (zero diagonal) and their sum.
fn student_kernel(y: &Array2<f64>) -> (Array2<f64>, f64) {
    let n = y.nrows();
    let mut num = Array2::zeros((n, n));
    num.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut row)| {
            let (yi0, yi1) = (y[[i, 0]], y[[i, 1]]);
            for j in 0..n {
                if j != i {
                    let (a, b) = (yi0 - y[[j, 0]], yi1 - y[[j, 1]]);
                    row[j] = 1.0 / (1.0 + a * a + b * b);
                }
            }
        });
    let sum = num.sum();
    (num, sum)
}

/// Gradient of KL(`exaggeration`·P || Q) with respect to the layout `y`.
pub fn kl_gradient(p: &Array2<f64>, y: &Array2<f64>, exaggeration: f64) -> Array2<f64> {
    let (num, sum) = student_kernel(y);
    gradient_from_kernel(p, y, &num, sum, exaggeration)
}

fn gradient_from_kernel(
    p: &Array2<f64>,
    y: &Array2<f64>,
    num: &Array2<f64>,
    sum: f64,
    exaggeration: f64,
) -> Array2<f64> {
    let n = y.nrows();
    let mut grad = Array2::zeros((n, 2));
    grad.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut g)| {
            let (mut g0, mut g1) = (0.0, 0.0);
            for j in 0..n {
                if j == i {
                    continue;
                }
                let w = num[[i, j]];
                let coeff = (exaggeration * p[[i, j]] - w / sum) * w;
                g0 += coeff * (y[[i, 0]] - y[[j, 0]]);
                g1 += coeff * (y[[i, 1]] - y[[j, 1]]);
            }
            g[0] = 4.0 * g0;
            g[1] = 4.0 * g1;
        });
    grad
}

/// KL(P || Q) of layout `y`.
pub fn kl_divergence(p: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let (num, sum) = student_kernel(y);
    kl_from_kernel(p, &num, sum)
}

fn kl_from_kernel(p: &Array2<f64>, num: &Array2<f64>, sum: f64) -> f64 {
    let mut kl = 0.0;
    for ((i, j), &pij) in p.indexed_iter() {
        if i != j && pij > 0.0 {
            let q = (num[[i, j]] / sum).max(f64::MIN_POSITIVE);
            kl += pij * (pij / q).ln();
        }
    }
    kl.max(0.0)
}

/// Embed the rows of `data` (N × D) in two dimensions.
pub fn tsne(data: &Array2<f64>, cfg: &TsneConfig) -> Result<Embedding> {
    let n = data.nrows();
    cfg.validate(n)?;
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite value in t-SNE input".into()));
    }
    let (p, degenerate_rows) = joint_probabilities(data, cfg.perplexity)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y = Array2::from_shape_simple_fn((n, 2), || normal.sample(&mut rng));
    center(&mut y);
    let mut velocity = Array2::<f64>::zeros((n, 2));
    let mut gains = Array2::<f64>::ones((n, 2));
    let mut kl_history = Vec::new();

    for iter in 0..cfg.iterations {
        let exaggeration = if iter < cfg.exaggeration_iters {
            cfg.early_exaggeration
        } else {
            1.0
        };
        let momentum = if iter < cfg.momentum_switch_iter {
            cfg.initial_momentum
        } else {
            cfg.final_momentum
        };
        let (num, sum) = student_kernel(&y);
        if iter % cfg.kl_every == 0 {
            kl_history.push((iter, kl_from_kernel(&p, &num, sum)));
        }
        let grad = gradient_from_kernel(&p, &y, &num, sum, exaggeration);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Embedding { iteration: iter });
        }
        ndarray::Zip::from(&mut gains)
            .and(&grad)
            .and(&velocity)
            .for_each(|gain, &g, &v| {
                *gain = if (g > 0.0) != (v > 0.0) {
                    *gain + 0.2
                } else {
                    (*gain * 0.8).max(MIN_GAIN)
                };
            });
        ndarray::Zip::from(&mut velocity)
            .and(&gains)
            .and(&grad)
            .for_each(|v, &gain, &g| *v = momentum * *v - cfg.learning_rate * gain * g);
        y += &velocity;
        center(&mut y);
    }
    kl_history.push((cfg.iterations, kl_divergence(&p, &y)));
    Ok(Embedding {
        coordinates: y,
        kl_history,
        degenerate_rows,
    })
}

fn center(y: &mut Array2<f64>) {
    let mean = y.mean_axis(Axis(0)).expect("non-empty layout");
    *y -= &mean;
}

/// Fraction of each point's `k` nearest neighbours (in the embedding) that
/// share its label, averaged over points.
pub fn knn_label_purity(coords: &Array2<f64>, labels: &[u8], k: usize) -> f64 {
    let n = coords.nrows();
    let total: usize = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let a = coords[[i, 0]] - coords[[j, 0]];
                    let b = coords[[i, 1]] - coords[[j, 1]];
                    (a * a + b * b, j)
                })
                .collect();
            let k = k.min(d.len());
            d.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            d[..k].iter().filter(|&&(_, j)| labels[j] == labels[i]).count()
        })
        .sum();
    total as f64 / (n * k.min(n - 1)) as f64
}
