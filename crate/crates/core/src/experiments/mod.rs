// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experimental campaigns: unit sweeps, seed populations, per-layer filter
//! group sweeps and recovery retraining.
//!
//! Every entry point has a variant that runs only an explicit subset of its
//! work items so that callers can resume a partially persisted campaign.

mod layers;
mod population;
mod recovery;
mod sweeps;

pub use layers::{layer_group_sweep, summarize_groups, CurvePoint, GroupRecord, LayerSweep};
pub use population::{population_seed, population_study, SeedOutcome, SeedResult, UnitPoint};
pub use recovery::{
    iterative_recovery, iterative_recovery_from, recovery_instance, recovery_run, sample_groups, IterativeState,
    RecoveryConfig, RecoveryTrace, Retraining, StopRule,
};
pub use sweeps::{
    all_pairs, pairwise_sweep_pairs, pairwise_unit_sweep, single_unit_sweep, single_unit_sweep_units, ExperimentRecord,
    PairRecord, PairwiseSweep, SweepResult,
};

use ndarray::{Array2, Axis};

use crate::data::LabeledDataset;
use crate::error::Result;
use crate::evaluation::EvalReport;
use crate::nn::Network;

/// Top-k levels recorded for every evaluation.
pub const EVAL_KS: [usize; 2] = [1, 5];

const PREFIX_CHUNK: usize = 1000;

/// Activations feeding `layer` for the whole dataset. Ablating `layer` or
/// anything after it leaves these unchanged, so sweeps compute them once.
pub fn prefix_activations(net: &Network, layer: usize, data: &LabeledDataset) -> Result<Array2<f32>> {
    let mut blocks = Vec::new();
    for start in (0..data.len()).step_by(PREFIX_CHUNK) {
        let end = (start + PREFIX_CHUNK).min(data.len());
        blocks.push(net.activations_before(layer, &data.batch_range(start, end))?);
    }
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    Ok(ndarray::concatenate(Axis(0), &views).expect("equal widths"))
}

/// `(before − after) · 100` for top-k accuracy.
pub fn top_k_drop_pp(before: &EvalReport, after: &EvalReport, k: usize) -> Option<f64> {
    Some((before.top_k(k)? - after.top_k(k)?) * 100.0)
}

#[cfg(test)]
pub(crate) mod fixtures {
    use crate::data::{LabeledDataset, Split};
    use crate::nn::{init_network, train, Activation, LayerSpec, Network, Shape, TrainConfig};

    /// 6×6 single-channel images of four classes: a bright quadrant marks the class.
    pub fn quadrants(count: usize, seed: u64) -> LabeledDataset {
        let mut images = Vec::with_capacity(count * 36);
        let mut labels = Vec::with_capacity(count);
        let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1);
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };
        for i in 0..count {
            let class = (i % 4) as u8;
            let (r0, c0) = (usize::from(class / 2) * 3, usize::from(class % 2) * 3);
            for r in 0..6 {
                for c in 0..6 {
                    let noise = (next() % 60) as u8;
                    let inside = (r0..r0 + 3).contains(&r) && (c0..c0 + 3).contains(&c);
                    images.push(if inside { 190 + noise } else { noise });
                }
            }
            labels.push(class);
        }
        LabeledDataset::new(images, labels, 6, 6, 4, Split::Train).unwrap()
    }

    pub fn tiny_mlp() -> Vec<LayerSpec> {
        vec![
            LayerSpec::dense(36, 8, Activation::Relu, false),
            LayerSpec::dense(8, 4, Activation::Softmax, false),
        ]
    }

    /// conv6 3×3 → pool2 → conv8 2×2 → flatten → dense4.
    pub fn tiny_cnn() -> Vec<LayerSpec> {
        vec![
            LayerSpec::conv2d(Shape::new(1, 6, 6), 6, 3, 1, 0, Activation::Relu, true),
            LayerSpec::max_pool(Shape::new(6, 4, 4), 2),
            LayerSpec::conv2d(Shape::new(6, 2, 2), 8, 2, 1, 0, Activation::Relu, true),
            LayerSpec::flatten(Shape::new(8, 1, 1)),
            LayerSpec::dense(8, 4, Activation::Softmax, true),
        ]
    }

    pub fn trained(arch: &[LayerSpec], data: &LabeledDataset, epochs: usize) -> Network {
        let net = init_network(arch, 3).unwrap();
        let cfg = TrainConfig {
            epochs,
            batch_size: 16,
            ..TrainConfig::default()
        };
        train(&net, data, &cfg, None).unwrap().0
    }
}
