// SPDX-License-Identifier: MIT OR Apache-2.0

//! Random filter ablation followed by retraining with the input-side layers frozen.

use std::collections::BTreeSet;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::EVAL_KS;
use crate::ablation::{ablate, group_size, random_group, AblationSpec};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::evaluation::evaluate;
use crate::nn::{EpochStats, Network, TrainConfig, Trainer};

/// Ends retraining at the first epoch `e ≥ min_epochs` whose top-5 accuracy
/// improved on epoch `e − window` by less than `min_improvement_pp`, or at
/// `max_epochs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopRule {
    pub min_epochs: usize,
    pub window: usize,
    pub min_improvement_pp: f64,
    pub max_epochs: usize,
}

impl Default for StopRule {
    fn default() -> Self {
        Self {
            min_epochs: 5,
            window: 2,
            min_improvement_pp: 0.05,
            max_epochs: 30,
        }
    }
}

impl StopRule {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.min_epochs <= self.window || self.max_epochs < self.min_epochs {
            return Err(Error::Config(format!(
                "stop rule needs 0 < window < min_epochs <= max_epochs, got {self:?}"
            )));
        }
        Ok(())
    }

    /// `top5_pp[e - 1]` is the top-5 accuracy in percent after epoch `e`.
    pub fn should_stop(&self, top5_pp: &[f64]) -> bool {
        let e = top5_pp.len();
        if e >= self.max_epochs {
            return true;
        }
        if e < self.min_epochs {
            return false;
        }
        top5_pp[e - 1] - top5_pp[e - 1 - self.window] < self.min_improvement_pp
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Retraining {
    Fixed(usize),
    Until(StopRule),
}

/// `train.epochs` and `train.seed` are ignored: the epoch count comes from
/// `retraining` and shuffling seeds are derived from `seed`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoveryConfig {
    pub layer: usize,
    pub proportion: f64,
    pub seed: u64,
    pub train: TrainConfig,
    pub retraining: Retraining,
}

impl RecoveryConfig {
    fn validate(&self, net: &Network) -> Result<usize> {
        self.train.validate()?;
        match self.retraining {
            Retraining::Fixed(_) => {}
            Retraining::Until(rule) => rule.validate()?,
        }
        let filters = match (net.layer(self.layer), net.params(self.layer)) {
            (Some(l), Some(p)) if l.is_conv() => p.weights.nrows(),
            _ => return Err(Error::Spec(format!("layer {} is not a conv2d layer", self.layer))),
        };
        group_size(self.proportion, filters)?;
        Ok(filters)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryTrace {
    pub instance: usize,
    pub iteration: usize,
    pub layer: usize,
    pub proportion: f64,
    /// Filters drawn at this step.
    pub targets: BTreeSet<usize>,
    /// Distinct filters ablated so far, this step included.
    pub cumulative_ablated: usize,
    pub cumulative_fraction: f64,
    /// Undamaged network.
    pub base_top1: f64,
    pub base_top5: f64,
    /// Right after this step's ablation, before retraining.
    pub ablated_top1: f64,
    pub ablated_top5: f64,
    pub epochs: Vec<EpochStats>,
    pub epochs_used: usize,
}

impl RecoveryTrace {
    /// Test top-1 accuracy after the last retraining epoch.
    pub fn final_top1(&self) -> f64 {
        self.epochs
            .last()
            .and_then(|e| e.test_accuracy)
            .unwrap_or(self.ablated_top1)
    }

    pub fn final_top5(&self) -> f64 {
        self.epochs
            .last()
            .and_then(|e| e.test_top5)
            .unwrap_or(self.ablated_top5)
    }

    /// Best test top-1 accuracy over the first `epochs` retraining epochs.
    pub fn best_top1_within(&self, epochs: usize) -> Option<f64> {
        self.epochs
            .iter()
            .take(epochs)
            .filter_map(|e| e.test_accuracy)
            .max_by(f64::total_cmp)
    }
}

/// Random stream for one ablation step, keyed by run seed, layer and step index.
fn step_rng(seed: u64, layer: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((layer as u64) << 32) | index as u64);
    rng
}

/// The step's filter group and the shuffling seed for its retraining.
fn step_draw(seed: u64, layer: usize, index: usize, n: usize, k: usize) -> (BTreeSet<usize>, u64) {
    let mut rng = step_rng(seed, layer, index);
    let group = random_group(n, k, &mut rng);
    (group, rng.next_u64())
}

/// The filter groups drawn by iterations `0..iterations` of an iterative run.
pub fn sample_groups(
    n: usize,
    proportion: f64,
    seed: u64,
    layer: usize,
    iterations: usize,
) -> Result<Vec<BTreeSet<usize>>> {
    let k = group_size(proportion, n)?;
    Ok((0..iterations).map(|i| step_draw(seed, layer, i, n, k).0).collect())
}

fn top1_top5(net: &Network, data: &LabeledDataset) -> Result<(f64, f64)> {
    let r = evaluate(net, data, &EVAL_KS)?;
    Ok((r.overall_accuracy, r.top_k(5).expect("top-5 recorded")))
}

fn retrain(
    net: Network,
    train_set: &LabeledDataset,
    test_set: &LabeledDataset,
    cfg: &RecoveryConfig,
    shuffle_seed: u64,
) -> Result<(Network, Vec<EpochStats>)> {
    let train_cfg = TrainConfig {
        seed: shuffle_seed,
        ..cfg.train
    };
    let mut trainer = Trainer::new(net, train_set, train_cfg)?;
    let mut history = Vec::new();
    let mut top5_pp = Vec::new();
    loop {
        let done = match cfg.retraining {
            Retraining::Fixed(n) => history.len() >= n,
            Retraining::Until(rule) => rule.should_stop(&top5_pp),
        };
        if done {
            break;
        }
        let (train_loss, train_accuracy) = trainer.run_epoch()?;
        let (top1, top5) = top1_top5(trainer.network(), test_set)?;
        log::debug!(
            "retrain epoch {}: top-1 {top1:.4} top-5 {top5:.4}",
            trainer.epochs_done()
        );
        history.push(EpochStats {
            epoch: trainer.epochs_done(),
            train_loss,
            train_accuracy,
            test_accuracy: Some(top1),
            test_top5: Some(top5),
        });
        top5_pp.push(top5 * 100.0);
    }
    Ok((trainer.into_network(), history))
}

/// One ablate-freeze-retrain step applied to `net`.
#[allow(clippy::too_many_arguments)]
fn step(
    net: &Network,
    train_set: &LabeledDataset,
    test_set: &LabeledDataset,
    cfg: &RecoveryConfig,
    filters: usize,
    (instance, iteration, stream): (usize, usize, usize),
    ablated_before: &BTreeSet<usize>,
    base: (f64, f64),
) -> Result<(Network, RecoveryTrace)> {
    let k = group_size(cfg.proportion, filters)?;
    let (targets, shuffle_seed) = step_draw(cfg.seed, cfg.layer, stream, filters, k);
    let mut damaged = ablate(net, &AblationSpec::filters(cfg.layer, targets.iter().copied())?)?;
    let (ablated_top1, ablated_top5) = top1_top5(&damaged, test_set)?;
    damaged.freeze_below(cfg.layer);
    let (recovered, epochs) = retrain(damaged, train_set, test_set, cfg, shuffle_seed)?;
    let cumulative: BTreeSet<usize> = ablated_before.union(&targets).copied().collect();
    let trace = RecoveryTrace {
        instance,
        iteration,
        layer: cfg.layer,
        proportion: cfg.proportion,
        cumulative_ablated: cumulative.len(),
        cumulative_fraction: cumulative.len() as f64 / filters as f64,
        targets,
        base_top1: base.0,
        base_top5: base.1,
        ablated_top1,
        ablated_top5,
        epochs_used: epochs.len(),
        epochs,
    };
    Ok((recovered, trace))
}

/// Independent instances of ablate-then-retrain on copies of `net`, each
/// with its own random group. Returns traces in the order of `instances`.
pub fn recovery_run(
    net: &Network,
    train_set: &LabeledDataset,
    test_set: &LabeledDataset,
    cfg: &RecoveryConfig,
    instances: &[usize],
) -> Result<Vec<RecoveryTrace>> {
    cfg.validate(net)?;
    let base = top1_top5(net, test_set)?;
    instances
        .par_iter()
        .map(|&i| recovery_instance(net, train_set, test_set, cfg, i, base))
        .collect()
}

/// A single instance of [`recovery_run`]; `base` is the undamaged (top-1, top-5).
pub fn recovery_instance(
    net: &Network,
    train_set: &LabeledDataset,
    test_set: &LabeledDataset,
    cfg: &RecoveryConfig,
    instance: usize,
    base: (f64, f64),
) -> Result<RecoveryTrace> {
    let filters = cfg.validate(net)?;
    let (_, trace) = step(
        net,
        train_set,
        test_set,
        cfg,
        filters,
        (instance, 0, instance),
        &BTreeSet::new(),
        base,
    )?;
    Ok(trace)
}

/// Progress of an iterative run; enough to resume it.
#[derive(Debug, Clone, PartialEq)]
pub struct IterativeState {
    pub net: Network,
    pub ablated: BTreeSet<usize>,
    pub next_iteration: usize,
    pub base_top1: f64,
    pub base_top5: f64,
}

impl IterativeState {
    pub fn new(net: Network, test_set: &LabeledDataset) -> Result<Self> {
        let (base_top1, base_top5) = top1_top5(&net, test_set)?;
        Ok(Self {
            net,
            ablated: BTreeSet::new(),
            next_iteration: 0,
            base_top1,
            base_top5,
        })
    }
}

/// Repeated ablation of freshly sampled groups on the same, progressively
/// retrained network. Groups may overlap earlier ones.
pub fn iterative_recovery(
    net: &Network,
    train_set: &LabeledDataset,
    test_set: &LabeledDataset,
    cfg: &RecoveryConfig,
    iterations: usize,
) -> Result<Vec<RecoveryTrace>> {
    let state = IterativeState::new(net.clone(), test_set)?;
    let (_, traces) = iterative_recovery_from(state, train_set, test_set, cfg, iterations, |_, _| Ok(()))?;
    Ok(traces)
}

/// Continue `state` up to `iterations` total iterations, calling
/// `on_iteration` after each one (for persistence).
pub fn iterative_recovery_from(
    mut state: IterativeState,
    train_set: &LabeledDataset,
    test_set: &LabeledDataset,
    cfg: &RecoveryConfig,
    iterations: usize,
    mut on_iteration: impl FnMut(&RecoveryTrace, &IterativeState) -> Result<()>,
) -> Result<(IterativeState, Vec<RecoveryTrace>)> {
    let filters = cfg.validate(&state.net)?;
    let mut traces = Vec::new();
    while state.next_iteration < iterations {
        let it = state.next_iteration;
        let base = (state.base_top1, state.base_top5);
        let (net, trace) = step(
            &state.net,
            train_set,
            test_set,
            cfg,
            filters,
            (0, it, it),
            &state.ablated,
            base,
        )?;
        log::info!(
            "iteration {it}: {} distinct filters ablated, top-1 {:.4} -> {:.4}",
            trace.cumulative_ablated,
            trace.ablated_top1,
            trace.final_top1()
        );
        state.net = net;
        state.ablated.extend(trace.targets.iter().copied());
        state.next_iteration = it + 1;
        on_iteration(&trace, &state)?;
        traces.push(trace);
    }
    Ok((state, traces))
}
