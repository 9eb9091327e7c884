// SPDX-License-Identifier: MIT OR Apache-2.0

//! Single-unit and pairwise unit ablation sweeps over one dense layer.

use std::collections::BTreeMap;

use ndarray::Array2;
use rayon::prelude::*;

use super::{prefix_activations, top_k_drop_pp, EVAL_KS};
use crate::ablation::{ablate, AblationSpec};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::evaluation::{diff_reports, evaluate_from, pairwise_diff, ChangeAccounting, EvalReport};
use crate::nn::Network;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRecord {
    pub spec: AblationSpec,
    pub drop_pp: f64,
    pub top5_drop_pp: Option<f64>,
    pub class_deltas_pp: Vec<f64>,
    pub accounting: ChangeAccounting,
    pub report: EvalReport,
}

impl ExperimentRecord {
    /// Build from the undamaged and damaged reports.
    pub fn from_reports(spec: AblationSpec, base: &EvalReport, report: EvalReport) -> Result<Self> {
        let accounting = diff_reports(base, &report)?;
        Ok(Self {
            spec,
            drop_pp: accounting.drop_pp(),
            top5_drop_pp: top_k_drop_pp(base, &report, 5),
            class_deltas_pp: accounting.class_deltas_pp(),
            accounting,
            report,
        })
    }

    /// The single unit of a one-unit record.
    pub fn unit(&self) -> Option<usize> {
        match self.spec.targets.len() {
            1 => self.spec.targets.first().copied(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub layer: usize,
    pub base: EvalReport,
    pub records: Vec<ExperimentRecord>,
}

impl SweepResult {
    /// Overall drops in record order.
    pub fn drops(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.drop_pp).collect()
    }

    pub fn record_for_unit(&self, unit: usize) -> Option<&ExperimentRecord> {
        self.records.iter().find(|r| r.unit() == Some(unit))
    }

    /// `(units, classes)` per-class drops, as consumed by the selectivity statistics.
    pub fn class_drop_matrix(&self) -> Array2<f64> {
        let classes = self.base.classes();
        Array2::from_shape_fn((self.records.len(), classes), |(r, c)| {
            -self.records[r].class_deltas_pp[c]
        })
    }
}

fn dense_units(net: &Network, layer: usize) -> Result<usize> {
    match (net.layer(layer), net.params(layer)) {
        (Some(l), Some(p)) if l.is_dense() => Ok(p.weights.nrows()),
        _ => Err(Error::Spec(format!("layer {layer} is not a dense layer"))),
    }
}

struct Cached {
    acts: Array2<f32>,
    base: EvalReport,
}

fn cache(net: &Network, layer: usize, data: &LabeledDataset) -> Result<Cached> {
    let acts = prefix_activations(net, layer, data)?;
    let base = evaluate_from(net, layer, &acts, data.labels(), &EVAL_KS)?;
    Ok(Cached { acts, base })
}

fn ablated_report(net: &Network, spec: &AblationSpec, cached: &Cached, labels: &[u8]) -> Result<EvalReport> {
    let damaged = ablate(net, spec)?;
    evaluate_from(&damaged, spec.layer, &cached.acts, labels, &EVAL_KS)
}

/// Ablate every unit of dense layer `layer` in turn.
pub fn single_unit_sweep(net: &Network, layer: usize, data: &LabeledDataset) -> Result<SweepResult> {
    let units: Vec<usize> = (0..dense_units(net, layer)?).collect();
    single_unit_sweep_units(net, layer, data, &units)
}

/// Single-unit sweep restricted to `units`; records follow the order of `units`.
pub fn single_unit_sweep_units(
    net: &Network,
    layer: usize,
    data: &LabeledDataset,
    units: &[usize],
) -> Result<SweepResult> {
    let n = dense_units(net, layer)?;
    if let Some(&u) = units.iter().find(|&&u| u >= n) {
        return Err(Error::Spec(format!(
            "unit {u} out of range for layer {layer} ({n} units)"
        )));
    }
    let cached = cache(net, layer, data)?;
    let records = units
        .par_iter()
        .map(|&u| {
            let spec = AblationSpec::units(layer, [u])?;
            let report = ablated_report(net, &spec, &cached, data.labels())?;
            ExperimentRecord::from_reports(spec, &cached.base, report)
        })
        .collect::<Result<_>>()?;
    Ok(SweepResult {
        layer,
        base: cached.base,
        records,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub unit_a: usize,
    pub unit_b: usize,
    pub drop_a_pp: f64,
    pub drop_b_pp: f64,
    pub pair_drop_pp: f64,
    /// `pair_drop − (drop_a + drop_b)`.
    pub gap_pp: f64,
    pub accounting: ChangeAccounting,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseSweep {
    pub singles: SweepResult,
    pub pairs: Vec<PairRecord>,
}

impl PairwiseSweep {
    /// The pair with the largest super-additivity gap.
    pub fn strongest(&self) -> Option<&PairRecord> {
        self.pairs.iter().max_by(|a, b| a.gap_pp.total_cmp(&b.gap_pp))
    }
}

/// Every unordered pair `(a, b)` with `a < b < n`.
pub fn all_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect()
}

/// Ablate every unordered pair of units in dense layer `layer`.
pub fn pairwise_unit_sweep(net: &Network, layer: usize, data: &LabeledDataset) -> Result<PairwiseSweep> {
    let n = dense_units(net, layer)?;
    if n < 2 {
        return Err(Error::Spec(format!("layer {layer} has fewer than two units")));
    }
    pairwise_sweep_pairs(net, layer, data, &all_pairs(n))
}

/// Pairwise sweep restricted to `pairs`. Single drops and the gap come from
/// the same cached reports that feed the accounting.
pub fn pairwise_sweep_pairs(
    net: &Network,
    layer: usize,
    data: &LabeledDataset,
    pairs: &[(usize, usize)],
) -> Result<PairwiseSweep> {
    let n = dense_units(net, layer)?;
    for &(a, b) in pairs {
        if a == b || a >= n || b >= n {
            return Err(Error::Spec(format!("invalid unit pair ({a}, {b}) for {n} units")));
        }
    }
    let mut needed: Vec<usize> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
    needed.sort_unstable();
    needed.dedup();
    let singles = single_unit_sweep_units(net, layer, data, &needed)?;
    let by_unit: BTreeMap<usize, &ExperimentRecord> = singles
        .records
        .iter()
        .map(|r| (r.unit().expect("single unit"), r))
        .collect();
    let cached = Cached {
        acts: prefix_activations(net, layer, data)?,
        base: singles.base.clone(),
    };
    let pairs = pairs
        .par_iter()
        .map(|&(a, b)| {
            let spec = AblationSpec::units(layer, [a, b])?;
            let report = ablated_report(net, &spec, &cached, data.labels())?;
            let (ra, rb) = (by_unit[&a], by_unit[&b]);
            let accounting = pairwise_diff(&cached.base, &ra.report, &rb.report, &report)?;
            let pair_drop_pp = accounting.drop_pp();
            Ok(PairRecord {
                unit_a: a.min(b),
                unit_b: a.max(b),
                drop_a_pp: ra.drop_pp,
                drop_b_pp: rb.drop_pp,
                pair_drop_pp,
                gap_pp: pair_drop_pp - (ra.drop_pp + rb.drop_pp),
                accounting,
                report,
            })
        })
        .collect::<Result<_>>()?;
    Ok(PairwiseSweep { singles, pairs })
}
