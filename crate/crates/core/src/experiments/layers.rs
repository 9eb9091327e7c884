// SPDX-License-Identifier: MIT OR Apache-2.0

//! Similarity-group filter ablation across conv layers and proportions.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{prefix_activations, top_k_drop_pp, EVAL_KS};
use crate::ablation::{ablate, group_size, similarity_group, AblationSpec};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::evaluation::evaluate_from;
use crate::nn::Network;

/// One reference filter's group ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub layer: usize,
    pub proportion: f64,
    pub reference: usize,
    pub targets: BTreeSet<usize>,
    pub drop_pp: f64,
    pub top5_drop_pp: f64,
}

/// Mean and population standard deviation of the drops at one
/// `(layer, proportion)`; `lower`/`upper` are `mean ∓ std`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub layer: usize,
    pub proportion: f64,
    pub count: usize,
    pub mean_drop_pp: f64,
    pub std_drop_pp: f64,
    pub lower_pp: f64,
    pub upper_pp: f64,
    pub mean_top5_drop_pp: f64,
    pub std_top5_drop_pp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSweep {
    pub base_top1: f64,
    pub base_top5: f64,
    pub records: Vec<GroupRecord>,
    /// `(layer, reference)` pairs skipped because the reference filter is all zero.
    pub skipped: Vec<(usize, usize)>,
}

impl LayerSweep {
    pub fn curves(&self) -> Vec<CurvePoint> {
        summarize_groups(&self.records)
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Aggregate records per `(layer, proportion)`, ordered by layer then proportion.
pub fn summarize_groups(records: &[GroupRecord]) -> Vec<CurvePoint> {
    let mut groups: BTreeMap<(usize, u64), Vec<&GroupRecord>> = BTreeMap::new();
    for r in records {
        // proportions are positive, so the bit pattern orders like the value
        groups.entry((r.layer, r.proportion.to_bits())).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((layer, bits), rs)| {
            let top1: Vec<f64> = rs.iter().map(|r| r.drop_pp).collect();
            let top5: Vec<f64> = rs.iter().map(|r| r.top5_drop_pp).collect();
            let (mean, std) = mean_std(&top1);
            let (mean5, std5) = mean_std(&top5);
            CurvePoint {
                layer,
                proportion: f64::from_bits(bits),
                count: rs.len(),
                mean_drop_pp: mean,
                std_drop_pp: std,
                lower_pp: mean - std,
                upper_pp: mean + std,
                mean_top5_drop_pp: mean5,
                std_top5_drop_pp: std5,
            }
        })
        .collect()
}

/// For every conv layer in `layers`, every filter as reference and every
/// proportion, ablate the reference's similarity group and record the drop.
///
/// `skip(layer, proportion, reference)` marks work already done. Identical
/// groups reached from different references are evaluated once.
pub fn layer_group_sweep(
    net: &Network,
    data: &LabeledDataset,
    layers: &[usize],
    proportions: &[f64],
    skip: &(dyn Fn(usize, f64, usize) -> bool + Sync),
) -> Result<LayerSweep> {
    if layers.is_empty() || proportions.is_empty() {
        return Err(Error::Config(
            "layer sweep needs at least one layer and one proportion".into(),
        ));
    }
    for &p in proportions {
        group_size(p, 1)?;
    }
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    let mut base = None;
    for &layer in layers {
        let weights = match (net.layer(layer), net.params(layer)) {
            (Some(l), Some(p)) if l.is_conv() => &p.weights,
            _ => return Err(Error::Spec(format!("layer {layer} is not a conv2d layer"))),
        };
        let filters = weights.nrows();
        let mut tasks: Vec<(f64, usize, BTreeSet<usize>)> = Vec::new();
        for reference in 0..filters {
            if weights.row(reference).iter().all(|&w| w == 0.0) {
                log::warn!("layer {layer}: reference filter {reference} is all zero, skipped");
                skipped.push((layer, reference));
                continue;
            }
            for &p in proportions {
                if !skip(layer, p, reference) {
                    tasks.push((p, reference, similarity_group(net, layer, reference, p)?));
                }
            }
        }
        if tasks.is_empty() && base.is_some() {
            continue;
        }
        let acts = prefix_activations(net, layer, data)?;
        let report = evaluate_from(net, layer, &acts, data.labels(), &EVAL_KS)?;
        let (b1, b5) = (report.overall_accuracy, report.top_k(5).expect("top-5 recorded"));
        base.get_or_insert((b1, b5));
        let unique: BTreeSet<&BTreeSet<usize>> = tasks.iter().map(|t| &t.2).collect();
        let drops: BTreeMap<&BTreeSet<usize>, (f64, f64)> = unique
            .into_par_iter()
            .map(|targets| {
                let spec = AblationSpec::filters(layer, targets.iter().copied())?;
                let damaged = ablate(net, &spec)?;
                let after = evaluate_from(&damaged, layer, &acts, data.labels(), &EVAL_KS)?;
                let top1 = (b1 - after.overall_accuracy) * 100.0;
                let top5 = top_k_drop_pp(&report, &after, 5).expect("top-5 recorded");
                Ok((targets, (top1, top5)))
            })
            .collect::<Result<_>>()?;
        for (proportion, reference, targets) in &tasks {
            let (drop_pp, top5_drop_pp) = drops[targets];
            records.push(GroupRecord {
                layer,
                proportion: *proportion,
                reference: *reference,
                targets: targets.clone(),
                drop_pp,
                top5_drop_pp,
            });
        }
        log::info!("layer {layer}: {} group ablations", tasks.len());
    }
    let (base_top1, base_top5) = base.expect("at least one layer");
    Ok(LayerSweep {
        base_top1,
        base_top5,
        records,
        skipped,
    })
}
