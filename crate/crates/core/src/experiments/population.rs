// SPDX-License-Identifier: MIT OR Apache-2.0

//! Independently initialized networks: does weight change predict importance?

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::single_unit_sweep;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{init_network, train, LayerSpec, TrainConfig};
use crate::stats::{pearson, spearman, unit_change_pvalue};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitPoint {
    pub seed: u64,
    pub unit: usize,
    /// U-test p-value between initial and trained incoming weights.
    pub p_value: f64,
    pub drop_pp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub test_accuracy: f64,
    pub pearson: f64,
    pub spearman: f64,
    pub units: Vec<UnitPoint>,
}

/// A finished seed, or the reason it failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SeedResult {
    Done(SeedOutcome),
    Failed { seed: u64, reason: String },
}

impl SeedResult {
    pub fn seed(&self) -> u64 {
        match self {
            SeedResult::Done(o) => o.seed,
            SeedResult::Failed { seed, .. } => *seed,
        }
    }

    pub fn outcome(&self) -> Option<&SeedOutcome> {
        match self {
            SeedResult::Done(o) => Some(o),
            SeedResult::Failed { .. } => None,
        }
    }
}

/// Train one network from `seed` (initialization and shuffling), sweep
/// `layer`, and correlate each unit's weight-change p-value with its drop.
pub fn population_seed(
    seed: u64,
    arch: &[LayerSpec],
    layer: usize,
    train_set: &LabeledDataset,
    test_set: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<SeedOutcome> {
    let initial = init_network(arch, seed)?;
    let cfg = TrainConfig { seed, ..*cfg };
    let (trained, _) = train(&initial, train_set, &cfg, None)?;
    let sweep = single_unit_sweep(&trained, layer, test_set)?;
    let units = sweep
        .records
        .iter()
        .map(|r| {
            let unit = r.unit().expect("single-unit record");
            Ok(UnitPoint {
                seed,
                unit,
                p_value: unit_change_pvalue(&initial, &trained, layer, unit)?,
                drop_pp: r.drop_pp,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let p: Vec<f64> = units.iter().map(|u| u.p_value).collect();
    let d: Vec<f64> = units.iter().map(|u| u.drop_pp).collect();
    Ok(SeedOutcome {
        seed,
        test_accuracy: sweep.base.overall_accuracy,
        pearson: pearson(&p, &d)?,
        spearman: spearman(&p, &d)?,
        units,
    })
}

/// Run [`population_seed`] for every seed, in parallel. Per-seed errors
/// (divergence, undefined correlation) become `Failed` entries.
pub fn population_study(
    seeds: &[u64],
    arch: &[LayerSpec],
    layer: usize,
    train_set: &LabeledDataset,
    test_set: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<Vec<SeedResult>> {
    if seeds.len() < 2 {
        return Err(Error::Config(format!(
            "population study needs at least 2 seeds, got {}",
            seeds.len()
        )));
    }
    cfg.validate()?;
    Ok(seeds
        .par_iter()
        .map(
            |&seed| match population_seed(seed, arch, layer, train_set, test_set, cfg) {
                Ok(o) => SeedResult::Done(o),
                Err(e) => {
                    log::warn!("seed {seed} failed: {e}");
                    SeedResult::Failed {
                        seed,
                        reason: e.to_string(),
                    }
                }
            },
        )
        .collect())
}
