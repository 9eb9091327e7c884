// SPDX-License-Identifier: MIT OR Apache-2.0

//! Unit and filter ablation, and similarity-based filter grouping.
//!
//! Ablating a unit or filter zeroes its incoming weights (row of the layer's
//! weight matrix) together with its bias, so its pre-activation is exactly
//! zero for every input. Outgoing weights are left untouched.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Network;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationKind {
    Unit,
    Filter,
}

/// Which units or filters of which layer to ablate.
///
/// Serialized as `{"layer": 0, "kind": "unit", "targets": [12]}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "RawSpec")]
pub struct AblationSpec {
    pub layer: usize,
    pub kind: AblationKind,
    pub targets: BTreeSet<usize>,
}

#[derive(Deserialize)]
struct RawSpec {
    layer: usize,
    kind: AblationKind,
    targets: BTreeSet<usize>,
}

impl TryFrom<RawSpec> for AblationSpec {
    type Error = Error;

    fn try_from(raw: RawSpec) -> Result<Self> {
        Self::new(raw.layer, raw.kind, raw.targets)
    }
}

impl AblationSpec {
    pub fn new(layer: usize, kind: AblationKind, targets: impl IntoIterator<Item = usize>) -> Result<Self> {
        let targets: BTreeSet<usize> = targets.into_iter().collect();
        if targets.is_empty() {
            return Err(Error::Spec("ablation target set is empty".into()));
        }
        Ok(Self { layer, kind, targets })
    }

    pub fn units(layer: usize, units: impl IntoIterator<Item = usize>) -> Result<Self> {
        Self::new(layer, AblationKind::Unit, units)
    }

    pub fn filters(layer: usize, filters: impl IntoIterator<Item = usize>) -> Result<Self> {
        Self::new(layer, AblationKind::Filter, filters)
    }

    /// Check that the spec addresses existing units/filters of the right layer kind.
    pub fn validate(&self, net: &Network) -> Result<()> {
        let layer = net
            .layer(self.layer)
            .ok_or_else(|| Error::Spec(format!("no layer {}", self.layer)))?;
        match self.kind {
            AblationKind::Unit if !layer.is_dense() => {
                return Err(Error::Spec(format!("layer {} is not a dense layer", self.layer)))
            }
            AblationKind::Filter if !layer.is_conv() => {
                return Err(Error::Spec(format!("layer {} is not a conv2d layer", self.layer)))
            }
            _ => {}
        }
        let rows = layer.weight_dims().map_or(0, |(r, _)| r);
        if let Some(&bad) = self.targets.iter().find(|&&t| t >= rows) {
            return Err(Error::Spec(format!(
                "target {bad} out of range for layer {} with {rows} {}s",
                self.layer,
                match self.kind {
                    AblationKind::Unit => "unit",
                    AblationKind::Filter => "filter",
                }
            )));
        }
        Ok(())
    }
}

/// Copy of `net` with the spec's units/filters disabled.
pub fn ablate(net: &Network, spec: &AblationSpec) -> Result<Network> {
    spec.validate(net)?;
    let mut out = net.clone();
    let p = out.params_mut(spec.layer).expect("validated parametrized layer");
    for &t in &spec.targets {
        p.weights.row_mut(t).fill(0.0);
        if let Some(b) = p.bias.as_mut() {
            b[t] = 0.0;
        }
    }
    Ok(out)
}

/// True when every incoming weight and the bias of row `row` are zero.
pub fn is_zero_row(net: &Network, layer: usize, row: usize) -> bool {
    net.params(layer)
        .is_some_and(|p| p.weights.row(row).iter().all(|&w| w == 0.0) && p.bias.as_ref().is_none_or(|b| b[row] == 0.0))
}

fn unit_normalized(f: &[f32], name: &str) -> Result<Vec<f64>> {
    let norm = f.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::ZeroFilter(name.to_string()));
    }
    Ok(f.iter().map(|&v| f64::from(v) / norm).collect())
}

/// Euclidean distance between two filters after scaling each to unit L2
/// norm. The result lies in `[0, 2]`.
pub fn filter_distance(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Spec(format!(
            "filters differ in size ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let a = unit_normalized(a, "first filter")?;
    let b = unit_normalized(b, "second filter")?;
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
}

/// Pairwise filter distances of one conv layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterDistanceMatrix {
    pub layer: usize,
    pub distances: Array2<f64>,
}

impl FilterDistanceMatrix {
    /// Fails if any filter is all zero.
    pub fn compute(net: &Network, layer: usize) -> Result<Self> {
        let w = conv_weights(net, layer)?;
        let n = w.nrows();
        let normalized = (0..n)
            .map(|i| unit_normalized(w.row(i).as_slice().expect("contiguous"), &format!("filter {i}")))
            .collect::<Result<Vec<_>>>()?;
        let mut distances = Array2::zeros((n, n));
        for i in 0..n {
            for j in i + 1..n {
                let d = normalized[i]
                    .iter()
                    .zip(&normalized[j])
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt();
                distances[[i, j]] = d;
                distances[[j, i]] = d;
            }
        }
        Ok(Self { layer, distances })
    }
}

fn conv_weights(net: &Network, layer: usize) -> Result<&Array2<f32>> {
    match (net.layer(layer), net.params(layer)) {
        (Some(l), Some(p)) if l.is_conv() => Ok(&p.weights),
        _ => Err(Error::Spec(format!("layer {layer} is not a conv2d layer"))),
    }
}

/// Group size for a proportion of `n` filters: `max(1, round(p·n))`, rounding
/// half away from zero.
pub fn group_size(proportion: f64, n: usize) -> Result<usize> {
    if !(proportion > 0.0 && proportion <= 1.0) {
        return Err(Error::Spec(format!("proportion {proportion} outside (0, 1]")));
    }
    Ok(((proportion * n as f64).round() as usize).clamp(1, n.max(1)))
}

/// The reference filter plus its `k − 1` nearest non-zero filters.
pub fn similarity_group(net: &Network, layer: usize, reference: usize, proportion: f64) -> Result<BTreeSet<usize>> {
    let w = conv_weights(net, layer)?;
    let n = w.nrows();
    let k = group_size(proportion, n)?;
    if reference >= n {
        return Err(Error::Spec(format!(
            "reference filter {reference} out of range ({n} filters)"
        )));
    }
    let row = |i: usize| w.row(i).to_vec();
    let reference_weights = row(reference);
    if reference_weights.iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroFilter(format!("reference filter {reference}")));
    }
    let mut ranked: Vec<(f64, usize)> = (0..n)
        .filter(|&i| i != reference)
        .filter_map(|i| {
            let f = row(i);
            // zero filters have no direction; they never join a group
            filter_distance(&reference_weights, &f).ok().map(|d| (d, i))
        })
        .collect();
    if ranked.len() < k - 1 {
        return Err(Error::Spec(format!(
            "only {} non-zero filters besides the reference, group needs {}",
            ranked.len(),
            k - 1
        )));
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(std::iter::once(reference)
        .chain(ranked.into_iter().take(k - 1).map(|(_, i)| i))
        .collect())
}

/// `k` distinct indices from `0..n`, uniformly at random.
pub fn random_group<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> BTreeSet<usize> {
    index::sample(rng, n, k.min(n)).into_iter().collect()
}
