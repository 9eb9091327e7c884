// SPDX-License-Identifier: MIT OR Apache-2.0

//! Rank statistics and correlations used to score unit importance.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::nn::Network;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UTestResult {
    /// U of the first sample.
    pub u_statistic: f64,
    /// Continuity-corrected standard score, signed like `U - n1·n2/2`.
    pub z_score: f64,
    /// Two-sided p-value from the normal approximation.
    pub p_value: f64,
}

/// Average (1-based) ranks; tied values share the mean of their positions.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // positions i+1 ..= j share rank (i+1+j)/2
        let rank = (i + 1 + j) as f64 / 2.0;
        for &o in &order[i..j] {
            ranks[o] = rank;
        }
        i = j;
    }
    ranks
}

/// Sizes of the groups of tied values.
fn tie_groups(values: &[f64]) -> Vec<usize> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut groups = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        groups.push(j - i);
        i = j;
    }
    groups
}

/// Two-sided Mann-Whitney U test with midranks, tie-corrected variance and
/// a 0.5 continuity correction.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<UTestResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Stats(format!(
            "Mann-Whitney U needs at least 2 values per sample (got {} and {})",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Stats("non-finite value in sample".into()));
    }
    let n1 = a.len() as f64;
    let n2 = b.len() as f64;
    let n = n1 + n2;
    let joined: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&joined);
    let rank_sum_a: f64 = ranks[..a.len()].iter().sum();
    let u = rank_sum_a - n1 * (n1 + 1.0) / 2.0;

    let tie_term: f64 = tie_groups(&joined)
        .into_iter()
        .map(|t| {
            let t = t as f64;
            t * t * t - t
        })
        .sum();
    let variance = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if variance <= 0.0 {
        return Err(Error::DegenerateTest(
            "every observation is identical; the rank variance is zero".into(),
        ));
    }
    let mean = n1 * n2 / 2.0;
    let diff = u - mean;
    let z = (diff.abs() - 0.5).max(0.0) / variance.sqrt();
    let p = erfc(z / std::f64::consts::SQRT_2).min(1.0);
    Ok(UTestResult {
        u_statistic: u,
        z_score: z.copysign(diff),
        p_value: p,
    })
}

/// How strongly a unit's incoming weights moved away from their initial
/// distribution: the U-test p-value between the two weight vectors.
pub fn unit_change_pvalue(initial: &Network, trained: &Network, layer: usize, unit: usize) -> Result<f64> {
    if initial.layers() != trained.layers() {
        return Err(Error::Stats("networks have different architectures".into()));
    }
    let before = initial
        .incoming_weights(layer, unit)
        .ok_or_else(|| Error::Stats(format!("no unit {unit} in layer {layer}")))?;
    let after = trained
        .incoming_weights(layer, unit)
        .ok_or_else(|| Error::Stats(format!("no unit {unit} in layer {layer}")))?;
    let before: Vec<f64> = before.into_iter().map(f64::from).collect();
    let after: Vec<f64> = after.into_iter().map(f64::from).collect();
    Ok(mann_whitney_u(&before, &after)?.p_value)
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Stats(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation("need at least two points".into()));
    }
    Ok(())
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant vector".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman rank correlation: Pearson correlation of midranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson(&midranks(x), &midranks(y))
}

/// Class-wise spread of accuracy drops across ablated units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectivityProfile {
    /// `(units, classes)` drops in percentage points.
    pub drop_matrix: Array2<f64>,
    /// Population standard deviation of each class column.
    pub per_class_stddev: Vec<f64>,
}

pub fn selectivity_deviation(drop_matrix: &Array2<f64>) -> Result<SelectivityProfile> {
    if drop_matrix.nrows() < 2 {
        return Err(Error::Stats("selectivity needs at least two units".into()));
    }
    if drop_matrix.ncols() == 0 {
        return Err(Error::Stats("drop matrix has no classes".into()));
    }
    let per_class_stddev = drop_matrix.axis_iter(Axis(1)).map(|col| col.std(0.0)).collect();
    Ok(SelectivityProfile {
        drop_matrix: drop_matrix.clone(),
        per_class_stddev,
    })
}

/// Class-wise mean of the deviations of several networks.
pub fn mean_selectivity(profiles: &[SelectivityProfile]) -> Result<Vec<f64>> {
    let first = profiles
        .first()
        .ok_or_else(|| Error::Stats("no profiles to average".into()))?;
    let classes = first.per_class_stddev.len();
    if profiles.iter().any(|p| p.per_class_stddev.len() != classes) {
        return Err(Error::Stats("profiles disagree on class count".into()));
    }
    let n = profiles.len() as f64;
    Ok((0..classes)
        .map(|c| profiles.iter().map(|p| p.per_class_stddev[c]).sum::<f64>() / n)
        .collect())
}
