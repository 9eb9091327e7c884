// SPDX-License-Identifier: MIT OR Apache-2.0

//! Accuracy reports and classification-change accounting.
//!
//! Per-sample transitions between an undamaged and a damaged network are
//! bucketed with the colour names used by the accounting CSV:
//!
//! | column | meaning                                                    |
//! |--------|------------------------------------------------------------|
//! | black  | correct before and after                                   |
//! | red    | correct before, wrong after (for pairs: wrong after either single ablation too) |
//! | green  | wrong before, correct after                                |
//! | blue   | pairs only: wrong only after the pair ablation             |

use std::collections::BTreeMap;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::Network;

const EVAL_CHUNK: usize = 1000;

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Position of `label` when classes are sorted by descending probability,
/// ties broken by class index.
fn label_rank(probs: &[f32], label: usize) -> usize {
    let p = probs[label];
    probs
        .iter()
        .enumerate()
        .filter(|&(j, &q)| q > p || (q == p && j < label))
        .count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub labels: Vec<u8>,
    pub predictions: Vec<u8>,
    /// k → per-sample hit flags. Always contains k = 1.
    pub top_k_hits: BTreeMap<usize, Vec<bool>>,
    pub overall_accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    pub per_class_counts: Vec<usize>,
}

impl EvalReport {
    /// Build from class probabilities, one row per sample.
    pub fn from_probabilities(probs: &Array2<f32>, labels: &[u8], ks: &[usize]) -> Result<Self> {
        let classes = probs.ncols();
        if probs.nrows() != labels.len() {
            return Err(Error::Data(format!(
                "{} probability rows for {} labels",
                probs.nrows(),
                labels.len()
            )));
        }
        let mut ks: Vec<usize> = ks.iter().copied().chain([1]).filter(|&k| k > 0).collect();
        ks.sort_unstable();
        ks.dedup();
        let mut predictions = Vec::with_capacity(labels.len());
        let mut hits: BTreeMap<usize, Vec<bool>> = ks.iter().map(|&k| (k, Vec::with_capacity(labels.len()))).collect();
        for (row, &label) in probs.rows().into_iter().zip(labels) {
            let label = usize::from(label);
            if label >= classes {
                return Err(Error::Data(format!("label {label} outside [0, {classes})")));
            }
            let row = row.as_slice().expect("contiguous row");
            predictions.push(argmax(row) as u8);
            let rank = label_rank(row, label);
            for (&k, flags) in hits.iter_mut() {
                flags.push(rank < k);
            }
        }
        let mut report = Self::from_predictions(labels, &predictions, classes)?;
        report.top_k_hits = hits;
        Ok(report)
    }

    /// Build from hard predictions only (top-1).
    pub fn from_predictions(labels: &[u8], predictions: &[u8], classes: usize) -> Result<Self> {
        if labels.len() != predictions.len() {
            return Err(Error::Data("label/prediction length mismatch".into()));
        }
        if labels.is_empty() {
            return Err(Error::Data("empty dataset".into()));
        }
        let mut counts = vec![0usize; classes];
        let mut correct = vec![0usize; classes];
        let mut hits = Vec::with_capacity(labels.len());
        for (&l, &p) in labels.iter().zip(predictions) {
            let l = usize::from(l);
            if l >= classes {
                return Err(Error::Data(format!("label {l} outside [0, {classes})")));
            }
            counts[l] += 1;
            let hit = l == usize::from(p);
            correct[l] += usize::from(hit);
            hits.push(hit);
        }
        let total_correct: usize = correct.iter().sum();
        Ok(Self {
            labels: labels.to_vec(),
            predictions: predictions.to_vec(),
            top_k_hits: BTreeMap::from([(1, hits)]),
            overall_accuracy: total_correct as f64 / labels.len() as f64,
            per_class_accuracy: counts
                .iter()
                .zip(&correct)
                .map(|(&n, &c)| if n == 0 { 0.0 } else { c as f64 / n as f64 })
                .collect(),
            per_class_counts: counts,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.per_class_counts.len()
    }

    pub fn is_correct(&self, sample: usize) -> bool {
        self.labels[sample] == self.predictions[sample]
    }

    pub fn correct_count(&self) -> usize {
        (0..self.len()).filter(|&i| self.is_correct(i)).count()
    }

    pub fn top_k(&self, k: usize) -> Option<f64> {
        self.top_k_hits
            .get(&k)
            .map(|h| h.iter().filter(|&&x| x).count() as f64 / h.len() as f64)
    }

    /// Per-class top-k accuracy.
    pub fn per_class_top_k(&self, k: usize) -> Option<Vec<f64>> {
        let hits = self.top_k_hits.get(&k)?;
        let mut ok = vec![0usize; self.classes()];
        for (&l, &h) in self.labels.iter().zip(hits) {
            ok[usize::from(l)] += usize::from(h);
        }
        Some(
            ok.iter()
                .zip(&self.per_class_counts)
                .map(|(&c, &n)| if n == 0 { 0.0 } else { c as f64 / n as f64 })
                .collect(),
        )
    }
}

/// Evaluate `net` on `data`, recording top-k hits for every k in `ks` (plus k = 1).
pub fn evaluate(net: &Network, data: &LabeledDataset, ks: &[usize]) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    if data.classes() > net.classes() {
        return Err(Error::Data(format!(
            "dataset has {} classes, network outputs {}",
            data.classes(),
            net.classes()
        )));
    }
    let starts: Vec<usize> = (0..data.len()).step_by(EVAL_CHUNK).collect();
    let chunks: Vec<Array2<f32>> = starts
        .par_iter()
        .map(|&s| net.forward(&data.batch_range(s, (s + EVAL_CHUNK).min(data.len()))))
        .collect::<Result<_>>()?;
    let views: Vec<_> = chunks.iter().map(|c| c.view()).collect();
    let probs = ndarray::concatenate(ndarray::Axis(0), &views).expect("matching widths");
    EvalReport::from_probabilities(&probs, data.labels(), ks)
}

/// Evaluate from precomputed activations feeding layer `start`.
pub fn evaluate_from(
    net: &Network,
    start: usize,
    activations: &Array2<f32>,
    labels: &[u8],
    ks: &[usize],
) -> Result<EvalReport> {
    let n = activations.nrows();
    let starts: Vec<usize> = (0..n).step_by(EVAL_CHUNK).collect();
    let chunks: Vec<Array2<f32>> = starts
        .par_iter()
        .map(|&s| {
            let block = activations
                .slice(ndarray::s![s..(s + EVAL_CHUNK).min(n), ..])
                .to_owned();
            net.forward_from(start, &block)
        })
        .collect::<Result<_>>()?;
    let views: Vec<_> = chunks.iter().map(|c| c.view()).collect();
    let probs = ndarray::concatenate(ndarray::Axis(0), &views).expect("matching widths");
    EvalReport::from_probabilities(&probs, labels, ks)
}

/// Transition counts for one class (or all samples when `class` is `None`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassChange {
    pub class: Option<usize>,
    pub count: usize,
    pub correct_before: usize,
    pub correct_after: usize,
    /// black
    pub stayed_correct: usize,
    /// red
    pub newly_wrong: usize,
    /// green
    pub newly_correct: usize,
    pub stayed_wrong: usize,
    /// blue; only present for pairwise comparisons
    pub pair_only_wrong: Option<usize>,
}

impl ClassChange {
    fn empty(class: Option<usize>, pairwise: bool) -> Self {
        Self {
            class,
            count: 0,
            correct_before: 0,
            correct_after: 0,
            stayed_correct: 0,
            newly_wrong: 0,
            newly_correct: 0,
            stayed_wrong: 0,
            pair_only_wrong: pairwise.then_some(0),
        }
    }

    fn ratio(k: usize, n: usize) -> f64 {
        if n == 0 {
            0.0
        } else {
            k as f64 / n as f64
        }
    }

    pub fn acc_before(&self) -> f64 {
        Self::ratio(self.correct_before, self.count)
    }

    pub fn acc_after(&self) -> f64 {
        Self::ratio(self.correct_after, self.count)
    }

    /// Signed accuracy change in percentage points (positive = improvement).
    pub fn delta_pp(&self) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        (self.correct_after as f64 - self.correct_before as f64) / self.count as f64 * 100.0
    }

    /// Drop in percentage points (positive = damage).
    pub fn drop_pp(&self) -> f64 {
        -self.delta_pp()
    }

    fn add(&mut self, before: bool, after: bool, category: Category) {
        self.count += 1;
        self.correct_before += usize::from(before);
        self.correct_after += usize::from(after);
        match category {
            Category::StayedCorrect => self.stayed_correct += 1,
            Category::NewlyWrong => self.newly_wrong += 1,
            Category::NewlyCorrect => self.newly_correct += 1,
            Category::StayedWrong => self.stayed_wrong += 1,
            Category::PairOnlyWrong => {
                *self.pair_only_wrong.get_or_insert(0) += 1;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    StayedCorrect,
    NewlyWrong,
    NewlyCorrect,
    StayedWrong,
    PairOnlyWrong,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeAccounting {
    pub classes: Vec<ClassChange>,
    pub overall: ClassChange,
}

impl ChangeAccounting {
    pub fn class(&self, c: usize) -> &ClassChange {
        &self.classes[c]
    }

    /// Overall drop in percentage points.
    pub fn drop_pp(&self) -> f64 {
        self.overall.drop_pp()
    }

    pub fn class_deltas_pp(&self) -> Vec<f64> {
        self.classes.iter().map(ClassChange::delta_pp).collect()
    }

    pub fn is_pairwise(&self) -> bool {
        self.overall.pair_only_wrong.is_some()
    }

    /// One CSV row per class plus an `overall` row.
    pub fn rows(&self) -> Vec<AccountingRow> {
        self.classes
            .iter()
            .chain(std::iter::once(&self.overall))
            .map(AccountingRow::from)
            .collect()
    }
}

/// Row of the accounting CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountingRow {
    pub class: String,
    pub count: usize,
    pub acc_before: f64,
    pub acc_after: f64,
    pub delta_pp: f64,
    pub black: usize,
    pub red: usize,
    pub green: usize,
    pub blue: usize,
}

pub const ACCOUNTING_HEADER: [&str; 9] = [
    "class",
    "count",
    "acc_before",
    "acc_after",
    "delta_pp",
    "black",
    "red",
    "green",
    "blue",
];

impl From<&ClassChange> for AccountingRow {
    fn from(c: &ClassChange) -> Self {
        Self {
            class: c.class.map_or_else(|| "overall".to_string(), |k| k.to_string()),
            count: c.count,
            acc_before: c.acc_before(),
            acc_after: c.acc_after(),
            delta_pp: c.delta_pp(),
            black: c.stayed_correct,
            red: c.newly_wrong,
            green: c.newly_correct,
            blue: c.pair_only_wrong.unwrap_or(0),
        }
    }
}

fn check_same_samples(reports: &[&EvalReport]) -> Result<()> {
    let first = reports[0];
    for r in &reports[1..] {
        if r.len() != first.len() {
            return Err(Error::Report(format!(
                "sample count mismatch: {} vs {}",
                first.len(),
                r.len()
            )));
        }
        if r.labels != first.labels {
            return Err(Error::Report("reports cover different label sequences".into()));
        }
        if r.classes() != first.classes() {
            return Err(Error::Report("reports have different class counts".into()));
        }
    }
    Ok(())
}

fn accumulate(base: &EvalReport, pairwise: bool, categorize: impl Fn(usize) -> (bool, Category)) -> ChangeAccounting {
    let mut classes: Vec<ClassChange> = (0..base.classes())
        .map(|c| ClassChange::empty(Some(c), pairwise))
        .collect();
    let mut overall = ClassChange::empty(None, pairwise);
    for i in 0..base.len() {
        let before = base.is_correct(i);
        let (after, cat) = categorize(i);
        classes[usize::from(base.labels[i])].add(before, after, cat);
        overall.add(before, after, cat);
    }
    ChangeAccounting { classes, overall }
}

/// Classify every sample's transition from `before` to `after`.
pub fn diff_reports(before: &EvalReport, after: &EvalReport) -> Result<ChangeAccounting> {
    check_same_samples(&[before, after])?;
    Ok(accumulate(before, false, |i| {
        let (b, a) = (before.is_correct(i), after.is_correct(i));
        let cat = match (b, a) {
            (true, true) => Category::StayedCorrect,
            (true, false) => Category::NewlyWrong,
            (false, true) => Category::NewlyCorrect,
            (false, false) => Category::StayedWrong,
        };
        (a, cat)
    }))
}

/// Category of one sample for a pair ablation given correctness under the
/// undamaged network, each single ablation and the pair ablation.
pub fn pairwise_category(base: bool, single_a: bool, single_b: bool, pair: bool) -> Category {
    match (base, pair) {
        (true, true) => Category::StayedCorrect,
        (false, true) => Category::NewlyCorrect,
        (false, false) => Category::StayedWrong,
        (true, false) if single_a && single_b => Category::PairOnlyWrong,
        (true, false) => Category::NewlyWrong,
    }
}

/// Accounting for a pair ablation, separating samples that only fail when
/// both units are removed together.
pub fn pairwise_diff(
    base: &EvalReport,
    single_a: &EvalReport,
    single_b: &EvalReport,
    pair: &EvalReport,
) -> Result<ChangeAccounting> {
    check_same_samples(&[base, single_a, single_b, pair])?;
    Ok(accumulate(base, true, |i| {
        let p = pair.is_correct(i);
        let cat = pairwise_category(base.is_correct(i), single_a.is_correct(i), single_b.is_correct(i), p);
        (p, cat)
    }))
}
