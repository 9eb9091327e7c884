// SPDX-License-Identifier: MIT OR Apache-2.0

//! Result files: CSV row schemas, append-only stores keyed by spec hash,
//! run manifests and schema validation.
//!
//! Every CSV has a fixed header and ends with `spec_hash` (SHA-256 of the
//! run's effective configuration) and `timestamp` (Unix seconds) columns.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::Read;
use std::marker::PhantomData;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// SHA-256 (hex) of the JSON serialization of `value`.
pub fn spec_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// SHA-256 (hex) of a file's contents.
pub fn file_sha256(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    let mut file = File::open(path)?;
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// `{4, 16}` ↔ `"4 16"`.
pub fn format_targets<'a>(targets: impl IntoIterator<Item = &'a usize>) -> String {
    targets.into_iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

pub fn parse_targets(text: &str) -> std::result::Result<BTreeSet<usize>, String> {
    let set = text
        .split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|e| format!("bad target {t:?}: {e}")))
        .collect::<std::result::Result<BTreeSet<_>, _>>()?;
    if set.is_empty() {
        return Err("empty target list".into());
    }
    Ok(set)
}

/// A row of one result CSV.
pub trait ResultRow: Serialize + DeserializeOwned + Default {
    fn spec_hash(&self) -> &str;

    fn timestamp(&self) -> u64;

    /// Semantic checks beyond field types.
    fn check(&self) -> std::result::Result<(), String> {
        Ok(())
    }
}

/// Header row derived from the row type's field names.
pub fn header<R: ResultRow>() -> Vec<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.serialize(R::default()).expect("row serializes");
    let bytes = w.into_inner().expect("in-memory writer");
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    r.headers().expect("header row").iter().map(str::to_string).collect()
}

fn unit_interval(name: &str, v: f64) -> std::result::Result<(), String> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(format!("{name} = {v} outside [0, 1]"))
    }
}

fn finite(name: &str, v: f64) -> std::result::Result<(), String> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(format!("{name} is not finite"))
    }
}

macro_rules! result_row {
    ($t:ty) => {
        impl ResultRow for $t {
            fn spec_hash(&self) -> &str {
                &self.spec_hash
            }

            fn timestamp(&self) -> u64 {
                self.timestamp
            }
        }
    };
    ($t:ty, |$s:ident| $check:block) => {
        impl ResultRow for $t {
            fn spec_hash(&self) -> &str {
                &self.spec_hash
            }

            fn timestamp(&self) -> u64 {
                self.timestamp
            }

            fn check(&self) -> std::result::Result<(), String> {
                let $s = self;
                $check
            }
        }
    };
}

/// `history.csv`: one row per training epoch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub test_top5: Option<f64>,
    pub spec_hash: String,
    pub timestamp: u64,
}

result_row!(HistoryRow, |r| {
    finite("train_loss", r.train_loss)?;
    unit_interval("train_accuracy", r.train_accuracy)?;
    r.test_accuracy.map_or(Ok(()), |v| unit_interval("test_accuracy", v))?;
    r.test_top5.map_or(Ok(()), |v| unit_interval("test_top5", v))
});

/// Per-class change accounting (`accounting.csv`, `sweep_*_accounting.csv`).
/// `class` is a class index or `overall`; black/red/green/blue are stayed
/// correct, newly wrong, newly correct and pair-only wrong.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccountingCsvRow {
    pub layer: usize,
    pub targets: String,
    pub class: String,
    pub count: usize,
    pub acc_before: f64,
    pub acc_after: f64,
    pub delta_pp: f64,
    pub black: usize,
    pub red: usize,
    pub green: usize,
    pub blue: usize,
    pub spec_hash: String,
    pub timestamp: u64,
}

result_row!(AccountingCsvRow, |r| {
    parse_targets(&r.targets)?;
    if r.class != "overall" {
        r.class
            .parse::<usize>()
            .map_err(|_| format!("class {:?} is neither an index nor overall", r.class))?;
    }
    unit_interval("acc_before", r.acc_before)?;
    unit_interval("acc_after", r.acc_after)?;
    if r.black + r.red + r.green + r.blue > r.count {
        return Err(format!("categories exceed count {}", r.count));
    }
    let expected = (r.acc_after - r.acc_before) * 100.0;
    if (r.delta_pp - expected).abs() > 1e-6 {
        return Err(format!("delta_pp {} inconsistent with accuracies", r.delta_pp));
    }
    Ok(())
});

/// `sweep_units.csv`: one row per single-unit ablation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UnitSweepRow {
    pub layer: usize,
    pub unit: usize,
    pub acc_before: f64,
    pub acc_after: f64,
    pub drop_pp: f64,
    pub top5_before: f64,
    pub top5_after: f64,
    pub top5_drop_pp: f64,
    pub spec_hash: String,
    pub timestamp: u64,
}

result_row!(UnitSweepRow, |r| {
    for (n, v) in [
        ("acc_before", r.acc_before),
        ("acc_after", r.acc_after),
        ("top5_before", r.top5_before),
        ("top5_after", r.top5_after),
    ] {
        unit_interval(n, v)?;
    }
    if (r.drop_pp - (r.acc_before - r.acc_after) * 100.0).abs() > 1e-6 {
        return Err(format!("drop_pp {} inconsistent with accuracies", r.drop_pp));
    }
    Ok(())
});

/// `sweep_pairs.csv`: one row per unordered unit pair.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub layer: usize,
    pub unit_a: usize,
    pub unit_b: usize,
    pub drop_a_pp: f64,
    pub drop_b_pp: f64,
    pub pair_drop_pp: f64,
    pub gap_pp: f64,
    pub pair_only_wrong: usize,
    pub spec_hash: String,
    pub timestamp: u64,
}

result_row!(PairRow, |r| {
    if r.unit_a >= r.unit_b {
        return Err(format!("pair ({}, {}) not ordered", r.unit_a, r.unit_b));
    }
    if (r.gap_pp - (r.pair_drop_pp - r.drop_a_pp - r.drop_b_pp)).abs() > 1e-6 {
        return Err(format!("gap_pp {} inconsistent with drops", r.gap_pp));
    }
    Ok(())
});

/// `selectivity.csv`: standard deviation of per-class drops across units.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectivityRow {
    pub layer: usize,
    pub class: usize,
    pub stddev_pp: f64,
    pub spec_hash: String,
    pub timestamp: u64,
}

result_row!(SelectivityRow, |r| {
    if r.stddev_pp.is_finite() && r.stddev_pp >= 0.0 {
        Ok(())
    } else {
        Err(format!("stddev_pp {} must be finite and nonnegative", r.stddev_pp))
    }
});

/// `population.csv`: per-seed correlation coefficients (`status` ok|failed).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PopulationRow {
    pub seed: u64,
    pub status: String,
    pub test_accuracy: Option<f64>,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub error: String,
    pub spec_hash: String,
    pub timestamp: u64,
}

result_row!(PopulationRow, |r| {
    match r.status.as_str() {
        "ok" => {
            let (Some(acc), Some(p), Some(s)) = (r.test_accuracy, r.pearson, r.spearman) else {
                return Err("ok row without accuracy and coefficients".into());
            };
            unit_interval("test_accuracy", acc)?;
            for (n, v) in [("pearson", p), ("spearman", s)] {
                if !(-1.0..=1.0).contains(&v) {
                    return Err(format!("{n} = {v} outside [-1, 1]"));
                }
            }
            Ok(())
        }
        "failed" if !r.error.is_empty() => Ok(()),
        "failed" => Err("failed row without an error message".into()),
        other => Err(format!("unknown status {other:?}")),
    }
});

/// `population_units.csv`: pooled (p-value, drop) points.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PopulationUnitRow {
    pub seed: u64,
    pub layer: usize,
    pub unit: usize,
    pub p_value: f64,
    pub drop_pp: f64,
    pub spec_hash: String,
    pub timestamp: u64,
}

result_row!(PopulationUnitRow, |r| {
    unit_interval("p_value", r.p_value)?;
    finite("drop_pp", r.drop_pp)
});

/// `layer_groups.csv`: one similarity-group ablation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub layer: usize,
    pub proportion: f64,
    pub group_size: usize,
    pub reference: usize,
    pub targets: String,
    pub drop_pp: f64,
    pub top5_drop_pp: f64,
    pub spec_hash: String,
    pub timestamp: u64,
}

result_row!(GroupRow, |r| {
    if !(r.proportion > 0.0 && r.proportion <= 1.0) {
        return Err(format!("proportion {} outside (0, 1]", r.proportion));
    }
    let t = parse_targets(&r.targets)?;
    if t.len() != r.group_size || !t.contains(&r.reference) {
        return Err("targets must hold group_size filters including the reference".into());
    }
    finite("drop_pp", r.drop_pp)?;
    finite("top5_drop_pp", r.top5_drop_pp)
});

/// `layer_curves.csv`: mean ± population std of group drops.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub layer: usize,
    pub proportion: f64,
    pub count: usize,
    pub mean_drop_pp: f64,
    pub std_drop_pp: f64,
    pub lower_pp: f64,
    pub upper_pp: f64,
    pub mean_top5_drop_pp: f64,
    pub std_top5_drop_pp: f64,
    pub spec_hash: String,
    pub timestamp: u64,
}

result_row!(CurveRow, |r| {
    if !(r.std_drop_pp >= 0.0 && r.std_top5_drop_pp >= 0.0) {
        return Err("negative standard deviation".into());
    }
    if (r.lower_pp - (r.mean_drop_pp - r.std_drop_pp)).abs() > 1e-9
        || (r.upper_pp - (r.mean_drop_pp + r.std_drop_pp)).abs() > 1e-9
    {
        return Err("lower/upper must be mean ∓ std".into());
    }
    Ok(())
});

/// `recovery.csv`: one ablate-and-retrain step (`protocol` single|iterative).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRow {
    pub protocol: String,
    pub instance: usize,
    pub iteration: usize,
    pub layer: usize,
    pub proportion: f64,
    pub targets: String,
    pub cumulative_ablated: usize,
    pub cumulative_fraction: f64,
    pub base_top1: f64,
    pub base_top5: f64,
    pub ablated_top1: f64,
    pub ablated_top5: f64,
    pub final_top1: f64,
    pub final_top5: f64,
    pub epochs_used: usize,
    pub spec_hash: String,
    pub timestamp: u64,
}

result_row!(RecoveryRow, |r| {
    if r.protocol != "single" && r.protocol != "iterative" {
        return Err(format!("unknown protocol {:?}", r.protocol));
    }
    parse_targets(&r.targets)?;
    for (n, v) in [
        ("cumulative_fraction", r.cumulative_fraction),
        ("base_top1", r.base_top1),
        ("base_top5", r.base_top5),
        ("ablated_top1", r.ablated_top1),
        ("ablated_top5", r.ablated_top5),
        ("final_top1", r.final_top1),
        ("final_top5", r.final_top5),
    ] {
        unit_interval(n, v)?;
    }
    Ok(())
});

/// `recovery_epochs.csv`: per-epoch accuracy during retraining.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecoveryEpochRow {
    pub protocol: String,
    pub instance: usize,
    pub iteration: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_top1: f64,
    pub test_top5: f64,
    pub spec_hash: String,
    pub timestamp: u64,
}

result_row!(RecoveryEpochRow, |r| {
    finite("train_loss", r.train_loss)?;
    unit_interval("train_accuracy", r.train_accuracy)?;
    unit_interval("test_top1", r.test_top1)?;
    unit_interval("test_top5", r.test_top5)
});

/// `embedding.csv`: 2-D t-SNE coordinates of dataset samples.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub sample_index: usize,
    pub x: f64,
    pub y: f64,
    pub label: u8,
    pub spec_hash: String,
    pub timestamp: u64,
}

result_row!(EmbeddingRow, |r| {
    finite("x", r.x)?;
    finite("y", r.y)
});

/// `embedding_kl.csv`: KL divergence trace of the embedding run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KlRow {
    pub iteration: usize,
    pub kl: f64,
    pub spec_hash: String,
    pub timestamp: u64,
}

result_row!(KlRow, |r| {
    if r.kl.is_finite() && r.kl >= 0.0 {
        Ok(())
    } else {
        Err(format!("kl {} must be finite and nonnegative", r.kl))
    }
});

pub const HISTORY: &str = "history.csv";
pub const ACCOUNTING: &str = "accounting.csv";
pub const SWEEP_UNITS: &str = "sweep_units.csv";
pub const SWEEP_UNITS_ACCOUNTING: &str = "sweep_units_accounting.csv";
pub const SELECTIVITY: &str = "selectivity.csv";
pub const SWEEP_PAIRS: &str = "sweep_pairs.csv";
pub const SWEEP_PAIRS_ACCOUNTING: &str = "sweep_pairs_accounting.csv";
pub const POPULATION: &str = "population.csv";
pub const POPULATION_UNITS: &str = "population_units.csv";
pub const LAYER_GROUPS: &str = "layer_groups.csv";
pub const LAYER_CURVES: &str = "layer_curves.csv";
pub const RECOVERY: &str = "recovery.csv";
pub const RECOVERY_EPOCHS: &str = "recovery_epochs.csv";
pub const EMBEDDING: &str = "embedding.csv";
pub const EMBEDDING_KL: &str = "embedding_kl.csv";

/// Append-only CSV of one row type.
#[derive(Debug, Clone)]
pub struct ResultStore<R> {
    path: PathBuf,
    _row: PhantomData<R>,
}

impl<R: ResultRow> ResultStore<R> {
    pub fn new(dir: &Path, file: &str) -> Self {
        Self {
            path: dir.join(file),
            _row: PhantomData,
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn schema_error(&self, reason: String) -> Error {
        Error::Schema {
            path: self.path.clone(),
            reason,
        }
    }

    /// Every row; a missing file reads as empty. Rows are schema-checked.
    pub fn read_all(&self) -> Result<Vec<R>> {
        if !self.path.exists() {
            return Ok(Vec::new());
        }
        let mut reader = csv::Reader::from_path(&self.path)?;
        let found: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        let expected = header::<R>();
        if found != expected {
            return Err(self.schema_error(format!("header {found:?}, expected {expected:?}")));
        }
        let mut rows = Vec::new();
        for (i, rec) in reader.deserialize::<R>().enumerate() {
            let line = i + 2;
            let row = rec.map_err(|e| self.schema_error(format!("line {line}: {e}")))?;
            if row.spec_hash().len() != 64 || !row.spec_hash().bytes().all(|b| b.is_ascii_hexdigit()) {
                return Err(self.schema_error(format!("line {line}: spec_hash is not a SHA-256 hex digest")));
            }
            row.check()
                .map_err(|e| self.schema_error(format!("line {line}: {e}")))?;
            rows.push(row);
        }
        Ok(rows)
    }

    /// Rows written under `spec_hash`.
    pub fn completed(&self, spec_hash: &str) -> Result<Vec<R>> {
        Ok(self
            .read_all()?
            .into_iter()
            .filter(|r| r.spec_hash() == spec_hash)
            .collect())
    }

    /// Append rows, writing the header first if the file is new or empty.
    pub fn append(&self, rows: &[R]) -> Result<()> {
        let fresh = fs::metadata(&self.path).map_or(true, |m| m.len() == 0);
        if let Some(dir) = self.path.parent() {
            fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&self.path)?;
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if fresh {
            w.write_record(header::<R>())?;
        }
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Replace the file with `rows`.
    pub fn rewrite(&self, rows: &[R]) -> Result<()> {
        if let Some(dir) = self.path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = self.path.with_extension("csv.tmp");
        {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&tmp)?;
            w.write_record(header::<R>())?;
            for r in rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
        fs::rename(&tmp, &self.path)?;
        Ok(())
    }
}

/// Record of one CLI invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub version: String,
    pub spec_hash: String,
    pub started_unix: u64,
    pub wall_time_s: f64,
    pub outputs: Vec<String>,
}

pub const MANIFEST_SUFFIX: &str = ".manifest.json";

/// Build identifier: `ABLATRON_GIT_DESCRIBE` at compile time, else the crate version.
pub fn version() -> String {
    option_env!("ABLATRON_GIT_DESCRIBE").map_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION")), str::to_string)
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("{}{MANIFEST_SUFFIX}", manifest.command));
    fs::write(&path, serde_json::to_string_pretty(manifest)?)?;
    Ok(path)
}

/// Outcome of validating one file.
#[derive(Debug, Clone, PartialEq)]
pub struct FileCheck {
    pub file: String,
    pub rows: usize,
    pub spec_hashes: usize,
}

fn check_store<R: ResultRow>(dir: &Path, file: &str) -> Result<FileCheck> {
    let rows = ResultStore::<R>::new(dir, file).read_all()?;
    let hashes: BTreeSet<&str> = rows.iter().map(ResultRow::spec_hash).collect();
    Ok(FileCheck {
        file: file.to_string(),
        rows: rows.len(),
        spec_hashes: hashes.len(),
    })
}

fn check_known(dir: &Path, file: &str) -> Option<Result<FileCheck>> {
    Some(match file {
        HISTORY => check_store::<HistoryRow>(dir, file),
        ACCOUNTING | SWEEP_UNITS_ACCOUNTING | SWEEP_PAIRS_ACCOUNTING => check_store::<AccountingCsvRow>(dir, file),
        SWEEP_UNITS => check_store::<UnitSweepRow>(dir, file),
        SELECTIVITY => check_store::<SelectivityRow>(dir, file),
        SWEEP_PAIRS => check_store::<PairRow>(dir, file),
        POPULATION => check_store::<PopulationRow>(dir, file),
        POPULATION_UNITS => check_store::<PopulationUnitRow>(dir, file),
        LAYER_GROUPS => check_store::<GroupRow>(dir, file),
        LAYER_CURVES => check_store::<CurveRow>(dir, file),
        RECOVERY => check_store::<RecoveryRow>(dir, file),
        RECOVERY_EPOCHS => check_store::<RecoveryEpochRow>(dir, file),
        EMBEDDING => check_store::<EmbeddingRow>(dir, file),
        EMBEDDING_KL => check_store::<KlRow>(dir, file),
        _ => return None,
    })
}

/// Validate every result CSV and manifest under `dir` (recursively).
/// Unrecognized CSV names are reported as violations.
pub fn check_dir(dir: &Path) -> Result<Vec<(PathBuf, FileCheck)>> {
    if !dir.is_dir() {
        return Err(Error::Config(format!("{} is not a directory", dir.display())));
    }
    let mut out = Vec::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for path in entries {
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        if path.is_dir() {
            out.extend(check_dir(&path)?);
        } else if name.ends_with(MANIFEST_SUFFIX) {
            let text = fs::read_to_string(&path)?;
            serde_json::from_str::<Manifest>(&text).map_err(|e| Error::Schema {
                path: path.clone(),
                reason: format!("manifest: {e}"),
            })?;
            let check = FileCheck {
                file: name,
                rows: 1,
                spec_hashes: 1,
            };
            out.push((path, check));
        } else if name.ends_with(".csv") {
            match check_known(dir, &name) {
                Some(res) => out.push((path, res?)),
                None => {
                    return Err(Error::Schema {
                        path,
                        reason: "unrecognized result file".into(),
                    })
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const HASH: &str = "0123456789abcdef0123456789abcdef0123456789abcdef0123456789abcdef";

    fn unit_row(unit: usize) -> UnitSweepRow {
        UnitSweepRow {
            layer: 0,
            unit,
            acc_before: 0.95,
            acc_after: 0.90,
            drop_pp: (0.95 - 0.90) * 100.0,
            top5_before: 0.99,
            top5_after: 0.98,
            top5_drop_pp: 1.0,
            spec_hash: HASH.into(),
            timestamp: 1,
        }
    }

    #[test]
    fn headers_follow_field_order() {
        assert_eq!(
            header::<EmbeddingRow>(),
            ["sample_index", "x", "y", "label", "spec_hash", "timestamp"]
        );
        let h = header::<AccountingCsvRow>();
        assert_eq!(&h[2..11], crate::evaluation::ACCOUNTING_HEADER);
        assert_eq!(h.last().map(String::as_str), Some("timestamp"));
    }

    #[test]
    fn append_then_resume() {
        let dir = tempfile::tempdir().unwrap();
        let store = ResultStore::<UnitSweepRow>::new(dir.path(), SWEEP_UNITS);
        assert!(store.read_all().unwrap().is_empty());
        store.append(&[unit_row(0), unit_row(1)]).unwrap();
        let other = UnitSweepRow {
            spec_hash: HASH.replace('0', "f"),
            ..unit_row(2)
        };
        store.append(&[other]).unwrap();
        assert_eq!(store.read_all().unwrap().len(), 3);
        let done: Vec<usize> = store.completed(HASH).unwrap().iter().map(|r| r.unit).collect();
        assert_eq!(done, vec![0, 1]);
        let text = fs::read_to_string(store.path()).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("layer,")).count(), 1);
    }

    #[test]
    fn tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let store = ResultStore::<UnitSweepRow>::new(dir.path(), SWEEP_UNITS);
        store.append(&[unit_row(0)]).unwrap();
        assert_eq!(check_dir(dir.path()).unwrap()[0].1.rows, 1);

        let original = fs::read_to_string(store.path()).unwrap();
        for tampered in [
            original.replace("drop_pp", "damage"),
            original.replace(",0.9,", ",abc,"),
            original.replace(",0.9,", ",0.5,"),
            original.replace(HASH, "nothex"),
            format!("{original}1,2\n"),
        ] {
            fs::write(store.path(), &tampered).unwrap();
            assert!(matches!(check_dir(dir.path()), Err(Error::Schema { .. })), "{tampered}");
        }
        fs::write(store.path(), &original).unwrap();
        fs::write(dir.path().join("mystery.csv"), "a,b\n").unwrap();
        assert!(check_dir(dir.path()).is_err());
    }

    #[test]
    fn row_checks() {
        let bad_pair = PairRow {
            unit_a: 1,
            unit_b: 2,
            drop_a_pp: 1.0,
            drop_b_pp: 2.0,
            pair_drop_pp: 4.0,
            gap_pp: 0.5,
            ..PairRow::default()
        };
        assert!(bad_pair.check().is_err());
        assert!(PairRow {
            gap_pp: 1.0,
            ..bad_pair.clone()
        }
        .check()
        .is_ok());
        let failed = PopulationRow {
            status: "failed".into(),
            error: "diverged".into(),
            ..PopulationRow::default()
        };
        assert!(failed.check().is_ok());
        assert!(PopulationRow {
            status: "ok".into(),
            ..failed
        }
        .check()
        .is_err());
    }

    #[test]
    fn targets_round_trip() {
        let t = parse_targets("4 16").unwrap();
        assert_eq!(format_targets(&t), "4 16");
        assert!(parse_targets("").is_err());
        assert!(parse_targets("4 x").is_err());
    }

    #[test]
    fn hashes() {
        let a = spec_hash(&("mlp", 1u64)).unwrap();
        assert_eq!(a.len(), 64);
        assert_eq!(a, spec_hash(&("mlp", 1u64)).unwrap());
        assert_ne!(a, spec_hash(&("mlp", 2u64)).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f");
        fs::write(&p, b"abc").unwrap();
        assert_eq!(
            file_sha256(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
