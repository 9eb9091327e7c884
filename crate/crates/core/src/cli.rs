// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line surface. Each subcommand runs one operation, appends its
//! rows to the CSVs under `--out` and writes a `<command>.manifest.json`.
//!
//! Sweeps resume: rows already present for the same spec hash are kept and
//! only the missing work items are computed.
//!
//! Layers are numbered from 1 on the command line and in every CSV, counting
//! all layers (pooling and flatten included) from the input side.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::ablation::{ablate, AblationKind, AblationSpec};
use crate::data::{self, LabeledDataset, MnistDir};
use crate::embed::{tsne, TsneConfig};
use crate::error::{Error, Result};
use crate::evaluation::{diff_reports, evaluate, ChangeAccounting};
use crate::experiments::{
    self, iterative_recovery_from, layer_group_sweep, population_seed, recovery_run, summarize_groups, GroupRecord,
    IterativeState, RecoveryConfig, RecoveryTrace, Retraining, SeedResult, StopRule,
};
use crate::nn::{self, load_checkpoint, save_checkpoint, EpochStats, Network, TrainConfig};
use crate::results::{
    self, file_sha256, format_targets, parse_targets, spec_hash, unix_now, write_manifest, AccountingCsvRow, CurveRow,
    EmbeddingRow, GroupRow, HistoryRow, KlRow, Manifest, PairRow, PopulationRow, PopulationUnitRow, RecoveryEpochRow,
    RecoveryRow, ResultStore, SelectivityRow, UnitSweepRow,
};
use crate::stats::{selectivity_deviation, spearman};

#[derive(Debug, Parser)]
#[command(name = "ablatron", version, about = "Ablation studies on small image classifiers")]
pub struct Cli {
    /// Campaign config (JSON); explicit flags take precedence over its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network from scratch.
    Train(TrainArgs),
    /// Ablate units or filters of a checkpoint and write the change accounting.
    Ablate(AblateArgs),
    /// Ablate every unit of a dense layer, one at a time.
    SweepUnits(SweepArgs),
    /// Ablate every unordered pair of units of a dense layer.
    SweepPairs(SweepArgs),
    /// Train a population of seeds and correlate weight change with importance.
    Population(PopulationArgs),
    /// Similarity-group filter ablations over conv layers and proportions.
    SweepLayers(SweepLayersArgs),
    /// Ablate random filter groups and retrain, in independent instances.
    Recover(RecoverArgs),
    /// Repeated ablation and retraining of the same network.
    RecoverIter(RecoverIterArgs),
    /// t-SNE embedding of test images.
    Embed(EmbedArgs),
    /// Summarize or validate a results directory.
    Report(ReportArgs),
    /// Where to get MNIST.
    FetchInstructions,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Common {
    /// Directory with the four MNIST IDX files.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory (default `results`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainOpts {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f32>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub train: TrainOpts,
    /// `mlp` or `cnn`.
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Layer number (1 = input-side layer).
    #[arg(long)]
    pub layer: usize,
    #[arg(
        long,
        value_delimiter = ',',
        conflicts_with = "filters",
        required_unless_present = "filters"
    )]
    pub units: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub filters: Vec<usize>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Layer number of a dense layer (1 = first hidden layer).
    #[arg(long)]
    pub layer: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PopulationArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub train: TrainOpts,
    #[arg(long)]
    pub arch: Option<String>,
    /// Explicit seeds; overrides --seed-count.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Use seeds 1..=N.
    #[arg(long)]
    pub seed_count: Option<u64>,
    /// Layer number of the dense layer to sweep (default 1).
    #[arg(long)]
    pub layer: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepLayersArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Conv layer numbers; default: all of them.
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub proportions: Vec<f64>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RecoverArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub train: TrainOpts,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Conv layer number.
    #[arg(long)]
    pub layer: usize,
    #[arg(long, default_value_t = 0.25)]
    pub proportion: f64,
    #[arg(long, default_value_t = 5)]
    pub instances: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Retrain until the stop rule fires instead of a fixed epoch count.
    #[arg(long)]
    pub until_stable: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RecoverIterArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub train: TrainOpts,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Conv layer number.
    #[arg(long)]
    pub layer: usize,
    #[arg(long, default_value_t = 0.25)]
    pub proportion: f64,
    #[arg(long, default_value_t = 6)]
    pub iterations: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 5)]
    pub min_epochs: usize,
    #[arg(long, default_value_t = 30)]
    pub max_epochs: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EmbedArgs {
    #[command(flatten)]
    pub common: Common,
    /// Number of leading test images to embed.
    #[arg(long, default_value_t = 2000)]
    pub points: usize,
    #[arg(long)]
    pub perplexity: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ReportArgs {
    /// Results directory.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Validate every file against its schema; nonzero exit on violation.
    #[arg(long)]
    pub check: bool,
}

/// Campaign config file. Every field is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Campaign {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub arch: Option<String>,
    pub seed: Option<u64>,
    pub seeds: Option<Vec<u64>>,
    pub layers: Option<Vec<usize>>,
    pub proportions: Option<Vec<f64>>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f32>,
}

impl Campaign {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let c: Campaign = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(a) = &self.arch {
            nn::arch::by_name(a)?;
        }
        if let Some(ps) = &self.proportions {
            if ps.is_empty() || ps.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
                return Err(Error::Config("proportions must be a nonempty list in (0, 1]".into()));
            }
        }
        if matches!(&self.seeds, Some(s) if s.is_empty()) {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if matches!(&self.layers, Some(l) if l.is_empty()) {
            return Err(Error::Config("layers must not be empty".into()));
        }
        Ok(())
    }
}

struct Run {
    campaign: Campaign,
    argv: Vec<String>,
    started: Instant,
    started_unix: u64,
}

impl Run {
    fn data_dir(&self, c: &Common) -> Result<MnistDir> {
        let dir = c
            .data
            .clone()
            .or_else(|| self.campaign.data.clone())
            .or_else(|| std::env::var_os("ABLATRON_MNIST_DIR").map(PathBuf::from))
            .ok_or_else(|| Error::Config("no dataset directory: pass --data DIR (see fetch-instructions)".into()))?;
        Ok(MnistDir(dir))
    }

    fn out_dir(&self, c: &Common) -> Result<PathBuf> {
        let dir = c
            .out
            .clone()
            .or_else(|| self.campaign.out.clone())
            .unwrap_or_else(|| PathBuf::from("results"));
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn train_config(&self, t: &TrainOpts, seed: u64) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            epochs: t.epochs.or(self.campaign.epochs).unwrap_or(d.epochs),
            batch_size: t.batch_size.or(self.campaign.batch_size).unwrap_or(d.batch_size),
            learning_rate: t
                .learning_rate
                .or(self.campaign.learning_rate)
                .unwrap_or(d.learning_rate),
            seed,
            shuffle: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn seed(&self, s: Option<u64>) -> u64 {
        s.or(self.campaign.seed).unwrap_or(1)
    }

    fn arch(&self, a: &Option<String>) -> String {
        a.clone()
            .or_else(|| self.campaign.arch.clone())
            .unwrap_or_else(|| "mlp".into())
    }

    fn finish(
        &self,
        out: &Path,
        command: &str,
        config: serde_json::Value,
        seed: Option<u64>,
        hash: &str,
        outputs: &[&str],
    ) -> Result<()> {
        let manifest = Manifest {
            command: command.to_string(),
            argv: self.argv.clone(),
            config,
            seed,
            version: results::version(),
            spec_hash: hash.to_string(),
            started_unix: self.started_unix,
            wall_time_s: self.started.elapsed().as_secs_f64(),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
        };
        let path = write_manifest(out, &manifest)?;
        log::info!("wrote {}", path.display());
        Ok(())
    }
}

/// Library index of a 1-based command-line layer number.
fn layer_index(number: usize) -> Result<usize> {
    number
        .checked_sub(1)
        .ok_or_else(|| Error::Config("layers are numbered from 1".into()))
}

fn split_hash(dir: &MnistDir, train: bool) -> Result<String> {
    let (images, labels) = if train {
        (data::TRAIN_IMAGES, data::TRAIN_LABELS)
    } else {
        (data::TEST_IMAGES, data::TEST_LABELS)
    };
    Ok(format!(
        "{}:{}",
        file_sha256(&dir.0.join(images))?,
        file_sha256(&dir.0.join(labels))?
    ))
}

/// Hash of the effective configuration plus the content of every input.
fn hash_inputs<T: Serialize>(command: &str, config: &T, inputs: &[String]) -> Result<String> {
    spec_hash(&(command, config, inputs))
}

fn accounting_rows(acc: &ChangeAccounting, layer: usize, targets: &str, hash: &str, ts: u64) -> Vec<AccountingCsvRow> {
    acc.rows()
        .into_iter()
        .map(|r| AccountingCsvRow {
            layer,
            targets: targets.to_string(),
            class: r.class,
            count: r.count,
            acc_before: r.acc_before,
            acc_after: r.acc_after,
            delta_pp: r.delta_pp,
            black: r.black,
            red: r.red,
            green: r.green,
            blue: r.blue,
            spec_hash: hash.to_string(),
            timestamp: ts,
        })
        .collect()
}

fn history_rows(history: &[EpochStats], hash: &str, ts: u64) -> Vec<HistoryRow> {
    history
        .iter()
        .map(|e| HistoryRow {
            epoch: e.epoch,
            train_loss: e.train_loss,
            train_accuracy: e.train_accuracy,
            test_accuracy: e.test_accuracy,
            test_top5: e.test_top5,
            spec_hash: hash.to_string(),
            timestamp: ts,
        })
        .collect()
}

/// Parse `argv`, run the command and return its result.
pub fn run(cli: Cli, argv: Vec<String>) -> Result<()> {
    let campaign = match &cli.config {
        Some(p) => Campaign::load(p)?,
        None => Campaign::default(),
    };
    let run = Run {
        campaign,
        argv,
        started: Instant::now(),
        started_unix: unix_now(),
    };
    match cli.command {
        Command::Train(a) => cmd_train(&run, &a),
        Command::Ablate(a) => cmd_ablate(&run, &a),
        Command::SweepUnits(a) => cmd_sweep_units(&run, &a),
        Command::SweepPairs(a) => cmd_sweep_pairs(&run, &a),
        Command::Population(a) => cmd_population(&run, &a),
        Command::SweepLayers(a) => cmd_sweep_layers(&run, &a),
        Command::Recover(a) => cmd_recover(&run, &a),
        Command::RecoverIter(a) => cmd_recover_iter(&run, &a),
        Command::Embed(a) => cmd_embed(&run, &a),
        Command::Report(a) => cmd_report(&a),
        Command::FetchInstructions => {
            println!("{}", data::FETCH_INSTRUCTIONS);
            Ok(())
        }
    }
}

fn cmd_train(run: &Run, a: &TrainArgs) -> Result<()> {
    let dir = run.data_dir(&a.common)?;
    let out = run.out_dir(&a.common)?;
    let arch_name = run.arch(&a.arch);
    let arch = nn::arch::by_name(&arch_name)?;
    let seed = run.seed(a.seed);
    let cfg = run.train_config(&a.train, seed)?;
    let config = serde_json::json!({ "arch": arch_name, "train": cfg });
    let hash = hash_inputs("train", &config, &[split_hash(&dir, true)?, split_hash(&dir, false)?])?;
    let (train_set, test_set) = (dir.train()?, dir.test()?);
    let init = nn::init_network(&arch, seed)?;
    let (trained, history) = nn::train(&init, &train_set, &cfg, Some(&test_set))?;
    save_checkpoint(&init, &out.join("init.ablt"))?;
    save_checkpoint(&trained, &out.join("model.ablt"))?;
    ResultStore::<HistoryRow>::new(&out, results::HISTORY).rewrite(&history_rows(&history, &hash, unix_now()))?;
    if let Some(last) = history.last() {
        println!(
            "trained {arch_name} for {} epochs: test accuracy {:.4}",
            last.epoch,
            last.test_accuracy.unwrap_or(f64::NAN)
        );
    }
    run.finish(
        &out,
        "train",
        config,
        Some(seed),
        &hash,
        &["init.ablt", "model.ablt", results::HISTORY],
    )
}

fn load_ckpt(path: &Path) -> Result<(Network, String)> {
    Ok((load_checkpoint(path)?, file_sha256(path)?))
}

fn cmd_ablate(run: &Run, a: &AblateArgs) -> Result<()> {
    let dir = run.data_dir(&a.common)?;
    let out = run.out_dir(&a.common)?;
    let (net, ckpt_hash) = load_ckpt(&a.ckpt)?;
    let index = layer_index(a.layer)?;
    let spec = if a.filters.is_empty() {
        AblationSpec::new(index, AblationKind::Unit, a.units.iter().copied())?
    } else {
        AblationSpec::new(index, AblationKind::Filter, a.filters.iter().copied())?
    };
    let config = serde_json::json!({ "layer": a.layer, "kind": spec.kind, "targets": spec.targets });
    let hash = hash_inputs("ablate", &config, &[ckpt_hash, split_hash(&dir, false)?])?;
    let store = ResultStore::<AccountingCsvRow>::new(&out, results::ACCOUNTING);
    if store.completed(&hash)?.is_empty() {
        let test = dir.test()?;
        let before = evaluate(&net, &test, &experiments::EVAL_KS)?;
        let after = evaluate(&ablate(&net, &spec)?, &test, &experiments::EVAL_KS)?;
        let acc = diff_reports(&before, &after)?;
        store.append(&accounting_rows(
            &acc,
            a.layer,
            &format_targets(&spec.targets),
            &hash,
            unix_now(),
        ))?;
        println!(
            "accuracy {:.4} -> {:.4} (drop {:.2} pp)",
            before.overall_accuracy,
            after.overall_accuracy,
            acc.drop_pp()
        );
    } else {
        println!("already computed for this spec, skipped");
    }
    run.finish(&out, "ablate", config, None, &hash, &[results::ACCOUNTING])
}

fn unit_rows(sweep: &experiments::SweepResult, hash: &str, ts: u64) -> (Vec<UnitSweepRow>, Vec<AccountingCsvRow>) {
    let base5 = sweep.base.top_k(5).unwrap_or(f64::NAN);
    let mut units = Vec::new();
    let mut acc = Vec::new();
    for r in &sweep.records {
        let unit = r.unit().expect("single unit");
        units.push(UnitSweepRow {
            layer: sweep.layer + 1,
            unit,
            acc_before: sweep.base.overall_accuracy,
            acc_after: r.report.overall_accuracy,
            drop_pp: r.drop_pp,
            top5_before: base5,
            top5_after: r.report.top_k(5).unwrap_or(f64::NAN),
            top5_drop_pp: r.top5_drop_pp.unwrap_or(f64::NAN),
            spec_hash: hash.to_string(),
            timestamp: ts,
        });
        acc.extend(accounting_rows(
            &r.accounting,
            sweep.layer + 1,
            &unit.to_string(),
            hash,
            ts,
        ));
    }
    (units, acc)
}

/// Rewrite `file` keeping other campaigns' rows and replacing this hash's.
fn replace_rows<R: results::ResultRow>(dir: &Path, file: &str, hash: &str, rows: Vec<R>) -> Result<()> {
    let store = ResultStore::<R>::new(dir, file);
    let mut all: Vec<R> = store
        .read_all()?
        .into_iter()
        .filter(|r| r.spec_hash() != hash)
        .collect();
    all.extend(rows);
    store.rewrite(&all)
}

fn cmd_sweep_units(run: &Run, a: &SweepArgs) -> Result<()> {
    let dir = run.data_dir(&a.common)?;
    let out = run.out_dir(&a.common)?;
    let (net, ckpt_hash) = load_ckpt(&a.ckpt)?;
    let config = serde_json::json!({ "layer": a.layer });
    let hash = hash_inputs("sweep-units", &config, &[ckpt_hash, split_hash(&dir, false)?])?;
    let store = ResultStore::<UnitSweepRow>::new(&out, results::SWEEP_UNITS);
    let acc_store = ResultStore::<AccountingCsvRow>::new(&out, results::SWEEP_UNITS_ACCOUNTING);
    let done: BTreeSet<usize> = store.completed(&hash)?.iter().map(|r| r.unit).collect();
    let index = layer_index(a.layer)?;
    let n = net.params(index).map_or(0, |p| p.weights.nrows());
    let todo: Vec<usize> = (0..n).filter(|u| !done.contains(u)).collect();
    if !todo.is_empty() || n == 0 {
        let test = dir.test()?;
        let sweep = experiments::single_unit_sweep_units(&net, index, &test, &todo)?;
        let (units, acc) = unit_rows(&sweep, &hash, unix_now());
        acc_store.append(&acc)?;
        store.append(&units)?;
    }
    log::info!("{} units resumed, {} computed", done.len(), todo.len());

    // per-class drops of every unit, from the accounting rows of this campaign
    let mut per_unit: BTreeMap<usize, BTreeMap<usize, f64>> = BTreeMap::new();
    for r in acc_store.completed(&hash)? {
        if let Ok(class) = r.class.parse::<usize>() {
            let unit = *parse_targets(&r.targets)
                .map_err(Error::Report)?
                .first()
                .expect("nonempty");
            per_unit.entry(unit).or_default().insert(class, -r.delta_pp);
        }
    }
    let classes = per_unit.values().map(BTreeMap::len).max().unwrap_or(0);
    let matrix = Array2::from_shape_fn((per_unit.len(), classes), |(u, c)| {
        per_unit.values().nth(u).and_then(|m| m.get(&c)).copied().unwrap_or(0.0)
    });
    let ts = unix_now();
    let profile = selectivity_deviation(&matrix)?;
    let rows = profile
        .per_class_stddev
        .iter()
        .enumerate()
        .map(|(class, &s)| SelectivityRow {
            layer: a.layer,
            class,
            stddev_pp: s,
            spec_hash: hash.clone(),
            timestamp: ts,
        })
        .collect();
    replace_rows(&out, results::SELECTIVITY, &hash, rows)?;

    let all = store.completed(&hash)?;
    let drops: Vec<f64> = all.iter().map(|r| r.drop_pp).collect();
    let max = drops.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let small = drops.iter().filter(|&&d| d <= 3.0).count();
    println!(
        "{} units: max drop {max:.2} pp, {small} units with drop <= 3 pp",
        drops.len()
    );
    run.finish(
        &out,
        "sweep-units",
        config,
        None,
        &hash,
        &[
            results::SWEEP_UNITS,
            results::SWEEP_UNITS_ACCOUNTING,
            results::SELECTIVITY,
        ],
    )
}

fn cmd_sweep_pairs(run: &Run, a: &SweepArgs) -> Result<()> {
    let dir = run.data_dir(&a.common)?;
    let out = run.out_dir(&a.common)?;
    let (net, ckpt_hash) = load_ckpt(&a.ckpt)?;
    let config = serde_json::json!({ "layer": a.layer });
    let hash = hash_inputs("sweep-pairs", &config, &[ckpt_hash, split_hash(&dir, false)?])?;
    let store = ResultStore::<PairRow>::new(&out, results::SWEEP_PAIRS);
    let acc_store = ResultStore::<AccountingCsvRow>::new(&out, results::SWEEP_PAIRS_ACCOUNTING);
    let done: BTreeSet<(usize, usize)> = store.completed(&hash)?.iter().map(|r| (r.unit_a, r.unit_b)).collect();
    let index = layer_index(a.layer)?;
    let n = net.params(index).map_or(0, |p| p.weights.nrows());
    let todo: Vec<(usize, usize)> = experiments::all_pairs(n)
        .into_iter()
        .filter(|p| !done.contains(p))
        .collect();
    if !todo.is_empty() || n < 2 {
        let test = dir.test()?;
        let sweep = experiments::pairwise_sweep_pairs(&net, index, &test, &todo)?;
        let ts = unix_now();
        let mut rows = Vec::new();
        let mut acc = Vec::new();
        for p in &sweep.pairs {
            rows.push(PairRow {
                layer: a.layer,
                unit_a: p.unit_a,
                unit_b: p.unit_b,
                drop_a_pp: p.drop_a_pp,
                drop_b_pp: p.drop_b_pp,
                pair_drop_pp: p.pair_drop_pp,
                gap_pp: p.gap_pp,
                pair_only_wrong: p.accounting.overall.pair_only_wrong.unwrap_or(0),
                spec_hash: hash.clone(),
                timestamp: ts,
            });
            let targets = format!("{} {}", p.unit_a, p.unit_b);
            acc.extend(accounting_rows(&p.accounting, a.layer, &targets, &hash, ts));
        }
        acc_store.append(&acc)?;
        store.append(&rows)?;
    }
    let all = store.completed(&hash)?;
    if let Some(best) = all.iter().max_by(|x, y| x.gap_pp.total_cmp(&y.gap_pp)) {
        println!(
            "{} pairs; strongest super-additivity: units {}+{} gap {:.2} pp",
            all.len(),
            best.unit_a,
            best.unit_b,
            best.gap_pp
        );
    }
    run.finish(
        &out,
        "sweep-pairs",
        config,
        None,
        &hash,
        &[results::SWEEP_PAIRS, results::SWEEP_PAIRS_ACCOUNTING],
    )
}

fn cmd_population(run: &Run, a: &PopulationArgs) -> Result<()> {
    let dir = run.data_dir(&a.common)?;
    let out = run.out_dir(&a.common)?;
    let arch_name = run.arch(&a.arch);
    let arch = nn::arch::by_name(&arch_name)?;
    let seeds: Vec<u64> = if !a.seeds.is_empty() {
        a.seeds.clone()
    } else if let Some(n) = a.seed_count {
        (1..=n).collect()
    } else {
        run.campaign.seeds.clone().unwrap_or_else(|| (1..=20).collect())
    };
    if seeds.len() < 2 {
        return Err(Error::Config("population study needs at least 2 seeds".into()));
    }
    let layer = a.layer.unwrap_or(1);
    let index = layer_index(layer)?;
    let cfg = run.train_config(&a.train, 0)?;
    let config = serde_json::json!({ "arch": arch_name, "layer": layer, "train": cfg });
    // seeds are per-row keys, so they stay out of the hash and the study can grow
    let hash = hash_inputs(
        "population",
        &config,
        &[split_hash(&dir, true)?, split_hash(&dir, false)?],
    )?;
    let store = ResultStore::<PopulationRow>::new(&out, results::POPULATION);
    let unit_store = ResultStore::<PopulationUnitRow>::new(&out, results::POPULATION_UNITS);
    let done: BTreeSet<u64> = store.completed(&hash)?.iter().map(|r| r.seed).collect();
    let mut todo: Vec<u64> = seeds.iter().copied().filter(|s| !done.contains(s)).collect();
    todo.dedup();
    if !todo.is_empty() {
        let (train_set, test_set) = (dir.train()?, dir.test()?);
        for seed in todo {
            // persisted seed by seed so an interrupted study resumes
            let result = match population_seed(seed, &arch, index, &train_set, &test_set, &cfg) {
                Ok(o) => SeedResult::Done(o),
                Err(e) => SeedResult::Failed {
                    seed,
                    reason: e.to_string(),
                },
            };
            let ts = unix_now();
            let row = match &result {
                SeedResult::Done(o) => {
                    let units: Vec<PopulationUnitRow> = o
                        .units
                        .iter()
                        .map(|u| PopulationUnitRow {
                            seed,
                            layer,
                            unit: u.unit,
                            p_value: u.p_value,
                            drop_pp: u.drop_pp,
                            spec_hash: hash.clone(),
                            timestamp: ts,
                        })
                        .collect();
                    unit_store.append(&units)?;
                    log::info!("seed {seed}: spearman {:.3}", o.spearman);
                    PopulationRow {
                        seed,
                        status: "ok".into(),
                        test_accuracy: Some(o.test_accuracy),
                        pearson: Some(o.pearson),
                        spearman: Some(o.spearman),
                        error: String::new(),
                        spec_hash: hash.clone(),
                        timestamp: ts,
                    }
                }
                SeedResult::Failed { reason, .. } => {
                    log::warn!("seed {seed} failed: {reason}");
                    PopulationRow {
                        seed,
                        status: "failed".into(),
                        error: reason.clone(),
                        spec_hash: hash.clone(),
                        timestamp: ts,
                        ..PopulationRow::default()
                    }
                }
            };
            store.append(&[row])?;
        }
    }
    let wanted: BTreeSet<u64> = seeds.iter().copied().collect();
    let rows: Vec<PopulationRow> = store
        .completed(&hash)?
        .into_iter()
        .filter(|r| wanted.contains(&r.seed))
        .collect();
    let mut rho: Vec<f64> = rows.iter().filter_map(|r| r.spearman).collect();
    rho.sort_by(f64::total_cmp);
    if !rho.is_empty() {
        let negative = rho.iter().filter(|&&r| r < 0.0).count();
        let median = if rho.len() % 2 == 1 {
            rho[rho.len() / 2]
        } else {
            (rho[rho.len() / 2 - 1] + rho[rho.len() / 2]) / 2.0
        };
        println!(
            "{} seeds ok ({} failed): spearman < 0 for {negative}, median {median:.3}",
            rho.len(),
            rows.len() - rho.len()
        );
    }
    let pooled: Vec<PopulationUnitRow> = unit_store.completed(&hash)?;
    if pooled.len() >= 2 {
        let p: Vec<f64> = pooled.iter().map(|r| r.p_value).collect();
        let d: Vec<f64> = pooled.iter().map(|r| r.drop_pp).collect();
        if let Ok(r) = spearman(&p, &d) {
            println!("pooled spearman over {} units: {r:.3}", pooled.len());
        }
    }
    let config = serde_json::json!({ "arch": arch_name, "layer": layer, "train": cfg, "seeds": seeds });
    run.finish(
        &out,
        "population",
        config,
        None,
        &hash,
        &[results::POPULATION, results::POPULATION_UNITS],
    )
}

fn conv_layers(net: &Network) -> Vec<usize> {
    net.layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| l.is_conv())
        .map(|(i, _)| i + 1)
        .collect()
}

fn cmd_sweep_layers(run: &Run, a: &SweepLayersArgs) -> Result<()> {
    let dir = run.data_dir(&a.common)?;
    let out = run.out_dir(&a.common)?;
    let (net, ckpt_hash) = load_ckpt(&a.ckpt)?;
    let layers = if a.layers.is_empty() {
        run.campaign.layers.clone().unwrap_or_else(|| conv_layers(&net))
    } else {
        a.layers.clone()
    };
    let proportions = if a.proportions.is_empty() {
        run.campaign
            .proportions
            .clone()
            .unwrap_or_else(|| vec![0.01, 0.05, 0.10, 0.25])
    } else {
        a.proportions.clone()
    };
    let config = serde_json::json!({ "layers": layers, "proportions": proportions });
    let hash = hash_inputs("sweep-layers", &config, &[ckpt_hash, split_hash(&dir, false)?])?;
    let store = ResultStore::<GroupRow>::new(&out, results::LAYER_GROUPS);
    let done: BTreeSet<(usize, u64, usize)> = store
        .completed(&hash)?
        .iter()
        .map(|r| (r.layer, r.proportion.to_bits(), r.reference))
        .collect();
    let test = dir.test()?;
    let indices = layers.iter().map(|&l| layer_index(l)).collect::<Result<Vec<_>>>()?;
    let skip = |l: usize, p: f64, r: usize| done.contains(&(l + 1, p.to_bits(), r));
    let sweep = layer_group_sweep(&net, &test, &indices, &proportions, &skip)?;
    let ts = unix_now();
    let rows: Vec<GroupRow> = sweep
        .records
        .iter()
        .map(|r| GroupRow {
            layer: r.layer + 1,
            proportion: r.proportion,
            group_size: r.targets.len(),
            reference: r.reference,
            targets: format_targets(&r.targets),
            drop_pp: r.drop_pp,
            top5_drop_pp: r.top5_drop_pp,
            spec_hash: hash.clone(),
            timestamp: ts,
        })
        .collect();
    store.append(&rows)?;
    let records: Vec<GroupRecord> = store
        .completed(&hash)?
        .into_iter()
        .map(|r| {
            Ok(GroupRecord {
                layer: r.layer,
                proportion: r.proportion,
                reference: r.reference,
                targets: parse_targets(&r.targets).map_err(Error::Report)?,
                drop_pp: r.drop_pp,
                top5_drop_pp: r.top5_drop_pp,
            })
        })
        .collect::<Result<_>>()?;
    let curves: Vec<CurveRow> = summarize_groups(&records)
        .into_iter()
        .map(|c| CurveRow {
            layer: c.layer,
            proportion: c.proportion,
            count: c.count,
            mean_drop_pp: c.mean_drop_pp,
            std_drop_pp: c.std_drop_pp,
            lower_pp: c.lower_pp,
            upper_pp: c.upper_pp,
            mean_top5_drop_pp: c.mean_top5_drop_pp,
            std_top5_drop_pp: c.std_top5_drop_pp,
            spec_hash: hash.clone(),
            timestamp: ts,
        })
        .collect();
    for c in &curves {
        println!(
            "layer {} p={:<5} n={:<3} drop {:.2} ± {:.2} pp (top-5 {:.2})",
            c.layer, c.proportion, c.count, c.mean_drop_pp, c.std_drop_pp, c.mean_top5_drop_pp
        );
    }
    replace_rows(&out, results::LAYER_CURVES, &hash, curves)?;
    run.finish(
        &out,
        "sweep-layers",
        config,
        None,
        &hash,
        &[results::LAYER_GROUPS, results::LAYER_CURVES],
    )
}

fn recovery_rows(protocol: &str, t: &RecoveryTrace, hash: &str, ts: u64) -> (RecoveryRow, Vec<RecoveryEpochRow>) {
    let row = RecoveryRow {
        protocol: protocol.to_string(),
        instance: t.instance,
        iteration: t.iteration,
        layer: t.layer + 1,
        proportion: t.proportion,
        targets: format_targets(&t.targets),
        cumulative_ablated: t.cumulative_ablated,
        cumulative_fraction: t.cumulative_fraction,
        base_top1: t.base_top1,
        base_top5: t.base_top5,
        ablated_top1: t.ablated_top1,
        ablated_top5: t.ablated_top5,
        final_top1: t.final_top1(),
        final_top5: t.final_top5(),
        epochs_used: t.epochs_used,
        spec_hash: hash.to_string(),
        timestamp: ts,
    };
    let epochs = t
        .epochs
        .iter()
        .map(|e| RecoveryEpochRow {
            protocol: protocol.to_string(),
            instance: t.instance,
            iteration: t.iteration,
            epoch: e.epoch,
            train_loss: e.train_loss,
            train_accuracy: e.train_accuracy,
            test_top1: e.test_accuracy.unwrap_or(f64::NAN),
            test_top5: e.test_top5.unwrap_or(f64::NAN),
            spec_hash: hash.to_string(),
            timestamp: ts,
        })
        .collect();
    (row, epochs)
}

fn cmd_recover(run: &Run, a: &RecoverArgs) -> Result<()> {
    let dir = run.data_dir(&a.common)?;
    let out = run.out_dir(&a.common)?;
    let (net, ckpt_hash) = load_ckpt(&a.ckpt)?;
    let mut train = run.train_config(&a.train, 0)?;
    let retraining = if a.until_stable {
        Retraining::Until(StopRule::default())
    } else {
        Retraining::Fixed(a.train.epochs.or(run.campaign.epochs).unwrap_or(5))
    };
    train.epochs = 0;
    let cfg = RecoveryConfig {
        layer: layer_index(a.layer)?,
        proportion: a.proportion,
        seed: run.seed(a.seed),
        train,
        retraining,
    };
    let mut config = serde_json::to_value(cfg)?;
    config["layer"] = a.layer.into();
    let hash = hash_inputs(
        "recover",
        &config,
        &[ckpt_hash, split_hash(&dir, true)?, split_hash(&dir, false)?],
    )?;
    let store = ResultStore::<RecoveryRow>::new(&out, results::RECOVERY);
    let epoch_store = ResultStore::<RecoveryEpochRow>::new(&out, results::RECOVERY_EPOCHS);
    let done: BTreeSet<usize> = store.completed(&hash)?.iter().map(|r| r.instance).collect();
    let todo: Vec<usize> = (0..a.instances).filter(|i| !done.contains(i)).collect();
    if !todo.is_empty() {
        let (train_set, test_set) = (dir.train()?, dir.test()?);
        for i in todo {
            let traces = recovery_run(&net, &train_set, &test_set, &cfg, &[i])?;
            let (row, epochs) = recovery_rows("single", &traces[0], &hash, unix_now());
            epoch_store.append(&epochs)?;
            store.append(&[row])?;
        }
    }
    for r in store.completed(&hash)?.iter().filter(|r| r.instance < a.instances) {
        println!(
            "instance {}: top-1 {:.4} -> ablated {:.4} -> recovered {:.4} after {} epochs",
            r.instance, r.base_top1, r.ablated_top1, r.final_top1, r.epochs_used
        );
    }
    run.finish(
        &out,
        "recover",
        config,
        Some(cfg.seed),
        &hash,
        &[results::RECOVERY, results::RECOVERY_EPOCHS],
    )
}

fn cmd_recover_iter(run: &Run, a: &RecoverIterArgs) -> Result<()> {
    let dir = run.data_dir(&a.common)?;
    let out = run.out_dir(&a.common)?;
    let (net, ckpt_hash) = load_ckpt(&a.ckpt)?;
    let mut train = run.train_config(&a.train, 0)?;
    train.epochs = 0;
    let rule = StopRule {
        min_epochs: a.min_epochs,
        max_epochs: a.max_epochs,
        ..StopRule::default()
    };
    let cfg = RecoveryConfig {
        layer: layer_index(a.layer)?,
        proportion: a.proportion,
        seed: run.seed(a.seed),
        train,
        retraining: Retraining::Until(rule),
    };
    let mut config = serde_json::to_value(cfg)?;
    config["layer"] = a.layer.into();
    let hash = hash_inputs(
        "recover-iter",
        &config,
        &[ckpt_hash, split_hash(&dir, true)?, split_hash(&dir, false)?],
    )?;
    let store = ResultStore::<RecoveryRow>::new(&out, results::RECOVERY);
    let epoch_store = ResultStore::<RecoveryEpochRow>::new(&out, results::RECOVERY_EPOCHS);
    let state_dir = out.join(format!("recover-iter-{}", &hash[..12]));
    let mut rows: Vec<RecoveryRow> = store.completed(&hash)?;
    rows.sort_by_key(|r| r.iteration);
    let (train_set, test_set) = (dir.train()?, dir.test()?);
    let state = match rows.last() {
        Some(last) => {
            let mut ablated = BTreeSet::new();
            for r in &rows {
                ablated.extend(parse_targets(&r.targets).map_err(Error::Report)?);
            }
            IterativeState {
                net: load_checkpoint(&state_dir.join(format!("iter-{}.ablt", last.iteration)))?,
                ablated,
                next_iteration: last.iteration + 1,
                base_top1: last.base_top1,
                base_top5: last.base_top5,
            }
        }
        None => IterativeState::new(net, &test_set)?,
    };
    fs::create_dir_all(&state_dir)?;
    iterative_recovery_from(state, &train_set, &test_set, &cfg, a.iterations, |trace, st| {
        save_checkpoint(&st.net, &state_dir.join(format!("iter-{}.ablt", trace.iteration)))?;
        let (row, epochs) = recovery_rows("iterative", trace, &hash, unix_now());
        epoch_store.append(&epochs)?;
        store.append(&[row])
    })?;
    let mut rows = store.completed(&hash)?;
    rows.retain(|r| r.iteration < a.iterations);
    rows.sort_by_key(|r| r.iteration);
    for r in &rows {
        println!(
            "iteration {}: {:.1}% filters ablated, top-1 {:.4} -> {:.4} ({} epochs)",
            r.iteration,
            r.cumulative_fraction * 100.0,
            r.ablated_top1,
            r.final_top1,
            r.epochs_used
        );
    }
    run.finish(
        &out,
        "recover-iter",
        config,
        Some(cfg.seed),
        &hash,
        &[results::RECOVERY, results::RECOVERY_EPOCHS],
    )
}

/// Rows of `data` as f64 pixel vectors in `[0, 1]`.
fn pixel_matrix(data: &LabeledDataset) -> Array2<f64> {
    data.batch_range(0, data.len()).mapv(f64::from)
}

fn cmd_embed(run: &Run, a: &EmbedArgs) -> Result<()> {
    let dir = run.data_dir(&a.common)?;
    let out = run.out_dir(&a.common)?;
    let d = TsneConfig::default();
    let cfg = TsneConfig {
        perplexity: a.perplexity.unwrap_or(d.perplexity),
        iterations: a.iterations.unwrap_or(d.iterations),
        seed: run.seed(a.seed),
        ..d
    };
    let config = serde_json::json!({ "points": a.points, "tsne": cfg });
    let hash = hash_inputs("embed", &config, &[split_hash(&dir, false)?])?;
    let store = ResultStore::<EmbeddingRow>::new(&out, results::EMBEDDING);
    if store.completed(&hash)?.is_empty() {
        let test = dir.test()?;
        if a.points > test.len() {
            return Err(Error::Config(format!(
                "{} points requested, dataset has {}",
                a.points,
                test.len()
            )));
        }
        let subset = test.head(a.points);
        let e = tsne(&pixel_matrix(&subset), &cfg)?;
        let ts = unix_now();
        let rows: Vec<EmbeddingRow> = (0..subset.len())
            .map(|i| EmbeddingRow {
                sample_index: i,
                x: e.coordinates[[i, 0]],
                y: e.coordinates[[i, 1]],
                label: subset.labels()[i],
                spec_hash: hash.clone(),
                timestamp: ts,
            })
            .collect();
        replace_rows(&out, results::EMBEDDING, &hash, rows)?;
        let kl: Vec<KlRow> = e
            .kl_history
            .iter()
            .map(|&(iteration, kl)| KlRow {
                iteration,
                kl,
                spec_hash: hash.clone(),
                timestamp: ts,
            })
            .collect();
        replace_rows(&out, results::EMBEDDING_KL, &hash, kl)?;
        let purity = crate::embed::knn_label_purity(&e.coordinates, subset.labels(), 10);
        println!(
            "embedded {} points: final KL {:.4}, 10-NN label purity {purity:.3}",
            subset.len(),
            e.kl_history.last().map_or(f64::NAN, |x| x.1)
        );
    } else {
        println!("embedding cached for this spec, skipped");
    }
    run.finish(
        &out,
        "embed",
        config,
        Some(cfg.seed),
        &hash,
        &[results::EMBEDDING, results::EMBEDDING_KL],
    )
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let checks = results::check_dir(&a.input)?;
    for (path, c) in &checks {
        println!(
            "{:<60} {:>7} rows {:>3} spec hashes",
            path.display(),
            c.rows,
            c.spec_hashes
        );
    }
    if a.check {
        println!("{} files valid", checks.len());
    }
    Ok(())
}
