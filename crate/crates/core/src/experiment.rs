//! Experiment orchestration: main comparison, ablations, noise robustness and
//! token-count sweeps, with shared splits, seeds and memoized runs.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{fingerprint, ModelConfig, TrainConfig};
use crate::data::{
    generate_synthetic, ingest_with, inject_noise, leave_one_out_split, DatasetStats, Format, IngestOptions,
    InteractionDataset, LeaveOneOut, SyntheticConfig, DEFAULT_CORE,
};
use crate::error::{Error, Result};
use crate::metrics::{rank_and_score, RankingMetrics};
use crate::model::{Model, Variant};
use crate::trainer::{derive_seed, fit, EpochRecord, TrainLog};

pub const REPORT_SCHEMA: &str = "intentrec-report";
pub const REPORT_VERSION: u32 = 1;

/// Where interactions come from: a log file when `path` is set, otherwise the
/// synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    /// `tsv`, `jsonl` or `json`; inferred from the extension when absent.
    pub format: Option<String>,
    pub min_interactions: usize,
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            format: None,
            min_interactions: DEFAULT_CORE,
            synthetic: SyntheticConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn load(&self) -> Result<InteractionDataset> {
        let Some(path) = &self.path else {
            return generate_synthetic(&self.synthetic);
        };
        let format = match &self.format {
            Some(name) => Format::parse(name).ok_or_else(|| Error::Config(format!("unknown data format {name:?}")))?,
            None => Format::from_path(path)
                .ok_or_else(|| Error::Config(format!("cannot infer the format of {}", path.display())))?,
        };
        ingest_with(
            path,
            format,
            &IngestOptions {
                min_interactions: self.min_interactions,
            },
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub prefix_tokens: Vec<usize>,
    pub intent_tokens: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            prefix_tokens: vec![2, 8],
            intent_tokens: vec![1, 3],
        }
    }
}

/// Everything one experiment depends on. Defaults are the desk-scale setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    /// Schedule of every recommender.
    pub train: TrainConfig,
    /// Schedule of the intent encoder.
    pub pretrain: TrainConfig,
    pub seeds: Vec<u64>,
    pub noise_ratio: f64,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            model: ModelConfig {
                hidden_dim: 32,
                baseline_dim: 32,
                max_len: 10,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                learning_rate: 3e-3,
                max_epochs: 12,
                patience: 12,
                samples_per_user: Some(3),
                ..TrainConfig::default()
            },
            pretrain: TrainConfig {
                learning_rate: 3e-3,
                max_epochs: 40,
                patience: 5,
                ..TrainConfig::default()
            },
            seeds: vec![0, 1, 2],
            noise_ratio: 0.2,
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads TOML or JSON, chosen by extension (`.json` is JSON, anything
    /// else TOML).
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.pretrain.validate()?;
        if self.data.path.is_none() {
            self.data.synthetic.validate()?;
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_ratio) {
            return Err(Error::Config(format!("noise_ratio = {} outside [0, 1]", self.noise_ratio)));
        }
        for &k in &self.sweep.prefix_tokens {
            ModelConfig {
                prefix_tokens: k,
                ..self.model.clone()
            }
            .validate()?;
        }
        for &m in &self.sweep.intent_tokens {
            ModelConfig {
                intent_tokens: m,
                ..self.model.clone()
            }
            .validate()?;
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Clean,
    Noisy,
}

impl Condition {
    pub fn name(self) -> &'static str {
        match self {
            Condition::Clean => "clean",
            Condition::Noisy => "noisy",
        }
    }
}

/// One trained and evaluated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub condition: Condition,
    pub variant: Variant,
    pub seed: u64,
    pub prefix_tokens: usize,
    pub intent_tokens: usize,
    pub best_epoch: usize,
    pub epochs: usize,
    pub backbone_fingerprint: Option<String>,
    pub test: RankingMetrics,
    #[serde(skip)]
    pub log: TrainLog,
    #[serde(skip)]
    pub wall_seconds: f64,
}

type RunKey = (Condition, Variant, u64, usize, usize);

struct Prepared {
    ds: InteractionDataset,
    split: LeaveOneOut,
}

/// Trains and evaluates models on demand and remembers every result, so
/// experiments that share runs (the full model appears in all of them) pay
/// for each run once.
pub struct Lab {
    config: ExperimentConfig,
    clean: Prepared,
    noisy: BTreeMap<u64, Prepared>,
    encoders: BTreeMap<(Condition, u64), (Model, TrainLog, f64)>,
    runs: BTreeMap<RunKey, RunRecord>,
    models: BTreeMap<RunKey, Model>,
}

impl Lab {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let ds = config.data.load()?;
        Self::with_dataset(config, ds)
    }

    pub fn with_dataset(config: ExperimentConfig, ds: InteractionDataset) -> Result<Self> {
        config.validate()?;
        let split = leave_one_out_split(&ds)?;
        Ok(Self {
            config,
            clean: Prepared { ds, split },
            noisy: BTreeMap::new(),
            encoders: BTreeMap::new(),
            runs: BTreeMap::new(),
            models: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn dataset(&self) -> &InteractionDataset {
        &self.clean.ds
    }

    pub fn split(&self) -> &LeaveOneOut {
        &self.clean.split
    }

    fn prepared(&mut self, condition: Condition, seed: u64) -> Result<&Prepared> {
        if condition == Condition::Clean {
            return Ok(&self.clean);
        }
        if !self.noisy.contains_key(&seed) {
            let ds = inject_noise(&self.clean.ds, self.config.noise_ratio, derive_seed(seed, &[5]))?;
            let split = leave_one_out_split(&ds)?;
            self.noisy.insert(seed, Prepared { ds, split });
        }
        Ok(&self.noisy[&seed])
    }

    /// The intent encoder pretrained on `condition` data with `seed`.
    pub fn encoder(&mut self, condition: Condition, seed: u64) -> Result<&Model> {
        if !self.encoders.contains_key(&(condition, seed)) {
            let started = Instant::now();
            let model_cfg = self.config.model.clone();
            let pretrain = self.config.pretrain.clone();
            let p = self.prepared(condition, seed)?;
            let mut enc = Model::new(Variant::Encoder, p.ds.item_count(), &model_cfg, None, derive_seed(seed, &[1]))?;
            let log = fit(&mut enc, &p.ds, &p.split, &pretrain, derive_seed(seed, &[2]))?;
            let wall = started.elapsed().as_secs_f64();
            self.encoders.insert((condition, seed), (enc, log, wall));
        }
        Ok(&self.encoders[&(condition, seed)].0)
    }

    /// Trains `variant` (with `k` prefix and `m` intent tokens) and evaluates
    /// it on the test targets.
    pub fn run_with_tokens(
        &mut self,
        condition: Condition,
        variant: Variant,
        seed: u64,
        k: usize,
        m: usize,
    ) -> Result<&RunRecord> {
        if variant == Variant::Encoder {
            return Err(Error::Config("the encoder is pretrained, not run".into()));
        }
        let key = (condition, variant, seed, k, m);
        if !self.runs.contains_key(&key) {
            let (record, model) = self.train_and_evaluate(key)?;
            self.runs.insert(key, record);
            self.models.insert(key, model);
        }
        Ok(&self.runs[&key])
    }

    pub fn run(&mut self, condition: Condition, variant: Variant, seed: u64) -> Result<&RunRecord> {
        let (k, m) = (self.config.model.prefix_tokens, self.config.model.intent_tokens);
        self.run_with_tokens(condition, variant, seed, k, m)
    }

    fn train_and_evaluate(&mut self, (condition, variant, seed, k, m): RunKey) -> Result<(RunRecord, Model)> {
        let model_cfg = ModelConfig {
            prefix_tokens: k,
            intent_tokens: m,
            ..self.config.model.clone()
        };
        let train = self.config.train.clone();
        let encoder = if variant.uses_intents() {
            Some(self.encoder(condition, seed)?.clone())
        } else {
            None
        };
        let started = Instant::now();
        let p = self.prepared(condition, seed)?;
        let mut model = Model::new(variant, p.ds.item_count(), &model_cfg, encoder.as_ref(), derive_seed(seed, &[3]))?;
        let log = fit(&mut model, &p.ds, &p.split, &train, derive_seed(seed, &[4]))?;
        let test = rank_and_score(&model, &p.ds, &p.split.test, train.eval_batch_size)?;
        let default_tokens = (k, m) == (self.config.model.prefix_tokens, self.config.model.intent_tokens);
        let run_id = if default_tokens {
            format!("{}/{}/seed{seed}", condition.name(), variant)
        } else {
            format!("{}/{}/k{k}-m{m}/seed{seed}", condition.name(), variant)
        };
        let record = RunRecord {
            run_id,
            condition,
            variant,
            seed,
            prefix_tokens: k,
            intent_tokens: m,
            best_epoch: log.best_epoch,
            epochs: log.records.len(),
            backbone_fingerprint: model.backbone_fingerprint(),
            test,
            log,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        Ok((record, model))
    }

    /// Every trained recommender with its run id.
    pub fn models(&self) -> impl Iterator<Item = (&str, &Model)> {
        self.runs
            .iter()
            .map(|(key, r)| (r.run_id.as_str(), &self.models[key]))
    }

    /// Every pretrained encoder with its run id.
    pub fn encoders(&self) -> impl Iterator<Item = (String, &Model)> {
        self.encoders
            .iter()
            .map(|((c, seed), (enc, _, _))| (format!("{}/encoder/seed{seed}", c.name()), enc))
    }

    /// Per-run and per-encoder wall-clock seconds.
    pub fn timing(&self) -> Timing {
        let mut runs: BTreeMap<String, f64> =
            self.runs.values().map(|r| (r.run_id.clone(), r.wall_seconds)).collect();
        for ((c, seed), (_, _, wall)) in &self.encoders {
            runs.insert(format!("{}/encoder/seed{seed}", c.name()), *wall);
        }
        let total = runs.values().sum();
        Timing {
            total_seconds: total,
            runs,
        }
    }

    /// Epoch records of every encoder and run, tagged with their run ids.
    pub fn train_log(&self) -> Vec<LogLine> {
        let mut out = Vec::new();
        for ((c, seed), (_, log, _)) in &self.encoders {
            let id = format!("{}/encoder/seed{seed}", c.name());
            out.extend(log.records.iter().map(|r| LogLine {
                run_id: id.clone(),
                record: r.clone(),
            }));
        }
        for r in self.runs.values() {
            out.extend(r.log.records.iter().map(|rec| LogLine {
                run_id: r.run_id.clone(),
                record: rec.clone(),
            }));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub run_id: String,
    #[serde(flatten)]
    pub record: EpochRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_seconds: f64,
    pub runs: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    Main,
    Ablations,
    Noise,
    Sweep,
}

/// Mean and population standard deviation of one metric over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub condition: Condition,
    pub prefix_tokens: usize,
    pub intent_tokens: usize,
    pub run_ids: Vec<String>,
    #[serde(rename = "recall@10")]
    pub recall_10: MeanStd,
    #[serde(rename = "recall@20")]
    pub recall_20: MeanStd,
    #[serde(rename = "ndcg@10")]
    pub ndcg_10: MeanStd,
    #[serde(rename = "ndcg@20")]
    pub ndcg_20: MeanStd,
}

/// A derived comparison, e.g. the relative Recall@10 drop under noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub name: String,
    pub value: f64,
    pub run_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub ranking: String,
    pub excluded_candidates: String,
    pub ties: String,
    pub split: String,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            ranking: "full ranking over every item".into(),
            excluded_candidates: "items the user interacted with before the target".into(),
            ties: "equal scores rank the smaller item id first".into(),
            split: "leave-one-out: last item test, second-to-last validation".into(),
        }
    }
}

/// Everything reported about one experiment. Contains no wall-clock data, so
/// identical configs and seeds serialize to identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema: String,
    pub schema_version: u32,
    pub kind: ReportKind,
    pub config_fingerprint: String,
    pub config: ExperimentConfig,
    pub protocol: Protocol,
    pub seeds: Vec<u64>,
    pub dataset: DatasetStats,
    pub summaries: Vec<VariantSummary>,
    pub deltas: Vec<Delta>,
    pub runs: Vec<RunRecord>,
}

impl ExperimentReport {
    fn new(lab: &Lab, kind: ReportKind, runs: Vec<RunRecord>, deltas: Vec<Delta>) -> Self {
        let mut groups: BTreeMap<(Condition, Variant, usize, usize), Vec<&RunRecord>> = BTreeMap::new();
        for r in &runs {
            groups
                .entry((r.condition, r.variant, r.prefix_tokens, r.intent_tokens))
                .or_default()
                .push(r);
        }
        let summaries = groups
            .into_iter()
            .map(|((condition, variant, k, m), rs)| {
                let stat = |f: fn(&RankingMetrics) -> f64| MeanStd::of(&rs.iter().map(|r| f(&r.test)).collect::<Vec<_>>());
                VariantSummary {
                    variant,
                    condition,
                    prefix_tokens: k,
                    intent_tokens: m,
                    run_ids: rs.iter().map(|r| r.run_id.clone()).collect(),
                    recall_10: stat(|t| t.recall_10),
                    recall_20: stat(|t| t.recall_20),
                    ndcg_10: stat(|t| t.ndcg_10),
                    ndcg_20: stat(|t| t.ndcg_20),
                }
            })
            .collect();
        Self {
            schema: REPORT_SCHEMA.into(),
            schema_version: REPORT_VERSION,
            kind,
            config_fingerprint: lab.config.fingerprint(),
            config: lab.config.clone(),
            protocol: Protocol::default(),
            seeds: lab.config.seeds.clone(),
            dataset: lab.clean.ds.stats(),
            summaries,
            deltas,
            runs,
        }
    }

    /// Mean test Recall@10 of `variant` under `condition` at the default
    /// token counts.
    pub fn mean_recall_10(&self, variant: Variant, condition: Condition) -> Option<f64> {
        let (k, m) = (self.config.model.prefix_tokens, self.config.model.intent_tokens);
        self.summaries
            .iter()
            .find(|s| s.variant == variant && s.condition == condition && (s.prefix_tokens, s.intent_tokens) == (k, m))
            .map(|s| s.recall_10.mean)
    }

    pub fn delta(&self, name: &str) -> Option<f64> {
        self.deltas.iter().find(|d| d.name == name).map(|d| d.value)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Token sweeps use `k,m,seed,recall@10,ndcg@10`; other reports list
    /// every run with all four metrics.
    pub fn metrics_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.kind == ReportKind::Sweep {
            w.write_record(["k", "m", "seed", "recall@10", "ndcg@10"]).map_err(csv_error)?;
            for r in &self.runs {
                w.serialize((r.prefix_tokens, r.intent_tokens, r.seed, r.test.recall_10, r.test.ndcg_10))
                    .map_err(csv_error)?;
            }
        } else {
            w.write_record(["run_id", "condition", "variant", "seed", "recall@10", "recall@20", "ndcg@10", "ndcg@20"])
                .map_err(csv_error)?;
            for r in &self.runs {
                w.serialize((
                    &r.run_id,
                    r.condition.name(),
                    r.variant.name(),
                    r.seed,
                    r.test.recall_10,
                    r.test.recall_20,
                    r.test.ndcg_10,
                    r.test.ndcg_20,
                ))
                .map_err(csv_error)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Input(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Writes `report.json`, `metrics.csv`, `train_log.jsonl` and
    /// `timing.json` into `dir`.
    pub fn write(&self, lab: &Lab, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), self.to_json()?)?;
        fs::write(dir.join("metrics.csv"), self.metrics_csv()?)?;
        let mut log = fs::File::create(dir.join("train_log.jsonl"))?;
        let ids: Vec<&str> = self.runs.iter().map(|r| r.run_id.as_str()).collect();
        for line in lab.train_log() {
            let encoder_of_run = line.record.variant == Variant::Encoder;
            if encoder_of_run || ids.contains(&line.run_id.as_str()) {
                serde_json::to_writer(&mut log, &line)?;
                writeln!(log)?;
            }
        }
        fs::write(dir.join("timing.json"), serde_json::to_string_pretty(&lab.timing())?)?;
        Ok(())
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Input(format!("csv: {e}"))
}

fn collect(lab: &mut Lab, condition: Condition, variants: &[Variant]) -> Result<Vec<RunRecord>> {
    let seeds = lab.config.seeds.clone();
    let mut runs = Vec::new();
    for &v in variants {
        for &seed in &seeds {
            runs.push(lab.run(condition, v, seed)?.clone());
        }
    }
    Ok(runs)
}

fn mean_of(runs: &[RunRecord], condition: Condition, variant: Variant) -> f64 {
    let xs: Vec<f64> = runs
        .iter()
        .filter(|r| r.condition == condition && r.variant == variant)
        .map(|r| r.test.recall_10)
        .collect();
    MeanStd::of(&xs).mean
}

fn ids(runs: &[RunRecord], condition: Condition, variants: &[Variant]) -> Vec<String> {
    runs.iter()
        .filter(|r| r.condition == condition && variants.contains(&r.variant))
        .map(|r| r.run_id.clone())
        .collect()
}

/// `(a − b) / b`, or 0 when `b` is 0.
fn relative(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        (a - b) / b
    }
}

/// Baseline against the full model on clean data.
pub fn run_main(lab: &mut Lab) -> Result<ExperimentReport> {
    let runs = collect(lab, Condition::Clean, &[Variant::Baseline, Variant::Full])?;
    let (base, full) = (
        mean_of(&runs, Condition::Clean, Variant::Baseline),
        mean_of(&runs, Condition::Clean, Variant::Full),
    );
    let deltas = vec![Delta {
        name: "relative_recall@10_gain_full_over_baseline".into(),
        value: relative(full, base),
        run_ids: ids(&runs, Condition::Clean, &[Variant::Baseline, Variant::Full]),
    }];
    Ok(ExperimentReport::new(lab, ReportKind::Main, runs, deltas))
}

/// The full model against each ablation on clean data.
pub fn run_ablations(lab: &mut Lab) -> Result<ExperimentReport> {
    let variants = [Variant::Full, Variant::NoLid, Variant::ConcatFusion, Variant::NoIcr];
    let runs = collect(lab, Condition::Clean, &variants)?;
    let full = mean_of(&runs, Condition::Clean, Variant::Full);
    let deltas = Variant::ABLATIONS
        .iter()
        .map(|&v| Delta {
            name: format!("relative_recall@10_gain_full_over_{v}"),
            value: relative(full, mean_of(&runs, Condition::Clean, v)),
            run_ids: ids(&runs, Condition::Clean, &[Variant::Full, v]),
        })
        .collect();
    Ok(ExperimentReport::new(lab, ReportKind::Ablations, runs, deltas))
}

/// Clean against noise-injected training for the baseline and the full model.
/// The reported drop is `(clean − noisy) / clean` of mean test Recall@10.
pub fn run_noise(lab: &mut Lab) -> Result<ExperimentReport> {
    let variants = [Variant::Baseline, Variant::Full];
    let mut runs = collect(lab, Condition::Clean, &variants)?;
    runs.extend(collect(lab, Condition::Noisy, &variants)?);
    let deltas = variants
        .iter()
        .map(|&v| {
            let clean = mean_of(&runs, Condition::Clean, v);
            let noisy = mean_of(&runs, Condition::Noisy, v);
            let mut run_ids = ids(&runs, Condition::Clean, &[v]);
            run_ids.extend(ids(&runs, Condition::Noisy, &[v]));
            Delta {
                name: format!("relative_recall@10_drop_{v}"),
                value: -relative(noisy, clean),
                run_ids,
            }
        })
        .collect();
    Ok(ExperimentReport::new(lab, ReportKind::Noise, runs, deltas))
}

/// Full model over the prefix × intent token grid, every point reusing the
/// seed's pretrained encoder.
pub fn run_token_sweep(lab: &mut Lab) -> Result<ExperimentReport> {
    let seeds = lab.config.seeds.clone();
    let grid: Vec<(usize, usize)> = lab
        .config
        .sweep
        .prefix_tokens
        .iter()
        .flat_map(|&k| lab.config.sweep.intent_tokens.iter().map(move |&m| (k, m)))
        .collect();
    let mut runs = Vec::new();
    for &(k, m) in &grid {
        for &seed in &seeds {
            runs.push(lab.run_with_tokens(Condition::Clean, Variant::Full, seed, k, m)?.clone());
        }
    }
    Ok(ExperimentReport::new(lab, ReportKind::Sweep, runs, Vec::new()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            data: DataConfig {
                synthetic: SyntheticConfig {
                    users: 40,
                    items: 24,
                    intents: 3,
                    min_len: 5,
                    max_len: 8,
                    ..SyntheticConfig::default()
                },
                ..DataConfig::default()
            },
            model: ModelConfig {
                prefix_tokens: 2,
                intent_tokens: 1,
                intent_dim: 8,
                hidden_dim: 8,
                baseline_dim: 8,
                layers: 1,
                backbone_layers: 1,
                max_len: 6,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                max_epochs: 2,
                batch_size: 32,
                samples_per_user: Some(1),
                ..TrainConfig::default()
            },
            pretrain: TrainConfig {
                max_epochs: 2,
                ..TrainConfig::default()
            },
            seeds: vec![0, 1],
            noise_ratio: 0.2,
            sweep: SweepConfig {
                prefix_tokens: vec![2, 8],
                intent_tokens: vec![1, 3],
            },
        }
    }

    #[test]
    fn default_config_validates_and_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = toml::to_string(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.fingerprint(), cfg.fingerprint());
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "[train]\nlearning_rat = 0.1\n").unwrap();
        assert!(matches!(ExperimentConfig::from_file(&path), Err(Error::Config(_))));
        fs::write(&path, "[train]\npatience = 0\n").unwrap();
        assert!(matches!(ExperimentConfig::from_file(&path), Err(Error::Config(_))));
    }

    #[test]
    fn sweep_grid_has_one_row_per_point_and_seed_with_one_encoder() {
        let mut lab = Lab::new(tiny()).unwrap();
        let report = run_token_sweep(&mut lab).unwrap();
        assert_eq!(report.runs.len(), 4 * 2);
        let csv = report.metrics_csv().unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("k,m,seed,recall@10,ndcg@10"));
        assert_eq!(lines.count(), 8);
        for seed in [0, 1] {
            let prints: Vec<_> = report
                .runs
                .iter()
                .filter(|r| r.seed == seed)
                .map(|r| r.backbone_fingerprint.clone().unwrap())
                .collect();
            assert!(prints.iter().all(|p| *p == prints[0]));
        }
    }

    #[test]
    fn zero_noise_reproduces_the_clean_runs() {
        let mut lab = Lab::new(ExperimentConfig {
            noise_ratio: 0.0,
            seeds: vec![3],
            ..tiny()
        })
        .unwrap();
        let report = run_noise(&mut lab).unwrap();
        for v in [Variant::Baseline, Variant::Full] {
            let clean = report.runs.iter().find(|r| r.variant == v && r.condition == Condition::Clean).unwrap();
            let noisy = report.runs.iter().find(|r| r.variant == v && r.condition == Condition::Noisy).unwrap();
            assert_eq!(clean.test, noisy.test);
            assert_eq!(report.delta(&format!("relative_recall@10_drop_{v}")), Some(0.0));
        }
    }

    #[test]
    fn reports_are_reproducible_and_memoized() {
        let report = |cfg: ExperimentConfig| {
            let mut lab = Lab::new(cfg).unwrap();
            let main = run_main(&mut lab).unwrap();
            let runs_before = lab.runs.len();
            run_main(&mut lab).unwrap();
            assert_eq!(lab.runs.len(), runs_before);
            main.to_json().unwrap()
        };
        let a = report(ExperimentConfig {
            seeds: vec![5],
            ..tiny()
        });
        let b = report(ExperimentConfig {
            seeds: vec![5],
            ..tiny()
        });
        assert_eq!(a, b);
        let parsed: serde_json::Value = serde_json::from_str(&a).unwrap();
        assert_eq!(parsed["schema"], REPORT_SCHEMA);
        assert_eq!(parsed["schema_version"], REPORT_VERSION);
        assert!(parsed.get("timing").is_none());
    }

    #[test]
    fn ablation_report_covers_every_variant() {
        let mut lab = Lab::new(ExperimentConfig {
            seeds: vec![0],
            ..tiny()
        })
        .unwrap();
        let report = run_ablations(&mut lab).unwrap();
        for v in [Variant::Full, Variant::NoLid, Variant::ConcatFusion, Variant::NoIcr] {
            assert!(report.mean_recall_10(v, Condition::Clean).is_some());
        }
        assert_eq!(report.deltas.len(), 3);
        let dir = tempfile::tempdir().unwrap();
        report.write(&lab, dir.path()).unwrap();
        for f in ["report.json", "metrics.csv", "train_log.jsonl", "timing.json"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
    }
}
