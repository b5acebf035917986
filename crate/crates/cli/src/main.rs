//! `intentrec`: pretrain, train, evaluate and compare intent-guided
//! recommenders from a TOML or JSON experiment config.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error, 3 data
//! error, 4 training divergence.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use intentrec_core::experiment::{run_ablations, run_main, run_noise, run_token_sweep, Protocol};
use intentrec_core::metrics::rank_and_score;
use intentrec_core::{
    load_model, save_model, Condition, Error, ExperimentConfig, ExperimentReport, InteractionDataset, Lab,
    RankingMetrics, Variant,
};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "intentrec", version, about = "Intent-guided sequential recommendation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic intent-driven dataset.
    Synth(Common),
    /// Pretrain the frozen intent encoder for each seed.
    Pretrain(Common),
    /// Train and compare the baseline and the full model.
    Train(Common),
    /// Evaluate a saved model on the configured dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Model archive written by `train`, `ablate`, `noise` or `sweep`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train the full model and its ablations.
    Ablate(Common),
    /// Compare clean and noise-injected training.
    Noise {
        #[command(flatten)]
        common: Common,
        /// Fraction of non-target positions replaced per sequence.
        #[arg(long)]
        ratio: Option<f64>,
    },
    /// Train the full model over the prefix × intent token grid.
    Sweep(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (`.json` is JSON, anything else TOML). Defaults to
    /// the built-in desk-scale setup.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run this single seed instead of the configured seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let error = e.into();
        Failure {
            code: exit_code(&error),
            error,
        }
    }
}

fn exit_code(error: &anyhow::Error) -> u8 {
    match error.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        Some(Error::Parse { .. } | Error::EmptyDataset) => 3,
        Some(Error::Divergence(_)) => 4,
        _ => 1,
    }
}

/// Reclassifies failures while reading the dataset as data errors, keeping
/// configuration errors (unknown format, bad options) as such.
fn data_stage<T>(result: intentrec_core::Result<T>) -> Result<T, Failure> {
    result.map_err(|e| {
        let code = if matches!(e, Error::Config(_)) { 2 } else { 3 };
        Failure {
            code,
            error: anyhow::Error::new(e).context("loading the dataset"),
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seeds = vec![seed];
        config.data.synthetic.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn open_lab(common: &Common) -> Result<Lab, Failure> {
    let config = load_config(common)?;
    let ds = data_stage(config.data.load())?;
    Ok(Lab::with_dataset(config, ds)?)
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Synth(common) => synth(&common),
        Command::Pretrain(common) => pretrain(&common),
        Command::Train(common) => experiment(&common, run_main),
        Command::Ablate(common) => experiment(&common, run_ablations),
        Command::Sweep(common) => experiment(&common, run_token_sweep),
        Command::Noise { common, ratio } => {
            let mut config = load_config(&common)?;
            if let Some(r) = ratio {
                config.noise_ratio = r;
                config.validate()?;
            }
            let ds = data_stage(config.data.load())?;
            let mut lab = Lab::with_dataset(config, ds)?;
            finish(&mut lab, &common.out, run_noise)
        }
        Command::Eval { common, checkpoint } => eval(&common, &checkpoint),
    }
}

fn synth(common: &Common) -> Result<(), Failure> {
    let config = load_config(common)?;
    let ds = data_stage(intentrec_core::data::generate_synthetic(&config.data.synthetic))?;
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    ds.save_json(&common.out.join("dataset.json"))?;
    ds.write_tsv(&common.out.join("interactions.tsv"))?;
    write_json(&common.out.join("stats.json"), &ds.stats())?;
    let s = ds.stats();
    println!(
        "{} users, {} items, {} interactions -> {}",
        s.users,
        s.items,
        s.interactions,
        common.out.display()
    );
    Ok(())
}

fn pretrain(common: &Common) -> Result<(), Failure> {
    let mut lab = open_lab(common)?;
    for seed in lab.config().seeds.clone() {
        lab.encoder(Condition::Clean, seed)?;
    }
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    write_checkpoints(&lab, &common.out)?;
    let mut log = String::new();
    for line in lab.train_log() {
        log.push_str(&serde_json::to_string(&line).context("serializing the training log")?);
        log.push('\n');
    }
    fs::write(common.out.join("train_log.jsonl"), log)?;
    write_json(&common.out.join("timing.json"), &lab.timing())?;
    for (id, enc) in lab.encoders() {
        println!("{id}: {}", enc.backbone_fingerprint().unwrap_or_default());
    }
    Ok(())
}

fn experiment(
    common: &Common,
    f: fn(&mut Lab) -> intentrec_core::Result<ExperimentReport>,
) -> Result<(), Failure> {
    let mut lab = open_lab(common)?;
    finish(&mut lab, &common.out, f)
}

fn finish(
    lab: &mut Lab,
    out: &Path,
    f: fn(&mut Lab) -> intentrec_core::Result<ExperimentReport>,
) -> Result<(), Failure> {
    let report = f(lab)?;
    report.write(lab, out)?;
    write_checkpoints(lab, out)?;
    for s in &report.summaries {
        println!(
            "{:<6} {:<14} k={} m={}  recall@10 {:.4} ± {:.4}  ndcg@10 {:.4} ± {:.4}",
            s.condition.name(),
            s.variant.name(),
            s.prefix_tokens,
            s.intent_tokens,
            s.recall_10.mean,
            s.recall_10.std,
            s.ndcg_10.mean,
            s.ndcg_10.std
        );
    }
    for d in &report.deltas {
        println!("{} = {:+.4}", d.name, d.value);
    }
    println!("report written to {}", out.display());
    Ok(())
}

/// `checkpoints/<run id with '/' replaced by '_'>.json` for every encoder and
/// trained model.
fn write_checkpoints(lab: &Lab, out: &Path) -> Result<(), Failure> {
    let dir = out.join("checkpoints");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let encoders = lab.encoders().map(|(id, m)| (id, m));
    let models = lab.models().map(|(id, m)| (id.to_string(), m));
    for (id, model) in encoders.chain(models) {
        save_model(model, &dir.join(format!("{}.json", id.replace('/', "_"))))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    schema: &'static str,
    schema_version: u32,
    checkpoint: PathBuf,
    variant: Variant,
    config_fingerprint: String,
    backbone_fingerprint: Option<String>,
    protocol: Protocol,
    dataset: intentrec_core::data::DatasetStats,
    validation: RankingMetrics,
    test: RankingMetrics,
}

fn eval(common: &Common, checkpoint: &Path) -> Result<(), Failure> {
    let config = load_config(common)?;
    let ds: InteractionDataset = data_stage(config.data.load())?;
    let model = load_model(checkpoint, None).with_context(|| format!("loading {}", checkpoint.display()))?;
    if model.variant == Variant::Encoder {
        return Err(Failure {
            code: 2,
            error: anyhow::anyhow!("{} holds an intent encoder, not a recommender", checkpoint.display()),
        });
    }
    if model.items != ds.item_count() {
        return Err(Failure {
            code: 3,
            error: anyhow::anyhow!(
                "the model scores {} items but the dataset has {}",
                model.items,
                ds.item_count()
            ),
        });
    }
    let split = data_stage(intentrec_core::data::leave_one_out_split(&ds))?;
    let batch = config.train.eval_batch_size;
    let report = EvalReport {
        schema: "intentrec-eval",
        schema_version: 1,
        checkpoint: checkpoint.to_path_buf(),
        variant: model.variant,
        config_fingerprint: config.fingerprint(),
        backbone_fingerprint: model.backbone_fingerprint(),
        protocol: Protocol::default(),
        dataset: ds.stats(),
        validation: rank_and_score(&model, &ds, &split.val, batch)?,
        test: rank_and_score(&model, &ds, &split.test, batch)?,
    };
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    write_json(&common.out.join("report.json"), &report)?;
    let mut csv = String::from("split,recall@10,recall@20,ndcg@10,ndcg@20\n");
    for (name, m) in [("validation", &report.validation), ("test", &report.test)] {
        csv.push_str(&format!("{name},{},{},{},{}\n", m.recall_10, m.recall_20, m.ndcg_10, m.ndcg_20));
    }
    fs::write(common.out.join("metrics.csv"), csv)?;
    println!(
        "{}: test recall@10 {:.4} ndcg@10 {:.4}",
        model.variant, report.test.recall_10, report.test.ndcg_10
    );
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let json = serde_json::to_string_pretty(value).context("serializing JSON")?;
    fs::write(path, json).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
