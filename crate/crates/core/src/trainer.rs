//! Objectives and the optimization loop.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::{make_batches, Batch, Example, InteractionDataset, LeaveOneOut, Sequences, PAD};
use crate::error::{Error, Result};
use crate::icr::{infonce, sample_views};
use crate::metrics::rank_and_score;
use crate::model::{Architecture, Model, Variant};
use crate::params::{Adam, ParamId, Session};
use crate::tensor::{Graph, Reduction, Var};

/// Mixes a base seed with stream coordinates (SplitMix64 finalizer).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut x = base;
    for &p in parts {
        x ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(x << 6).wrapping_add(x >> 2);
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 31;
    }
    x
}

/// Full-softmax cross-entropy of `users · item_tableᵀ`, summed over rows.
/// The padding column is not a candidate.
pub fn rec_loss(g: &mut Graph, users: Var, targets: &[u32], item_table: Var) -> Result<Var> {
    if let Some(r) = targets.iter().position(|&t| t == PAD) {
        return Err(Error::Input(format!("row {r} has the padding id as target")));
    }
    let logits = g.matmul_t(users, item_table)?;
    let targets: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    g.cross_entropy(logits, &targets, &[PAD as usize], Reduction::Sum)
}

/// Scalar objective of one batch and its parts.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub rec: f64,
    /// Consistency loss before weighting; `None` when it was not computed.
    pub icr: Option<f64>,
}

/// `L_rec + λ·L_icr` from one unmasked prediction pass and, when the variant
/// uses it and `λ > 0`, two masked passes whose masks are drawn from
/// `mask_seed`.
pub fn total_loss(
    s: &mut Session<'_>,
    model: &Model,
    seqs: &Sequences,
    targets: &[u32],
    icr_weight: f64,
    mask_seed: u64,
) -> Result<LossParts> {
    if model.variant == Variant::Encoder {
        return Err(Error::Config("the encoder trains on every position".into()));
    }
    let reps = model.forward(s, seqs)?;
    let table = s.param(model.item_table());
    let rec = rec_loss(&mut s.graph, reps.users, targets, table)?;
    let rec_value = s.graph.value(rec).item();
    let (Some((t, m)), true) = (reps.intents, model.variant.uses_icr() && icr_weight > 0.0) else {
        return Ok(LossParts {
            total: rec,
            rec: rec_value,
            icr: None,
        });
    };
    let views = sample_views(&mut s.graph, t, model.config.mask_prob, mask_seed)?;
    let (h1, h2) = model.view_representations(s, seqs, views, m)?;
    let icr = infonce(&mut s.graph, h1, h2, model.config.temperature)?;
    let icr_value = s.graph.value(icr).item();
    let weighted = s.graph.scale(icr, icr_weight)?;
    let total = s.graph.add(rec, weighted)?;
    Ok(LossParts {
        total,
        rec: rec_value,
        icr: Some(icr_value),
    })
}

/// Per-row averages of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub rec: f64,
    pub icr: Option<f64>,
    pub rows: usize,
}

/// Adam over a model's trainable tensors with deterministic per-step seeds.
pub struct Trainer {
    adam: Adam,
    icr_weight: f64,
    seed: u64,
    steps: u64,
}

impl Trainer {
    pub fn new(train: &TrainConfig, seed: u64) -> Self {
        Self {
            adam: Adam::new(train.adam()),
            icr_weight: train.icr_weight,
            seed,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One forward/backward/update on `batch`. The encoder is trained on the
    /// next item of every position; all other variants on the batch targets.
    pub fn step(&mut self, model: &mut Model, batch: &Batch) -> Result<StepStats> {
        let dropout_seed = derive_seed(self.seed, &[self.steps, 0]);
        let mask_seed = derive_seed(self.seed, &[self.steps, 1]);
        let seqs = batch.sequences();
        let rows = seqs.rows();
        let (stats, grads) = {
            let mut s = Session::train(&model.store, dropout_seed);
            let (loss, stats) = if model.variant == Variant::Encoder {
                let Architecture::SelfAttentive(bb) = &model.arch else {
                    unreachable!("encoders are self-attentive")
                };
                let next = batch.trimmed_next_items(seqs.width);
                let loss = bb.all_positions_loss(&mut s, &seqs, &next)?;
                let v = s.graph.value(loss).item();
                (loss, StepStats { loss: v, rec: v, icr: None, rows })
            } else {
                let parts = total_loss(&mut s, model, &seqs, &batch.targets, self.icr_weight, mask_seed)?;
                let n = rows as f64;
                let v = s.graph.value(parts.total).item();
                let stats = StepStats {
                    loss: v / n,
                    rec: parts.rec / n,
                    icr: parts.icr.map(|x| x / n),
                    rows,
                };
                (parts.total, stats)
            };
            if !stats.loss.is_finite() {
                return Err(divergence(model, batch, "loss is not finite"));
            }
            s.graph.backward(loss)?;
            (stats, s.param_grads())
        };
        if let Some((id, _)) = grads.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            let what = format!("gradient of {} is not finite", model.store.param(*id).name);
            return Err(divergence(model, batch, &what));
        }
        self.adam.step(&mut model.store, &grads)?;
        self.steps += 1;
        Ok(stats)
    }
}

fn divergence(model: &Model, batch: &Batch, what: &str) -> Error {
    let mut norms = model.store.norms();
    norms.sort_by(|a, b| b.1.total_cmp(&a.1));
    let top: Vec<String> = norms.iter().take(5).map(|(n, v)| format!("{n}={v:.3e}")).collect();
    Error::Divergence(format!(
        "{what}; last batch users {:?}; largest parameter norms [{}]",
        batch.users,
        top.join(", ")
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub variant: Variant,
    pub epoch: usize,
    pub steps: u64,
    pub loss: f64,
    pub rec_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub icr_loss: Option<f64>,
    #[serde(rename = "val_recall@10")]
    pub val_recall_10: f64,
    #[serde(rename = "val_ndcg@10")]
    pub val_ndcg_10: f64,
    pub improved: bool,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_recall_10: f64,
}

impl TrainLog {
    /// The log with wall-clock fields zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> Self {
        let mut log = self.clone();
        log.records.iter_mut().for_each(|r| r.wall_seconds = 0.0);
        log
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.append_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn append_jsonl<W: Write>(&self, w: &mut W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut *w, r)?;
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Training examples of one epoch.
pub fn epoch_examples(model: &Model, split: &LeaveOneOut, users: usize, train: &TrainConfig, seed: u64, epoch: usize) -> Vec<Example> {
    if model.variant == Variant::Encoder {
        return split.train_full_sequences();
    }
    let Some(per_user) = train.samples_per_user else {
        return split.train.clone();
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[epoch as u64, 2]));
    let mut out = Vec::new();
    for pairs in split.train_by_user(users) {
        let take = per_user.min(pairs.len());
        let mut picked = sample(&mut rng, pairs.len(), take).into_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|i| pairs[i]));
    }
    out
}

/// Trains until validation Recall@10 stops improving for `patience` epochs
/// (or `max_epochs` is reached) and leaves the best parameters in `model`.
pub fn fit(
    model: &mut Model,
    ds: &InteractionDataset,
    split: &LeaveOneOut,
    train: &TrainConfig,
    seed: u64,
) -> Result<TrainLog> {
    train.validate()?;
    if split.train.is_empty() {
        return Err(Error::Input("no training pairs: every history is shorter than 4".into()));
    }
    let mut trainer = Trainer::new(train, seed);
    let mut log = TrainLog::default();
    let mut best: Option<(f64, crate::params::ParamStore)> = None;
    let mut stale = 0;
    for epoch in 1..=train.max_epochs {
        let started = Instant::now();
        let examples = epoch_examples(model, split, ds.user_count(), train, seed, epoch);
        let shuffle = derive_seed(seed, &[epoch as u64, 3]);
        let (mut loss, mut rec, mut icr, mut rows) = (0.0, 0.0, None::<f64>, 0usize);
        for batch in make_batches(ds, &examples, model.max_len(), train.batch_size, Some(shuffle)) {
            let st = trainer.step(model, &batch)?;
            let w = st.rows as f64;
            loss += st.loss * w;
            rec += st.rec * w;
            if let Some(x) = st.icr {
                *icr.get_or_insert(0.0) += x * w;
            }
            rows += st.rows;
        }
        let n = rows.max(1) as f64;
        let val = rank_and_score(model, ds, &split.val, train.eval_batch_size)?;
        let improved = best.as_ref().is_none_or(|(b, _)| val.recall_10 > *b);
        if improved {
            best = Some((val.recall_10, model.store.clone()));
            log.best_epoch = epoch;
            log.best_val_recall_10 = val.recall_10;
            stale = 0;
        } else {
            stale += 1;
        }
        log.records.push(EpochRecord {
            variant: model.variant,
            epoch,
            steps: trainer.steps(),
            loss: loss / n,
            rec_loss: rec / n,
            icr_loss: icr.map(|x| x / n),
            val_recall_10: val.recall_10,
            val_ndcg_10: val.ndcg_10,
            improved,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        if stale >= train.patience {
            break;
        }
    }
    if let Some((_, store)) = best {
        model.store = store;
    }
    Ok(log)
}

/// Names of the tensors an optimizer step may change.
pub fn trainable_names(model: &Model) -> Vec<String> {
    model.store.trainable_names()
}

/// Parameters whose values differ between two snapshots of the same model.
pub fn changed_params(before: &Model, after: &Model) -> Vec<ParamId> {
    before
        .store
        .iter()
        .filter(|(id, p)| !p.tensor.bit_eq(after.store.get(*id)))
        .map(|(id, _)| id)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data::{generate_synthetic, leave_one_out_split, SyntheticConfig};
    use crate::lid::BACKBONE_PREFIX;
    use crate::tensor::Tensor;

    fn cfg() -> ModelConfig {
        ModelConfig {
            prefix_tokens: 2,
            intent_tokens: 2,
            intent_dim: 8,
            hidden_dim: 8,
            layers: 1,
            backbone_layers: 1,
            heads: 2,
            dropout: 0.1,
            max_len: 8,
            baseline_dim: 8,
            ..ModelConfig::default()
        }
    }

    fn oracle_ce(logits: &[f64], target: usize) -> f64 {
        let support = &logits[1..];
        let max = support.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + support.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        lse - logits[target]
    }

    #[test]
    fn rec_loss_matches_loop_oracle_and_uniform_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let h = g.constant(Tensor::randn(vec![3, 4], 1.0, &mut rng));
        let table = g.constant(Tensor::randn(vec![6, 4], 1.0, &mut rng));
        let loss = rec_loss(&mut g, h, &[1, 5, 2], table).unwrap();
        let logits = g.matmul_t(h, table).unwrap();
        let z = g.value(logits).clone();
        let oracle: f64 = [(0, 1), (1, 5), (2, 2)].iter().map(|&(r, t)| oracle_ce(z.row(r), t)).sum();
        assert!((g.value(loss).item() - oracle).abs() < 1e-12);

        // Zero representations give uniform logits over the 5 real items.
        let zero = g.constant(Tensor::zeros(vec![1, 4]));
        let uniform = rec_loss(&mut g, zero, &[3], table).unwrap();
        assert!((g.value(uniform).item() - 5f64.ln()).abs() < 1e-12);

        // A dominant target logit drives the loss to zero.
        let big = g.constant(Tensor::new(vec![1, 4], table_row(&g, table, 2, 1e3)).unwrap());
        let tiny = rec_loss(&mut g, big, &[2], table).unwrap();
        assert!(g.value(tiny).item() < 1e-6);
        assert!(rec_loss(&mut g, h, &[0, 1, 2], table).is_err());
    }

    fn table_row(g: &Graph, table: Var, r: usize, scale: f64) -> Vec<f64> {
        g.value(table).row(r).iter().map(|v| v * scale).collect()
    }

    fn fixture(variant: Variant) -> (InteractionDataset, LeaveOneOut, Model) {
        let ds = generate_synthetic(&SyntheticConfig {
            users: 60,
            items: 24,
            intents: 3,
            min_len: 5,
            max_len: 8,
            seed: 3,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let split = leave_one_out_split(&ds).unwrap();
        let enc = Model::new(Variant::Encoder, ds.item_count(), &cfg(), None, 1).unwrap();
        let model = Model::new(variant, ds.item_count(), &cfg(), Some(&enc), 2).unwrap();
        (ds, split, model)
    }

    fn loss_of(model: &Model, batch: &Batch, weight: f64) -> (f64, f64, Option<f64>) {
        let mut s = Session::eval(&model.store);
        let p = total_loss(&mut s, model, &batch.sequences(), &batch.targets, weight, 9).unwrap();
        (s.graph.value(p.total).item(), p.rec, p.icr)
    }

    #[test]
    fn zero_weight_is_exactly_the_recommendation_loss() {
        let (ds, split, model) = fixture(Variant::Full);
        let batch = Batch::from_examples(&ds, &split.train[..6], 8);
        let (total, rec, icr) = loss_of(&model, &batch, 0.0);
        assert_eq!(total.to_bits(), rec.to_bits());
        assert!(icr.is_none());
    }

    #[test]
    fn single_row_consistency_term_vanishes() {
        let (ds, split, model) = fixture(Variant::Full);
        let batch = Batch::from_examples(&ds, &split.train[..1], 8);
        let (total, rec, icr) = loss_of(&model, &batch, 1.0);
        assert_eq!(icr, Some(0.0));
        assert_eq!(total, rec);
    }

    #[test]
    fn ablation_without_consistency_never_samples_views() {
        let (ds, split, model) = fixture(Variant::NoIcr);
        let batch = Batch::from_examples(&ds, &split.train[..4], 8);
        let (_, _, icr) = loss_of(&model, &batch, 1.0);
        assert!(icr.is_none());
    }

    #[test]
    fn total_loss_gradient_passes_finite_differences() {
        let (ds, split, model) = fixture(Variant::Full);
        let batch = Batch::from_examples(&ds, &split.train[..3], 8);
        let seqs = batch.sequences();
        let ids: Vec<ParamId> = ["lid.prefix", "proj.inner.weight", "idr.layers.0.cross_attn.query.weight", "idr.item_embeddings"]
            .iter()
            .map(|n| model.store.id(n).unwrap())
            .collect();
        let err = crate::params::grad_check_params(&model.store, &ids, 1e-5, |s| {
            Ok(total_loss(s, &model, &seqs, &batch.targets, 0.5, 4)?.total)
        })
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn steps_leave_the_encoder_untouched() {
        let (ds, split, mut model) = fixture(Variant::Full);
        let before_sum = model.store.checksum(BACKBONE_PREFIX);
        let before = model.clone();
        let mut trainer = Trainer::new(&TrainConfig::default(), 5);
        for batch in make_batches(&ds, &split.train, 8, 16, Some(1)).take(5) {
            trainer.step(&mut model, &batch).unwrap();
        }
        assert_eq!(model.store.checksum(BACKBONE_PREFIX), before_sum);
        let changed: Vec<String> = changed_params(&before, &model)
            .into_iter()
            .map(|id| model.store.param(id).name.clone())
            .collect();
        assert!(changed.iter().any(|n| n == "lid.prefix"));
        assert!(changed.iter().all(|n| !n.starts_with(BACKBONE_PREFIX)));
    }

    #[test]
    fn identical_seeds_give_identical_logs() {
        let train = TrainConfig {
            max_epochs: 2,
            batch_size: 32,
            samples_per_user: Some(2),
            ..TrainConfig::default()
        };
        let run = || {
            let (ds, split, mut model) = fixture(Variant::Full);
            let log = fit(&mut model, &ds, &split, &train, 7).unwrap();
            (log.without_timing(), model.store.checksum(""))
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn divergence_is_reported_with_diagnostics() {
        let (ds, split, mut model) = fixture(Variant::Baseline);
        let id = model.item_table();
        let mut t = model.store.get(id).clone();
        t.data_mut()[5] = f64::NAN;
        model.store.set_value(id, t).unwrap();
        let batch = Batch::from_examples(&ds, &split.train[..4], 8);
        let err = Trainer::new(&TrainConfig::default(), 0).step(&mut model, &batch).unwrap_err();
        match err {
            Error::Divergence(msg) => assert!(msg.contains("last batch users")),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
