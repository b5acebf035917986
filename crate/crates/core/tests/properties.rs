//! Property tests for the invariants that hold across modules.

use intentrec_core::config::{ModelConfig, TrainConfig};
use intentrec_core::data::{
    generate_synthetic, ingest, inject_noise, leave_one_out_split, make_batches, Format, Sequences,
    SyntheticConfig,
};
use intentrec_core::icr::infonce;
use intentrec_core::metrics::rank_and_score;
use intentrec_core::model::{Architecture, Model, Variant};
use intentrec_core::nn::CausalBlock;
use intentrec_core::params::{ParamStore, Session};
use intentrec_core::tensor::{AttentionLayout, AttnMask, FullyMasked, Graph, Tensor};
use intentrec_core::trainer::Trainer;
use intentrec_core::{load_model, save_model};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn randn(shape: Vec<usize>, seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn small_config() -> ModelConfig {
    ModelConfig {
        prefix_tokens: 2,
        intent_tokens: 2,
        intent_dim: 8,
        hidden_dim: 8,
        baseline_dim: 8,
        layers: 2,
        backbone_layers: 1,
        heads: 2,
        max_len: 6,
        ..ModelConfig::default()
    }
}

fn histories() -> impl Strategy<Value = Vec<Vec<u32>>> {
    prop::collection::vec(prop::collection::vec(1u32..=12, 1..=6), 1..=4)
}

fn sequences(h: &[Vec<u32>]) -> Sequences {
    let refs: Vec<&[u32]> = h.iter().map(|r| r.as_slice()).collect();
    Sequences::from_histories(&refs).unwrap()
}

fn user_vectors(model: &Model, seqs: &Sequences) -> Tensor {
    let mut s = Session::eval(&model.store);
    let reps = model.forward(&mut s, seqs).unwrap();
    s.graph.value(reps.users).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, seed in any::<u64>()) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(vec![rows, cols], 10.0, &mut ChaCha8Rng::seed_from_u64(seed)));
        let y = g.softmax(x, 1).unwrap();
        for r in 0..rows {
            let row = g.value(y).row(r);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    /// With identity values the attention output is the weight matrix itself.
    #[test]
    fn attention_weights_are_a_distribution(
        batches in 1usize..4,
        len in 1usize..6,
        starts_seed in any::<u64>(),
        seed in any::<u64>(),
    ) {
        let starts: Vec<usize> = (0..batches).map(|b| ((starts_seed >> (8 * b)) as usize) % len).collect();
        let layout = AttentionLayout { batches, q_len: len, k_len: len, heads: 1 };
        let mut g = Graph::new();
        let q = g.constant(randn(vec![batches * len, len], seed));
        let k = g.constant(randn(vec![batches * len, len], seed ^ 1));
        let mut eye = Vec::new();
        for _ in 0..batches {
            eye.extend_from_slice(Tensor::identity(len).data());
        }
        let v = g.constant(Tensor::new(vec![batches * len, len], eye).unwrap());
        let out = g.attention(q, k, v, layout, &AttnMask::causal(starts.clone()), FullyMasked::Zero).unwrap();
        for b in 0..batches {
            for i in 0..len {
                let w = g.value(out).row(b * len + i);
                prop_assert!(w.iter().all(|&p| p >= 0.0));
                let total: f64 = w.iter().sum();
                if i < starts[b] {
                    prop_assert_eq!(total, 0.0);
                } else {
                    prop_assert!((total - 1.0).abs() <= 1e-12);
                    prop_assert!(w[..starts[b]].iter().chain(&w[i + 1..]).all(|&p| p == 0.0));
                }
            }
        }
    }

    #[test]
    fn ops_are_deterministic(rows in 1usize..5, cols in 1usize..6, seed in any::<u64>()) {
        let run = || {
            let mut g = Graph::new();
            let a = g.variable(randn(vec![rows, cols], seed));
            let b = g.variable(randn(vec![cols, rows], seed ^ 7));
            let p = g.matmul(a, b).unwrap();
            let s = g.softmax(p, 1).unwrap();
            let y = g.gelu(s).unwrap();
            let l = g.sum(y).unwrap();
            g.backward(l).unwrap();
            (g.value(l).item().to_bits(), g.grad(a).unwrap().to_vec())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        prop_assert_eq!(l1, l2);
        prop_assert!(g1.iter().zip(&g2).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn infonce_is_nonnegative(b in 1usize..7, d in 1usize..6, tau in 0.05f64..3.0, seed in any::<u64>()) {
        let mut g = Graph::new();
        let h1 = g.constant(randn(vec![b, d], seed));
        let h2 = g.constant(randn(vec![b, d], seed ^ 3));
        let l = infonce(&mut g, h1, h2, tau).unwrap();
        prop_assert!(g.value(l).item() >= 0.0);
    }

    /// Changing any item changes no earlier position, for every architecture.
    #[test]
    fn future_items_never_reach_earlier_positions(h in histories(), pick in any::<u64>(), seed in 0u64..4) {
        let seqs = sequences(&h);
        let enc = Model::new(Variant::Encoder, 12, &small_config(), None, seed).unwrap();
        let full = Model::new(Variant::Full, 12, &small_config(), Some(&enc), seed + 1).unwrap();
        let Architecture::IntentGuided { idr, .. } = &full.arch else { unreachable!() };
        let Architecture::SelfAttentive(bb) = &enc.arch else { unreachable!() };
        let intents = randn(vec![seqs.rows() * 2, 8], seed);
        let states = |seqs: &Sequences| {
            let mut s = Session::eval(&full.store);
            let t = s.graph.constant(intents.clone());
            let a = idr.hidden_states(&mut s, seqs, Some((t, 2))).unwrap();
            let a = s.graph.value(a).clone();
            let mut s = Session::eval(&enc.store);
            let b = bb.forward(&mut s, seqs).unwrap();
            (a, s.graph.value(b).clone())
        };
        let real: Vec<usize> = (0..seqs.rows())
            .flat_map(|r| (seqs.starts()[r]..seqs.width).map(move |c| r * seqs.width + c))
            .collect();
        let idx = real[(pick as usize) % real.len()];
        let mut changed = seqs.clone();
        changed.items[idx] = changed.items[idx] % 12 + 1;
        let (a0, b0) = states(&seqs);
        let (a1, b1) = states(&changed);
        let row = idx / seqs.width;
        for c in row * seqs.width..idx {
            prop_assert_eq!(a0.row(c), a1.row(c));
            prop_assert_eq!(b0.row(c), b1.row(c));
        }
    }

    #[test]
    fn extra_padding_leaves_user_vectors_unchanged(h in histories(), extra in 1usize..4, seed in 0u64..4) {
        let seqs = sequences(&h);
        let enc = Model::new(Variant::Encoder, 12, &small_config(), None, seed).unwrap();
        for variant in [Variant::Baseline, Variant::Full, Variant::ConcatFusion] {
            let model = Model::new(variant, 12, &small_config(), Some(&enc), seed + 1).unwrap();
            let a = user_vectors(&model, &seqs);
            let b = user_vectors(&model, &seqs.padded(extra));
            prop_assert!(a.max_abs_diff(&b) <= 1e-10, "{variant}: {}", a.max_abs_diff(&b));
        }
    }

    #[test]
    fn splits_are_disjoint_and_noise_keeps_lengths_and_tests(seed in any::<u64>(), ratio in 0.0f64..=1.0) {
        let ds = generate_synthetic(&SyntheticConfig { users: 30, items: 60, intents: 3, seed, ..SyntheticConfig::default() }).unwrap();
        let split = leave_one_out_split(&ds).unwrap();
        let mut seen = std::collections::HashSet::new();
        for ex in split.train.iter().chain(&split.val).chain(&split.test) {
            prop_assert!(seen.insert((ex.user, ex.len)), "target ({}, {}) in two splits", ex.user, ex.len);
        }
        let noisy = inject_noise(&ds, ratio, seed).unwrap();
        for (a, b) in ds.sequences().iter().zip(noisy.sequences()) {
            prop_assert_eq!(a.len(), b.len());
            prop_assert_eq!(a.last(), b.last());
        }
    }

    #[test]
    fn ingest_of_serialized_dataset_is_identity(seed in any::<u64>()) {
        let ds = generate_synthetic(&SyntheticConfig { users: 25, items: 40, intents: 2, seed, ..SyntheticConfig::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let tsv = dir.path().join("d.tsv");
        ds.write_tsv(&tsv).unwrap();
        let back = ingest(&tsv, Format::Tsv).unwrap();
        prop_assert_eq!(back.sequences(), ds.sequences());
        prop_assert_eq!(back.user_ids(), ds.user_ids());
        prop_assert_eq!(back.item_ids(), ds.item_ids());
        let json = dir.path().join("d.json");
        ds.save_json(&json).unwrap();
        prop_assert_eq!(ingest(&json, Format::Json).unwrap(), ds);
    }
}

#[test]
fn backward_without_trainable_inputs_is_a_no_op() {
    let mut g = Graph::new();
    let a = g.constant(randn(vec![3, 4], 1));
    let b = g.constant(randn(vec![4, 2], 2));
    let y = g.matmul(a, b).unwrap();
    let l = g.sum(y).unwrap();
    g.backward(l).unwrap();
    assert!(g.grad(a).is_none() && g.grad(b).is_none() && g.grad(l).is_none());
}

/// Zero attention and feed-forward weights reduce a block to its LayerNorm.
#[test]
fn zeroed_block_is_layer_norm_of_its_input() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let block = CausalBlock::new(&mut store, "b", 6, 2, &mut rng);
    for id in block.attention.params().into_iter().chain(block.ffn.inner.params()).chain(block.ffn.outer.params()) {
        store.get_mut(id).data_mut().fill(0.0);
    }
    for v in store.get_mut(block.norm.gain).data_mut() {
        *v = 1.5;
    }
    let x = randn(vec![8, 6], 5);
    let mut s = Session::eval(&store);
    let xv = s.graph.constant(x.clone());
    let y = block.forward(&mut s, xv, 2, 4, &AttnMask::causal(vec![0, 1]), 0.2).unwrap();
    let bias = store.get(block.norm.bias).clone();
    for r in 0..8 {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / 6.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        for (c, &v) in row.iter().enumerate() {
            let want = 1.5 * (v - mean) / (var + intentrec_core::nn::LN_EPS).sqrt() + bias.data()[c];
            assert!((s.graph.value(y).row(r)[c] - want).abs() < 1e-12);
        }
    }
    // The deliberation sublayer with a zeroed cross-attention is the identity.
    let enc = Model::new(Variant::Encoder, 12, &small_config(), None, 1).unwrap();
    let mut full = Model::new(Variant::Full, 12, &small_config(), Some(&enc), 2).unwrap();
    let Architecture::IntentGuided { idr, .. } = full.arch.clone() else { unreachable!() };
    for id in idr.layers[0].cross.as_ref().unwrap().params() {
        full.store.get_mut(id).data_mut().fill(0.0);
    }
    let mut s = Session::eval(&full.store);
    let h = s.graph.constant(randn(vec![8, 8], 6));
    let t = s.graph.constant(randn(vec![4, 8], 7));
    let out = idr.deliberate(&mut s, 0, h, t, 2, 4, 2).unwrap();
    assert!(s.graph.value(out).bit_eq(s.graph.value(h)));
}

fn trained_full() -> (Model, intentrec_core::InteractionDataset, intentrec_core::LeaveOneOut) {
    let ds = generate_synthetic(&SyntheticConfig { users: 150, items: 60, intents: 3, seed: 11, ..SyntheticConfig::default() })
        .unwrap();
    let split = leave_one_out_split(&ds).unwrap();
    let cfg = ModelConfig { max_len: 8, hidden_dim: 16, baseline_dim: 16, ..small_config() };
    let enc = Model::new(Variant::Encoder, ds.item_count(), &cfg, None, 1).unwrap();
    let mut model = Model::new(Variant::Full, ds.item_count(), &cfg, Some(&enc), 2).unwrap();
    let mut trainer = Trainer::new(&TrainConfig { learning_rate: 3e-3, batch_size: 32, ..TrainConfig::default() }, 3);
    for epoch in 0..3 {
        for batch in make_batches(&ds, &split.train, cfg.max_len, 32, Some(epoch)) {
            trainer.step(&mut model, &batch).unwrap();
        }
    }
    (model, ds, split)
}

#[test]
fn trained_model_uses_its_intents_and_survives_a_checkpoint() {
    let (model, ds, split) = trained_full();
    // Swap intents between users: representations must move.
    let batch = make_batches(&ds, &split.test, model.max_len(), 64, None).next().unwrap();
    let seqs = batch.sequences();
    let mut s = Session::eval(&model.store);
    let (t, m) = model.intents(&mut s, &seqs).unwrap().unwrap();
    let own = model.represent_with(&mut s, &seqs, Some((t, m))).unwrap();
    let rows = seqs.rows();
    let rotated: Vec<usize> = (0..rows * m).map(|i| (i + m) % (rows * m)).collect();
    let swapped_t = s.graph.gather_rows(t, &rotated, None).unwrap();
    let swapped = model.represent_with(&mut s, &seqs, Some((swapped_t, m))).unwrap();
    let cos = s.graph.cosine_similarity(own, swapped).unwrap();
    let c = s.graph.value(cos);
    let mean_distance = (0..rows).map(|r| 1.0 - c.row(r)[r]).sum::<f64>() / rows as f64;
    assert!(mean_distance > 0.0, "mean cosine distance {mean_distance}");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("full.json");
    save_model(&model, &path).unwrap();
    let back = load_model(&path, model.backbone_fingerprint().as_deref()).unwrap();
    let a = rank_and_score(&model, &ds, &split.test, 64).unwrap();
    let b = rank_and_score(&back, &ds, &split.test, 64).unwrap();
    assert_eq!(a, b);
    assert!(a.recall_10.to_bits() == b.recall_10.to_bits() && a.ndcg_20.to_bits() == b.ndcg_20.to_bits());
}

/// Items the user already interacted with never outrank the target, whatever
/// their scores.
#[test]
fn seen_items_never_outrank_the_target() {
    let (model, ds, split) = trained_full();
    let metrics = rank_and_score(&model, &ds, &split.test, 64).unwrap();
    let scores = model
        .score(&{
            let batch = make_batches(&ds, &split.test, model.max_len(), split.test.len(), None).next().unwrap();
            batch.sequences()
        })
        .unwrap();
    for (i, ex) in split.test.iter().enumerate() {
        let seen = &ds.sequence(ex.user)[..ex.len];
        let row = scores.row(i);
        let target = row[ex.target as usize];
        let unseen_above = (1..row.len())
            .filter(|&j| j != ex.target as usize && !seen.contains(&(j as u32)))
            .filter(|&j| row[j] > target || (row[j] == target && j < ex.target as usize))
            .count();
        assert_eq!(metrics.ranks[i], unseen_above + 1, "user {}", ex.user);
    }
}
