//! Intent distillation through a frozen encoder steered by learned prefix
//! tokens. Each row is rewritten as `[P_0..P_k, items.., I_0..I_m]`; the
//! hidden states at the `I` positions are the row's raw intents.

use rand::Rng;

use crate::backbone::{causal_mask, embedding_table, position_ids, Backbone};
use crate::data::{Sequences, PAD};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, Session};
use crate::tensor::Var;

/// Parameter-name prefix of the frozen encoder inside a model store.
pub const BACKBONE_PREFIX: &str = "lid.backbone.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AugToken {
    Prefix(usize),
    Item(u32),
    Intent(usize),
}

/// `[P_0..P_{k-1}, seq.., I_0..I_{m-1}]`.
pub fn build_augmented(k: usize, seq: &[u32], m: usize) -> Result<Vec<AugToken>> {
    if seq.is_empty() {
        return Err(Error::Input("cannot augment an empty sequence".into()));
    }
    let mut out = Vec::with_capacity(k + seq.len() + m);
    out.extend((0..k).map(AugToken::Prefix));
    out.extend(seq.iter().map(|&i| AugToken::Item(i)));
    out.extend((0..m).map(AugToken::Intent));
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Lid {
    pub backbone: Backbone,
    /// `k × d_I`, trainable.
    pub prefix: ParamId,
    /// `m × d_I`, trainable.
    pub intents: ParamId,
    /// Positional rows beyond the frozen table, `(k + m) × d_I`, trainable.
    pub position_extension: ParamId,
    pub prefix_tokens: usize,
    pub intent_tokens: usize,
}

impl Lid {
    /// Registers trainable prompt tables next to an already registered
    /// backbone, and freezes every backbone tensor.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        backbone: Backbone,
        prefix_tokens: usize,
        intent_tokens: usize,
        rng: &mut R,
    ) -> Self {
        for id in backbone.params() {
            store.set_trainable(id, false);
        }
        let d = backbone.config.width;
        let prefix = store.add("lid.prefix", embedding_table(prefix_tokens, d, rng), true);
        let intents = store.add("lid.intents", embedding_table(intent_tokens, d, rng), true);
        let position_extension = store.add(
            "lid.position_extension",
            embedding_table(prefix_tokens + intent_tokens, d, rng),
            true,
        );
        Self {
            backbone,
            prefix,
            intents,
            position_extension,
            prefix_tokens,
            intent_tokens,
        }
    }

    pub fn trainable_params(&self) -> [ParamId; 3] {
        [self.prefix, self.intents, self.position_extension]
    }

    /// Longest item sequence the augmented stream can hold.
    pub fn capacity(&self) -> usize {
        self.backbone.config.max_len
    }

    /// Raw intents of every row, `(rows·m) × d_I`, rows grouped by input row.
    /// The encoder runs without dropout.
    pub fn distill(&self, s: &mut Session<'_>, seqs: &Sequences) -> Result<Var> {
        let m = self.intent_tokens;
        let (h, width) = self.hidden_states(s, seqs)?;
        let rows: Vec<usize> = (0..seqs.rows())
            .flat_map(|r| (width - m..width).map(move |c| r * width + c))
            .collect();
        s.graph.gather_rows(h, &rows, None)
    }

    /// Encoder states of the whole augmented stream, `(rows·width) × d_I`,
    /// together with the augmented width `k + seqs.width + m`.
    pub fn hidden_states(&self, s: &mut Session<'_>, seqs: &Sequences) -> Result<(Var, usize)> {
        let (k, m) = (self.prefix_tokens, self.intent_tokens);
        let items = self.backbone.config.items;
        if let Some(&len) = seqs.lengths.iter().find(|&&l| l > self.capacity()) {
            return Err(Error::Length {
                len,
                capacity: self.capacity(),
            });
        }
        let width = k + seqs.width + m;
        // Token table rows: items (0 = pad), then prefix rows, then intent rows.
        let prefix_base = items + 1;
        let intent_base = prefix_base + k;
        let mut token_ids = Vec::with_capacity(seqs.rows() * width);
        for r in 0..seqs.rows() {
            let start = seqs.width - seqs.lengths[r];
            token_ids.extend(std::iter::repeat_n(PAD as usize, start));
            let aug = build_augmented(k, &seqs.row(r)[start..], m)?;
            token_ids.extend(aug.into_iter().map(|t| match t {
                AugToken::Prefix(j) => prefix_base + j,
                AugToken::Item(i) => i as usize,
                AugToken::Intent(j) => intent_base + j,
            }));
        }
        let aug_lengths: Vec<usize> = seqs.lengths.iter().map(|l| l + k + m).collect();
        let pos_ids = position_ids(&aug_lengths, width, self.capacity() + k + m)?;

        let item_table = s.param(self.backbone.item_embeddings);
        let prefix = s.param(self.prefix);
        let intents = s.param(self.intents);
        let table = s.graph.concat_rows(&[item_table, prefix, intents])?;
        let tokens = s.graph.gather_rows(table, &token_ids, Some(PAD as usize))?;
        let base_pos = s.param(self.backbone.positions);
        let ext_pos = s.param(self.position_extension);
        let pos_table = s.graph.concat_rows(&[base_pos, ext_pos])?;
        let pos = s.graph.gather_rows(pos_table, &pos_ids, None)?;
        let x = s.graph.add(tokens, pos)?;

        let starts = aug_lengths.iter().map(|l| width - l).collect();
        let h = self
            .backbone
            .encode(s, x, seqs.rows(), width, &causal_mask(starts, 0), 0.0)?;
        Ok((h, width))
    }
}
