//! Self-attentive sequential encoder: item plus learned positional
//! embeddings, a stack of causal blocks, and scoring against the (tied) item
//! table. Serves as the stand-alone baseline and, pretrained and frozen, as
//! the intent encoder.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Sequences, PAD};
use crate::error::{Error, Result};
use crate::nn::{last_positions, CausalBlock};
use crate::params::{ParamId, ParamStore, Session};
use crate::tensor::{AttnMask, Reduction, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Vocabulary size without the padding id.
    pub items: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    /// Rows of the positional table.
    pub max_len: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    /// `(items + 1) × width`; row 0 is the padding id and stays zero.
    pub item_embeddings: ParamId,
    /// `max_len × width`.
    pub positions: ParamId,
    pub blocks: Vec<CausalBlock>,
}

/// Normal initialization with the Glorot variance of a `rows × cols` table.
pub(crate) fn embedding_table<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Tensor::randn(vec![rows, cols], (2.0 / (rows + cols) as f64).sqrt(), rng)
}

/// Position ids counted from each row's first real token; padding columns get
/// id 0 (their rows are never attended to).
pub(crate) fn position_ids(lengths: &[usize], width: usize, capacity: usize) -> Result<Vec<usize>> {
    let mut ids = Vec::with_capacity(lengths.len() * width);
    for &len in lengths {
        if len > capacity {
            return Err(Error::Length { len, capacity });
        }
        let start = width - len;
        ids.extend((0..width).map(|c| c.saturating_sub(start)));
    }
    Ok(ids)
}

/// Ids of the real (non-padding) cells of a left-padded matrix, row-major.
pub(crate) fn as_ids(items: &[u32]) -> Vec<usize> {
    items.iter().map(|&i| i as usize).collect()
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, config: BackboneConfig, rng: &mut R) -> Self {
        let mut table = embedding_table(config.items + 1, config.width, rng);
        table.data_mut()[..config.width].fill(0.0);
        let item_embeddings = store.add(format!("{name}.item_embeddings"), table, true);
        let positions = store.add(
            format!("{name}.positions"),
            embedding_table(config.max_len, config.width, rng),
            true,
        );
        let blocks = (0..config.layers)
            .map(|l| CausalBlock::new(store, &format!("{name}.blocks.{l}"), config.width, config.heads, rng))
            .collect();
        Self {
            config,
            item_embeddings,
            positions,
            blocks,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.item_embeddings, self.positions];
        for b in &self.blocks {
            ids.extend(b.attention.params());
            ids.extend(b.ffn.inner.params());
            ids.extend(b.ffn.outer.params());
            ids.extend([b.norm.gain, b.norm.bias]);
        }
        ids
    }

    /// Item plus positional embeddings, `(rows·width) × d`, with dropout.
    pub fn embed(&self, s: &mut Session<'_>, seqs: &Sequences, dropout: f64) -> Result<Var> {
        let pos_ids = position_ids(&seqs.lengths, seqs.width, self.config.max_len)?;
        let table = s.param(self.item_embeddings);
        let tokens = s.graph.gather_rows(table, &as_ids(&seqs.items), Some(PAD as usize))?;
        let pos_table = s.param(self.positions);
        let pos = s.graph.gather_rows(pos_table, &pos_ids, None)?;
        let x = s.graph.add(tokens, pos)?;
        s.dropout(x, dropout)
    }

    /// Runs the causal blocks over an already embedded `(rows·width) × d` input.
    pub fn encode(
        &self,
        s: &mut Session<'_>,
        x: Var,
        rows: usize,
        width: usize,
        mask: &AttnMask,
        dropout: f64,
    ) -> Result<Var> {
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(s, h, rows, width, mask, dropout)?;
        }
        Ok(h)
    }

    /// Hidden states of every position, `(rows·width) × d`.
    pub fn forward(&self, s: &mut Session<'_>, seqs: &Sequences) -> Result<Var> {
        let dropout = self.config.dropout;
        let x = self.embed(s, seqs, dropout)?;
        let mask = AttnMask::causal(seqs.starts());
        self.encode(s, x, seqs.rows(), seqs.width, &mask, dropout)
    }

    /// Hidden state of each row's last item, `rows × d`.
    pub fn user_representations(&self, s: &mut Session<'_>, seqs: &Sequences) -> Result<Var> {
        let h = self.forward(s, seqs)?;
        s.graph.gather_rows(h, &last_positions(seqs.rows(), seqs.width), None)
    }

    /// `rows × (items + 1)` logits against the item table. Column 0 is the
    /// padding id; callers exclude it from losses and rankings.
    pub fn score(&self, s: &mut Session<'_>, h: Var) -> Result<Var> {
        let table = s.param(self.item_embeddings);
        s.graph.matmul_t(h, table)
    }

    /// Mean next-item cross-entropy over every non-padding position, with
    /// `next_items` aligned to `seqs.items`.
    pub fn all_positions_loss(&self, s: &mut Session<'_>, seqs: &Sequences, next_items: &[u32]) -> Result<Var> {
        if next_items.len() != seqs.items.len() {
            return Err(Error::shape("next_items must align with the input ids"));
        }
        let h = self.forward(s, seqs)?;
        let (rows, targets): (Vec<usize>, Vec<usize>) = next_items
            .iter()
            .enumerate()
            .filter(|(_, &t)| t != PAD)
            .map(|(r, &t)| (r, t as usize))
            .unzip();
        let h = s.graph.gather_rows(h, &rows, None)?;
        let logits = self.score(s, h)?;
        s.graph
            .cross_entropy(logits, &targets, &[PAD as usize], Reduction::Mean)
    }
}

/// Shared handle for masks built once per batch.
pub(crate) fn causal_mask(starts: Vec<usize>, always_visible: usize) -> AttnMask {
    AttnMask::Causal {
        starts: Arc::new(starts),
        always_visible,
    }
}
