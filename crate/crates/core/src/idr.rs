//! Intent-aware reasoning stack. Projected intents `T_D` act as keys and
//! values of a cross-attention step (deliberation) that precedes each causal
//! self-attention block (decision):
//!
//! ```text
//! H_cross = H + CrossAttn(Q = H, K = V = T_D)
//! H_self  = H_cross + MaskedSelfAttn(H_cross)
//! H_out   = LayerNorm(H_self + FFN(H_self))
//! ```

use rand::Rng;

use crate::backbone::{as_ids, causal_mask, embedding_table, position_ids};
use crate::data::{Sequences, PAD};
use crate::error::{Error, Result};
use crate::nn::{last_positions, Activation, CausalBlock, FeedForward, MultiHeadAttention};
use crate::params::{ParamId, ParamStore, Session};
use crate::tensor::{AttnMask, FullyMasked, Var};

/// Row-wise two-layer perceptron `d_I → 2d → d` bridging the intent encoder
/// and the reasoner.
#[derive(Debug, Clone)]
pub struct Projection {
    pub mlp: FeedForward,
}

impl Projection {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, intent_dim: usize, width: usize, rng: &mut R) -> Self {
        // FeedForward maps width → hidden → width; the projection needs
        // d_I → 2d → d, so the layers are built directly.
        let inner = crate::nn::Linear::new(store, "proj.inner", intent_dim, 2 * width, rng);
        let outer = crate::nn::Linear::new(store, "proj.outer", 2 * width, width, rng);
        Self {
            mlp: FeedForward {
                inner,
                outer,
                activation: Activation::Gelu,
            },
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = self.mlp.inner.params().to_vec();
        ids.extend(self.mlp.outer.params());
        ids
    }

    /// `T_D = f(T_I)`, applied to every row.
    pub fn forward(&self, s: &mut Session<'_>, raw_intents: Var) -> Result<Var> {
        self.mlp.forward(s, raw_intents, 0.0)
    }
}

#[derive(Debug, Clone)]
pub struct ReasonerConfig {
    pub items: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub dropout: f64,
    /// Whether each layer deliberates over intents before its causal block.
    pub cross_attention: bool,
}

#[derive(Debug, Clone)]
pub struct ReasonerLayer {
    pub cross: Option<MultiHeadAttention>,
    pub block: CausalBlock,
}

#[derive(Debug, Clone)]
pub struct Idr {
    pub config: ReasonerConfig,
    pub item_embeddings: ParamId,
    pub positions: ParamId,
    pub layers: Vec<ReasonerLayer>,
}

impl Idr {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: ReasonerConfig, rng: &mut R) -> Self {
        let mut table = embedding_table(config.items + 1, config.width, rng);
        table.data_mut()[..config.width].fill(0.0);
        let item_embeddings = store.add("idr.item_embeddings", table, true);
        let positions = store.add("idr.positions", embedding_table(config.max_len, config.width, rng), true);
        let layers = (0..config.layers)
            .map(|l| ReasonerLayer {
                cross: config.cross_attention.then(|| {
                    MultiHeadAttention::new(store, &format!("idr.layers.{l}.cross_attn"), config.width, config.heads, rng)
                }),
                block: CausalBlock::new(store, &format!("idr.layers.{l}"), config.width, config.heads, rng),
            })
            .collect();
        Self {
            config,
            item_embeddings,
            positions,
            layers,
        }
    }

    fn embed(&self, s: &mut Session<'_>, seqs: &Sequences) -> Result<Var> {
        let pos_ids = position_ids(&seqs.lengths, seqs.width, self.config.max_len)?;
        let table = s.param(self.item_embeddings);
        let tokens = s.graph.gather_rows(table, &as_ids(&seqs.items), Some(PAD as usize))?;
        let pos_table = s.param(self.positions);
        let pos = s.graph.gather_rows(pos_table, &pos_ids, None)?;
        let x = s.graph.add(tokens, pos)?;
        s.dropout(x, self.config.dropout)
    }

    /// `H + CrossAttn(H, T_D)` for `rows` problems of `len` queries and `m`
    /// intents each. Every query sees every intent.
    #[allow(clippy::too_many_arguments)]
    pub fn deliberate(
        &self,
        s: &mut Session<'_>,
        layer: usize,
        h: Var,
        intents: Var,
        rows: usize,
        len: usize,
        m: usize,
    ) -> Result<Var> {
        let cross = self.layers[layer]
            .cross
            .as_ref()
            .ok_or_else(|| Error::Input("this reasoner has no cross-attention".into()))?;
        if m == 0 {
            return Err(Error::Input("deliberation needs at least one intent".into()));
        }
        let attended = cross.forward(s, h, intents, rows, len, m, &AttnMask::None, FullyMasked::Error)?;
        let attended = s.dropout(attended, self.config.dropout)?;
        s.graph.add(h, attended)
    }

    /// Causal self-attention and feed-forward step of layer `layer`.
    pub fn decide(
        &self,
        s: &mut Session<'_>,
        layer: usize,
        h: Var,
        rows: usize,
        len: usize,
        mask: &AttnMask,
    ) -> Result<Var> {
        self.layers[layer]
            .block
            .forward(s, h, rows, len, mask, self.config.dropout)
    }

    /// User representations `rows × d`. `intents` holds `m` projected
    /// intents per row (`(rows·m) × d`); `None` skips deliberation.
    pub fn forward(&self, s: &mut Session<'_>, seqs: &Sequences, intents: Option<(Var, usize)>) -> Result<Var> {
        let h = self.hidden_states(s, seqs, intents)?;
        s.graph.gather_rows(h, &last_positions(seqs.rows(), seqs.width), None)
    }

    /// Output of the last layer at every position, `(rows·width) × d`.
    pub fn hidden_states(&self, s: &mut Session<'_>, seqs: &Sequences, intents: Option<(Var, usize)>) -> Result<Var> {
        let (rows, len) = (seqs.rows(), seqs.width);
        if rows == 0 || len == 0 {
            return Err(Error::Input("empty sequence batch".into()));
        }
        let mut h = self.embed(s, seqs)?;
        let mask = AttnMask::causal(seqs.starts());
        for l in 0..self.layers.len() {
            if let (Some((t, m)), true) = (intents, self.layers[l].cross.is_some()) {
                h = self.deliberate(s, l, h, t, rows, len, m)?;
            }
            h = self.decide(s, l, h, rows, len, &mask)?;
        }
        Ok(h)
    }

    /// Fusion by concatenation: each row becomes `[T_D rows, padding, items]`
    /// and runs through the causal blocks only. Intent rows stay visible to
    /// every later position.
    pub fn concat_forward(&self, s: &mut Session<'_>, seqs: &Sequences, intents: Var, m: usize) -> Result<Var> {
        let (rows, len) = (seqs.rows(), seqs.width);
        if rows == 0 || len == 0 {
            return Err(Error::Input("empty sequence batch".into()));
        }
        let x = self.embed(s, seqs)?;
        let width = m + len;
        let h = if m == 0 {
            x
        } else {
            // Table rows: intents first (rows·m), then embedded items (rows·len).
            let table = s.graph.concat_rows(&[intents, x])?;
            let order: Vec<usize> = (0..rows)
                .flat_map(|r| (0..m).map(move |j| r * m + j).chain((0..len).map(move |c| rows * m + r * len + c)))
                .collect();
            s.graph.gather_rows(table, &order, None)?
        };
        let starts = seqs.starts().iter().map(|st| st + m).collect();
        let mask = causal_mask(starts, m);
        let mut h = h;
        for l in 0..self.layers.len() {
            h = self.decide(s, l, h, rows, width, &mask)?;
        }
        s.graph.gather_rows(h, &last_positions(rows, width), None)
    }
}
