//! Layers shared by the backbone and the reasoner.

use rand::Rng;

use crate::error::Result;
use crate::params::{ParamId, ParamStore, Session};
use crate::tensor::{AttentionLayout, AttnMask, FullyMasked, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

/// `y = x·W + b` with `W: in×out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (inputs + outputs) as f64).sqrt();
        Self {
            weight: store.add(format!("{name}.weight"), Tensor::uniform(vec![inputs, outputs], bound, rng), true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![outputs]), true),
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        let y = s.graph.matmul(x, w)?;
        s.graph.add_bias(y, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(vec![width], 1.0), true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![width]), true),
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let g = s.param(self.gain);
        let b = s.param(self.bias);
        s.graph.layer_norm(x, g, b, LN_EPS)
    }
}

/// Multi-head attention with query/key/value/output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.query"), width, width, rng),
            key: Linear::new(store, &format!("{name}.key"), width, width, rng),
            value: Linear::new(store, &format!("{name}.value"), width, width, rng),
            output: Linear::new(store, &format!("{name}.output"), width, width, rng),
            heads,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        s: &mut Session<'_>,
        queries: Var,
        memory: Var,
        batches: usize,
        q_len: usize,
        k_len: usize,
        mask: &AttnMask,
        policy: FullyMasked,
    ) -> Result<Var> {
        let q = self.query.forward(s, queries)?;
        let k = self.key.forward(s, memory)?;
        let v = self.value.forward(s, memory)?;
        let layout = AttentionLayout {
            batches,
            q_len,
            k_len,
            heads: self.heads,
        };
        let attended = s.graph.attention(q, k, v, layout, mask, policy)?;
        self.output.forward(s, attended)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.query, &self.key, &self.value, &self.output]
            .iter()
            .flat_map(|l| l.params())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
    pub activation: Activation,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        hidden: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        Self {
            inner: Linear::new(store, &format!("{name}.inner"), width, hidden, rng),
            outer: Linear::new(store, &format!("{name}.outer"), hidden, width, rng),
            activation,
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var, dropout: f64) -> Result<Var> {
        let h = self.inner.forward(s, x)?;
        let h = match self.activation {
            Activation::Relu => s.graph.relu(h)?,
            Activation::Gelu => s.graph.gelu(h)?,
        };
        let h = s.dropout(h, dropout)?;
        self.outer.forward(s, h)
    }
}

/// Masked self-attention followed by a feed-forward sublayer:
///
/// ```text
/// H_self = H + MaskedSelfAttn(H)
/// out    = LayerNorm(H_self + FFN(H_self))
/// ```
///
/// Query rows with no visible key (left padding) come out of the attention
/// as zeros.
#[derive(Debug, Clone)]
pub struct CausalBlock {
    pub attention: MultiHeadAttention,
    pub ffn: FeedForward,
    pub norm: LayerNorm,
}

impl CausalBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            attention: MultiHeadAttention::new(store, &format!("{name}.self_attn"), width, heads, rng),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), width, width, Activation::Relu, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), width),
        }
    }

    pub fn forward(
        &self,
        s: &mut Session<'_>,
        x: Var,
        batches: usize,
        len: usize,
        mask: &AttnMask,
        dropout: f64,
    ) -> Result<Var> {
        let attended = self
            .attention
            .forward(s, x, x, batches, len, len, mask, FullyMasked::Zero)?;
        let attended = s.dropout(attended, dropout)?;
        let h_self = s.graph.add(x, attended)?;
        let ff = self.ffn.forward(s, h_self, dropout)?;
        let ff = s.dropout(ff, dropout)?;
        let sum = s.graph.add(h_self, ff)?;
        self.norm.forward(s, sum)
    }
}

/// Rows `r·len + len - 1` of a `(batches·len)×d` matrix: the final column of
/// every left-padded row.
pub fn last_positions(batches: usize, len: usize) -> Vec<usize> {
    (0..batches).map(|r| r * len + len - 1).collect()
}
