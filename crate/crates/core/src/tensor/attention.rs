use std::sync::Arc;

use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::Tensor;

/// Additive bias for disallowed query/key pairs.
pub const MASK_BIAS: f64 = -1e9;

/// How `batches` independent attention problems are packed into 2-D inputs:
/// queries are `(batches·q_len)×d`, keys and values `(batches·k_len)×d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionLayout {
    pub batches: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
}

impl AttentionLayout {
    pub fn single(q_len: usize, k_len: usize) -> Self {
        Self {
            batches: 1,
            q_len,
            k_len,
            heads: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub enum AttnMask {
    /// Every query sees every key.
    None,
    /// Explicit `batches×q_len×k_len` table, `true` = attend.
    Dense(Arc<Vec<bool>>),
    /// Causal attention over left-padded rows: query `i` of batch `b` sees key
    /// `j` iff `j <= i` and either `j < always_visible` or `j >= starts[b]`.
    Causal {
        starts: Arc<Vec<usize>>,
        always_visible: usize,
    },
}

impl AttnMask {
    pub fn causal(starts: Vec<usize>) -> Self {
        AttnMask::Causal {
            starts: Arc::new(starts),
            always_visible: 0,
        }
    }

    fn allows(&self, layout: &AttentionLayout, b: usize, i: usize, j: usize) -> bool {
        match self {
            AttnMask::None => true,
            AttnMask::Dense(m) => m[(b * layout.q_len + i) * layout.k_len + j],
            AttnMask::Causal {
                starts,
                always_visible,
            } => j <= i && (j < *always_visible || j >= starts[b]),
        }
    }

    fn validate(&self, layout: &AttentionLayout) -> Result<()> {
        match self {
            AttnMask::None => Ok(()),
            AttnMask::Dense(m) => {
                let want = layout.batches * layout.q_len * layout.k_len;
                if m.len() != want {
                    return Err(Error::shape(format!(
                        "attention mask has {} entries, expected {want}",
                        m.len()
                    )));
                }
                Ok(())
            }
            AttnMask::Causal { starts, .. } => {
                if starts.len() != layout.batches {
                    return Err(Error::shape(format!(
                        "causal mask has {} row starts for {} batches",
                        starts.len(),
                        layout.batches
                    )));
                }
                Ok(())
            }
        }
    }
}

/// What to do with a query whose mask forbids every key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FullyMasked {
    Error,
    /// Emit a zero output row (used for padding positions).
    Zero,
}

impl Graph {
    /// `softmax(QKᵀ/√d + mask_bias)·V` for a single attention problem with a
    /// single head. A fully masked query row is an error.
    pub fn scaled_dot_attention(&mut self, q: Var, k: Var, v: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (q_len, _) = self.value(q).dims2()?;
        let (k_len, _) = self.value(k).dims2()?;
        let layout = AttentionLayout::single(q_len, k_len);
        let mask = match mask {
            Some(m) => AttnMask::Dense(Arc::new(m.to_vec())),
            None => AttnMask::None,
        };
        self.attention(q, k, v, layout, &mask, FullyMasked::Error)
    }

    /// Batched multi-head scaled dot-product attention. Heads split the model
    /// width into `heads` contiguous column blocks.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        mask: &AttnMask,
        policy: FullyMasked,
    ) -> Result<Var> {
        let AttentionLayout {
            batches,
            q_len,
            k_len,
            heads,
        } = layout;
        let (qr, d) = self.value(q).dims2()?;
        let (kr, dk) = self.value(k).dims2()?;
        let (vr, dv) = self.value(v).dims2()?;
        if qr != batches * q_len || kr != batches * k_len || vr != kr {
            return Err(Error::shape(format!(
                "attention: rows q={qr} k={kr} v={vr} inconsistent with layout {layout:?}"
            )));
        }
        if dk != d || dv != d {
            return Err(Error::shape(format!("attention: widths q={d} k={dk} v={dv} differ")));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(format!("attention: width {d} not divisible into {heads} heads")));
        }
        mask.validate(&layout)?;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();

        // probs[((b*heads + h)*q_len + i)*k_len + j]
        let mut probs = vec![0.0; batches * heads * q_len * k_len];
        let mut out = vec![0.0; qr * d];
        let mut scores = vec![0.0; k_len];
        for b in 0..batches {
            for i in 0..q_len {
                let any = (0..k_len).any(|j| mask.allows(&layout, b, i, j));
                if !any {
                    match policy {
                        FullyMasked::Error => {
                            return Err(Error::DegenerateAttention { row: b * q_len + i })
                        }
                        FullyMasked::Zero => continue,
                    }
                }
                let qrow = &qv[(b * q_len + i) * d..(b * q_len + i + 1) * d];
                for h in 0..heads {
                    let qh = &qrow[h * dh..(h + 1) * dh];
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate() {
                        let krow = &kv[(b * k_len + j) * d + h * dh..(b * k_len + j) * d + (h + 1) * dh];
                        let dot: f64 = qh.iter().zip(krow).map(|(x, y)| x * y).sum();
                        let bias = if mask.allows(&layout, b, i, j) { 0.0 } else { MASK_BIAS };
                        *s = dot * scale + bias;
                        max = max.max(*s);
                    }
                    let mut total = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        total += *s;
                    }
                    let prow = &mut probs[((b * heads + h) * q_len + i) * k_len..][..k_len];
                    let orow = &mut out[(b * q_len + i) * d + h * dh..][..dh];
                    for (j, (p, s)) in prow.iter_mut().zip(&scores).enumerate() {
                        *p = s / total;
                        let vrow = &vv[(b * k_len + j) * d + h * dh..][..dh];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += *p * x;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![qr, d], out)?;
        Ok(self.push_op(value, &[q, k, v], move |g, sink| {
            let qv = sink.value(q).data();
            let kv = sink.value(k).data();
            let vv = sink.value(v).data();
            let mut dq = vec![0.0; qv.len()];
            let mut dk = vec![0.0; kv.len()];
            let mut dvv = vec![0.0; vv.len()];
            let mut dp = vec![0.0; k_len];
            for b in 0..batches {
                for h in 0..heads {
                    for i in 0..q_len {
                        let prow = &probs[((b * heads + h) * q_len + i) * k_len..][..k_len];
                        let grow = &g[(b * q_len + i) * d + h * dh..][..dh];
                        let mut dot = 0.0;
                        for j in 0..k_len {
                            let vrow = &vv[(b * k_len + j) * d + h * dh..][..dh];
                            let dvrow = &mut dvv[(b * k_len + j) * d + h * dh..][..dh];
                            let mut gp = 0.0;
                            for t in 0..dh {
                                dvrow[t] += prow[j] * grow[t];
                                gp += grow[t] * vrow[t];
                            }
                            dp[j] = gp;
                            dot += prow[j] * gp;
                        }
                        let qrow = &qv[(b * q_len + i) * d + h * dh..][..dh];
                        for j in 0..k_len {
                            let ds = prow[j] * (dp[j] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let krow = &kv[(b * k_len + j) * d + h * dh..][..dh];
                            let dqrow = &mut dq[(b * q_len + i) * d + h * dh..][..dh];
                            for t in 0..dh {
                                dqrow[t] += ds * krow[t];
                            }
                            let dkrow = &mut dk[(b * k_len + j) * d + h * dh..][..dh];
                            for t in 0..dh {
                                dkrow[t] += ds * qrow[t];
                            }
                        }
                    }
                }
            }
            for (var, grad) in [(q, dq), (k, dk), (v, dvv)] {
                if let Some(slot) = sink.slot(var) {
                    slot.iter_mut().zip(&grad).for_each(|(s, g)| *s += g);
                }
            }
        }))
    }
}
