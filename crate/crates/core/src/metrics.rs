//! Full-ranking evaluation over the whole vocabulary.

use serde::{Deserialize, Serialize};

use crate::data::{Batch, Example, InteractionDataset, PAD};
use crate::error::Result;
use crate::model::Model;

/// Cutoffs reported for every run.
pub const CUTOFFS: [usize; 2] = [10, 20];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    #[serde(rename = "recall@10")]
    pub recall_10: f64,
    #[serde(rename = "recall@20")]
    pub recall_20: f64,
    #[serde(rename = "ndcg@10")]
    pub ndcg_10: f64,
    #[serde(rename = "ndcg@20")]
    pub ndcg_20: f64,
    pub users: usize,
    /// 1-based rank of each example's target, in example order.
    pub ranks: Vec<usize>,
}

impl RankingMetrics {
    pub fn from_ranks(ranks: Vec<usize>) -> Self {
        let n = ranks.len().max(1) as f64;
        let recall = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        let ndcg = |k: usize| {
            ranks
                .iter()
                .filter(|&&r| r <= k)
                .map(|&r| 1.0 / ((r + 1) as f64).log2())
                .sum::<f64>()
                / n
        };
        Self {
            recall_10: recall(10),
            recall_20: recall(20),
            ndcg_10: ndcg(10),
            ndcg_20: ndcg(20),
            users: ranks.len(),
            ranks,
        }
    }

    pub fn recall(&self, k: usize) -> Option<f64> {
        match k {
            10 => Some(self.recall_10),
            20 => Some(self.recall_20),
            _ => None,
        }
    }
}

/// 1-based rank of `target` among the allowed candidates. Ties go to the
/// smaller item id; column 0 and the `excluded` ids are not candidates.
pub fn target_rank(scores: &[f64], target: usize, excluded: &[bool]) -> usize {
    let st = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .skip(1)
        .filter(|&(j, &sj)| j != target && !excluded[j] && (sj > st || (sj == st && j < target)))
        .count()
}

/// Ranks each example's target against every item it has not already seen.
/// The input history of an example (all items before its target) is excluded
/// from the candidates, except for the target itself.
pub fn rank_and_score(
    model: &Model,
    ds: &InteractionDataset,
    examples: &[Example],
    batch_size: usize,
) -> Result<RankingMetrics> {
    let mut ranks = Vec::with_capacity(examples.len());
    let mut excluded = vec![false; model.items + 1];
    for chunk in examples.chunks(batch_size.max(1)) {
        let batch = Batch::from_examples(ds, chunk, model.max_len());
        let scores = model.score(&batch.sequences())?;
        for (r, ex) in chunk.iter().enumerate() {
            let history = &ds.sequence(ex.user)[..ex.len];
            for &i in history {
                excluded[i as usize] = true;
            }
            excluded[ex.target as usize] = false;
            excluded[PAD as usize] = true;
            ranks.push(target_rank(scores.row(r), ex.target as usize, &excluded));
            for &i in history {
                excluded[i as usize] = false;
            }
        }
    }
    Ok(RankingMetrics::from_ranks(ranks))
}
