//! Interaction logs: ingestion, leave-one-out splits, batching, behavioral
//! noise and a synthetic intent-driven generator.
//!
//! Item ids are dense in `1..=item_count`; id `0` is reserved for padding.

mod batch;
mod ingest;
mod noise;
mod split;
mod synthetic;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use batch::{make_batches, Batch, BatchStream, Sequences};
pub use ingest::{ingest, ingest_with, Format, IngestOptions, DEFAULT_CORE};
pub use noise::inject_noise;
pub use split::{leave_one_out_split, Example, LeaveOneOut};
pub use synthetic::{generate_synthetic, SyntheticConfig};

pub const PAD: u32 = 0;
pub const DATASET_FORMAT: &str = "intentrec-dataset";
pub const DATASET_VERSION: u32 = 1;

/// Users, items and per-user chronological item sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionDataset {
    user_ids: Vec<String>,
    /// `item_ids[i]` is the raw id of dense item `i + 1`.
    item_ids: Vec<String>,
    sequences: Vec<Vec<u32>>,
    /// Ground-truth latent intents per user (synthetic data only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    intent_labels: Option<Vec<Vec<u32>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub sparsity: f64,
    pub mean_length: f64,
}

#[derive(Serialize, Deserialize)]
struct Container {
    format: String,
    version: u32,
    #[serde(flatten)]
    dataset: InteractionDataset,
}

impl InteractionDataset {
    pub fn new(
        user_ids: Vec<String>,
        item_ids: Vec<String>,
        sequences: Vec<Vec<u32>>,
        intent_labels: Option<Vec<Vec<u32>>>,
    ) -> Result<Self> {
        let ds = Self {
            user_ids,
            item_ids,
            sequences,
            intent_labels,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Checks id ranges, map sizes and the minimum length of three.
    pub fn validate(&self) -> Result<()> {
        if self.user_ids.len() != self.sequences.len() {
            return Err(Error::Input(format!(
                "{} user ids for {} sequences",
                self.user_ids.len(),
                self.sequences.len()
            )));
        }
        if self.sequences.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let items = self.item_ids.len() as u32;
        for (u, seq) in self.sequences.iter().enumerate() {
            if seq.len() < 3 {
                return Err(Error::Input(format!(
                    "user {} has {} interactions; at least 3 are required",
                    self.user_ids[u],
                    seq.len()
                )));
            }
            if let Some(&bad) = seq.iter().find(|&&i| i == PAD || i > items) {
                return Err(Error::Input(format!(
                    "user {} has item id {bad} outside 1..={items}",
                    self.user_ids[u]
                )));
            }
        }
        if let Some(labels) = &self.intent_labels {
            if labels.len() != self.sequences.len() {
                return Err(Error::Input("intent labels do not cover every user".into()));
            }
        }
        Ok(())
    }

    pub fn user_count(&self) -> usize {
        self.sequences.len()
    }

    /// Vocabulary size, excluding the padding id.
    pub fn item_count(&self) -> usize {
        self.item_ids.len()
    }

    pub fn interaction_count(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn sequences(&self) -> &[Vec<u32>] {
        &self.sequences
    }

    pub fn sequence(&self, user: usize) -> &[u32] {
        &self.sequences[user]
    }

    pub fn user_ids(&self) -> &[String] {
        &self.user_ids
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn raw_item(&self, id: u32) -> Option<&str> {
        self.item_ids.get((id as usize).checked_sub(1)?).map(String::as_str)
    }

    pub fn intent_labels(&self) -> Option<&[Vec<u32>]> {
        self.intent_labels.as_deref()
    }

    pub fn stats(&self) -> DatasetStats {
        let interactions = self.interaction_count();
        let cells = (self.user_count() * self.item_count()) as f64;
        DatasetStats {
            users: self.user_count(),
            items: self.item_count(),
            interactions,
            sparsity: 1.0 - interactions as f64 / cells,
            mean_length: interactions as f64 / self.user_count() as f64,
        }
    }

    pub(crate) fn with_sequences(&self, sequences: Vec<Vec<u32>>) -> Self {
        Self {
            sequences,
            ..self.clone()
        }
    }

    /// Writes the versioned JSON container.
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let container = Container {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            dataset: self.clone(),
        };
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, &container)?;
        w.flush()?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let container: Container = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if container.format != DATASET_FORMAT {
            return Err(Error::Input(format!("not a dataset container: {}", container.format)));
        }
        if container.version != DATASET_VERSION {
            return Err(Error::Input(format!(
                "unsupported dataset version {} (expected {DATASET_VERSION})",
                container.version
            )));
        }
        container.dataset.validate()?;
        Ok(container.dataset)
    }

    /// Writes `user<TAB>item<TAB>timestamp` lines, using the position in the
    /// sequence as timestamp. Ingesting the file reproduces this dataset.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for (u, seq) in self.sequences.iter().enumerate() {
            for (t, &item) in seq.iter().enumerate() {
                writeln!(w, "{}\t{}\t{}", self.user_ids[u], self.item_ids[item as usize - 1], t)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> InteractionDataset {
        InteractionDataset::new(
            vec!["a".into(), "b".into()],
            vec!["x".into(), "y".into(), "z".into()],
            vec![vec![1, 2, 3], vec![3, 2, 1, 2]],
            None,
        )
        .unwrap()
    }

    #[test]
    fn rejects_pad_and_short_sequences() {
        let err = InteractionDataset::new(vec!["a".into()], vec!["x".into()], vec![vec![1, 0, 1]], None);
        assert!(err.is_err());
        let err = InteractionDataset::new(vec!["a".into()], vec!["x".into()], vec![vec![1, 1]], None);
        assert!(err.is_err());
    }

    #[test]
    fn json_container_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.json");
        let ds = toy();
        ds.save_json(&path).unwrap();
        assert_eq!(InteractionDataset::load_json(&path).unwrap(), ds);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"version\":1"));
    }

    #[test]
    fn stats_count_everything() {
        let s = toy().stats();
        assert_eq!((s.users, s.items, s.interactions), (2, 3, 7));
        assert!((s.sparsity - (1.0 - 7.0 / 6.0)).abs() < 1e-12);
    }
}
