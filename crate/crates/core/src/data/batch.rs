use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Example, InteractionDataset, PAD};

/// Left-padded mini-batch. Row `r` holds the most recent `lengths[r]` input
/// items in its trailing columns; `next_items` holds, per column, the item
/// that followed it (so the final column of `next_items` is the target).
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub users: Vec<usize>,
    pub items: Vec<u32>,
    pub next_items: Vec<u32>,
    pub lengths: Vec<usize>,
    pub targets: Vec<u32>,
    pub n_max: usize,
}

impl Batch {
    pub fn from_examples(ds: &InteractionDataset, examples: &[Example], n_max: usize) -> Self {
        assert!(n_max >= 1, "n_max must be at least 1");
        let rows = examples.len();
        let mut items = vec![PAD; rows * n_max];
        let mut next_items = vec![PAD; rows * n_max];
        let mut lengths = Vec::with_capacity(rows);
        for (r, ex) in examples.iter().enumerate() {
            let seq = ds.sequence(ex.user);
            let start = ex.len.saturating_sub(n_max);
            let kept = ex.len - start;
            let offset = r * n_max + n_max - kept;
            items[offset..offset + kept].copy_from_slice(&seq[start..ex.len]);
            next_items[offset..offset + kept].copy_from_slice(&seq[start + 1..=ex.len]);
            lengths.push(kept);
        }
        Self {
            users: examples.iter().map(|e| e.user).collect(),
            items,
            next_items,
            lengths,
            targets: examples.iter().map(|e| e.target).collect(),
            n_max,
        }
    }

    pub fn rows(&self) -> usize {
        self.lengths.len()
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.items[r * self.n_max..(r + 1) * self.n_max]
    }

    /// Width needed to hold the longest row: the leading columns that are
    /// padding in every row can be dropped.
    pub fn width(&self) -> usize {
        self.lengths.iter().copied().max().unwrap_or(0)
    }

    /// Items of every row, left-padded to `width` columns.
    pub fn trimmed_items(&self, width: usize) -> Vec<u32> {
        self.trim(&self.items, width)
    }

    pub fn trimmed_next_items(&self, width: usize) -> Vec<u32> {
        self.trim(&self.next_items, width)
    }

    fn trim(&self, buf: &[u32], width: usize) -> Vec<u32> {
        assert!(width >= self.width() && width <= self.n_max);
        let mut out = Vec::with_capacity(self.rows() * width);
        for r in 0..self.rows() {
            out.extend_from_slice(&buf[(r + 1) * self.n_max - width..(r + 1) * self.n_max]);
        }
        out
    }

    /// First non-padding column of each row in a `width`-column layout.
    pub fn starts(&self, width: usize) -> Vec<usize> {
        self.lengths.iter().map(|&l| width - l).collect()
    }

    /// Inputs trimmed to the longest row.
    pub fn sequences(&self) -> Sequences {
        let width = self.width();
        Sequences {
            items: self.trimmed_items(width),
            lengths: self.lengths.clone(),
            width,
        }
    }
}

/// Left-padded id matrix trimmed to the longest row: the input form the
/// encoders consume.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequences {
    /// `rows × width`, row-major.
    pub items: Vec<u32>,
    pub lengths: Vec<usize>,
    pub width: usize,
}

impl Sequences {
    pub fn new(items: Vec<u32>, lengths: Vec<usize>, width: usize) -> crate::error::Result<Self> {
        use crate::error::Error;
        if items.len() != lengths.len() * width {
            return Err(Error::Input(format!(
                "{} ids do not form {} rows of width {width}",
                items.len(),
                lengths.len()
            )));
        }
        for (r, &len) in lengths.iter().enumerate() {
            if len == 0 {
                return Err(Error::Input(format!("row {r} is empty")));
            }
            if len > width {
                return Err(Error::Input(format!("row {r} has length {len} > width {width}")));
            }
            let row = &items[r * width..(r + 1) * width];
            if row[..width - len].iter().any(|&i| i != PAD) || row[width - len..].contains(&PAD) {
                return Err(Error::Input(format!("row {r} is not left-padded to length {len}")));
            }
        }
        Ok(Self { items, lengths, width })
    }

    /// Builds left-padded rows from unpadded histories.
    pub fn from_histories(histories: &[&[u32]]) -> crate::error::Result<Self> {
        let width = histories.iter().map(|h| h.len()).max().unwrap_or(0);
        let mut items = vec![PAD; histories.len() * width];
        for (r, h) in histories.iter().enumerate() {
            items[(r + 1) * width - h.len()..(r + 1) * width].copy_from_slice(h);
        }
        Self::new(items, histories.iter().map(|h| h.len()).collect(), width)
    }

    pub fn rows(&self) -> usize {
        self.lengths.len()
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.items[r * self.width..(r + 1) * self.width]
    }

    /// First non-padding column of each row.
    pub fn starts(&self) -> Vec<usize> {
        self.lengths.iter().map(|&l| self.width - l).collect()
    }

    /// The same rows with `extra` more padding columns on the left.
    pub fn padded(&self, extra: usize) -> Self {
        let width = self.width + extra;
        let mut items = vec![PAD; self.rows() * width];
        for r in 0..self.rows() {
            items[r * width + extra..(r + 1) * width].copy_from_slice(self.row(r));
        }
        Self {
            items,
            lengths: self.lengths.clone(),
            width,
        }
    }
}

/// Batches over a fixed example order.
pub struct BatchStream<'a> {
    ds: &'a InteractionDataset,
    examples: Vec<Example>,
    n_max: usize,
    batch_size: usize,
    cursor: usize,
}

impl Iterator for BatchStream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.examples.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.examples.len());
        let batch = Batch::from_examples(self.ds, &self.examples[self.cursor..end], self.n_max);
        self.cursor = end;
        Some(batch)
    }
}

/// Splits `examples` into batches, truncating inputs to their most recent
/// `n_max` items. With a seed the example order is shuffled deterministically.
pub fn make_batches<'a>(
    ds: &'a InteractionDataset,
    examples: &[Example],
    n_max: usize,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> BatchStream<'a> {
    assert!(n_max >= 1 && batch_size >= 1);
    let mut examples = examples.to_vec();
    if let Some(seed) = shuffle_seed {
        examples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    BatchStream {
        ds,
        examples,
        n_max,
        batch_size,
        cursor: 0,
    }
}
