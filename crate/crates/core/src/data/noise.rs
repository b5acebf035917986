use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::InteractionDataset;

/// Number of perturbed positions among `candidates` non-target positions.
pub(crate) fn noisy_positions(ratio: f64, candidates: usize) -> usize {
    // The small slack keeps products like 0.2 * 10 from rounding up past 2.
    ((ratio * candidates as f64 - 1e-9).ceil().max(0.0) as usize).min(candidates)
}

/// Replaces `⌈ratio·(n−1)⌉` of each history's non-final positions with
/// uniformly drawn different items. Lengths and test targets are preserved.
pub fn inject_noise(ds: &InteractionDataset, ratio: f64, seed: u64) -> Result<InteractionDataset> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("noise ratio {ratio} outside [0, 1]")));
    }
    let items = ds.item_count() as u32;
    if items < 2 && ratio > 0.0 {
        return Err(Error::Input("noise needs at least two items".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sequences = ds
        .sequences()
        .iter()
        .map(|seq| {
            let mut seq = seq.clone();
            let candidates = seq.len() - 1;
            let count = noisy_positions(ratio, candidates);
            for pos in rand::seq::index::sample(&mut rng, candidates, count) {
                let original = seq[pos];
                // Uniform over the other items.
                let mut replacement = rng.random_range(1..items);
                if replacement >= original {
                    replacement += 1;
                }
                seq[pos] = replacement;
            }
            seq
        })
        .collect();
    Ok(ds.with_sequences(sequences))
}
