use std::collections::{BTreeMap, HashSet};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::ingest::{build_dataset, RawInteraction};
use super::{InteractionDataset, DEFAULT_CORE};

/// Intent-driven generator. Items are split into `intents` contiguous pools;
/// each user holds 1..=`max_intents_per_user` intents and, per interaction,
/// either switches to another of its intents with `switch_prob`, emits a
/// uniformly random item with `noise`, or advances a private ring walk through
/// the current intent's pool by a step in `1..=max_step`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub users: usize,
    pub items: usize,
    pub intents: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub noise: f64,
    pub max_intents_per_user: usize,
    pub switch_prob: f64,
    pub max_step: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            users: 2000,
            items: 500,
            intents: 4,
            min_len: 8,
            max_len: 20,
            noise: 0.1,
            max_intents_per_user: 2,
            switch_prob: 0.3,
            max_step: 3,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.intents == 0 || self.items == 0 || self.items % self.intents != 0 {
            return bad(format!("{} items do not split into {} equal pools", self.items, self.intents));
        }
        if self.users == 0 {
            return bad("users must be positive".into());
        }
        if self.min_len < 3 || self.min_len > self.max_len {
            return bad(format!("length range {}..={} invalid (minimum 3)", self.min_len, self.max_len));
        }
        if self.max_len > self.items / self.intents {
            return bad("max_len exceeds the pool size; histories could not avoid repeats".into());
        }
        if !(0.0..=1.0).contains(&self.noise) || !(0.0..=1.0).contains(&self.switch_prob) {
            return bad("noise and switch_prob must lie in [0, 1]".into());
        }
        if self.max_intents_per_user == 0 || self.max_intents_per_user > self.intents {
            return bad(format!("max_intents_per_user must lie in 1..={}", self.intents));
        }
        if self.max_step == 0 {
            return bad("max_step must be positive".into());
        }
        Ok(())
    }

    pub fn pool_size(&self) -> usize {
        self.items / self.intents
    }
}

fn user_id(u: usize) -> String {
    format!("u{u:06}")
}

fn item_id(i: usize) -> String {
    format!("i{i:05}")
}

/// Generates a dataset and passes it through the regular 5-core pipeline.
/// `intent_labels()[u]` lists the latent intents (pool indices) of user `u`.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<InteractionDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let pool = config.pool_size();
    let mut records = Vec::new();
    let mut labels: BTreeMap<String, Vec<u32>> = BTreeMap::new();
    for u in 0..config.users {
        let count = rng.random_range(1..=config.max_intents_per_user);
        let mut intents: Vec<usize> = sample(&mut rng, config.intents, count).into_vec();
        intents.sort_unstable();
        let mut cursors: Vec<usize> = intents.iter().map(|_| rng.random_range(0..pool)).collect();
        let len = rng.random_range(config.min_len..=config.max_len);
        let mut current = rng.random_range(0..intents.len());
        let mut used = HashSet::with_capacity(len);
        for t in 0..len {
            if intents.len() > 1 && t > 0 && rng.random_bool(config.switch_prob) {
                let other = rng.random_range(0..intents.len() - 1);
                current = if other >= current { other + 1 } else { other };
            }
            let item = if rng.random_bool(config.noise) {
                loop {
                    let candidate = rng.random_range(0..config.items);
                    if !used.contains(&candidate) {
                        break candidate;
                    }
                }
            } else {
                let base = intents[current] * pool;
                let mut cursor = (cursors[current] + rng.random_range(1..=config.max_step)) % pool;
                while used.contains(&(base + cursor)) {
                    cursor = (cursor + 1) % pool;
                }
                cursors[current] = cursor;
                base + cursor
            };
            used.insert(item);
            records.push(RawInteraction {
                user: user_id(u),
                item: item_id(item),
                ts: t as i64,
            });
        }
        labels.insert(user_id(u), intents.iter().map(|&i| i as u32).collect());
    }
    let mut ds = build_dataset(records, DEFAULT_CORE)?;
    ds.intent_labels = Some(ds.user_ids.iter().map(|u| labels[u].clone()).collect());
    ds.validate()?;
    Ok(ds)
}
