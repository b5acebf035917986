use crate::error::{Error, Result};

use super::InteractionDataset;

/// One prediction instance: the first `len` items of `user`'s history are the
/// input, item `len` is the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Example {
    pub user: usize,
    pub len: usize,
    pub target: u32,
}

/// Leave-one-out views. Per user with history `s` of length `n`: the test
/// target is `s[n-1]`, the validation target `s[n-2]`, and the training
/// portion `s[..n-2]` contributes every prefix → next-item pair inside it.
#[derive(Debug, Clone, PartialEq)]
pub struct LeaveOneOut {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

impl LeaveOneOut {
    /// Items in the training portions, `Σ_u (n_u − 2)`.
    pub fn train_item_count(&self, ds: &InteractionDataset) -> usize {
        ds.sequences().iter().map(|s| s.len() - 2).sum()
    }

    /// Training pairs grouped by user, in user order.
    pub fn train_by_user(&self, users: usize) -> Vec<Vec<Example>> {
        let mut out = vec![Vec::new(); users];
        for ex in &self.train {
            out[ex.user].push(*ex);
        }
        out
    }

    /// The longest training pair of every user that has one. Its input plus
    /// target spans the whole training portion, so it carries every
    /// next-item target of that portion.
    pub fn train_full_sequences(&self) -> Vec<Example> {
        let mut out: Vec<Example> = Vec::new();
        for ex in &self.train {
            match out.last_mut() {
                Some(last) if last.user == ex.user => {
                    if ex.len > last.len {
                        *last = *ex;
                    }
                }
                _ => out.push(*ex),
            }
        }
        out
    }
}

pub fn leave_one_out_split(ds: &InteractionDataset) -> Result<LeaveOneOut> {
    let mut train = Vec::new();
    let mut val = Vec::with_capacity(ds.user_count());
    let mut test = Vec::with_capacity(ds.user_count());
    for (user, seq) in ds.sequences().iter().enumerate() {
        let n = seq.len();
        if n < 3 {
            return Err(Error::Input(format!("user {user} has fewer than 3 interactions")));
        }
        for len in 1..n - 2 {
            train.push(Example {
                user,
                len,
                target: seq[len],
            });
        }
        val.push(Example {
            user,
            len: n - 2,
            target: seq[n - 2],
        });
        test.push(Example {
            user,
            len: n - 1,
            target: seq[n - 1],
        });
    }
    Ok(LeaveOneOut { train, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn ds(seqs: Vec<Vec<u32>>) -> InteractionDataset {
        let users = (0..seqs.len()).map(|u| format!("u{u}")).collect();
        let max = seqs.iter().flatten().copied().max().unwrap();
        let items = (1..=max).map(|i| format!("i{i}")).collect();
        InteractionDataset::new(users, items, seqs, None).unwrap()
    }

    #[test]
    fn four_item_history() {
        // [a,b,c,d] = [1,2,3,4]
        let split = leave_one_out_split(&ds(vec![vec![1, 2, 3, 4]])).unwrap();
        assert_eq!(split.test, vec![Example { user: 0, len: 3, target: 4 }]);
        assert_eq!(split.val, vec![Example { user: 0, len: 2, target: 3 }]);
        assert_eq!(split.train, vec![Example { user: 0, len: 1, target: 2 }]);
    }

    #[test]
    fn minimal_history_has_no_training_pair() {
        let split = leave_one_out_split(&ds(vec![vec![1, 2, 3]])).unwrap();
        assert!(split.train.is_empty());
        assert_eq!(split.val[0], Example { user: 0, len: 1, target: 2 });
        assert_eq!(split.test[0], Example { user: 0, len: 2, target: 3 });
    }

    #[test]
    fn counts_over_toy_dataset() {
        let data = ds(vec![vec![1, 2, 3, 4, 5], vec![2, 3, 4], vec![5, 4, 3, 2, 1, 2, 3]]);
        let split = leave_one_out_split(&data).unwrap();
        // Training portions hold n-2 items: 3 + 1 + 5.
        assert_eq!(split.train_item_count(&data), 9);
        // Pairs inside a portion of length n-2: n-3 each.
        assert_eq!(split.train.len(), 2 + 0 + 4);
        let full = split.train_full_sequences();
        assert_eq!(full.len(), 2);
        assert_eq!(full[1], Example { user: 2, len: 4, target: 1 });
    }

    #[test]
    fn splits_are_disjoint() {
        let data = ds(vec![vec![1, 2, 3, 4, 5, 6], vec![6, 5, 4, 3]]);
        let split = leave_one_out_split(&data).unwrap();
        let mut seen = HashSet::new();
        for ex in split.train.iter().chain(&split.val).chain(&split.test) {
            assert!(seen.insert((ex.user, ex.len)), "target position used twice");
        }
    }
}
