use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::UserSequence;
use crate::{Error, Result};

/// One next-item example. `history` is already truncated to the most recent
/// `max_len` items; padding happens when batches are tensorized.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sample {
    pub user: String,
    pub history: Vec<String>,
    pub target: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitReport {
    pub users_retained: usize,
    /// Users whose sequence was too short for the split protocol.
    pub users_dropped: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<Sample>,
    pub valid: Vec<Sample>,
    pub test: Vec<Sample>,
    pub item_catalog: BTreeSet<String>,
    pub max_len: usize,
    pub report: SplitReport,
}

fn truncate(items: &[String], max_len: usize) -> Vec<String> {
    items[items.len().saturating_sub(max_len)..].to_vec()
}

fn sample(user: &str, prefix: &[String], target: &str, max_len: usize) -> Sample {
    Sample { user: user.to_string(), history: truncate(prefix, max_len), target: target.to_string() }
}

/// Next-item pairs `(items[..t], items[t])` for `t` in `1..items.len()`.
fn prefix_pairs(user: &str, items: &[String], max_len: usize, out: &mut Vec<Sample>) {
    for t in 1..items.len() {
        out.push(sample(user, &items[..t], &items[t], max_len));
    }
}

/// Last item → test, second-to-last → validation, next-item pairs within the
/// remaining prefix → training. Sequences shorter than 3 are dropped.
pub fn leave_one_out_split(sequences: &[UserSequence], max_len: usize) -> DatasetSplit {
    let mut split = DatasetSplit {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
        item_catalog: BTreeSet::new(),
        max_len,
        report: SplitReport::default(),
    };
    for seq in sequences {
        let n = seq.items.len();
        if n < 3 {
            split.report.users_dropped.push(seq.user_id.clone());
            continue;
        }
        split.report.users_retained += 1;
        split.item_catalog.extend(seq.items.iter().cloned());
        split.test.push(sample(&seq.user_id, &seq.items[..n - 1], &seq.items[n - 1], max_len));
        split.valid.push(sample(&seq.user_id, &seq.items[..n - 2], &seq.items[n - 2], max_len));
        prefix_pairs(&seq.user_id, &seq.items[..n - 2], max_len, &mut split.train);
    }
    split
}

/// Shuffle users with `seed` and assign each wholly to train/valid/test by
/// `ratios`. Training users contribute every next-item pair; validation and
/// test users contribute one sample predicting their last item. Sequences
/// shorter than 2 are dropped.
pub fn user_random_split(
    sequences: &[UserSequence],
    ratios: [f64; 3],
    seed: u64,
    max_len: usize,
) -> Result<DatasetSplit> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r) || !r.is_finite()) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::Config(format!("split ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    let mut split = DatasetSplit {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
        item_catalog: BTreeSet::new(),
        max_len,
        report: SplitReport::default(),
    };
    let mut kept: Vec<&UserSequence> = Vec::new();
    for seq in sequences {
        if seq.items.len() < 2 {
            split.report.users_dropped.push(seq.user_id.clone());
        } else {
            kept.push(seq);
        }
    }
    kept.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = kept.len();
    let n_test = (n as f64 * ratios[2]).round() as usize;
    let n_valid = ((n as f64 * ratios[1]).round() as usize).min(n - n_test);
    let n_train = n - n_test - n_valid;
    split.report.users_retained = n;
    for (rank, seq) in kept.iter().enumerate() {
        split.item_catalog.extend(seq.items.iter().cloned());
        let m = seq.items.len();
        if rank < n_train {
            prefix_pairs(&seq.user_id, &seq.items, max_len, &mut split.train);
        } else {
            let s = sample(&seq.user_id, &seq.items[..m - 1], &seq.items[m - 1], max_len);
            if rank < n_train + n_valid {
                split.valid.push(s);
            } else {
                split.test.push(s);
            }
        }
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(user: &str, items: &[&str]) -> UserSequence {
        UserSequence { user_id: user.into(), items: items.iter().map(|s| s.to_string()).collect() }
    }

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn five_item_sequence() {
        let split = leave_one_out_split(&[seq("u", &["a", "b", "c", "d", "e"])], 20);
        assert_eq!(split.test[0].history, strings(&["a", "b", "c", "d"]));
        assert_eq!(split.test[0].target, "e");
        assert_eq!(split.valid[0].history, strings(&["a", "b", "c"]));
        assert_eq!(split.valid[0].target, "d");
        let train: Vec<(Vec<String>, String)> =
            split.train.iter().map(|s| (s.history.clone(), s.target.clone())).collect();
        assert_eq!(train, vec![(strings(&["a"]), "b".to_string()), (strings(&["a", "b"]), "c".to_string())]);
    }

    #[test]
    fn one_test_sample_per_retained_user_and_short_ones_reported() {
        let seqs = vec![seq("u1", &["a", "b", "c"]), seq("u2", &["a", "b"]), seq("u3", &["c", "b", "a", "d"])];
        let split = leave_one_out_split(&seqs, 20);
        assert_eq!(split.test.len(), split.report.users_retained);
        assert_eq!(split.report.users_dropped, vec!["u2".to_string()]);
        assert!(split.test.iter().all(|s| split.item_catalog.contains(&s.target)));
    }

    #[test]
    fn long_history_keeps_most_recent() {
        let items: Vec<String> = (0..25).map(|i| format!("i{i}")).collect();
        let s = UserSequence { user_id: "u".into(), items: items.clone() };
        let split = leave_one_out_split(&[s], 20);
        // slicing oracle: test history = items[0..24] truncated to the last 20 → items 4..23
        let expected: Vec<String> = items[..24].iter().skip(24 - 20).cloned().collect();
        assert_eq!(split.test[0].history, expected);
        assert_eq!(split.test[0].history.first().unwrap(), "i4");
        assert_eq!(split.test[0].history.len(), 20);
    }

    #[test]
    fn user_split_proportions() {
        let seqs: Vec<UserSequence> = (0..10).map(|u| seq(&format!("u{u}"), &["a", "b", "c"])).collect();
        let split = user_random_split(&seqs, [0.8, 0.1, 0.1], 7, 20).unwrap();
        let users = |v: &[Sample]| v.iter().map(|s| s.user.clone()).collect::<BTreeSet<_>>();
        assert_eq!(users(&split.train).len(), 8);
        assert_eq!(split.valid.len(), 1);
        assert_eq!(split.test.len(), 1);
    }

    #[test]
    fn user_split_is_deterministic_and_partitions_users() {
        let seqs: Vec<UserSequence> = (0..37).map(|u| seq(&format!("u{u}"), &["a", "b", "c", "d"])).collect();
        let a = user_random_split(&seqs, [0.8, 0.1, 0.1], 11, 20).unwrap();
        let b = user_random_split(&seqs, [0.8, 0.1, 0.1], 11, 20).unwrap();
        assert_eq!(a, b);
        let users = |v: &[Sample]| v.iter().map(|s| s.user.clone()).collect::<BTreeSet<_>>();
        let (tr, va, te) = (users(&a.train), users(&a.valid), users(&a.test));
        assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
        let all: BTreeSet<String> = tr.union(&va).cloned().collect::<BTreeSet<_>>().union(&te).cloned().collect();
        let expected: BTreeSet<String> = seqs.iter().map(|s| s.user_id.clone()).collect();
        assert_eq!(all, expected);
    }

    #[test]
    fn invalid_ratios_error() {
        let seqs = vec![seq("u", &["a", "b"])];
        assert!(user_random_split(&seqs, [0.8, 0.1, 0.2], 0, 20).is_err());
        assert!(user_random_split(&seqs, [1.2, -0.1, -0.1], 0, 20).is_err());
    }
}
