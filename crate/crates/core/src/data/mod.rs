//! Interaction ingestion, k-core filtering, per-user sequences, splits and
//! the synthetic dataset generator.

mod buckets;
mod io;
mod kcore;
mod split;
mod synthetic;

pub use buckets::{bucket_by_length, bucket_by_popularity, item_popularity, popularity_order, Bucket};
pub use io::{
    load_embeddings, load_interactions, parse_embeddings, parse_interactions, read_split_manifest,
    write_embeddings, write_interactions, write_split_manifest, InteractionFormat,
};
pub use kcore::kcore_filter;
pub use split::{leave_one_out_split, user_random_split, DatasetSplit, Sample, SplitReport};
pub use synthetic::{generate_synthetic, item_name, user_name, SyntheticConfig, SyntheticData};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Token id reserved for padding across the pipeline.
pub const PAD_TOKEN: u32 = 0;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: u64,
}

impl Interaction {
    pub fn new(user: impl Into<String>, item: impl Into<String>, timestamp: u64) -> Self {
        Self { user_id: user.into(), item_id: item.into(), timestamp }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user_id: String,
    /// Items in ascending timestamp order.
    pub items: Vec<String>,
}

/// Group interactions per user (users in lexicographic order) and order
/// each user's items by timestamp. Ties keep input order.
pub fn build_sequences(interactions: &[Interaction]) -> Vec<UserSequence> {
    let mut per_user: BTreeMap<&str, Vec<(u64, &str)>> = BTreeMap::new();
    for it in interactions {
        per_user.entry(&it.user_id).or_default().push((it.timestamp, &it.item_id));
    }
    per_user
        .into_iter()
        .map(|(user, mut events)| {
            events.sort_by_key(|&(t, _)| t);
            UserSequence {
                user_id: user.to_string(),
                items: events.into_iter().map(|(_, i)| i.to_string()).collect(),
            }
        })
        .collect()
}

/// Corpus-level counts and density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub sparsity: f64,
    pub avg_len: f64,
}

pub fn dataset_stats(interactions: &[Interaction]) -> DatasetStats {
    let users: std::collections::BTreeSet<&str> = interactions.iter().map(|i| i.user_id.as_str()).collect();
    let items: std::collections::BTreeSet<&str> = interactions.iter().map(|i| i.item_id.as_str()).collect();
    let n = interactions.len();
    let cells = users.len() as f64 * items.len() as f64;
    DatasetStats {
        users: users.len(),
        items: items.len(),
        interactions: n,
        sparsity: if cells > 0.0 { 1.0 - n as f64 / cells } else { 0.0 },
        avg_len: if users.is_empty() { 0.0 } else { n as f64 / users.len() as f64 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    #[test]
    fn sequences_sort_by_timestamp() {
        let log = vec![
            Interaction::new("u", "a", 5),
            Interaction::new("u", "b", 1),
            Interaction::new("u", "c", 3),
        ];
        let seqs = build_sequences(&log);
        assert_eq!(seqs[0].items, vec!["b", "c", "a"]);
    }

    #[test]
    fn equal_timestamps_keep_input_order() {
        let log = vec![
            Interaction::new("u", "x", 2),
            Interaction::new("u", "y", 2),
            Interaction::new("u", "z", 1),
        ];
        assert_eq!(build_sequences(&log)[0].items, vec!["z", "x", "y"]);
    }

    #[test]
    fn shuffled_log_matches_presorted_oracle() {
        // distinct timestamps per user, so any input order yields the same sequences
        let mut log = Vec::new();
        for e in 0..50u64 {
            log.push(Interaction::new(format!("u{}", e % 4), format!("i{e}"), 1000 - e * 7));
        }
        let mut oracle: BTreeMap<String, Vec<(u64, String)>> = BTreeMap::new();
        for it in &log {
            oracle.entry(it.user_id.clone()).or_default().push((it.timestamp, it.item_id.clone()));
        }
        let oracle: Vec<UserSequence> = oracle
            .into_iter()
            .map(|(u, mut ev)| {
                ev.sort();
                UserSequence { user_id: u, items: ev.into_iter().map(|e| e.1).collect() }
            })
            .collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        log.shuffle(&mut rng);
        assert_eq!(build_sequences(&log), oracle);
    }

    #[test]
    fn stats_count_the_corpus() {
        let log = vec![
            Interaction::new("u1", "a", 1),
            Interaction::new("u1", "b", 2),
            Interaction::new("u2", "a", 1),
        ];
        let s = dataset_stats(&log);
        assert_eq!((s.users, s.items, s.interactions), (2, 2, 3));
        assert!((s.sparsity - 0.25).abs() < 1e-12);
        assert!((s.avg_len - 1.5).abs() < 1e-12);
    }
}
