use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::Sample;
use crate::{Error, Result};

/// Slice of a test split. Length buckets partition the samples; popularity
/// buckets are nested (the 10% bucket is contained in the 20% bucket).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Bucket {
    Length(usize),
    /// Targets among the least popular `p` percent of items, `p` in hundredths.
    Popularity(u32),
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bucket::Length(l) => write!(f, "len_{l}"),
            Bucket::Popularity(p) if p % 100 == 0 => write!(f, "pop_{}", p / 100),
            Bucket::Popularity(p) => write!(f, "pop_{}.{:02}", p / 100, p % 100),
        }
    }
}

/// Interaction counts per catalog item, measured on training samples only.
/// Each training interaction is counted once: as a target, or as the first
/// history item of a sequence's first pair.
pub fn item_popularity(train: &[Sample], catalog: &BTreeSet<String>) -> BTreeMap<String, usize> {
    let mut counts: BTreeMap<String, usize> = catalog.iter().map(|i| (i.clone(), 0)).collect();
    for s in train {
        *counts.entry(s.target.clone()).or_default() += 1;
        if s.history.len() == 1 {
            *counts.entry(s.history[0].clone()).or_default() += 1;
        }
    }
    counts
}

/// Group samples by history length. Lengths outside `[min, max]` of
/// `lengths` are clamped; a length between listed values goes to the largest
/// listed value below it. Every listed length gets a (possibly empty) bucket.
pub fn bucket_by_length(samples: &[Sample], lengths: &[usize]) -> Result<BTreeMap<Bucket, Vec<Sample>>> {
    let sorted: BTreeSet<usize> = lengths.iter().copied().collect();
    let (Some(&lo), Some(_)) = (sorted.first(), sorted.last()) else {
        return Err(Error::Config("no length buckets given".into()));
    };
    let mut out: BTreeMap<Bucket, Vec<Sample>> = sorted.iter().map(|&l| (Bucket::Length(l), Vec::new())).collect();
    for s in samples {
        let len = s.history.len().max(lo);
        let key = *sorted.range(..=len).next_back().expect("clamped to the lowest bucket");
        out.get_mut(&Bucket::Length(key)).expect("bucket exists").push(s.clone());
    }
    Ok(out)
}

/// Items ordered from least to most popular; ties by item id.
pub fn popularity_order(popularity: &BTreeMap<String, usize>) -> Vec<String> {
    let mut items: Vec<(&String, usize)> = popularity.iter().map(|(k, &v)| (k, v)).collect();
    items.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    items.into_iter().map(|(k, _)| k.clone()).collect()
}

/// For each percentile `p`, the samples whose target is among the
/// `ceil(p/100 · n_items)` least popular items.
pub fn bucket_by_popularity(
    samples: &[Sample],
    percentiles: &[f64],
    popularity: &BTreeMap<String, usize>,
) -> Result<BTreeMap<Bucket, Vec<Sample>>> {
    let order = popularity_order(popularity);
    let mut out = BTreeMap::new();
    for &p in percentiles {
        if !(p > 0.0 && p <= 100.0) {
            return Err(Error::Config(format!("percentile {p} outside (0, 100]")));
        }
        let take = ((p / 100.0) * order.len() as f64 - 1e-9).ceil().max(0.0) as usize;
        let tail: BTreeSet<&String> = order[..take.min(order.len())].iter().collect();
        let members = samples.iter().filter(|s| tail.contains(&s.target)).cloned().collect();
        out.insert(Bucket::Popularity((p * 100.0).round() as u32), members);
    }
    Ok(out)
}
