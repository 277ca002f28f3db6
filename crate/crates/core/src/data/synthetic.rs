//! Seeded synthetic corpora with planted semantic and collaborative structure.
//!
//! Item embeddings are leaves of a Gaussian tree: each level adds an offset
//! shared by every item below that node, with the offset scale shrinking by
//! `variance_decay` per level. Interactions come from an item-level Markov
//! chain whose transition logits are `transition_sharpness · g_ij` with
//! `g_ij ~ N(0, 1)` drawn independently of the embedding tree, so sequential
//! structure cannot be read off the semantic embeddings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Interaction;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub embed_dim: usize,
    pub hierarchy_depth: usize,
    pub transition_sharpness: f64,
    /// Inclusive range of per-user sequence lengths.
    pub seq_len_range: (usize, usize),
    pub seed: u64,
    #[serde(default = "default_decay")]
    pub variance_decay: f64,
}

fn default_decay() -> f64 {
    0.4
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_users: 500,
            n_items: 200,
            embed_dim: 32,
            hierarchy_depth: 3,
            transition_sharpness: 4.0,
            seq_len_range: (5, 10),
            seed: 0,
            variance_decay: default_decay(),
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.seq_len_range;
        if self.n_users == 0 || self.n_items == 0 || self.embed_dim == 0 || self.hierarchy_depth == 0 {
            return Err(Error::Config("synthetic counts must be positive".into()));
        }
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("invalid seq_len_range ({lo}, {hi})")));
        }
        if !(self.transition_sharpness >= 0.0 && self.transition_sharpness.is_finite()) {
            return Err(Error::Config("transition_sharpness must be finite and ≥ 0".into()));
        }
        if !(self.variance_decay > 0.0 && self.variance_decay.is_finite()) {
            return Err(Error::Config("variance_decay must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub interactions: Vec<Interaction>,
    /// Item embeddings in item-id order.
    pub embeddings: Vec<(String, Vec<f64>)>,
}

pub fn item_name(i: usize) -> String {
    format!("i{i:05}")
}

pub fn user_name(u: usize) -> String {
    format!("u{u:05}")
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            scale * x
        })
        .collect()
}

fn tree_embeddings(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let depth = cfg.hierarchy_depth;
    let branching = ((cfg.n_items as f64).powf(1.0 / depth as f64).ceil() as usize).max(1);
    // Offsets per internal level; index = node prefix number at that level.
    let mut offsets: Vec<std::collections::HashMap<usize, Vec<f64>>> = vec![Default::default(); depth];
    let mut out = Vec::with_capacity(cfg.n_items);
    for item in 0..cfg.n_items {
        let mut v = vec![0.0; cfg.embed_dim];
        for (level, table) in offsets.iter_mut().enumerate() {
            let scale = cfg.variance_decay.powi(level as i32);
            // node at this level = item's path prefix of length level + 1
            let node = if level + 1 == depth {
                item
            } else {
                item / branching.pow((depth - level - 1) as u32)
            };
            let off = table.entry(node).or_insert_with(|| gaussian(rng, cfg.embed_dim, scale));
            v.iter_mut().zip(off.iter()).for_each(|(a, b)| *a += b);
        }
        out.push(v);
    }
    out
}

struct MarkovChain {
    n: usize,
    sharpness: f64,
    seed: u64,
    rows: Vec<Option<Vec<f64>>>,
}

impl MarkovChain {
    fn new(n: usize, sharpness: f64, seed: u64) -> Self {
        Self { n, sharpness, seed, rows: vec![None; n] }
    }

    /// Cumulative transition distribution out of `from`; each row has its own
    /// seeded stream so rows are independent of visit order.
    fn row(&mut self, from: usize) -> &[f64] {
        let (n, sharp, seed) = (self.n, self.sharpness, self.seed);
        self.rows[from].get_or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15 ^ (from as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
            let logits: Vec<f64> = (0..n)
                .map(|_| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    sharp * g
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut acc = 0.0;
            let mut cdf: Vec<f64> = logits
                .iter()
                .map(|l| {
                    acc += (l - max).exp();
                    acc
                })
                .collect();
            cdf.iter_mut().for_each(|c| *c /= acc);
            cdf
        })
    }

    fn next(&mut self, from: usize, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.random();
        let cdf = self.row(from);
        cdf.partition_point(|&c| c < u).min(cdf.len() - 1)
    }
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let emb = tree_embeddings(cfg, &mut rng);
    let mut chain = MarkovChain::new(cfg.n_items, cfg.transition_sharpness, cfg.seed);
    let mut interactions = Vec::new();
    for u in 0..cfg.n_users {
        let len = rng.random_range(cfg.seq_len_range.0..=cfg.seq_len_range.1);
        let mut cur = rng.random_range(0..cfg.n_items);
        for t in 0..len {
            if t > 0 {
                cur = chain.next(cur, &mut rng);
            }
            interactions.push(Interaction::new(user_name(u), item_name(cur), t as u64 + 1));
        }
    }
    Ok(SyntheticData {
        interactions,
        embeddings: emb.into_iter().enumerate().map(|(i, v)| (item_name(i), v)).collect(),
    })
}
