//! Ranked next-item generation: prefix-tree constrained beam search and an
//! exhaustive scorer over the whole catalog.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::io::Write;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::nn::layers::log_softmax_last;
use crate::nn::Ctx;
use crate::recommender::Recommender;
use crate::tokenizer::{IdMap, PrefixTree, BOS};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Score every catalog item instead of running beam search.
    pub exhaustive: bool,
    /// Prefixes scored per decoder call.
    pub chunk: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { beam_size: 20, exhaustive: false, chunk: 32 }
    }
}

/// Items in rank order with their summed log-probabilities and code paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPrediction {
    pub items: Vec<String>,
    pub scores: Vec<f64>,
    pub codes: Vec<Vec<u32>>,
}

impl RankedPrediction {
    /// 1-based rank of `item`, if present.
    pub fn rank_of(&self, item: &str) -> Option<usize> {
        self.items.iter().position(|i| i == item).map(|p| p + 1)
    }
}

/// Per-step log-distributions for one encoder input. Every prefix is scored
/// with the same fixed-length decoder input and the same chunk layout, so a
/// prefix always gets the same numbers however it is reached.
pub struct StepScorer<'a> {
    model: &'a Recommender,
    memory: Tensor,
    enc: Vec<Vec<u32>>,
    chunk: usize,
    cache: HashMap<Vec<u32>, Vec<f64>>,
}

impl<'a> StepScorer<'a> {
    pub fn new(model: &'a Recommender, input: &[u32], chunk: usize) -> Result<Self> {
        let chunk = chunk.max(1);
        let enc = vec![input.to_vec()];
        let memory = model.encode(&enc, &Ctx::eval())?;
        let s = input.len();
        let d = memory.dim(2)?;
        let memory = memory.broadcast_as((chunk, s, d))?.contiguous()?;
        Ok(Self { model, memory, enc: vec![input.to_vec(); chunk], chunk, cache: HashMap::new() })
    }

    fn decoder_row(&self, prefix: &[u32]) -> Vec<u32> {
        let vocab = &self.model.vocab;
        let mut row = vec![BOS];
        for l in 0..vocab.levels {
            row.push(vocab.token(l, prefix.get(l).copied().unwrap_or(0)));
        }
        row
    }

    /// Log-probabilities over the vocabulary for the code following each prefix.
    pub fn log_probs(&mut self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        let levels = self.model.vocab.levels;
        let mut missing: Vec<Vec<u32>> = Vec::new();
        for p in prefixes {
            if p.len() >= levels {
                return Err(Error::Invalid(format!("prefix of length {} has no next step", p.len())));
            }
            if !self.cache.contains_key(p) && !missing.contains(p) {
                missing.push(p.clone());
            }
        }
        missing.sort();
        for group in missing.chunks(self.chunk) {
            let mut rows: Vec<Vec<u32>> = group.iter().map(|p| self.decoder_row(p)).collect();
            rows.resize(self.chunk, rows[rows.len() - 1].clone());
            let h = self.model.decode(&self.memory, &self.enc, &rows, &Ctx::eval())?;
            let logits = self.model.token_logits(&h)?;
            let lp = log_softmax_last(&logits)?.to_dtype(DType::F64)?;
            for (i, p) in group.iter().enumerate() {
                let row: Vec<f64> = lp.get(i)?.get(p.len())?.to_vec1()?;
                self.cache.insert(p.clone(), row);
            }
        }
        Ok(prefixes.iter().map(|p| self.cache[p].clone()).collect())
    }
}

fn by_score_then_path(a: &(Vec<u32>, f64), b: &(Vec<u32>, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

fn finish(mut paths: Vec<(Vec<u32>, f64)>, trie: &PrefixTree) -> Result<RankedPrediction> {
    paths.sort_by(by_score_then_path);
    let mut out = RankedPrediction { items: Vec::new(), scores: Vec::new(), codes: Vec::new() };
    for (codes, score) in paths {
        let item = trie.lookup(&codes).ok_or_else(|| Error::Invalid(format!("path {codes:?} is not a catalog item")))?;
        out.items.push(item.to_string());
        out.scores.push(score);
        out.codes.push(codes);
    }
    Ok(out)
}

/// Beam search over `L` steps; expansions are limited to trie children of
/// each hypothesis. Scores are summed full-vocabulary log-probabilities.
pub fn constrained_beam_search(
    model: &Recommender,
    input: &[u32],
    trie: &PrefixTree,
    beam_size: usize,
    chunk: usize,
) -> Result<RankedPrediction> {
    if trie.is_empty() {
        return Err(Error::Invalid("prefix tree is empty".into()));
    }
    if beam_size == 0 {
        return Err(Error::Config("beam_size must be at least 1".into()));
    }
    let mut scorer = StepScorer::new(model, input, chunk)?;
    let mut beam: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
    for level in 0..trie.depth() {
        let prefixes: Vec<Vec<u32>> = beam.iter().map(|(p, _)| p.clone()).collect();
        let lps = scorer.log_probs(&prefixes)?;
        let mut next = Vec::new();
        for ((prefix, score), lp) in beam.iter().zip(&lps) {
            for code in trie.children(prefix) {
                let mut path = prefix.clone();
                path.push(code);
                next.push((path, score + lp[model.vocab.token(level, code) as usize]));
            }
        }
        next.sort_by(by_score_then_path);
        next.truncate(beam_size);
        beam = next;
    }
    finish(beam, trie)
}

/// Score every item of `ids` by its summed per-step log-probabilities.
pub fn exhaustive_rank(model: &Recommender, input: &[u32], ids: &IdMap, chunk: usize) -> Result<RankedPrediction> {
    let trie = PrefixTree::build(ids)?;
    let mut scorer = StepScorer::new(model, input, chunk)?;
    for level in 0..trie.depth() {
        let prefixes: Vec<Vec<u32>> = ids.iter().map(|(_, c)| c[..level].to_vec()).collect();
        scorer.log_probs(&prefixes)?;
    }
    let mut paths = Vec::with_capacity(ids.len());
    for (_, codes) in ids.iter() {
        let mut score = 0.0;
        for level in 0..codes.len() {
            let lp = scorer.log_probs(&[codes[..level].to_vec()])?;
            score += lp[0][model.vocab.token(level, codes[level]) as usize];
        }
        paths.push((codes.to_vec(), score));
    }
    finish(paths, &trie)
}

/// Rank the catalog for one history.
pub fn rank(model: &Recommender, history: &[String], ids: &IdMap, trie: &PrefixTree, cfg: &DecodeConfig) -> Result<RankedPrediction> {
    let input = model.input_tokens(history, ids)?;
    if cfg.exhaustive {
        exhaustive_rank(model, &input, ids, cfg.chunk)
    } else {
        constrained_beam_search(model, &input, trie, cfg.beam_size, cfg.chunk)
    }
}

pub fn predict_all(model: &Recommender, samples: &[Sample], ids: &IdMap, cfg: &DecodeConfig) -> Result<Vec<RankedPrediction>> {
    let trie = PrefixTree::build(ids)?;
    samples.iter().map(|s| rank(model, &s.history, ids, &trie, cfg)).collect()
}

#[derive(Serialize)]
struct DumpLine<'a> {
    user: &'a str,
    ranked_items: &'a [String],
    scores: &'a [f64],
}

/// One JSON object per line: `{"user", "ranked_items", "scores"}`.
pub fn write_predictions<W: Write>(out: &mut W, samples: &[Sample], predictions: &[RankedPrediction]) -> Result<()> {
    for (s, p) in samples.iter().zip(predictions) {
        let line = DumpLine { user: &s.user, ranked_items: &p.items, scores: &p.scores };
        serde_json::to_writer(&mut *out, &line)?;
        writeln!(out).map_err(|e| Error::io("predictions", e))?;
    }
    Ok(())
}
