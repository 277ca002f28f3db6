//! Per-level embedding norms and encoder attention maps.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::dual_branch::Side;
use crate::nn::Ctx;
use crate::recommender::{pad_left, Recommender, ENCODER_SELF_ATTENTION};
use crate::tokenizer::{IdMap, RqVaeParams, EOS};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormSource {
    /// Codebook vectors `e_l^{c_l}` of the tokenizer.
    Code,
    /// Semantic-branch rows of each item's tokens.
    SemanticToken,
    /// Collaborative-branch rows, before fusion.
    CollaborativeToken,
}

impl NormSource {
    pub const ALL: [NormSource; 3] = [NormSource::Code, NormSource::SemanticToken, NormSource::CollaborativeToken];

    pub fn name(self) -> &'static str {
        match self {
            NormSource::Code => "code",
            NormSource::SemanticToken => "semantic_token",
            NormSource::CollaborativeToken => "collaborative_token",
        }
    }
}

impl fmt::Display for NormSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NormSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NormSource::ALL
            .into_iter()
            .find(|n| n.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown norm source `{s}`; valid: code, semantic_token, collaborative_token")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormProfile {
    pub source: NormSource,
    /// Mean Euclidean norm per level.
    pub values: Vec<f64>,
    /// Rank correlation of `values` with the level index; `None` when a side is constant.
    pub spearman: Option<f64>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `values[l]` = mean over items of `‖vectors[item][l]‖`.
pub fn norm_profile(source: NormSource, vectors: &[Vec<Vec<f64>>]) -> Result<NormProfile> {
    let Some(first) = vectors.first() else {
        return Err(Error::Invalid("norm profile of an empty catalog".into()));
    };
    let levels = first.len();
    let mut values = vec![0.0; levels];
    for item in vectors {
        if item.len() != levels {
            return Err(Error::DimMismatch { expected: levels, got: item.len() });
        }
        for (l, v) in item.iter().enumerate() {
            values[l] += norm(v);
        }
    }
    for v in values.iter_mut() {
        *v /= vectors.len() as f64;
    }
    let index: Vec<f64> = (1..=levels).map(|l| l as f64).collect();
    let spearman = spearman(&index, &values);
    Ok(NormProfile { source, values, spearman })
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            r[o] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman correlation: Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

/// Codebook vectors selected by each item's semantic ID.
pub fn code_vectors(params: &RqVaeParams, ids: &IdMap) -> Vec<Vec<Vec<f64>>> {
    ids.iter()
        .map(|(_, codes)| codes.iter().enumerate().map(|(l, &c)| params.codebooks.entry(l, c as usize).to_vec()).collect())
        .collect()
}

/// Semantic- and collaborative-branch rows for every item, each item run
/// alone as `[c_1..c_L, EOS]` on the encoder side. Models without the module
/// yield raw token rows and no collaborative rows.
#[allow(clippy::type_complexity)]
pub fn branch_vectors(model: &Recommender, ids: &IdMap) -> Result<(Vec<Vec<Vec<f64>>>, Option<Vec<Vec<Vec<f64>>>>)> {
    let levels = model.vocab.levels;
    let rows: Vec<Vec<u32>> = ids
        .iter()
        .map(|(_, c)| {
            let mut t = model.vocab.item_tokens(c);
            t.push(EOS);
            t
        })
        .collect();
    let to_items = |t: &Tensor| -> Result<Vec<Vec<Vec<f64>>>> {
        let v: Vec<Vec<Vec<f64>>> = t.to_dtype(DType::F64)?.to_vec3()?;
        Ok(v.into_iter().map(|mut item| {
            item.truncate(levels);
            item
        }).collect())
    };
    let mut semantic = Vec::new();
    let mut collaborative = Vec::new();
    let module = model.embedding_module();
    for chunk in rows.chunks(256) {
        let e = model.embed_tokens(chunk)?;
        match module {
            Some(m) => {
                let out = m.forward(&e, chunk, &model.vocab, Side::Encoder, &Ctx::eval())?;
                semantic.extend(to_items(&out.semantic)?);
                collaborative.extend(to_items(&out.collaborative)?);
            }
            None => semantic.extend(to_items(&e)?),
        }
    }
    Ok((semantic, module.map(|_| collaborative)))
}

/// Rows of the raw token table gathered by each item's code tokens.
pub fn token_table_vectors(model: &Recommender, ids: &IdMap) -> Result<Vec<Vec<Vec<f64>>>> {
    let table: Vec<Vec<f64>> = model.embed.to_dtype(DType::F64)?.to_vec2()?;
    Ok(ids.iter().map(|(_, c)| model.vocab.item_tokens(c).iter().map(|&t| table[t as usize].clone()).collect()).collect())
}

/// Every available profile: code (with a tokenizer), semantic, and
/// collaborative (with a module).
pub fn norm_profiles(tokenizer: Option<&RqVaeParams>, model: &Recommender, ids: &IdMap) -> Result<Vec<NormProfile>> {
    let mut out = Vec::new();
    if let Some(p) = tokenizer {
        out.push(norm_profile(NormSource::Code, &code_vectors(p, ids))?);
    }
    let (semantic, collaborative) = branch_vectors(model, ids)?;
    out.push(norm_profile(NormSource::SemanticToken, &semantic)?);
    if let Some(c) = collaborative {
        out.push(norm_profile(NormSource::CollaborativeToken, &c)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CropAnchor {
    #[default]
    Start,
    End,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapBundle {
    /// One `crop × crop` matrix per encoder layer.
    pub layers: Vec<Vec<Vec<f64>>>,
    pub seq_len: usize,
    pub crop: usize,
    /// Requested crop exceeded the sequence length.
    pub clamped: bool,
}

/// Head-average `[B, H, S, S]` probabilities, then average over samples.
pub fn average_maps(probs: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(probs.to_dtype(DType::F64)?.mean(1)?.mean(0)?.to_vec2()?)
}

pub fn crop_matrix(m: &[Vec<f64>], crop: usize, anchor: CropAnchor) -> Vec<Vec<f64>> {
    let start = match anchor {
        CropAnchor::Start => 0,
        CropAnchor::End => m.len() - crop,
    };
    m[start..start + crop].iter().map(|r| r[start..start + crop].to_vec()).collect()
}

/// Encoder self-attention per layer for left-padded `inputs`, averaged over
/// heads and samples, then cropped.
pub fn attention_heatmaps(model: &Recommender, inputs: &[Vec<u32>], crop: usize, anchor: CropAnchor) -> Result<HeatmapBundle> {
    if inputs.is_empty() || crop == 0 {
        return Err(Error::Invalid("heatmaps need at least one input and a positive crop".into()));
    }
    let batch = pad_left(inputs);
    let ctx = Ctx::capturing(ENCODER_SELF_ATTENTION);
    model.encode(&batch, &ctx)?;
    let maps = ctx.take_captured();
    let seq_len = batch[0].len();
    let used = crop.min(seq_len);
    if used < crop {
        log::warn!("crop {crop} exceeds sequence length {seq_len}; clamped to {used}");
    }
    let layers = maps
        .iter()
        .map(|p| Ok(crop_matrix(&average_maps(p)?, used, anchor)))
        .collect::<Result<Vec<_>>>()?;
    Ok(HeatmapBundle { layers, seq_len, crop: used, clamped: used < crop })
}

pub fn profile_csv(p: &NormProfile) -> String {
    let mut s = String::from("level,mean_norm\n");
    for (l, v) in p.values.iter().enumerate() {
        s.push_str(&format!("{},{v}\n", l + 1));
    }
    s
}

pub fn matrix_csv(m: &[Vec<f64>]) -> String {
    let mut s = String::new();
    for row in m {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

pub fn parse_matrix_csv(text: &str) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            line.split(',')
                .map(|c| c.parse::<f64>().map_err(|e| Error::Parse { path: "matrix".into(), line: i + 1, msg: e.to_string() }))
                .collect()
        })
        .collect()
}

fn write(path: PathBuf, text: &str) -> Result<PathBuf> {
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// `norms_{source}.csv`, `norms.json` and `heatmap_layer{n}.csv` (1-based).
pub fn export(profiles: &[NormProfile], heatmaps: Option<&HeatmapBundle>, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for p in profiles {
        written.push(write(out_dir.join(format!("norms_{}.csv", p.source)), &profile_csv(p))?);
    }
    if !profiles.is_empty() {
        let mut json = serde_json::to_string_pretty(profiles)?;
        json.push('\n');
        written.push(write(out_dir.join("norms.json"), &json)?);
    }
    if let Some(h) = heatmaps {
        for (i, m) in h.layers.iter().enumerate() {
            written.push(write(out_dir.join(format!("heatmap_layer{}.csv", i + 1)), &matrix_csv(m))?);
        }
    }
    Ok(written)
}
