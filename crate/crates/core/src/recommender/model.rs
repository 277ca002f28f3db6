use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use super::backbone::{DecoderLayer, EncoderLayer};
use super::config::{Precision, RecommenderConfig, Variant};
use crate::dual_branch::{DualBranchModule, Side};
use crate::nn::layers::log_softmax_last;
use crate::nn::{Checkpoint, Ctx, ParamStore, RelativePositionBias, RmsNorm};
use crate::tokenizer::{IdMap, TokenVocabulary, BOS, EOS, NUM_SPECIALS, PAD};
use crate::{Error, Result};

/// Encoder–decoder generator over semantic-ID tokens, with the variant's
/// embedding-layer modifications.
pub struct Recommender {
    pub config: RecommenderConfig,
    pub store: ParamStore,
    pub vocab: TokenVocabulary,
    /// Token table `O`, `[V, D]`; also the output projection.
    pub embed: Tensor,
    pub item_embed: Option<Tensor>,
    pub pos_embed: Option<Tensor>,
    pub dual: Option<DualBranchModule>,
    /// One module per backbone layer (`AllLayer`).
    pub layer_duals: Vec<DualBranchModule>,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub enc_rel: RelativePositionBias,
    pub dec_rel: RelativePositionBias,
    pub enc_norm: RmsNorm,
    pub dec_norm: RmsNorm,
    /// When false the embedding-layer module is skipped (test hook).
    pub module_enabled: bool,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    kind: String,
    config: RecommenderConfig,
    meta: serde_json::Value,
}

pub fn build_variant(config: &RecommenderConfig) -> Result<Recommender> {
    Recommender::new(config.clone())
}

impl Recommender {
    pub fn new(config: RecommenderConfig) -> Result<Self> {
        config.validate()?;
        let dtype = match config.precision {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        };
        let mut store = ParamStore::new(dtype, config.seed);
        let vocab = TokenVocabulary::new(config.levels, config.codebook_size);
        let b = &config.backbone;
        let std = (1.0 / b.dim as f64).sqrt();
        let embed = store.normal("embed.table", &[vocab.size(), b.dim], std)?;
        let variant = config.variant;
        let item_embed = if variant == Variant::WithIE {
            Some(store.normal("item_embed.table", &[config.n_items.max(1), b.dim], std)?)
        } else {
            None
        };
        let pos_embed = if variant == Variant::WithPE {
            let rows = (config.max_len * config.levels + 1).max(config.levels + 1);
            Some(store.normal("pos_embed.table", &[rows, b.dim], std)?)
        } else {
            None
        };
        let options = variant.branch_options();
        let ipe = match options {
            Some(o) if o.use_ipe => Some(DualBranchModule::register_ipe(&mut store, config.levels, b.dim)?),
            _ => None,
        };
        let mut dual = None;
        let mut layer_duals = Vec::new();
        if let Some(o) = options {
            if variant == Variant::AllLayer {
                for i in 0..b.layers {
                    layer_duals.push(DualBranchModule::new(&mut store, &format!("dual.{i}"), b.dim, &config.branch, o, ipe.clone())?);
                }
            } else {
                dual = Some(DualBranchModule::new(&mut store, "dual", b.dim, &config.branch, o, ipe)?);
            }
        }
        let encoder =
            (0..b.layers).map(|i| EncoderLayer::new(&mut store, &format!("encoder.{i}"), b)).collect::<Result<Vec<_>>>()?;
        let decoder =
            (0..b.layers).map(|i| DecoderLayer::new(&mut store, &format!("decoder.{i}"), b)).collect::<Result<Vec<_>>>()?;
        let enc_rel = RelativePositionBias::new(
            &mut store,
            "encoder.relative_bias",
            b.heads,
            b.relative_buckets,
            b.relative_max_distance,
            true,
            0.02,
        )?;
        let dec_rel = RelativePositionBias::new(
            &mut store,
            "decoder.relative_bias",
            b.heads,
            b.relative_buckets,
            b.relative_max_distance,
            false,
            0.02,
        )?;
        let enc_norm = RmsNorm::new(&mut store, "encoder.final_norm", b.dim)?;
        let dec_norm = RmsNorm::new(&mut store, "decoder.final_norm", b.dim)?;
        Ok(Self {
            config,
            store,
            vocab,
            embed,
            item_embed,
            pos_embed,
            dual,
            layer_duals,
            encoder,
            decoder,
            enc_rel,
            dec_rel,
            enc_norm,
            dec_norm,
            module_enabled: true,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// The module applied to token embeddings (the first layer's for `AllLayer`).
    pub fn embedding_module(&self) -> Option<&DualBranchModule> {
        self.dual.as_ref().or(self.layer_duals.first())
    }

    pub fn embedding_module_mut(&mut self) -> Option<&mut DualBranchModule> {
        match self.dual.as_mut() {
            Some(d) => Some(d),
            None => self.layer_duals.first_mut(),
        }
    }

    /// Encoder token ids for a history: the most recent `max_len` items'
    /// code tokens (each followed by its item-ID token for `WithIE`), then EOS.
    pub fn input_tokens<S: AsRef<str>>(&self, history: &[S], ids: &IdMap) -> Result<Vec<u32>> {
        let recent = &history[history.len().saturating_sub(self.config.max_len)..];
        let mut out = Vec::new();
        for item in recent {
            out.extend(self.vocab.tokenize_target(item.as_ref(), ids)?);
            if self.item_embed.is_some() {
                let idx = ids.item_index(item.as_ref()).ok_or_else(|| Error::UnknownItem(item.as_ref().to_string()))?;
                out.push(self.vocab.size() as u32 + idx as u32);
            }
        }
        out.push(EOS);
        Ok(out)
    }

    /// Decoder input `[BOS, y_1..y_L]` for target code tokens.
    pub fn decoder_input(&self, target: &[u32]) -> Vec<u32> {
        std::iter::once(BOS).chain(target.iter().copied()).collect()
    }

    fn table_rows(&self) -> usize {
        self.vocab.size() + self.item_embed.as_ref().map_or(0, |t| t.dims()[0])
    }

    /// Gather embedding rows for a rectangular token batch, `[B, S, D]`.
    pub fn embed_tokens(&self, tokens: &[Vec<u32>]) -> Result<Tensor> {
        let s = tokens.first().map_or(0, Vec::len);
        let limit = self.table_rows();
        let mut flat = Vec::with_capacity(tokens.len() * s);
        for row in tokens {
            if row.len() != s {
                return Err(Error::DimMismatch { expected: s, got: row.len() });
            }
            for &t in row {
                if t as usize >= limit {
                    return Err(Error::Invalid(format!("token id {t} outside a table of {limit} rows")));
                }
                flat.push(t);
            }
        }
        let idx = Tensor::from_vec(flat, tokens.len() * s, &Device::Cpu)?;
        let table = match &self.item_embed {
            Some(items) => Tensor::cat(&[&self.embed, items], 0)?,
            None => self.embed.clone(),
        };
        Ok(table.index_select(&idx, 0)?.reshape((tokens.len(), s, self.config.backbone.dim))?)
    }

    /// Rows of `O` for `[X..., EOS]`.
    pub fn embed_input(&self, x: &[u32]) -> Result<Tensor> {
        let mut t = x.to_vec();
        t.push(EOS);
        Ok(self.embed_tokens(&[t])?.squeeze(0)?)
    }

    /// Rows of `O` for `[BOS, Y...]`.
    pub fn embed_target(&self, y: &[u32]) -> Result<Tensor> {
        Ok(self.embed_tokens(&[self.decoder_input(y)])?.squeeze(0)?)
    }

    fn add_positions(&self, e: &Tensor, tokens: &[Vec<u32>]) -> Result<Tensor> {
        let Some(table) = &self.pos_embed else { return Ok(e.clone()) };
        let rows = table.dims()[0];
        let (b, s, d) = e.dims3()?;
        let mut idx = Vec::with_capacity(b * s);
        for row in tokens {
            let start = row.iter().position(|&t| t != PAD).unwrap_or(row.len());
            for p in 0..row.len() {
                idx.push((p.saturating_sub(start)).min(rows - 1) as u32);
            }
        }
        let idx = Tensor::from_vec(idx, b * s, e.device())?;
        let pos = table.index_select(&idx, 0)?.reshape((b, s, d))?;
        let keep = crate::dual_branch::non_pad(tokens, e.dtype())?;
        Ok((e + pos.broadcast_mul(&keep)?)?)
    }

    fn apply_module(&self, e: &Tensor, tokens: &[Vec<u32>], side: Side, ctx: &Ctx) -> Result<Tensor> {
        match (&self.dual, self.module_enabled) {
            (Some(m), true) => Ok(m.forward(e, tokens, &self.vocab, side, ctx)?.fused),
            _ => Ok(e.clone()),
        }
    }

    /// Encoder input embeddings after the embedding-layer modifications.
    pub fn encoder_inputs(&self, tokens: &[Vec<u32>], ctx: &Ctx) -> Result<Tensor> {
        let e = self.embed_tokens(tokens)?;
        let e = self.apply_module(&e, tokens, Side::Encoder, ctx)?;
        let e = self.add_positions(&e, tokens)?;
        ctx.dropout(&e, self.config.backbone.dropout)
    }

    fn decoder_inputs(&self, tokens: &[Vec<u32>], ctx: &Ctx) -> Result<Tensor> {
        let e = self.embed_tokens(tokens)?;
        let e = self.apply_module(&e, tokens, Side::Decoder, ctx)?;
        let e = self.add_positions(&e, tokens)?;
        ctx.dropout(&e, self.config.backbone.dropout)
    }

    /// `[B, 1, S, S]`: PAD keys hidden from every other query.
    fn encoder_pad_bias(&self, tokens: &[Vec<u32>]) -> Result<Tensor> {
        let s = tokens.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(tokens.len() * s * s);
        for row in tokens {
            for i in 0..s {
                for (j, &t) in row.iter().enumerate() {
                    data.push(if t == PAD && i != j { f64::NEG_INFINITY } else { 0.0 });
                }
            }
        }
        Ok(Tensor::from_vec(data, (tokens.len(), 1, s, s), &Device::Cpu)?.to_dtype(self.dtype())?)
    }

    /// `[B, 1, 1, S]`: PAD keys hidden from decoder queries.
    fn cross_bias(&self, tokens: &[Vec<u32>]) -> Result<Tensor> {
        let s = tokens.first().map_or(0, Vec::len);
        let data: Vec<f64> =
            tokens.iter().flatten().map(|&t| if t == PAD { f64::NEG_INFINITY } else { 0.0 }).collect();
        Ok(Tensor::from_vec(data, (tokens.len(), 1, 1, s), &Device::Cpu)?.to_dtype(self.dtype())?)
    }

    fn causal_bias(&self, t: usize) -> Result<Tensor> {
        let data: Vec<f64> =
            (0..t * t).map(|k| if k % t > k / t { f64::NEG_INFINITY } else { 0.0 }).collect();
        Ok(Tensor::from_vec(data, (1, 1, t, t), &Device::Cpu)?.to_dtype(self.dtype())?)
    }

    /// `H_Enc` for a left-padded token batch, `[B, S, D]`.
    pub fn encode(&self, tokens: &[Vec<u32>], ctx: &Ctx) -> Result<Tensor> {
        let mut x = self.encoder_inputs(tokens, ctx)?;
        let s = x.dim(1)?;
        let bias = self.enc_rel.forward(s, s)?.broadcast_add(&self.encoder_pad_bias(tokens)?)?;
        for (i, layer) in self.encoder.iter().enumerate() {
            if let Some(m) = self.layer_duals.get(i) {
                x = m.forward(&x, tokens, &self.vocab, Side::Encoder, ctx)?.fused;
            }
            x = layer.forward(&x, &bias, ctx)?;
        }
        self.enc_norm.forward(&x)
    }

    /// `H_Dec`, `[B, T, D]`, for decoder tokens attending to `memory`.
    pub fn decode(&self, memory: &Tensor, enc_tokens: &[Vec<u32>], dec_tokens: &[Vec<u32>], ctx: &Ctx) -> Result<Tensor> {
        let mut y = self.decoder_inputs(dec_tokens, ctx)?;
        let t = y.dim(1)?;
        let self_bias = self.dec_rel.forward(t, t)?.broadcast_add(&self.causal_bias(t)?)?;
        let cross = self.cross_bias(enc_tokens)?;
        for (i, layer) in self.decoder.iter().enumerate() {
            if let Some(m) = self.layer_duals.get(i) {
                y = m.forward(&y, dec_tokens, &self.vocab, Side::Decoder, ctx)?.fused;
            }
            y = layer.forward(&y, &self_bias, memory, &cross, ctx)?;
        }
        self.dec_norm.forward(&y)
    }

    /// Inner products with every row of `O`; specials get `−∞`.
    pub fn token_logits(&self, h: &Tensor) -> Result<Tensor> {
        let v = self.vocab.size();
        let logits = crate::nn::layers::matmul_last(h, &self.embed.t()?)?;
        let mask: Vec<f64> = (0..v).map(|i| if (i as u32) < NUM_SPECIALS { f64::NEG_INFINITY } else { 0.0 }).collect();
        let mask = Tensor::from_vec(mask, v, &Device::Cpu)?.to_dtype(self.dtype())?;
        Ok(logits.broadcast_add(&mask)?)
    }

    /// Logits `[B, L, V]` for teacher-forced decoding of `targets`.
    pub fn forward(&self, enc_tokens: &[Vec<u32>], targets: &[Vec<u32>], ctx: &Ctx) -> Result<Tensor> {
        let memory = self.encode(enc_tokens, ctx)?;
        let dec: Vec<Vec<u32>> = targets.iter().map(|y| self.decoder_input(y)).collect();
        let h = self.decode(&memory, enc_tokens, &dec, ctx)?;
        self.token_logits(&h.narrow(1, 0, self.config.levels)?)
    }

    /// Mean over the batch of the summed per-level negative log-likelihood.
    pub fn loss(&self, enc_tokens: &[Vec<u32>], targets: &[Vec<u32>], ctx: &Ctx) -> Result<Tensor> {
        rec_loss(&self.forward(enc_tokens, targets, ctx)?, targets)
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Result<Checkpoint> {
        let manifest = Manifest { kind: "recommender".into(), config: self.config.clone(), meta };
        self.store.to_checkpoint(serde_json::to_string(&manifest)?)
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        self.to_checkpoint(meta)?.save(path)
    }

    /// Rebuild a model from a checkpoint; returns the stored metadata too.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, serde_json::Value)> {
        let m: Manifest = serde_json::from_str(&ck.manifest)?;
        if m.kind != "recommender" {
            return Err(Error::Checkpoint(format!("expected a recommender checkpoint, found `{}`", m.kind)));
        }
        let model = Self::new(m.config)?;
        model.store.load_checkpoint(ck, true)?;
        Ok((model, m.meta))
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Copy every parameter that `ck` also has (same name and shape).
    pub fn load_matching(&self, ck: &Checkpoint) -> Result<usize> {
        self.store.load_checkpoint(ck, false)
    }
}

/// `−Σ_l log softmax(logits_l)[y_l]`, averaged over the batch.
pub fn rec_loss(logits: &Tensor, targets: &[Vec<u32>]) -> Result<Tensor> {
    let (b, l, _) = logits.dims3()?;
    let flat: Vec<u32> = targets.iter().flatten().copied().collect();
    if flat.len() != b * l {
        return Err(Error::DimMismatch { expected: b * l, got: flat.len() });
    }
    let idx = Tensor::from_vec(flat, (b, l, 1), logits.device())?;
    let picked = log_softmax_last(logits)?.gather(&idx, D::Minus1)?;
    Ok((picked.sum_all()? * (-1.0 / b as f64))?)
}

/// Left-pad token rows with PAD to a common length.
pub fn pad_left(rows: &[Vec<u32>]) -> Vec<Vec<u32>> {
    let s = rows.iter().map(Vec::len).max().unwrap_or(0);
    rows.iter()
        .map(|r| std::iter::repeat_n(PAD, s - r.len()).chain(r.iter().copied()).collect())
        .collect()
}
