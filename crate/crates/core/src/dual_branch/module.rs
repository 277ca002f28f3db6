use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use super::layout::{ipe_rows, item_local_mask, item_membership};
use crate::nn::layers::{scaled_attention, softmax_last};
use crate::nn::{Ctx, FeedForward, Linear, MultiHeadAttention, ParamStore, RmsNorm};
use crate::tokenizer::{TokenVocabulary, PAD};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DualBranchConfig {
    pub heads: usize,
    pub head_dim: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub gate_std: f64,
    /// Encoder and decoder sides use one set of branch weights and gates.
    pub share_sides: bool,
}

impl Default for DualBranchConfig {
    fn default() -> Self {
        Self { heads: 2, head_dim: 64, hidden: 1024, dropout: 0.1, gate_std: 0.02, share_sides: false }
    }
}

/// How the collaborative branch aggregates within an item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregation {
    /// Item-local self-attention.
    SelfAttention,
    /// One learned query attends to the item's tokens.
    OneQuery,
    /// Branch outputs averaged over the item's visible tokens.
    TokenAvg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Fusion {
    /// Softmax over inner products with learned gate vectors.
    Gate,
    /// Plain sum of the two branches.
    Sum,
    /// Each branch rescaled by a sigmoid of a linear map of itself, then summed.
    SelfGate,
}

/// Structural switches used by the ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchOptions {
    pub use_ipe: bool,
    /// When false the collaborative branch is just `E + V`.
    pub transformer: bool,
    pub aggregation: Aggregation,
    pub fusion: Fusion,
}

impl Default for BranchOptions {
    fn default() -> Self {
        Self { use_ipe: true, transformer: true, aggregation: Aggregation::SelfAttention, fusion: Fusion::Gate }
    }
}

/// Test hook pinning the fusion weights to one branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GateOverride {
    #[default]
    None,
    Semantic,
    Collaborative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Encoder,
    Decoder,
}

/// One pre-norm attention block with residual connections.
#[derive(Clone)]
pub struct BranchTransformer {
    pub norm1: RmsNorm,
    pub attn: MultiHeadAttention,
    pub norm2: RmsNorm,
    pub ffn: FeedForward,
    pub query: Option<Tensor>,
    pub dropout: f64,
}

impl BranchTransformer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, cfg: &DualBranchConfig, one_query: bool) -> Result<Self> {
        let std = (1.0 / dim as f64).sqrt();
        let inner = cfg.heads * cfg.head_dim;
        Ok(Self {
            norm1: RmsNorm::new(store, &format!("{name}.norm1"), dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, cfg.heads, cfg.head_dim, 0.0, std, "branch")?,
            norm2: RmsNorm::new(store, &format!("{name}.norm2"), dim)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, cfg.hidden, 0.0, std)?,
            query: if one_query { Some(store.normal(&format!("{name}.query"), &[inner], std)?) } else { None },
            dropout: cfg.dropout,
        })
    }

    /// `mask` broadcasts to `[B, H, S, S]`.
    pub fn forward(&self, x: &Tensor, mask: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let h = self.norm1.forward(x)?;
        let a = self.attn.forward(&h, &h, Some(mask), self.query.as_ref(), ctx)?;
        let x = (x + ctx.dropout(&a, self.dropout)?)?;
        let f = self.ffn.forward(&self.norm2.forward(&x)?, ctx)?;
        Ok((&x + ctx.dropout(&f, self.dropout)?)?)
    }
}

/// `softmax(Q Kᵀ/√d_k + W) V` for `[B, H, S, d_k]` inputs.
pub fn localized_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: &Tensor) -> Result<Tensor> {
    scaled_attention(q, k, v, Some(mask), &Ctx::eval(), 0.0, "")
}

/// Fusion weights `[.., 2]` from the two branch scores.
pub fn fusion_weights(b_seman: &Tensor, b_colla: &Tensor, g_seman: &Tensor, g_colla: &Tensor) -> Result<Tensor> {
    let ss = b_seman.broadcast_mul(g_seman)?.sum_keepdim(D::Minus1)?;
    let sc = b_colla.broadcast_mul(g_colla)?.sum_keepdim(D::Minus1)?;
    softmax_last(&Tensor::cat(&[&ss, &sc], D::Minus1)?)
}

/// Convex combination of the two branches by `weights` `[.., 2]`.
pub fn combine(b_seman: &Tensor, b_colla: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let s0 = weights.narrow(D::Minus1, 0, 1)?;
    let s1 = weights.narrow(D::Minus1, 1, 1)?;
    Ok((b_seman.broadcast_mul(&s0)? + b_colla.broadcast_mul(&s1)?)?)
}

pub fn fuse(b_seman: &Tensor, b_colla: &Tensor, g_seman: &Tensor, g_colla: &Tensor) -> Result<Tensor> {
    combine(b_seman, b_colla, &fusion_weights(b_seman, b_colla, g_seman, g_colla)?)
}

/// Additive item-local masks `[B, 1, S, S]` for a token batch.
pub fn batch_mask(tokens: &[Vec<u32>], levels: usize, causal: bool, dtype: DType) -> Result<Tensor> {
    let s = tokens.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(tokens.len() * s * s);
    for row in tokens {
        data.extend(item_local_mask(&item_membership(row, levels), causal).data);
    }
    Ok(Tensor::from_vec(data, (tokens.len(), 1, s, s), &Device::Cpu)?.to_dtype(dtype)?)
}

/// `[B, S, 1]` with 1 on real tokens and 0 on PAD.
pub fn non_pad(tokens: &[Vec<u32>], dtype: DType) -> Result<Tensor> {
    let s = tokens.first().map_or(0, Vec::len);
    let data: Vec<f64> = tokens.iter().flatten().map(|&t| if t == PAD { 0.0 } else { 1.0 }).collect();
    Ok(Tensor::from_vec(data, (tokens.len(), s, 1), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Intermediate results of one module application.
pub struct BranchOutput {
    pub fused: Tensor,
    pub semantic: Tensor,
    pub collaborative: Tensor,
    /// Fusion weights `[B, S, 2]` when the gate is active.
    pub weights: Option<Tensor>,
}

/// One side's branch weights and fusion parameters.
#[derive(Clone)]
pub struct DualBranch {
    pub transformer: Option<BranchTransformer>,
    pub g_seman: Option<Tensor>,
    pub g_colla: Option<Tensor>,
    pub self_gates: Option<(Linear, Linear)>,
    pub options: BranchOptions,
    pub gate_override: GateOverride,
}

impl DualBranch {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        cfg: &DualBranchConfig,
        options: BranchOptions,
    ) -> Result<Self> {
        let transformer = if options.transformer {
            let one_query = options.aggregation == Aggregation::OneQuery;
            Some(BranchTransformer::new(store, &format!("{name}.branch"), dim, cfg, one_query)?)
        } else {
            None
        };
        let (g_seman, g_colla, self_gates) = match options.fusion {
            Fusion::Gate => (
                Some(store.normal(&format!("{name}.gate_seman"), &[dim], cfg.gate_std)?),
                Some(store.normal(&format!("{name}.gate_colla"), &[dim], cfg.gate_std)?),
                None,
            ),
            Fusion::SelfGate => {
                let std = (1.0 / dim as f64).sqrt();
                (
                    None,
                    None,
                    Some((
                        Linear::new(store, &format!("{name}.self_gate_seman"), dim, dim, true, std)?,
                        Linear::new(store, &format!("{name}.self_gate_colla"), dim, dim, true, std)?,
                    )),
                )
            }
            Fusion::Sum => (None, None, None),
        };
        Ok(Self { transformer, g_seman, g_colla, self_gates, options, gate_override: GateOverride::None })
    }

    /// Collaborative branch on `E + V` under `mask`.
    pub fn collaborative(&self, e: &Tensor, v: &Tensor, mask: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let x = (e + v)?;
        let Some(tf) = &self.transformer else { return Ok(x) };
        let out = tf.forward(&x, mask, ctx)?;
        if self.options.aggregation == Aggregation::TokenAvg {
            // uniform weights over each row's visible positions
            let w = softmax_last(mask)?.squeeze(1)?;
            return Ok(w.matmul(&out)?);
        }
        Ok(out)
    }

    fn fuse_branches(&self, bs: &Tensor, bc: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
        match self.options.fusion {
            Fusion::Sum => Ok(((bs + bc)?, None)),
            Fusion::SelfGate => {
                let (ls, lc) = self.self_gates.as_ref().expect("self gates built");
                let s = (candle_nn::ops::sigmoid(&ls.forward(bs)?)? * bs)?;
                let c = (candle_nn::ops::sigmoid(&lc.forward(bc)?)? * bc)?;
                Ok(((s + c)?, None))
            }
            Fusion::Gate => {
                let (gs, gc) = (self.g_seman.as_ref().expect("gate"), self.g_colla.as_ref().expect("gate"));
                let w = match self.gate_override {
                    GateOverride::None => fusion_weights(bs, bc, gs, gc)?,
                    forced => {
                        let (a, b) = if forced == GateOverride::Semantic { (1.0, 0.0) } else { (0.0, 1.0) };
                        let dims = bs.dims();
                        let pair = Tensor::new(&[a, b], bs.device())?.to_dtype(bs.dtype())?;
                        let mut shape = dims[..dims.len() - 1].to_vec();
                        shape.push(2);
                        pair.broadcast_as(shape)?.contiguous()?
                    }
                };
                Ok((combine(bs, bc, &w)?, Some(w)))
            }
        }
    }

    /// Apply the module to embeddings `e` `[B, S, D]` of `tokens`. PAD rows
    /// pass through unchanged.
    pub fn forward(
        &self,
        e: &Tensor,
        tokens: &[Vec<u32>],
        ipe: Option<&Tensor>,
        vocab: &TokenVocabulary,
        side: Side,
        ctx: &Ctx,
    ) -> Result<BranchOutput> {
        let (b, s, d) = e.dims3()?;
        let v = match ipe.filter(|_| self.options.use_ipe) {
            Some(table) => {
                let rows: Vec<u32> = tokens.iter().flat_map(|t| ipe_rows(t, vocab)).collect();
                let idx = Tensor::from_vec(rows, b * s, e.device())?;
                table.index_select(&idx, 0)?.reshape((b, s, d))?
            }
            None => e.zeros_like()?,
        };
        let mask = batch_mask(tokens, vocab.levels, side == Side::Decoder, e.dtype())?;
        let colla = self.collaborative(e, &v, &mask, ctx)?;
        let (fused, weights) = self.fuse_branches(e, &colla)?;
        let keep = non_pad(tokens, e.dtype())?;
        let fused = (fused.broadcast_mul(&keep)? + e.broadcast_mul(&(1.0 - &keep)?)?)?;
        Ok(BranchOutput { fused, semantic: e.clone(), collaborative: colla, weights })
    }
}

/// The shared IPE table plus encoder- and decoder-side branches.
#[derive(Clone)]
pub struct DualBranchModule {
    pub ipe: Option<Tensor>,
    pub encoder: DualBranch,
    pub decoder: DualBranch,
}

impl DualBranchModule {
    /// Parameters live under `name`; the IPE table is registered by the caller
    /// so several modules (one per layer) can share it.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        cfg: &DualBranchConfig,
        options: BranchOptions,
        ipe: Option<Tensor>,
    ) -> Result<Self> {
        let encoder = DualBranch::new(store, &format!("{name}.enc"), dim, cfg, options)?;
        let decoder =
            if cfg.share_sides { encoder.clone() } else { DualBranch::new(store, &format!("{name}.dec"), dim, cfg, options)? };
        Ok(Self { ipe: ipe.filter(|_| options.use_ipe), encoder, decoder })
    }

    pub fn register_ipe(store: &mut ParamStore, levels: usize, dim: usize) -> Result<Tensor> {
        store.normal("ipe.table", &[levels + 2, dim], 1.0 / (dim as f64).sqrt())
    }

    pub fn side(&self, side: Side) -> &DualBranch {
        match side {
            Side::Encoder => &self.encoder,
            Side::Decoder => &self.decoder,
        }
    }

    pub fn set_gate_override(&mut self, o: GateOverride) {
        self.encoder.gate_override = o;
        self.decoder.gate_override = o;
    }

    pub fn forward(
        &self,
        e: &Tensor,
        tokens: &[Vec<u32>],
        vocab: &TokenVocabulary,
        side: Side,
        ctx: &Ctx,
    ) -> Result<BranchOutput> {
        self.side(side).forward(e, tokens, self.ipe.as_ref(), vocab, side, ctx)
    }
}
