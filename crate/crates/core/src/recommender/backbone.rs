use candle_core::Tensor;

use super::config::{Activation, BackboneConfig};
use crate::nn::{Ctx, FeedForward, MultiHeadAttention, ParamStore, RmsNorm};
use crate::Result;

pub const ENCODER_SELF_ATTENTION: &str = "enc.self";

fn ffn(store: &mut ParamStore, name: &str, cfg: &BackboneConfig, std: f64) -> Result<FeedForward> {
    let mut f = FeedForward::new(store, name, cfg.dim, cfg.ffn_dim, cfg.dropout, std)?;
    f.gelu = cfg.activation == Activation::Gelu;
    Ok(f)
}

/// Pre-norm encoder block: self-attention then feed-forward.
#[derive(Clone)]
pub struct EncoderLayer {
    pub norm1: RmsNorm,
    pub attn: MultiHeadAttention,
    pub norm2: RmsNorm,
    pub ffn: FeedForward,
    pub dropout: f64,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &BackboneConfig) -> Result<Self> {
        let std = (1.0 / cfg.dim as f64).sqrt();
        Ok(Self {
            norm1: RmsNorm::new(store, &format!("{name}.norm1"), cfg.dim)?,
            attn: MultiHeadAttention::new(
                store,
                &format!("{name}.self_attn"),
                cfg.dim,
                cfg.heads,
                cfg.head_dim,
                cfg.dropout,
                std,
                ENCODER_SELF_ATTENTION,
            )?,
            norm2: RmsNorm::new(store, &format!("{name}.norm2"), cfg.dim)?,
            ffn: ffn(store, &format!("{name}.ffn"), cfg, std)?,
            dropout: cfg.dropout,
        })
    }

    /// `bias` is relative position bias plus the padding mask, `[B|1, H, S, S]`.
    pub fn forward(&self, x: &Tensor, bias: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let h = self.norm1.forward(x)?;
        let a = self.attn.forward(&h, &h, Some(bias), None, ctx)?;
        let x = (x + ctx.dropout(&a, self.dropout)?)?;
        let f = self.ffn.forward(&self.norm2.forward(&x)?, ctx)?;
        Ok((&x + ctx.dropout(&f, self.dropout)?)?)
    }
}

/// Pre-norm decoder block: causal self-attention, cross-attention, feed-forward.
#[derive(Clone)]
pub struct DecoderLayer {
    pub norm1: RmsNorm,
    pub self_attn: MultiHeadAttention,
    pub norm2: RmsNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm3: RmsNorm,
    pub ffn: FeedForward,
    pub dropout: f64,
}

impl DecoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &BackboneConfig) -> Result<Self> {
        let std = (1.0 / cfg.dim as f64).sqrt();
        let attn = |store: &mut ParamStore, part: &str, tag: &'static str| {
            MultiHeadAttention::new(store, &format!("{name}.{part}"), cfg.dim, cfg.heads, cfg.head_dim, cfg.dropout, std, tag)
        };
        Ok(Self {
            norm1: RmsNorm::new(store, &format!("{name}.norm1"), cfg.dim)?,
            self_attn: attn(store, "self_attn", "dec.self")?,
            norm2: RmsNorm::new(store, &format!("{name}.norm2"), cfg.dim)?,
            cross_attn: attn(store, "cross_attn", "dec.cross")?,
            norm3: RmsNorm::new(store, &format!("{name}.norm3"), cfg.dim)?,
            ffn: ffn(store, &format!("{name}.ffn"), cfg, std)?,
            dropout: cfg.dropout,
        })
    }

    pub fn forward(&self, y: &Tensor, self_bias: &Tensor, memory: &Tensor, cross_bias: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let h = self.norm1.forward(y)?;
        let a = self.self_attn.forward(&h, &h, Some(self_bias), None, ctx)?;
        let y = (y + ctx.dropout(&a, self.dropout)?)?;
        let h = self.norm2.forward(&y)?;
        let c = self.cross_attn.forward(&h, memory, Some(cross_bias), None, ctx)?;
        let y = (&y + ctx.dropout(&c, self.dropout)?)?;
        let f = self.ffn.forward(&self.norm3.forward(&y)?, ctx)?;
        Ok((&y + ctx.dropout(&f, self.dropout)?)?)
    }
}
