use std::cell::RefCell;

use candle_core::{DType, Tensor, D};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use crate::Result;

/// Per-forward state: train/eval switch, the dropout stream and optional
/// capture of attention probabilities.
pub struct Ctx {
    pub train: bool,
    rng: RefCell<ChaCha8Rng>,
    capture: RefCell<Option<(&'static str, Vec<Tensor>)>>,
}

impl Ctx {
    pub fn eval() -> Self {
        Self { train: false, rng: RefCell::new(ChaCha8Rng::seed_from_u64(0)), capture: RefCell::new(None) }
    }

    pub fn train(seed: u64) -> Self {
        Self { train: true, rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)), capture: RefCell::new(None) }
    }

    /// Eval-mode context that records the attention probabilities of every
    /// attention layer carrying `tag`, in call order.
    pub fn capturing(tag: &'static str) -> Self {
        let ctx = Self::eval();
        *ctx.capture.borrow_mut() = Some((tag, Vec::new()));
        ctx
    }

    fn wants(&self, tag: &str) -> bool {
        matches!(&*self.capture.borrow(), Some((t, _)) if *t == tag)
    }

    fn record(&self, probs: &Tensor) {
        if let Some((_, v)) = self.capture.borrow_mut().as_mut() {
            v.push(probs.clone());
        }
    }

    pub fn take_captured(&self) -> Vec<Tensor> {
        self.capture.borrow_mut().as_mut().map(|(_, v)| std::mem::take(v)).unwrap_or_default()
    }

    pub fn dropout(&self, x: &Tensor, p: f64) -> Result<Tensor> {
        if !self.train || p <= 0.0 {
            return Ok(x.clone());
        }
        let scale = 1.0 / (1.0 - p);
        let drop_below = (p * 4_294_967_296.0) as u64;
        let n = x.elem_count();
        let mut rng = self.rng.borrow_mut();
        let mask = if x.dtype() == DType::F64 {
            let m: Vec<f64> = (0..n).map(|_| if u64::from(rng.next_u32()) < drop_below { 0.0 } else { scale }).collect();
            Tensor::from_vec(m, x.shape(), x.device())?
        } else {
            let scale = scale as f32;
            let m: Vec<f32> = (0..n).map(|_| if u64::from(rng.next_u32()) < drop_below { 0.0 } else { scale }).collect();
            Tensor::from_vec(m, x.shape(), x.device())?.to_dtype(x.dtype())?
        };
        Ok((x * mask)?)
    }
}

/// Numerically stable softmax over the last axis; `-inf` entries get weight 0.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Apply a 2-D weight `[in, out]` to the trailing axis of `x`.
pub fn matmul_last(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let dims = x.dims();
    let in_dim = dims[dims.len() - 1];
    let lead: usize = dims[..dims.len() - 1].iter().product();
    let out_dim = w.dim(1)?;
    let y = x.reshape((lead, in_dim))?.matmul(w)?;
    let mut shape = dims[..dims.len() - 1].to_vec();
    shape.push(out_dim);
    Ok(y.reshape(shape)?)
}

pub fn constant(values: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, shape, &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, bias: bool, std: f64) -> Result<Self> {
        let weight = store.normal(&format!("{name}.weight"), &[input, output], std)?;
        let bias = if bias { Some(store.zeros(&format!("{name}.bias"), &[output])?) } else { None };
        Ok(Self { weight, bias })
    }

    pub fn zeroed(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        Ok(Self { weight: store.zeros(&format!("{name}.weight"), &[input, output])?, bias: None })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = matmul_last(x, &self.weight)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(b)?),
            None => Ok(y),
        }
    }
}

/// Scale-only RMS normalization as used by T5.
#[derive(Clone)]
pub struct RmsNorm {
    pub weight: Tensor,
    eps: f64,
}

impl RmsNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self { weight: store.ones(&format!("{name}.weight"), &[dim])?, eps: 1e-6 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let ms = x.sqr()?.mean_keepdim(D::Minus1)?;
        let inv = (ms + self.eps)?.sqrt()?.recip()?;
        Ok(x.broadcast_mul(&inv)?.broadcast_mul(&self.weight)?)
    }
}

#[derive(Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
    pub dropout: f64,
    /// GELU instead of ReLU.
    pub gelu: bool,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, dropout: f64, std: f64) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, false, std)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, false, std)?,
            dropout,
            gelu: false,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let h = self.up.forward(x)?;
        let h = if self.gelu { h.gelu_erf()? } else { h.relu()? };
        let h = ctx.dropout(&h, self.dropout)?;
        self.down.forward(&h)
    }
}

/// Multi-head scaled dot-product attention with an additive bias/mask.
#[derive(Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub head_dim: usize,
    pub dropout: f64,
    pub tag: &'static str,
}

impl MultiHeadAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        head_dim: usize,
        dropout: f64,
        std: f64,
        tag: &'static str,
    ) -> Result<Self> {
        let inner = heads * head_dim;
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, inner, false, std)?,
            k: Linear::new(store, &format!("{name}.k"), dim, inner, false, std)?,
            v: Linear::new(store, &format!("{name}.v"), dim, inner, false, std)?,
            o: Linear::new(store, &format!("{name}.o"), inner, dim, false, std)?,
            heads,
            head_dim,
            dropout,
            tag,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, s, _) = x.dims3()?;
        Ok(x.reshape((b, s, self.heads, self.head_dim))?.transpose(1, 2)?.contiguous()?)
    }

    /// `bias` must broadcast to `[B, H, Sq, Sk]`. When `query` is given it
    /// replaces the projected queries (one learned vector of width
    /// `heads * head_dim` shared by every position).
    pub fn forward(
        &self,
        xq: &Tensor,
        xkv: &Tensor,
        bias: Option<&Tensor>,
        query: Option<&Tensor>,
        ctx: &Ctx,
    ) -> Result<Tensor> {
        let (b, sq, _) = xq.dims3()?;
        let q = match query {
            Some(qv) => qv.reshape((1, 1, self.heads * self.head_dim))?.broadcast_as((b, sq, self.heads * self.head_dim))?,
            None => self.q.forward(xq)?,
        };
        let q = self.split_heads(&q)?;
        let k = self.split_heads(&self.k.forward(xkv)?)?;
        let v = self.split_heads(&self.v.forward(xkv)?)?;
        let out = scaled_attention(&q, &k, &v, bias, ctx, self.dropout, self.tag)?;
        let out = out.transpose(1, 2)?.contiguous()?.reshape((b, sq, self.heads * self.head_dim))?;
        self.o.forward(&out)
    }
}

/// `softmax(Q Kᵀ / √d_k + bias) V` over `[B, H, S, d_k]` tensors.
pub fn scaled_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    bias: Option<&Tensor>,
    ctx: &Ctx,
    dropout: f64,
    tag: &str,
) -> Result<Tensor> {
    let dk = q.dim(D::Minus1)? as f64;
    let mut scores = (q.matmul(&k.t()?)? / dk.sqrt())?;
    if let Some(b) = bias {
        scores = scores.broadcast_add(b)?;
    }
    let probs = softmax_last(&scores)?;
    if ctx.wants(tag) {
        ctx.record(&probs);
    }
    let probs = ctx.dropout(&probs, dropout)?;
    Ok(probs.matmul(v)?)
}
