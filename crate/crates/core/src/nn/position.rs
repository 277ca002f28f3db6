use candle_core::Tensor;

use super::params::ParamStore;
use crate::Result;

/// Learned bucketed relative position bias (T5 style), one scalar per
/// head and bucket, shared by every layer of a stack.
#[derive(Clone)]
pub struct RelativePositionBias {
    pub table: Tensor,
    pub heads: usize,
    pub num_buckets: usize,
    pub max_distance: usize,
    pub bidirectional: bool,
}

impl RelativePositionBias {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        heads: usize,
        num_buckets: usize,
        max_distance: usize,
        bidirectional: bool,
        std: f64,
    ) -> Result<Self> {
        Ok(Self {
            table: store.normal(&format!("{name}.table"), &[num_buckets, heads], std)?,
            heads,
            num_buckets,
            max_distance,
            bidirectional,
        })
    }

    /// Bias of shape `[1, heads, q_len, k_len]`.
    pub fn forward(&self, q_len: usize, k_len: usize) -> Result<Tensor> {
        let mut idx = Vec::with_capacity(q_len * k_len);
        for i in 0..q_len {
            for j in 0..k_len {
                idx.push(relative_bucket(
                    j as i64 - i as i64,
                    self.bidirectional,
                    self.num_buckets,
                    self.max_distance,
                ) as u32);
            }
        }
        let idx = Tensor::from_vec(idx, q_len * k_len, self.table.device())?;
        let bias = self.table.index_select(&idx, 0)?; // [q*k, heads]
        Ok(bias.t()?.reshape((1, self.heads, q_len, k_len))?)
    }
}

/// Map a relative offset (`key − query`) to a bucket: exact buckets for
/// small offsets, logarithmic spacing up to `max_distance`.
pub fn relative_bucket(relative: i64, bidirectional: bool, num_buckets: usize, max_distance: usize) -> usize {
    let mut buckets = num_buckets as i64;
    let mut ret = 0i64;
    let n = if bidirectional {
        buckets /= 2;
        if relative > 0 {
            ret += buckets;
        }
        relative.abs()
    } else {
        (-relative).max(0)
    };
    let max_exact = buckets / 2;
    if n < max_exact {
        return (ret + n) as usize;
    }
    let large = max_exact
        + ((n as f64 / max_exact as f64).ln() / (max_distance as f64 / max_exact as f64).ln()
            * (buckets - max_exact) as f64) as i64;
    (ret + large.min(buckets - 1)) as usize
}
