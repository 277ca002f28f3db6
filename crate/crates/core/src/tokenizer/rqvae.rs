use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kmeans::kmeans;
use super::params::{interpolated_dims, nearest_code, CodebookSet, Dense, Mlp, RqVaeParams, Standardizer};
use crate::nn::{Linear, ParamStore};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub levels: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
    pub beta: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub hidden_layers: usize,
    /// Explicit encoder hidden widths; the decoder mirrors them.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden_dims: Option<Vec<usize>>,
    pub standardize: bool,
    pub kmeans_init: bool,
    /// A code unused for this many consecutive steps is reset; 0 disables.
    pub dead_code_steps: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            codebook_size: 256,
            code_dim: 32,
            beta: 0.25,
            steps: 20_000,
            batch_size: 1024,
            lr: 1e-3,
            weight_decay: 1e-4,
            seed: 0,
            hidden_layers: 3,
            hidden_dims: None,
            standardize: true,
            kmeans_init: true,
            dead_code_steps: 1000,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.codebook_size == 0 || self.code_dim == 0 || self.batch_size == 0 {
            return Err(Error::Config("tokenizer sizes must be positive".into()));
        }
        let negative = |x: f64| x.is_nan() || x < 0.0;
        if negative(self.beta) || negative(self.weight_decay) || negative(self.lr) || self.lr == 0.0 {
            return Err(Error::Config("tokenizer beta/lr/weight_decay out of range".into()));
        }
        Ok(())
    }

    pub fn encoder_dims(&self, input_dim: usize) -> Vec<usize> {
        match &self.hidden_dims {
            Some(h) => std::iter::once(input_dim).chain(h.iter().copied()).chain([self.code_dim]).collect(),
            None => interpolated_dims(input_dim, self.code_dim, self.hidden_layers),
        }
    }
}

/// Trainable counterpart of [`RqVaeParams`].
pub struct RqVaeNet {
    pub encoder: Vec<Linear>,
    pub decoder: Vec<Linear>,
    pub codebooks: Vec<Tensor>,
    pub code_dim: usize,
    pub codebook_size: usize,
}

fn mlp_forward(layers: &[Linear], x: &Tensor) -> Result<Tensor> {
    let mut h = x.clone();
    for (i, l) in layers.iter().enumerate() {
        h = l.forward(&h)?;
        if i + 1 < layers.len() {
            h = h.relu()?;
        }
    }
    Ok(h)
}

/// Per-batch terms of the tokenizer objective. Each is the batch mean of the
/// per-item squared norm.
pub struct LossTerms {
    pub recon: Tensor,
    /// `‖sg[v_l] − e_l‖²` summed over levels; reaches only the codebooks.
    pub codebook: Tensor,
    /// `‖v_l − sg[e_l]‖²` summed over levels; reaches only the encoder.
    pub commit: Tensor,
    /// `codes[l][row]`.
    pub codes: Vec<Vec<u32>>,
    /// Detached residual inputs per level, row-major `[B, d]`.
    pub residuals: Vec<Vec<f64>>,
}

impl LossTerms {
    pub fn total(&self, beta: f64) -> Result<Tensor> {
        Ok(((&self.recon + &self.codebook)? + (&self.commit * beta)?)?)
    }
}

impl RqVaeNet {
    pub fn new(store: &mut ParamStore, input_dim: usize, cfg: &TokenizerConfig) -> Result<Self> {
        let dims = cfg.encoder_dims(input_dim);
        let mut build = |prefix: &str, dims: &[usize]| -> Result<Vec<Linear>> {
            dims.windows(2)
                .enumerate()
                .map(|(i, w)| Linear::new(store, &format!("{prefix}.{i}"), w[0], w[1], true, (1.0 / w[0] as f64).sqrt()))
                .collect()
        };
        let encoder = build("encoder", &dims)?;
        let rev: Vec<usize> = dims.iter().rev().copied().collect();
        let decoder = build("decoder", &rev)?;
        let codebooks = (0..cfg.levels)
            .map(|l| {
                store.normal(&format!("codebook.{l}"), &[cfg.codebook_size, cfg.code_dim], (1.0 / cfg.code_dim as f64).sqrt())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { encoder, decoder, codebooks, code_dim: cfg.code_dim, codebook_size: cfg.codebook_size })
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        mlp_forward(&self.encoder, x)
    }

    pub fn decode(&self, r: &Tensor) -> Result<Tensor> {
        mlp_forward(&self.decoder, r)
    }

    /// Objective terms with stop-gradient values drawn from `sg_source`.
    /// During training `sg_source` is the live network itself; passing a
    /// frozen copy makes the stop-gradient boundaries observable to finite
    /// differences.
    pub fn loss_terms(&self, sg_source: &RqVaeNet, x: &Tensor) -> Result<LossTerms> {
        let d = self.code_dim;
        let r = self.encode(x)?;
        let r_sg = sg_source.encode(x)?.detach();
        let mut v = r.clone();
        let mut v_sg = r_sg.clone();
        let mut r_hat_sg = r_sg.zeros_like()?;
        let mut codebook = Tensor::zeros((), x.dtype(), x.device())?;
        let mut commit = codebook.clone();
        let mut codes = Vec::new();
        let mut residuals = Vec::new();
        for (live_book, sg_book) in self.codebooks.iter().zip(&sg_source.codebooks) {
            let v_vals: Vec<f64> = v_sg.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
            let book: Vec<f64> = sg_book.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
            let level_codes: Vec<u32> = v_vals.chunks_exact(d).map(|row| nearest_code(row, &book, d) as u32).collect();
            let idx = Tensor::new(level_codes.as_slice(), x.device())?;
            let e_live = live_book.index_select(&idx, 0)?;
            let e_sg = sg_book.index_select(&idx, 0)?.detach();
            codebook = (codebook + (&v_sg - &e_live)?.sqr()?.sum(1)?.mean(0)?)?;
            commit = (commit + (&v - &e_sg)?.sqr()?.sum(1)?.mean(0)?)?;
            r_hat_sg = (r_hat_sg + &e_sg)?;
            v = (v - &e_sg)?;
            v_sg = (v_sg - &e_sg)?;
            codes.push(level_codes);
            residuals.push(v_vals);
        }
        // straight-through: forward value r̂, gradient into r
        let q = (&r + (r_hat_sg - r_sg)?)?;
        let recon = (self.decode(&q)? - x)?.sqr()?.sum(1)?.mean(0)?;
        Ok(LossTerms { recon, codebook, commit, codes, residuals })
    }

    pub fn to_params(&self, beta: f64, standardizer: Option<Standardizer>) -> Result<RqVaeParams> {
        let export = |layers: &[Linear]| -> Result<Mlp> {
            let layers = layers
                .iter()
                .map(|l| {
                    let (input, output) = l.weight.dims2()?;
                    let bias = match &l.bias {
                        Some(b) => b.to_dtype(DType::F64)?.to_vec1()?,
                        None => vec![0.0; output],
                    };
                    Ok(Dense { input, output, weight: l.weight.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?, bias })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Mlp { layers })
        };
        let codes = self
            .codebooks
            .iter()
            .map(|c| Ok(c.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?))
            .collect::<Result<Vec<Vec<f64>>>>()?;
        Ok(RqVaeParams {
            encoder: export(&self.encoder)?,
            decoder: export(&self.decoder)?,
            codebooks: CodebookSet { codebook_size: self.codebook_size, code_dim: self.code_dim, codes },
            beta,
            standardizer,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenizerReport {
    /// Total objective per step.
    pub losses: Vec<f64>,
    pub final_loss: f64,
    pub dead_code_resets: usize,
}

/// Fit the RQ-VAE on raw item embeddings.
pub fn train_tokenizer(items: &[(String, Vec<f64>)], cfg: &TokenizerConfig) -> Result<(RqVaeParams, TokenizerReport)> {
    cfg.validate()?;
    let Some((_, first)) = items.first() else {
        return Err(Error::Invalid("tokenizer needs at least one item".into()));
    };
    let dim = first.len();
    if let Some((id, v)) = items.iter().find(|(_, v)| v.len() != dim) {
        return Err(Error::Invalid(format!("item `{id}` has {} dims, expected {dim}", v.len())));
    }
    let raw: Vec<&[f64]> = items.iter().map(|(_, v)| v.as_slice()).collect();
    let standardizer = cfg.standardize.then(|| Standardizer::fit(&raw));
    let prepared: Vec<f64> = raw
        .iter()
        .flat_map(|z| standardizer.as_ref().map_or_else(|| z.to_vec(), |s| s.apply(z)))
        .collect();
    let n = items.len();
    let data = Tensor::from_vec(prepared, (n, dim), &candle_core::Device::Cpu)?;

    let mut store = ParamStore::new(DType::F64, cfg.seed);
    let net = RqVaeNet::new(&mut store, dim, cfg)?;
    let mut opt = AdamW::new(
        store.vars(),
        ParamsAdamW { lr: cfg.lr, weight_decay: cfg.weight_decay, ..Default::default() },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let batch = cfg.batch_size.min(n);
    let mut order: Vec<u32> = (0..n as u32).collect();
    let mut cursor = n;
    let mut last_used = vec![vec![0usize; cfg.codebook_size]; cfg.levels];
    let mut report = TokenizerReport::default();

    for step in 0..cfg.steps {
        if cursor + batch > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = Tensor::new(&order[cursor..cursor + batch], data.device())?;
        cursor += batch;
        let xb = data.index_select(&idx, 0)?;
        if step == 0 && cfg.kmeans_init {
            init_codebooks(&net, &store, &xb, cfg)?;
        }
        let terms = net.loss_terms(&net, &xb)?;
        let total = terms.total(cfg.beta)?;
        let value = total.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!(
                    "recon={} codebook={} commit={}",
                    terms.recon.to_scalar::<f64>()?,
                    terms.codebook.to_scalar::<f64>()?,
                    terms.commit.to_scalar::<f64>()?
                ),
            });
        }
        opt.backward_step(&total)?;
        report.losses.push(value);

        for (level, codes) in terms.codes.iter().enumerate() {
            for &c in codes {
                last_used[level][c as usize] = step;
            }
        }
        if cfg.dead_code_steps > 0 {
            report.dead_code_resets += refresh_dead_codes(&store, &terms, &mut last_used, step, cfg, &mut rng)?;
        }
    }
    if report.dead_code_resets > 0 {
        log::info!("tokenizer: {} dead codes refreshed", report.dead_code_resets);
    }
    report.final_loss = report.losses.last().copied().unwrap_or(f64::NAN);
    Ok((net.to_params(cfg.beta, standardizer)?, report))
}

fn init_codebooks(net: &RqVaeNet, store: &ParamStore, xb: &Tensor, cfg: &TokenizerConfig) -> Result<()> {
    let d = cfg.code_dim;
    let mut v: Vec<f64> = net.encode(xb)?.flatten_all()?.to_vec1()?;
    for level in 0..cfg.levels {
        let centers = kmeans(&v, d, cfg.codebook_size, 50, cfg.seed.wrapping_add(100 + level as u64));
        store.set(&format!("codebook.{level}"), &centers)?;
        for row in v.chunks_exact_mut(d) {
            let c = nearest_code(row, &centers, d);
            row.iter_mut().zip(&centers[c * d..(c + 1) * d]).for_each(|(x, e)| *x -= e);
        }
    }
    Ok(())
}

fn refresh_dead_codes(
    store: &ParamStore,
    terms: &LossTerms,
    last_used: &mut [Vec<usize>],
    step: usize,
    cfg: &TokenizerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    let d = cfg.code_dim;
    let mut resets = 0;
    for (level, used) in last_used.iter_mut().enumerate() {
        let dead: Vec<usize> = (0..used.len()).filter(|&k| step - used[k] >= cfg.dead_code_steps).collect();
        if dead.is_empty() {
            continue;
        }
        let name = format!("codebook.{level}");
        let mut book = store.values(&name)?;
        let rows = terms.residuals[level].len() / d;
        for k in dead {
            let r = rng.random_range(0..rows);
            book[k * d..(k + 1) * d].copy_from_slice(&terms.residuals[level][r * d..(r + 1) * d]);
            used[k] = step;
            resets += 1;
        }
        store.set(&name, &book)?;
    }
    Ok(resets)
}
