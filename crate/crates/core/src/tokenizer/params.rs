use serde::{Deserialize, Serialize};

use crate::nn::{Checkpoint, StoredTensor};
use crate::{Error, Result};

/// Fully connected layer with row-major `[input, output]` weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub input: usize,
    pub output: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self { input, output, weight: vec![0.0; input * output], bias: vec![0.0; output] }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.bias.clone();
        for (i, xi) in x.iter().enumerate() {
            let row = &self.weight[i * self.output..(i + 1) * self.output];
            for (yj, w) in y.iter_mut().zip(row) {
                *yj += xi * w;
            }
        }
        y
    }
}

/// ReLU between layers, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.input)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimMismatch { expected: self.input_dim(), got: x.len() });
        }
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h);
            if i + 1 < self.layers.len() {
                h.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        Ok(h)
    }

    /// Widths `[in, h1, ..., out]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.output));
        d
    }
}

/// Hidden widths interpolated linearly between `input` and `output`.
pub fn interpolated_dims(input: usize, output: usize, hidden_layers: usize) -> Vec<usize> {
    let steps = hidden_layers + 1;
    (0..=steps)
        .map(|i| {
            let t = i as f64 / steps as f64;
            (input as f64 + (output as f64 - input as f64) * t).round().max(1.0) as usize
        })
        .collect()
}

/// `L` codebooks of `K` vectors of width `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookSet {
    pub codebook_size: usize,
    pub code_dim: usize,
    /// `codes[l]` is row-major `[K, d]`.
    pub codes: Vec<Vec<f64>>,
}

impl CodebookSet {
    pub fn levels(&self) -> usize {
        self.codes.len()
    }

    pub fn entry(&self, level: usize, code: usize) -> &[f64] {
        &self.codes[level][code * self.code_dim..(code + 1) * self.code_dim]
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest row of a `[K, d]` block; ties go to the lowest index.
pub fn nearest_code(v: &[f64], book: &[f64], dim: usize) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, row) in book.chunks_exact(dim).enumerate() {
        let d = sq_dist(v, row);
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub codes: Vec<u32>,
    /// `residuals[l]` is the input to level `l` (so `residuals[0] == r`).
    pub residuals: Vec<Vec<f64>>,
    pub r_hat: Vec<f64>,
}

/// Residual quantization: pick the nearest code per level and pass the
/// remainder down.
pub fn quantize(r: &[f64], codebooks: &CodebookSet) -> Result<Quantized> {
    if r.len() != codebooks.code_dim {
        return Err(Error::DimMismatch { expected: codebooks.code_dim, got: r.len() });
    }
    let mut v = r.to_vec();
    let mut r_hat = vec![0.0; r.len()];
    let mut codes = Vec::with_capacity(codebooks.levels());
    let mut residuals = Vec::with_capacity(codebooks.levels());
    for (level, book) in codebooks.codes.iter().enumerate() {
        if codebooks.codebook_size == 0 || book.is_empty() {
            return Err(Error::EmptyCodebook(level));
        }
        let c = nearest_code(&v, book, codebooks.code_dim);
        let e = codebooks.entry(level, c);
        residuals.push(v.clone());
        for ((vi, hi), ei) in v.iter_mut().zip(r_hat.iter_mut()).zip(e) {
            *vi -= ei;
            *hi += ei;
        }
        codes.push(c as u32);
    }
    Ok(Quantized { codes, residuals, r_hat })
}

/// Value of the tokenizer objective for one item:
/// `‖ẑ − z‖² + Σ_l (‖v_l − e_l‖² + β‖v_l − e_l‖²)`. The two quantization
/// terms share a value and differ only in which side receives gradient.
pub fn tokenization_loss(
    z: &[f64],
    z_hat: &[f64],
    residuals: &[Vec<f64>],
    codes: &[u32],
    codebooks: &CodebookSet,
    beta: f64,
) -> f64 {
    let recon = sq_dist(z_hat, z);
    let quant: f64 = residuals
        .iter()
        .zip(codes)
        .enumerate()
        .map(|(l, (v, &c))| sq_dist(v, codebooks.entry(l, c as usize)))
        .sum();
    recon + quant + beta * quant
}

/// Per-dimension affine transform applied before encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Dimensions with zero spread keep unit scale.
    pub fn fit(rows: &[&[f64]]) -> Self {
        let dim = rows.first().map_or(0, |r| r.len());
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            mean.iter_mut().zip(r.iter()).for_each(|(m, x)| *m += x / n);
        }
        let mut var = vec![0.0; dim];
        for r in rows {
            var.iter_mut().zip(r.iter().zip(&mean)).for_each(|(v, (x, m))| *v += (x - m) * (x - m) / n);
        }
        let std = var.into_iter().map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
        Self { mean, std }
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(self.mean.iter().zip(&self.std)).map(|(x, (m, s))| (x - m) / s).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RqVaeParams {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub codebooks: CodebookSet,
    pub beta: f64,
    pub standardizer: Option<Standardizer>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    kind: String,
    encoder_dims: Vec<usize>,
    decoder_dims: Vec<usize>,
    levels: usize,
    codebook_size: usize,
    code_dim: usize,
    beta: f64,
    standardized: bool,
}

impl RqVaeParams {
    pub fn levels(&self) -> usize {
        self.codebooks.levels()
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    /// Standardized encoder input for a raw embedding.
    pub fn prepare(&self, z: &[f64]) -> Vec<f64> {
        match &self.standardizer {
            Some(s) => s.apply(z),
            None => z.to_vec(),
        }
    }

    /// Encoder output for a raw embedding.
    pub fn encode(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.input_dim() {
            return Err(Error::DimMismatch { expected: self.input_dim(), got: z.len() });
        }
        self.encoder.forward(&self.prepare(z))
    }

    /// Reconstruction in standardized input space.
    pub fn decode(&self, r_hat: &[f64]) -> Result<Vec<f64>> {
        self.decoder.forward(r_hat)
    }

    pub fn quantize(&self, r: &[f64]) -> Result<Quantized> {
        quantize(r, &self.codebooks)
    }

    pub fn semantic_id(&self, z: &[f64]) -> Result<Vec<u32>> {
        Ok(self.quantize(&self.encode(z)?)?.codes)
    }

    /// Objective value on one raw embedding.
    pub fn loss(&self, z: &[f64]) -> Result<f64> {
        let x = self.prepare(z);
        let q = self.quantize(&self.encoder.forward(&x)?)?;
        let z_hat = self.decode(&q.r_hat)?;
        Ok(tokenization_loss(&x, &z_hat, &q.residuals, &q.codes, &self.codebooks, self.beta))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let manifest = Manifest {
            kind: "rqvae".into(),
            encoder_dims: self.encoder.dims(),
            decoder_dims: self.decoder.dims(),
            levels: self.levels(),
            codebook_size: self.codebooks.codebook_size,
            code_dim: self.codebooks.code_dim,
            beta: self.beta,
            standardized: self.standardizer.is_some(),
        };
        let mut ck = Checkpoint::new(serde_json::to_string(&manifest)?);
        for (prefix, mlp) in [("encoder", &self.encoder), ("decoder", &self.decoder)] {
            for (i, l) in mlp.layers.iter().enumerate() {
                ck.insert(format!("{prefix}.{i}.weight"), StoredTensor::f64(vec![l.input, l.output], l.weight.clone()));
                ck.insert(format!("{prefix}.{i}.bias"), StoredTensor::f64(vec![l.output], l.bias.clone()));
            }
        }
        for (l, book) in self.codebooks.codes.iter().enumerate() {
            ck.insert(
                format!("codebook.{l}"),
                StoredTensor::f64(vec![self.codebooks.codebook_size, self.codebooks.code_dim], book.clone()),
            );
        }
        if let Some(s) = &self.standardizer {
            ck.insert("standardizer.mean", StoredTensor::f64(vec![s.mean.len()], s.mean.clone()));
            ck.insert("standardizer.std", StoredTensor::f64(vec![s.std.len()], s.std.clone()));
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let m: Manifest = serde_json::from_str(&ck.manifest)?;
        if m.kind != "rqvae" {
            return Err(Error::Checkpoint(format!("expected an rqvae checkpoint, found `{}`", m.kind)));
        }
        let tensor = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
            let t = ck.get(name)?;
            if t.shape != shape {
                return Err(Error::Checkpoint(format!("`{name}` has shape {:?}, expected {shape:?}", t.shape)));
            }
            Ok(t.data.to_f64())
        };
        let mlp = |prefix: &str, dims: &[usize]| -> Result<Mlp> {
            let layers = dims
                .windows(2)
                .enumerate()
                .map(|(i, w)| {
                    Ok(Dense {
                        input: w[0],
                        output: w[1],
                        weight: tensor(&format!("{prefix}.{i}.weight"), &[w[0], w[1]])?,
                        bias: tensor(&format!("{prefix}.{i}.bias"), &[w[1]])?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Mlp { layers })
        };
        let codes = (0..m.levels)
            .map(|l| tensor(&format!("codebook.{l}"), &[m.codebook_size, m.code_dim]))
            .collect::<Result<Vec<_>>>()?;
        let standardizer = if m.standardized {
            let dim = m.encoder_dims[0];
            Some(Standardizer { mean: tensor("standardizer.mean", &[dim])?, std: tensor("standardizer.std", &[dim])? })
        } else {
            None
        };
        Ok(Self {
            encoder: mlp("encoder", &m.encoder_dims)?,
            decoder: mlp("decoder", &m.decoder_dims)?,
            codebooks: CodebookSet { codebook_size: m.codebook_size, code_dim: m.code_dim, codes },
            beta: m.beta,
            standardizer,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
