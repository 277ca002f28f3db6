use std::io::Write;

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::model::{pad_left, Recommender};
use crate::data::Sample;
use crate::nn::Ctx;
use crate::tokenizer::IdMap;
use crate::{Error, Result};

/// One tokenized training pair: encoder tokens (ending in EOS) and the
/// target's `L` code tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub input: Vec<u32>,
    pub target: Vec<u32>,
}

/// A left-padded mini-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub input: Vec<Vec<u32>>,
    pub target: Vec<Vec<u32>>,
}

impl Batch {
    pub fn new(examples: &[&Example]) -> Self {
        let input: Vec<Vec<u32>> = examples.iter().map(|e| e.input.clone()).collect();
        Self { input: pad_left(&input), target: examples.iter().map(|e| e.target.clone()).collect() }
    }
}

pub fn make_examples(model: &Recommender, samples: &[Sample], ids: &IdMap) -> Result<Vec<Example>> {
    samples
        .iter()
        .map(|s| {
            Ok(Example {
                input: model.input_tokens(&s.history, ids)?,
                target: model.vocab.tokenize_target(&s.target, ids)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

/// Mean per-sample loss over `examples` in eval mode.
pub fn evaluate_loss(model: &Recommender, examples: &[Example], batch_size: usize) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let ctx = Ctx::eval();
    let mut total = 0.0;
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let b = Batch::new(&refs);
        total += scalar(&model.loss(&b.input, &b.target, &ctx)?)? * chunk.len() as f64;
    }
    Ok(total / examples.len() as f64)
}

/// AdamW over shuffled mini-batches. On a non-finite loss the parameters are
/// rolled back to the last completed epoch and an error is returned.
pub fn train_recommender(
    model: &Recommender,
    examples: &[Example],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    if cfg.batch_size == 0 || cfg.lr.is_nan() || cfg.lr <= 0.0 {
        return Err(Error::Config("batch_size and lr must be positive".into()));
    }
    let vars = model.store.vars();
    let mut opt = AdamW::new(
        vars.clone(),
        ParamsAdamW { lr: cfg.lr, weight_decay: cfg.weight_decay, ..ParamsAdamW::default() },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut report = TrainReport::default();
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "epoch,step,loss,lr,seed").map_err(|e| Error::io("training log", e))?;
    }
    'epochs: for epoch in 0..cfg.epochs {
        let snapshot: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().copy()).collect::<candle_core::Result<_>>()?;
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps > 0 && report.steps >= cfg.max_steps {
                if count > 0 {
                    report.epoch_losses.push(sum / count as f64);
                }
                break 'epochs;
            }
            let refs: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let batch = Batch::new(&refs);
            let ctx = Ctx::train(cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ report.steps as u64);
            let loss = model.loss(&batch.input, &batch.target, &ctx)?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                for (v, t) in vars.iter().zip(&snapshot) {
                    v.set(t)?;
                }
                return Err(Error::NonFinite {
                    step: report.steps,
                    detail: format!("epoch {epoch}, loss {value}; parameters restored to the start of the epoch"),
                });
            }
            opt.backward_step(&loss)?;
            report.steps += 1;
            report.step_losses.push(value);
            sum += value * chunk.len() as f64;
            count += chunk.len();
        }
        let mean = if count > 0 { sum / count as f64 } else { 0.0 };
        report.epoch_losses.push(mean);
        log::info!("epoch {} step {} loss {mean:.5}", epoch + 1, report.steps);
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{},{},{mean},{},{}", epoch + 1, report.steps, cfg.lr, cfg.seed)
                .map_err(|e| Error::io("training log", e))?;
        }
    }
    Ok(report)
}
