//! Recall@K and NDCG@K for a single held-out target, overall and per bucket.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::data::{bucket_by_length, bucket_by_popularity, item_popularity, Bucket, Sample};
use crate::decoding::{predict_all, DecodeConfig, RankedPrediction};
use crate::recommender::Recommender;
use crate::tokenizer::IdMap;
use crate::{Error, Result};

/// 1-based position of `target` in `ranked`.
pub fn rank_of(ranked: &[String], target: &str) -> Option<usize> {
    ranked.iter().position(|i| i == target).map(|p| p + 1)
}

pub fn recall_at_k(ranked: &[String], target: &str, k: usize) -> f64 {
    match rank_of(ranked, target) {
        Some(r) if r <= k => 1.0,
        _ => 0.0,
    }
}

pub fn ndcg_at_k(ranked: &[String], target: &str, k: usize) -> f64 {
    match rank_of(ranked, target) {
        Some(r) if r <= k => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub decode: DecodeConfig,
    pub length_buckets: Vec<usize>,
    pub popularity_percentiles: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![5, 10],
            decode: DecodeConfig::default(),
            length_buckets: (4..=10).collect(),
            popularity_percentiles: vec![10.0, 15.0, 20.0, 25.0, 30.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub count: usize,
    /// `recall@K` / `ndcg@K` means.
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricTable {
    pub ks: Vec<usize>,
    pub overall: MetricRow,
    pub buckets: BTreeMap<Bucket, MetricRow>,
}

fn metric_names(ks: &[usize]) -> Vec<(String, String)> {
    ks.iter().map(|k| (format!("recall@{k}"), format!("ndcg@{k}"))).collect()
}

fn mean_row(per_sample: &[&BTreeMap<String, f64>], ks: &[usize]) -> MetricRow {
    let mut metrics = BTreeMap::new();
    for (r, n) in metric_names(ks) {
        for name in [r, n] {
            let sum: f64 = per_sample.iter().map(|m| m[&name]).sum();
            let mean = if per_sample.is_empty() { 0.0 } else { sum / per_sample.len() as f64 };
            metrics.insert(name, mean);
        }
    }
    MetricRow { count: per_sample.len(), metrics }
}

impl MetricTable {
    /// Average per-sample metrics of `ranked[i]` against `samples[i].target`.
    pub fn build(
        samples: &[Sample],
        ranked: &[Vec<String>],
        ks: &[usize],
        buckets: &BTreeMap<Bucket, Vec<Sample>>,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Invalid("cannot evaluate an empty split".into()));
        }
        if ks.is_empty() || ks.contains(&0) {
            return Err(Error::Config("K values must be positive".into()));
        }
        if ranked.len() != samples.len() {
            return Err(Error::DimMismatch { expected: samples.len(), got: ranked.len() });
        }
        let per_sample: Vec<BTreeMap<String, f64>> = samples
            .iter()
            .zip(ranked)
            .map(|(s, r)| {
                let mut m = BTreeMap::new();
                for (&k, (rn, nn)) in ks.iter().zip(metric_names(ks)) {
                    m.insert(rn, recall_at_k(r, &s.target, k));
                    m.insert(nn, ndcg_at_k(r, &s.target, k));
                }
                m
            })
            .collect();
        let lookup: HashMap<&Sample, &BTreeMap<String, f64>> = samples.iter().zip(&per_sample).collect();
        let mut rows = BTreeMap::new();
        for (bucket, members) in buckets {
            let ms = members
                .iter()
                .map(|s| lookup.get(s).copied().ok_or_else(|| Error::Invalid(format!("bucket {bucket} holds a sample outside the split"))))
                .collect::<Result<Vec<_>>>()?;
            rows.insert(*bucket, mean_row(&ms, ks));
        }
        let all: Vec<&BTreeMap<String, f64>> = per_sample.iter().collect();
        Ok(Self { ks: ks.to_vec(), overall: mean_row(&all, ks), buckets: rows })
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.overall.metrics.get(metric).copied()
    }

    /// `{"recall@5": .., "ndcg@5": .., .., "count": n, "buckets": {name: {..}}}`.
    pub fn to_json(&self) -> Value {
        let row = |r: &MetricRow| {
            let mut m = Map::new();
            for (rn, nn) in metric_names(&self.ks) {
                m.insert(rn.clone(), json!(r.metrics[&rn]));
                m.insert(nn.clone(), json!(r.metrics[&nn]));
            }
            m.insert("count".into(), json!(r.count));
            m
        };
        let mut top = row(&self.overall);
        let buckets: Map<String, Value> = self.buckets.iter().map(|(k, r)| (k.to_string(), Value::Object(row(r)))).collect();
        top.insert("buckets".into(), Value::Object(buckets));
        Value::Object(top)
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_json()).expect("metric values serialize");
        s.push('\n');
        s
    }

    /// `bucket,count,recall@5,ndcg@5,..` with the overall row named `all`.
    pub fn to_csv(&self) -> String {
        let names: Vec<String> = metric_names(&self.ks).into_iter().flat_map(|(r, n)| [r, n]).collect();
        let mut out = format!("bucket,count,{}\n", names.join(","));
        let mut line = |name: &str, r: &MetricRow| {
            let vals: Vec<String> = names.iter().map(|n| r.metrics[n].to_string()).collect();
            out.push_str(&format!("{name},{},{}\n", r.count, vals.join(",")));
        };
        line("all", &self.overall);
        for (k, r) in &self.buckets {
            line(&k.to_string(), r);
        }
        out
    }
}

/// Length buckets over `samples` plus popularity buckets measured on `train`.
pub fn standard_buckets(
    samples: &[Sample],
    train: &[Sample],
    ids: &IdMap,
    cfg: &EvalConfig,
) -> Result<BTreeMap<Bucket, Vec<Sample>>> {
    let mut out = BTreeMap::new();
    if !cfg.length_buckets.is_empty() {
        out.extend(bucket_by_length(samples, &cfg.length_buckets)?);
    }
    if !cfg.popularity_percentiles.is_empty() {
        let catalog: BTreeSet<String> = ids.iter().map(|(i, _)| i.to_string()).collect();
        let pop = item_popularity(train, &catalog);
        out.extend(bucket_by_popularity(samples, &cfg.popularity_percentiles, &pop)?);
    }
    Ok(out)
}

/// Decode every sample and score the rankings.
pub fn evaluate(
    model: &Recommender,
    samples: &[Sample],
    ids: &IdMap,
    cfg: &EvalConfig,
    buckets: &BTreeMap<Bucket, Vec<Sample>>,
) -> Result<(MetricTable, Vec<RankedPrediction>)> {
    if samples.is_empty() {
        return Err(Error::Invalid("cannot evaluate an empty split".into()));
    }
    let preds = predict_all(model, samples, ids, &cfg.decode)?;
    let ranked: Vec<Vec<String>> = preds.iter().map(|p| p.items.clone()).collect();
    Ok((MetricTable::build(samples, &ranked, &cfg.ks, buckets)?, preds))
}

/// Most popular training items first; ties by item id.
pub fn popularity_ranking(train: &[Sample], ids: &IdMap) -> Vec<String> {
    let catalog: BTreeSet<String> = ids.iter().map(|(i, _)| i.to_string()).collect();
    let pop = item_popularity(train, &catalog);
    let mut order: Vec<String> = pop.keys().cloned().collect();
    order.sort_by(|a, b| pop[b].cmp(&pop[a]).then_with(|| a.cmp(b)));
    order
}

/// Metrics of recommending the same popularity ranking to every sample.
pub fn evaluate_popularity(samples: &[Sample], train: &[Sample], ids: &IdMap, ks: &[usize]) -> Result<MetricTable> {
    let ranking = popularity_ranking(train, ids);
    let ranked = vec![ranking; samples.len()];
    MetricTable::build(samples, &ranked, ks, &BTreeMap::new())
}
