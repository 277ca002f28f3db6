use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use discrec::data::{
    build_sequences, dataset_stats, generate_synthetic, kcore_filter, leave_one_out_split, load_embeddings,
    load_interactions, read_split_manifest, user_random_split, write_embeddings, write_interactions,
    write_split_manifest, InteractionFormat, Sample,
};
use discrec::decoding::write_predictions;
use discrec::diagnostics::{attention_heatmaps, export, norm_profiles, CropAnchor};
use discrec::evaluation::{evaluate, evaluate_popularity, standard_buckets, EvalConfig, MetricTable};
use discrec::recommender::{build_variant, make_examples, train_recommender, Recommender, TrainConfig, Variant};
use discrec::tokenizer::{assign_ids, train_tokenizer, CollisionReport, IdMap, RqVaeParams};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{Anchor, DataSource, ExperimentConfig, SplitKind};
use crate::error::CliError;

pub type Result<T> = std::result::Result<T, CliError>;

/// Artifact paths under the experiment's output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self { root: cfg.out_dir.clone() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn tokenizer(&self) -> PathBuf {
        self.root.join("tokenizer")
    }

    pub fn ids(&self) -> PathBuf {
        self.root.join("ids")
    }

    pub fn rec(&self, v: Variant) -> PathBuf {
        self.root.join("rec").join(v.name())
    }

    pub fn eval(&self, v: Variant) -> PathBuf {
        self.root.join("eval").join(v.name())
    }

    pub fn ablate(&self) -> PathBuf {
        self.root.join("ablate")
    }

    pub fn analysis(&self, v: Variant) -> PathBuf {
        self.root.join("analysis").join(v.name())
    }

    pub fn id_map(&self) -> PathBuf {
        self.ids().join("id_map.jsonl")
    }

    pub fn model(&self, v: Variant) -> PathBuf {
        self.rec(v).join("model.ckpt")
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| discrec::Error::io(dir, e).into())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| discrec::Error::io(path, e).into())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_text(path, &s)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| discrec::Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// `resolved.toml` (every effective setting) and `manifest.json` (stage, seeds
/// and stage-specific facts) in `dir`.
fn stage_manifest(dir: &Path, stage: &str, cfg: &ExperimentConfig, extra: Value) -> Result<()> {
    write_text(&dir.join("resolved.toml"), &cfg.to_toml())?;
    let manifest = json!({
        "stage": stage,
        "seeds": {
            "synthetic": cfg.data.synthetic.seed,
            "split": cfg.data.split_seed,
            "tokenizer": cfg.tokenizer.seed,
            "recommender_init": cfg.recommender.seed,
            "recommender_train": cfg.recommender.train.seed,
        },
        "details": extra,
    });
    write_json(&dir.join("manifest.json"), &manifest)
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::missing(path, hint))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataSummary {
    pub stats: discrec::data::DatasetStats,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub users_dropped: usize,
}

/// Build or load interactions, k-core filter, split and serialize.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<DataSummary> {
    let d = &cfg.data;
    let (interactions, embeddings) = match d.source {
        DataSource::Synthetic => {
            let s = generate_synthetic(&d.synthetic)?;
            (s.interactions, s.embeddings)
        }
        DataSource::Files => {
            let i = d.interactions.as_ref().expect("validated");
            let e = d.embeddings.as_ref().expect("validated");
            require(i, "set data.interactions to an existing TSV file")?;
            require(e, "set data.embeddings to an existing TSV file")?;
            (load_interactions(i, InteractionFormat::Tsv)?, load_embeddings(e)?)
        }
    };
    let filtered = if d.kcore > 0 { kcore_filter(&interactions, d.kcore) } else { interactions };
    let sequences = build_sequences(&filtered);
    let split = match d.split {
        SplitKind::LeaveOneOut => leave_one_out_split(&sequences, d.max_len),
        SplitKind::UserRandom => user_random_split(&sequences, d.split_ratios, d.split_seed, d.max_len)?,
    };
    let by_item: BTreeMap<&str, &Vec<f64>> = embeddings.iter().map(|(i, v)| (i.as_str(), v)).collect();
    let mut catalog_embeddings = Vec::with_capacity(split.item_catalog.len());
    for item in &split.item_catalog {
        let v = by_item
            .get(item.as_str())
            .ok_or_else(|| CliError::Config(format!("item `{item}` has interactions but no embedding")))?;
        catalog_embeddings.push((item.clone(), (*v).clone()));
    }
    let dir = Layout::new(cfg).data();
    mkdir(&dir)?;
    write_interactions(&dir.join("interactions.tsv"), &filtered)?;
    write_embeddings(&dir.join("embeddings.tsv"), &catalog_embeddings)?;
    write_split_manifest(&dir.join("train.jsonl"), &split.train)?;
    write_split_manifest(&dir.join("valid.jsonl"), &split.valid)?;
    write_split_manifest(&dir.join("test.jsonl"), &split.test)?;
    let summary = DataSummary {
        stats: dataset_stats(&filtered),
        train: split.train.len(),
        valid: split.valid.len(),
        test: split.test.len(),
        users_dropped: split.report.users_dropped.len(),
    };
    write_json(&dir.join("stats.json"), &summary)?;
    stage_manifest(&dir, "prepare-data", cfg, serde_json::to_value(&summary)?)?;
    Ok(summary)
}

fn embeddings(cfg: &ExperimentConfig) -> Result<Vec<(String, Vec<f64>)>> {
    let path = Layout::new(cfg).data().join("embeddings.tsv");
    require(&path, "run `prepare-data` first")?;
    Ok(load_embeddings(&path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenizerSummary {
    pub final_loss: f64,
    pub dead_code_resets: usize,
    /// Loss every 100 steps.
    pub loss_curve: Vec<f64>,
}

pub fn train_tokenizer_stage(cfg: &ExperimentConfig) -> Result<TokenizerSummary> {
    let items = embeddings(cfg)?;
    let (params, report) = train_tokenizer(&items, &cfg.tokenizer)?;
    let dir = Layout::new(cfg).tokenizer();
    mkdir(&dir)?;
    params.save(&dir.join("rqvae.ckpt"))?;
    let summary = TokenizerSummary {
        final_loss: report.final_loss,
        dead_code_resets: report.dead_code_resets,
        loss_curve: report.losses.iter().step_by(100).copied().collect(),
    };
    write_json(&dir.join("report.json"), &summary)?;
    stage_manifest(&dir, "train-tokenizer", cfg, json!({"final_loss": report.final_loss}))?;
    Ok(summary)
}

pub fn load_tokenizer(cfg: &ExperimentConfig) -> Result<RqVaeParams> {
    let path = Layout::new(cfg).tokenizer().join("rqvae.ckpt");
    require(&path, "run `train-tokenizer` first")?;
    Ok(RqVaeParams::load(&path)?)
}

pub fn assign_ids_stage(cfg: &ExperimentConfig) -> Result<CollisionReport> {
    let params = load_tokenizer(cfg)?;
    let items = embeddings(cfg)?;
    let (map, report) = assign_ids(&items, &params)?;
    if !report.unassignable.is_empty() {
        return Err(CliError::Config(format!(
            "{} items found every last-level code of their prefix taken (first: `{}`); raise tokenizer.codebook_size or tokenizer.levels",
            report.unassignable.len(),
            report.unassignable[0]
        )));
    }
    let layout = Layout::new(cfg);
    let dir = layout.ids();
    mkdir(&dir)?;
    map.save(&layout.id_map())?;
    write_json(&dir.join("collisions.json"), &report)?;
    let hash = sha256_file(&layout.id_map())?;
    stage_manifest(
        &dir,
        "assign-ids",
        cfg,
        json!({"id_map_sha256": hash, "collision_rate": report.collision_rate, "unassignable": report.unassignable.len()}),
    )?;
    Ok(report)
}

pub struct Splits {
    pub train: Vec<Sample>,
    pub valid: Vec<Sample>,
    pub test: Vec<Sample>,
}

pub fn load_splits(cfg: &ExperimentConfig, ids: &IdMap) -> Result<Splits> {
    let dir = Layout::new(cfg).data();
    let read = |name: &str| -> Result<Vec<Sample>> {
        let path = dir.join(name);
        require(&path, "run `prepare-data` first")?;
        let samples = read_split_manifest(&path)?;
        if let Some(s) = samples.iter().find(|s| !ids.contains(&s.target) || s.history.iter().any(|h| !ids.contains(h))) {
            return Err(CliError::Missing(format!(
                "user `{}` in {name} refers to an item without an ID; rerun `assign-ids`",
                s.user
            )));
        }
        Ok(samples)
    };
    Ok(Splits { train: read("train.jsonl")?, valid: read("valid.jsonl")?, test: read("test.jsonl")? })
}

pub fn load_ids(cfg: &ExperimentConfig) -> Result<(IdMap, String)> {
    let path = Layout::new(cfg).id_map();
    require(&path, "run `assign-ids` before training or evaluating the recommender")?;
    Ok((IdMap::load(&path)?, sha256_file(&path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub lr: f64,
    pub valid_recall_at_10: f64,
    pub epoch_losses: Vec<f64>,
}

pub struct TrainedModel {
    pub model: Recommender,
    pub best: SweepPoint,
    pub sweep: Vec<SweepPoint>,
}

fn recall_at_10(model: &Recommender, samples: &[Sample], ids: &IdMap, eval: &EvalConfig) -> Result<f64> {
    let cfg = EvalConfig { ks: vec![10], ..eval.clone() };
    let (table, _) = evaluate(model, samples, ids, &cfg, &BTreeMap::new())?;
    Ok(table.get("recall@10").unwrap_or(0.0))
}

/// Train one model per learning rate in the grid and keep the one with the
/// best validation Recall@10 (earliest on ties).
pub fn train_rec_stage(cfg: &ExperimentConfig, variant: Variant) -> Result<TrainedModel> {
    let (ids, hash) = load_ids(cfg)?;
    let splits = load_splits(cfg, &ids)?;
    if splits.train.is_empty() {
        return Err(CliError::Config("no training samples".into()));
    }
    let layout = Layout::new(cfg);
    let dir = layout.rec(variant);
    mkdir(&dir)?;
    let rcfg = cfg.recommender_config(variant, ids.len());
    let grid = if cfg.recommender.lr_grid.is_empty() { vec![cfg.recommender.train.lr] } else { cfg.recommender.lr_grid.clone() };
    let mut sweep = Vec::new();
    let mut best: Option<(Recommender, SweepPoint)> = None;
    for lr in grid {
        let model = build_variant(&rcfg)?;
        let examples = make_examples(&model, &splits.train, &ids)?;
        let train = TrainConfig { lr, ..cfg.recommender.train.clone() };
        let mut log = Vec::new();
        let result = train_recommender(&model, &examples, &train, Some(&mut log));
        write_text(&dir.join(format!("train_log_lr{lr}.csv")), &String::from_utf8_lossy(&log))?;
        let report = match result {
            Ok(r) => r,
            Err(e @ discrec::Error::NonFinite { .. }) => {
                model.save(&dir.join("last_good.ckpt"), json!({"id_map_sha256": hash, "lr": lr, "aborted": true}))?;
                return Err(e.into());
            }
            Err(e) => return Err(e.into()),
        };
        let recall = if splits.valid.is_empty() { 0.0 } else { recall_at_10(&model, &splits.valid, &ids, &cfg.eval)? };
        log::info!("{variant} lr {lr}: valid recall@10 {recall:.4}");
        let point = SweepPoint { lr, valid_recall_at_10: recall, epoch_losses: report.epoch_losses };
        sweep.push(point.clone());
        if best.as_ref().is_none_or(|(_, b)| recall > b.valid_recall_at_10) {
            best = Some((model, point));
        }
    }
    let (model, point) = best.expect("grid is nonempty");
    model.save(
        &layout.model(variant),
        json!({"id_map_sha256": hash, "lr": point.lr, "valid_recall_at_10": point.valid_recall_at_10}),
    )?;
    write_json(&dir.join("sweep.json"), &sweep)?;
    stage_manifest(&dir, "train-rec", cfg, json!({"variant": variant.name(), "id_map_sha256": hash, "best_lr": point.lr}))?;
    Ok(TrainedModel { model, best: point, sweep })
}

/// Load the trained model of `variant`, refusing one trained against another ID map.
pub fn load_model(cfg: &ExperimentConfig, variant: Variant, id_hash: &str) -> Result<Recommender> {
    let path = Layout::new(cfg).model(variant);
    require(&path, &format!("run `train-rec --variant {variant}` first"))?;
    let (model, meta) = Recommender::load(&path)?;
    if meta["id_map_sha256"] != id_hash {
        return Err(CliError::Missing(format!(
            "{} was trained against a different ID map; rerun `train-rec --variant {variant}`",
            path.display()
        )));
    }
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Valid,
    Test,
}

impl EvalSplit {
    pub fn name(self) -> &'static str {
        match self {
            EvalSplit::Valid => "valid",
            EvalSplit::Test => "test",
        }
    }
}

pub struct Evaluation {
    pub table: MetricTable,
    pub popularity: MetricTable,
}

pub fn evaluate_stage(cfg: &ExperimentConfig, variant: Variant, which: EvalSplit) -> Result<Evaluation> {
    let (ids, hash) = load_ids(cfg)?;
    let model = load_model(cfg, variant, &hash)?;
    let splits = load_splits(cfg, &ids)?;
    let samples = match which {
        EvalSplit::Valid => &splits.valid,
        EvalSplit::Test => &splits.test,
    };
    let buckets = standard_buckets(samples, &splits.train, &ids, &cfg.eval)?;
    let (table, preds) = evaluate(&model, samples, &ids, &cfg.eval, &buckets)?;
    let popularity = evaluate_popularity(samples, &splits.train, &ids, &cfg.eval.ks)?;
    let dir = Layout::new(cfg).eval(variant);
    mkdir(&dir)?;
    let prefix = which.name();
    write_text(&dir.join(format!("{prefix}_metrics.json")), &table.to_json_string())?;
    write_text(&dir.join(format!("{prefix}_metrics.csv")), &table.to_csv())?;
    write_text(&dir.join(format!("{prefix}_popularity.json")), &popularity.to_json_string())?;
    let mut dump = Vec::new();
    write_predictions(&mut dump, samples, &preds)?;
    write_text(&dir.join(format!("{prefix}_predictions.jsonl")), &String::from_utf8_lossy(&dump))?;
    stage_manifest(&dir, "evaluate", cfg, json!({"variant": variant.name(), "split": prefix, "id_map_sha256": hash}))?;
    Ok(Evaluation { table, popularity })
}

/// Train and test every variant; one row per variant.
pub fn ablate_stage(cfg: &ExperimentConfig, variants: &[Variant]) -> Result<Vec<(Variant, MetricTable)>> {
    let mut rows = Vec::new();
    for &v in variants {
        train_rec_stage(cfg, v)?;
        rows.push((v, evaluate_stage(cfg, v, EvalSplit::Test)?.table));
    }
    let dir = Layout::new(cfg).ablate();
    mkdir(&dir)?;
    let ks = &cfg.eval.ks;
    let names: Vec<String> = ks.iter().flat_map(|k| [format!("recall@{k}"), format!("ndcg@{k}")]).collect();
    let mut csv = format!("variant,{}\n", names.join(","));
    let mut json_rows = Vec::new();
    for (v, t) in &rows {
        let vals: Vec<String> = names.iter().map(|n| t.get(n).unwrap_or(0.0).to_string()).collect();
        csv.push_str(&format!("{v},{}\n", vals.join(",")));
        let mut row = serde_json::Map::new();
        row.insert("variant".into(), json!(v.name()));
        for n in &names {
            row.insert(n.clone(), json!(t.get(n).unwrap_or(0.0)));
        }
        json_rows.push(Value::Object(row));
    }
    write_text(&dir.join("table.csv"), &csv)?;
    write_json(&dir.join("table.json"), &json_rows)?;
    let list: Vec<&str> = variants.iter().map(|v| v.name()).collect();
    stage_manifest(&dir, "ablate", cfg, json!({"variants": list}))?;
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Analysis {
    Norms,
    Heatmaps,
    All,
}

pub fn analyze_stage(cfg: &ExperimentConfig, variant: Variant, which: Analysis) -> Result<Vec<PathBuf>> {
    let (ids, hash) = load_ids(cfg)?;
    let model = load_model(cfg, variant, &hash)?;
    let profiles = if matches!(which, Analysis::Norms | Analysis::All) {
        let tokenizer = load_tokenizer(cfg)?;
        let profiles = norm_profiles(Some(&tokenizer), &model, &ids)?;
        for p in &profiles {
            log::info!("{} norms {:?}, spearman vs level {:?}", p.source, p.values, p.spearman);
        }
        profiles
    } else {
        Vec::new()
    };
    let heatmaps = if matches!(which, Analysis::Heatmaps | Analysis::All) {
        let splits = load_splits(cfg, &ids)?;
        let inputs = splits
            .test
            .iter()
            .take(cfg.analysis.samples.max(1))
            .map(|s| model.input_tokens(&s.history, &ids))
            .collect::<discrec::Result<Vec<_>>>()?;
        let anchor = match cfg.analysis.anchor {
            Anchor::Start => CropAnchor::Start,
            Anchor::End => CropAnchor::End,
        };
        Some(attention_heatmaps(&model, &inputs, cfg.analysis.crop, anchor)?)
    } else {
        None
    };
    let dir = Layout::new(cfg).analysis(variant);
    let files = export(&profiles, heatmaps.as_ref(), &dir)?;
    let clamped = heatmaps.as_ref().map(|h| json!({"crop": h.crop, "clamped": h.clamped, "seq_len": h.seq_len}));
    stage_manifest(&dir, "analyze", cfg, json!({"variant": variant.name(), "heatmaps": clamped}))?;
    Ok(files)
}

/// Every stage in order for the configured variant.
pub fn run_all(cfg: &ExperimentConfig) -> Result<Evaluation> {
    prepare_data(cfg)?;
    train_tokenizer_stage(cfg)?;
    assign_ids_stage(cfg)?;
    train_rec_stage(cfg, cfg.recommender.variant)?;
    evaluate_stage(cfg, cfg.recommender.variant, EvalSplit::Test)
}
