use std::path::{Path, PathBuf};

use discrec::data::SyntheticConfig;
use discrec::dual_branch::DualBranchConfig;
use discrec::evaluation::EvalConfig;
use discrec::recommender::{BackboneConfig, Precision, RecommenderConfig, TrainConfig, Variant};
use discrec::tokenizer::TokenizerConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SEED_ENV: &str = "DISCREC_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Files,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    LeaveOneOut,
    UserRandom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// TSV `user<TAB>item<TAB>timestamp` (files source).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub interactions: Option<PathBuf>,
    /// TSV `item<TAB>v1 v2 ..` (files source).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
    /// Minimum interactions per user and item; 0 disables filtering.
    pub kcore: usize,
    pub max_len: usize,
    pub split: SplitKind,
    pub split_ratios: [f64; 3],
    pub split_seed: u64,
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            interactions: None,
            embeddings: None,
            kcore: 5,
            max_len: 20,
            split: SplitKind::LeaveOneOut,
            split_ratios: [0.8, 0.1, 0.1],
            split_seed: 0,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecSection {
    pub variant: Variant,
    pub backbone: BackboneConfig,
    pub branch: DualBranchConfig,
    pub precision: Precision,
    /// Parameter initialization seed.
    pub seed: u64,
    /// Learning rates tried in order; the best validation Recall@10 wins.
    /// Empty means `train.lr` alone.
    pub lr_grid: Vec<f64>,
    pub train: TrainConfig,
}

impl Default for RecSection {
    fn default() -> Self {
        Self {
            variant: Variant::DiscRec,
            backbone: BackboneConfig::default(),
            branch: DualBranchConfig::default(),
            precision: Precision::F32,
            seed: 0,
            lr_grid: vec![5e-4, 1e-3],
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Anchor {
    Start,
    End,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Test samples averaged into the heatmaps.
    pub samples: usize,
    pub crop: usize,
    pub anchor: Anchor,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { samples: 100, crop: 28, anchor: Anchor::Start }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub tokenizer: TokenizerConfig,
    pub recommender: RecSection,
    pub eval: EvalConfig,
    pub analysis: AnalysisConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            tokenizer: TokenizerConfig::default(),
            recommender: RecSection::default(),
            eval: EvalConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.data.source == DataSource::Files && (self.data.interactions.is_none() || self.data.embeddings.is_none()) {
            return Err(CliError::Config("the files source needs data.interactions and data.embeddings".into()));
        }
        if self.data.max_len == 0 {
            return Err(CliError::Config("data.max_len must be positive".into()));
        }
        if self.recommender.lr_grid.iter().any(|lr| lr.is_nan() || *lr <= 0.0) {
            return Err(CliError::Config("learning rates must be positive".into()));
        }
        self.data.synthetic.validate()?;
        self.tokenizer.validate()?;
        self.recommender_config(self.recommender.variant, 1).validate()?;
        Ok(())
    }

    /// Set every seed to `seed`.
    pub fn override_seeds(&mut self, seed: u64) {
        self.data.synthetic.seed = seed;
        self.data.split_seed = seed;
        self.tokenizer.seed = seed;
        self.recommender.seed = seed;
        self.recommender.train.seed = seed;
    }

    pub fn recommender_config(&self, variant: Variant, n_items: usize) -> RecommenderConfig {
        RecommenderConfig {
            backbone: self.recommender.backbone.clone(),
            branch: self.recommender.branch.clone(),
            variant,
            levels: self.tokenizer.levels,
            codebook_size: self.tokenizer.codebook_size,
            n_items,
            max_len: self.data.max_len,
            seed: self.recommender.seed,
            precision: self.recommender.precision,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes to TOML")
    }
}

/// Assign `value` (a TOML literal, or a bare string) at a dotted `path`.
fn apply_set(root: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not of the form key.path=value")))?;
    let value = match toml::from_str::<toml::Table>(&format!("v = {}", raw.trim())) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let keys: Vec<&str> = path.trim().split('.').collect();
    let mut table = root;
    for key in &keys[..keys.len() - 1] {
        let entry = table.entry(key.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("`{key}` in `{path}` is not a table")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// Read the TOML file (defaults when absent), apply `--set` overrides, then
/// the seed override.
pub fn load_config(path: Option<&Path>, sets: &[String], seed: Option<&str>) -> Result<ExperimentConfig, CliError> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for s in sets {
        apply_set(&mut table, s)?;
    }
    let mut cfg: ExperimentConfig =
        ExperimentConfig::deserialize(table).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(s) = seed {
        let seed = s
            .trim()
            .parse::<u64>()
            .map_err(|_| CliError::Config(format!("{SEED_ENV}=`{s}` is not an unsigned integer")))?;
        cfg.override_seeds(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}
