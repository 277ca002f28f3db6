use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dual_branch::{Aggregation, BranchOptions, DualBranchConfig, Fusion};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub activation: Activation,
    pub dropout: f64,
    pub relative_buckets: usize,
    pub relative_max_distance: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            dim: 128,
            heads: 6,
            head_dim: 64,
            ffn_dim: 1024,
            activation: Activation::Relu,
            dropout: 0.1,
            relative_buckets: 32,
            relative_max_distance: 128,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    DiscRec,
    WoIPE,
    WoTF,
    WoGating,
    Baseline,
    WithPE,
    WithIE,
    AllLayer,
    OneQuery,
    TokenAvg,
    SelfGating,
}

impl Variant {
    pub const ALL: [Variant; 11] = [
        Variant::DiscRec,
        Variant::WoIPE,
        Variant::WoTF,
        Variant::WoGating,
        Variant::Baseline,
        Variant::WithPE,
        Variant::WithIE,
        Variant::AllLayer,
        Variant::OneQuery,
        Variant::TokenAvg,
        Variant::SelfGating,
    ];

    /// The component ablations compared against the full model.
    pub const ABLATIONS: [Variant; 5] =
        [Variant::DiscRec, Variant::WoIPE, Variant::WoTF, Variant::WoGating, Variant::Baseline];

    pub fn name(self) -> &'static str {
        match self {
            Variant::DiscRec => "DiscRec",
            Variant::WoIPE => "WoIPE",
            Variant::WoTF => "WoTF",
            Variant::WoGating => "WoGating",
            Variant::Baseline => "Baseline",
            Variant::WithPE => "WithPE",
            Variant::WithIE => "WithIE",
            Variant::AllLayer => "AllLayer",
            Variant::OneQuery => "OneQuery",
            Variant::TokenAvg => "TokenAvg",
            Variant::SelfGating => "SelfGating",
        }
    }

    /// Options of the embedding-layer module, `None` when the variant has none.
    pub fn branch_options(self) -> Option<BranchOptions> {
        let d = BranchOptions::default();
        match self {
            Variant::DiscRec | Variant::AllLayer => Some(d),
            Variant::WoIPE => Some(BranchOptions { use_ipe: false, ..d }),
            Variant::WoTF => Some(BranchOptions { transformer: false, ..d }),
            Variant::WoGating => Some(BranchOptions { fusion: Fusion::Sum, ..d }),
            Variant::OneQuery => Some(BranchOptions { aggregation: Aggregation::OneQuery, ..d }),
            Variant::TokenAvg => Some(BranchOptions { aggregation: Aggregation::TokenAvg, ..d }),
            Variant::SelfGating => Some(BranchOptions { fusion: Fusion::SelfGate, ..d }),
            Variant::Baseline | Variant::WithPE | Variant::WithIE => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.iter().copied().find(|v| v.name().eq_ignore_ascii_case(s)).ok_or_else(|| {
            let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
            Error::Config(format!("unknown variant `{s}`; valid variants: {}", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecommenderConfig {
    pub backbone: BackboneConfig,
    pub branch: DualBranchConfig,
    pub variant: Variant,
    pub levels: usize,
    pub codebook_size: usize,
    /// Catalog size, used by the item-ID table of `WithIE`.
    pub n_items: usize,
    /// Maximum number of history items.
    pub max_len: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl RecommenderConfig {
    pub fn new(variant: Variant, levels: usize, codebook_size: usize, n_items: usize) -> Self {
        Self {
            backbone: BackboneConfig::default(),
            branch: DualBranchConfig::default(),
            variant,
            levels,
            codebook_size,
            n_items,
            max_len: 20,
            seed: 0,
            precision: Precision::F32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.backbone;
        if b.layers == 0 || b.dim == 0 || b.heads == 0 || b.head_dim == 0 || b.ffn_dim == 0 {
            return Err(Error::Config("backbone sizes must be positive".into()));
        }
        if self.levels == 0 || self.codebook_size == 0 || self.max_len == 0 {
            return Err(Error::Config("levels, codebook_size and max_len must be positive".into()));
        }
        if !(0.0..1.0).contains(&b.dropout) || !(0.0..1.0).contains(&self.branch.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Optional cap on optimizer steps (0 = unlimited).
    pub max_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 20, batch_size: 256, lr: 1e-3, weight_decay: 1e-2, seed: 0, max_steps: 0 }
    }
}
