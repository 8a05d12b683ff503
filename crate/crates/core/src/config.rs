//! Model configuration. Every struct rejects unknown keys.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{BehaviorType, FeatureRef, EVENT_TABLES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NsTokenizerKind {
    Groupwise,
    Autosplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    TsAware,
    TsAgnostic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    /// affine → SiLU → affine with hidden width `2d`
    Mlp,
    /// single affine map
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSharing {
    /// shared weights for S-tokens, token-specific weights for NS-tokens
    Mixed,
    /// one weight set for every token
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Causal,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    OneTrans,
    /// No attention: heads over mean-pooled S-tokens plus NS-tokens.
    MeanPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Ctr,
    Cvr,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Ctr => "ctr",
            Task::Cvr => "cvr",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", deny_unknown_fields)]
pub enum ScheduleRule {
    /// Linear shrink from the full length down to `L_NS`.
    Linear,
    /// Every layer keeps every token.
    Off,
    /// Retained S-token counts per layer (clamped to what is available).
    Custom { s_tokens: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingConfig {
    pub dim: usize,
    pub buckets: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            buckets: 1 << 17,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub ns: NsTokenizerKind,
    pub fusion: Fusion,
    pub use_sep: bool,
    /// Total NS-token count, including the pooled candidate-sequence token.
    #[serde(rename = "L_NS")]
    pub l_ns: usize,
    /// Group-wise tokenizer groups over qualified feature names.
    pub groups: Vec<Vec<String>>,
    /// Non-sequential features, as `user.*`, `context.*` or `item.*`.
    pub features: Vec<String>,
    /// Per behavior sequence, the most recent events kept.
    pub max_seq_len: usize,
    /// Highest intent first.
    pub intent_order: Vec<BehaviorType>,
    pub projection: Projection,
    /// Pool the candidate-specific sequence into the last NS-token.
    pub sim_pooling: bool,
    /// Learnable absolute position embeddings on S-tokens.
    pub positional: bool,
    pub max_positions: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            ns: NsTokenizerKind::Autosplit,
            fusion: Fusion::TsAware,
            use_sep: true,
            l_ns: 8,
            groups: Vec::new(),
            features: default_features(),
            max_seq_len: 32,
            intent_order: vec![
                BehaviorType::Purchase,
                BehaviorType::AddToCart,
                BehaviorType::Click,
                BehaviorType::Impression,
            ],
            projection: Projection::Mlp,
            sim_pooling: false,
            positional: false,
            max_positions: 512,
        }
    }
}

pub fn default_features() -> Vec<String> {
    [
        "context.device",
        "context.hour",
        "item.cat",
        "item.item",
        "item.price_bucket",
        "user.age",
        "user.gender",
        "user.user_id",
    ]
    .into_iter()
    .map(String::from)
    .collect()
}

/// Splits `features` round-robin into `n` groups.
pub fn round_robin_groups(features: &[String], n: usize) -> Vec<Vec<String>> {
    let mut sorted = features.to_vec();
    sorted.sort();
    let mut groups = vec![Vec::new(); n];
    for (i, f) in sorted.into_iter().enumerate() {
        groups[i % n].push(f);
    }
    groups
}

impl TokenizerConfig {
    /// NS-tokens produced by the feature tokenizer (excludes the pooled token).
    pub fn feature_tokens(&self) -> usize {
        self.l_ns - usize::from(self.sim_pooling)
    }

    /// Qualified features in lexicographic order.
    pub fn sorted_features(&self) -> Result<Vec<FeatureRef>> {
        let mut refs = self
            .features
            .iter()
            .map(|f| FeatureRef::parse(f))
            .collect::<Result<Vec<_>>>()?;
        refs.sort();
        Ok(refs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.l_ns == 0 {
            return Err(Error::config("tokenizer.L_NS must be at least 1"));
        }
        if self.sim_pooling && self.l_ns < 2 {
            return Err(Error::config(
                "tokenizer.L_NS must be at least 2 when sim_pooling reserves a token",
            ));
        }
        if self.features.is_empty() {
            return Err(Error::config("tokenizer.features is empty"));
        }
        let refs = self.sorted_features()?;
        let names: BTreeSet<&str> = refs.iter().map(|r| r.qualified.as_str()).collect();
        if names.len() != refs.len() {
            return Err(Error::config("tokenizer.features has duplicates"));
        }
        if self.max_seq_len == 0 {
            return Err(Error::config("tokenizer.max_seq_len must be positive"));
        }
        let order: BTreeSet<_> = self.intent_order.iter().collect();
        if order.len() != BehaviorType::ALL.len() || self.intent_order.len() != BehaviorType::ALL.len() {
            return Err(Error::config(
                "tokenizer.intent_order must list each behavior type exactly once",
            ));
        }
        if self.positional && self.max_positions == 0 {
            return Err(Error::config("tokenizer.max_positions must be positive"));
        }
        if self.ns == NsTokenizerKind::Groupwise {
            if self.groups.len() != self.feature_tokens() {
                return Err(Error::config(format!(
                    "tokenizer.groups has {} groups but {} feature NS-tokens are configured",
                    self.groups.len(),
                    self.feature_tokens()
                )));
            }
            let mut seen = BTreeSet::new();
            for g in &self.groups {
                if g.is_empty() {
                    return Err(Error::config("tokenizer.groups contains an empty group"));
                }
                for f in g {
                    if !names.contains(f.as_str()) {
                        return Err(Error::config(format!("tokenizer.groups: unknown feature `{f}`")));
                    }
                    if !seen.insert(f.as_str()) {
                        return Err(Error::config(format!(
                            "tokenizer.groups: feature `{f}` appears in more than one group"
                        )));
                    }
                }
            }
            if seen.len() != names.len() {
                let missing: Vec<_> = names.difference(&seen).collect();
                return Err(Error::config(format!("tokenizer.groups does not cover {missing:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    /// FFN hidden width as a multiple of `d_model`.
    pub ffn_mult: usize,
    pub backbone: Backbone,
    pub params: ParamSharing,
    pub attention: AttentionKind,
    pub schedule: ScheduleRule,
    pub tasks: Vec<Task>,
    pub embedding: EmbeddingConfig,
    pub tokenizer: TokenizerConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl ModelConfig {
    /// Desk-scale default used by tests and the learning checks.
    pub fn tiny() -> Self {
        Self {
            layers: 2,
            d_model: 32,
            heads: 2,
            ffn_mult: 2,
            backbone: Backbone::OneTrans,
            params: ParamSharing::Mixed,
            attention: AttentionKind::Causal,
            schedule: ScheduleRule::Linear,
            tasks: vec![Task::Ctr, Task::Cvr],
            embedding: EmbeddingConfig::default(),
            tokenizer: TokenizerConfig::default(),
        }
    }

    /// Small enough for an all-parameter finite-difference check.
    pub fn micro() -> Self {
        let features: Vec<String> = ["item.cat", "user.age", "context.hour"]
            .into_iter()
            .map(String::from)
            .collect();
        Self {
            layers: 2,
            d_model: 4,
            heads: 2,
            ffn_mult: 2,
            embedding: EmbeddingConfig { dim: 2, buckets: 8 },
            tokenizer: TokenizerConfig {
                l_ns: 3,
                features,
                max_seq_len: 4,
                sim_pooling: true,
                ..TokenizerConfig::default()
            },
            ..Self::tiny()
        }
    }

    /// 6 blocks, width 256, 4 heads.
    pub fn onetrans_s() -> Self {
        Self {
            layers: 6,
            d_model: 256,
            heads: 4,
            tokenizer: TokenizerConfig {
                l_ns: 12,
                ..TokenizerConfig::default()
            },
            ..Self::tiny()
        }
    }

    /// 8 blocks, width 384.
    pub fn onetrans_l() -> Self {
        Self {
            layers: 8,
            d_model: 384,
            heads: 4,
            ..Self::onetrans_s()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn ffn_hidden(&self) -> usize {
        self.d_model * self.ffn_mult
    }

    pub fn l_ns(&self) -> usize {
        self.tokenizer.l_ns
    }

    /// Layers that actually run; the mean-pool baseline has none.
    pub fn blocks(&self) -> usize {
        match self.backbone {
            Backbone::OneTrans => self.layers,
            Backbone::MeanPool => 0,
        }
    }

    /// Names of every embedding table the model needs.
    pub fn table_names(&self) -> Result<Vec<String>> {
        let mut names: BTreeSet<String> = EVENT_TABLES.iter().map(|s| s.to_string()).collect();
        for f in self.tokenizer.sorted_features()? {
            names.insert(f.table().to_owned());
        }
        Ok(names.into_iter().collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 {
            return Err(Error::config("d_model and heads must be positive"));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.ffn_mult == 0 {
            return Err(Error::config("ffn_mult must be positive"));
        }
        if self.tasks.is_empty() {
            return Err(Error::config("at least one task is required"));
        }
        let unique: BTreeSet<_> = self.tasks.iter().collect();
        if unique.len() != self.tasks.len() {
            return Err(Error::config("tasks contain duplicates"));
        }
        if self.embedding.dim == 0 || self.embedding.buckets == 0 {
            return Err(Error::config("embedding dim and buckets must be positive"));
        }
        if let ScheduleRule::Custom { s_tokens } = &self.schedule {
            if s_tokens.len() != self.layers {
                return Err(Error::config(format!(
                    "custom schedule lists {} layers, model has {}",
                    s_tokens.len(),
                    self.layers
                )));
            }
            if s_tokens.windows(2).any(|w| w[1] > w[0]) {
                return Err(Error::config("custom schedule must be non-increasing"));
            }
        }
        self.tokenizer.validate()
    }
}
