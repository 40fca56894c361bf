//! Model dimensions and training configuration.

use crate::error::{KmapError, Result};
use serde::{Deserialize, Serialize};

/// Embedding and layer sizes. Field names follow the usual latent-dimension
/// naming for this model family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    /// Student embedding size.
    pub d_s: usize,
    /// Question embedding size for the knowledge component.
    pub d_qk: usize,
    /// Lecture embedding size for the knowledge component.
    pub d_lk: usize,
    /// Response embedding size.
    pub d_r: usize,
    /// Material-type embedding size.
    pub d_z: usize,
    /// Question embedding size for the behavior component.
    pub d_qb: usize,
    /// Lecture embedding size for the behavior component (must equal `d_qb`).
    pub d_lb: usize,
    /// Number of latent knowledge concepts.
    pub n_c: usize,
    /// Value-memory feature size; also the latent size of the material encoder.
    pub d_v: usize,
    /// Behavior LSTM hidden size.
    pub d_h: usize,
    /// Attention width of the type head.
    pub attn_dim: usize,
    /// Number of attention heads in the type head.
    pub attn_heads: usize,
}

impl ModelDims {
    /// Sizes tuned for the EdNet log format.
    pub fn ednet() -> Self {
        ModelDims {
            d_s: 32,
            d_qk: 64,
            d_lk: 32,
            d_r: 32,
            d_z: 32,
            d_qb: 32,
            d_lb: 32,
            n_c: 8,
            d_v: 32,
            d_h: 32,
            attn_dim: 32,
            attn_heads: 4,
        }
    }

    /// Sizes tuned for the Junyi log format.
    pub fn junyi() -> Self {
        ModelDims {
            d_qk: 32,
            ..ModelDims::ednet()
        }
    }

    /// Small sizes for tests and smoke runs.
    pub fn tiny() -> Self {
        ModelDims {
            d_s: 8,
            d_qk: 8,
            d_lk: 8,
            d_r: 4,
            d_z: 4,
            d_qb: 8,
            d_lb: 8,
            n_c: 4,
            d_v: 8,
            d_h: 8,
            attn_dim: 8,
            attn_heads: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_qb != self.d_lb {
            return Err(KmapError::invalid(format!(
                "d_qb ({}) must equal d_lb ({}): the behavior cell switches between them per step",
                self.d_qb, self.d_lb
            )));
        }
        if self.attn_dim % self.attn_heads != 0 {
            return Err(KmapError::invalid(format!(
                "attn_heads ({}) must divide attn_dim ({})",
                self.attn_heads, self.attn_dim
            )));
        }
        let positive = [
            self.d_s, self.d_qk, self.d_lk, self.d_r, self.d_z, self.d_qb, self.d_lb, self.n_c,
            self.d_v, self.d_h, self.attn_dim, self.attn_heads,
        ];
        if positive.iter().any(|&d| d == 0) {
            return Err(KmapError::invalid("all dimensions must be positive"));
        }
        Ok(())
    }
}

fn default_epochs() -> usize {
    50
}
fn default_batch_size() -> usize {
    32
}
fn default_segment_len() -> usize {
    100
}
fn default_k_train() -> usize {
    5
}
fn default_k_eval() -> usize {
    99
}
fn default_n_clusters() -> usize {
    3
}
fn default_tau() -> f64 {
    0.1
}
fn default_lr() -> f64 {
    0.1
}
fn default_cutoff() -> usize {
    5
}
fn default_seed() -> u64 {
    7
}
fn default_drop_frac() -> f64 {
    0.1
}
fn default_drop_user_frac() -> f64 {
    0.5
}
fn default_train_frac() -> f64 {
    0.8
}
fn default_loss_weights() -> [f64; 5] {
    [1.0; 5]
}
fn default_clip_norm() -> f64 {
    5.0
}
fn default_eval_every() -> usize {
    1
}
fn default_dims() -> ModelDims {
    ModelDims::ednet()
}

/// Full training configuration; serialized as the config JSON the CLI reads.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Fixed segment length T.
    #[serde(default = "default_segment_len")]
    pub segment_len: usize,
    /// Negative candidates per step during training.
    #[serde(default = "default_k_train")]
    pub k_train: usize,
    /// Negative candidates per step at evaluation (capped to vocab size - 1).
    #[serde(default = "default_k_eval")]
    pub k_eval: usize,
    #[serde(default = "default_n_clusters")]
    pub n_clusters: usize,
    /// Temperature of the silhouette loss.
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Ranking cutoff for HR@k / NDCG@k.
    #[serde(default = "default_cutoff")]
    pub cutoff: usize,
    /// Fraction of a user's steps dropped by the training augmentation.
    #[serde(default = "default_drop_frac")]
    pub drop_frac: f64,
    /// Fraction of users per batch the drop augmentation applies to.
    #[serde(default = "default_drop_user_frac")]
    pub drop_user_frac: f64,
    /// Leading fraction of each student's stream used for training.
    #[serde(default = "default_train_frac")]
    pub train_frac: f64,
    /// Weights for (contrastive, reconstruction, ntxent, performance, type).
    #[serde(default = "default_loss_weights")]
    pub loss_weights: [f64; 5],
    /// Global gradient-norm clip for the inner loop.
    #[serde(default = "default_clip_norm")]
    pub clip_norm: f64,
    /// Evaluate the test split every this many epochs (0 = final only).
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Load concept projections from this checkpoint and keep them frozen.
    #[serde(default)]
    pub freeze_concepts: Option<String>,
    /// Path to the events JSONL; may be overridden on the CLI.
    #[serde(default)]
    pub data: Option<String>,
    #[serde(default = "default_dims")]
    pub dims: ModelDims,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults are complete")
    }
}

impl TrainConfig {
    /// Hyperparameter preset by dataset name.
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        match name {
            "ednet" => {
                cfg.dims = ModelDims::ednet();
                cfg.lr = 0.1;
            }
            "junyi" => {
                cfg.dims = ModelDims::junyi();
                cfg.lr = 0.01;
            }
            other => {
                return Err(KmapError::invalid(format!(
                    "unknown preset `{other}` (expected `ednet` or `junyi`)"
                )))
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.segment_len < 2 {
            return Err(KmapError::invalid("segment_len must be at least 2"));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.k_train == 0 || self.k_eval == 0 {
            return Err(KmapError::invalid(
                "epochs, batch_size, k_train and k_eval must be positive",
            ));
        }
        if self.n_clusters < 2 {
            return Err(KmapError::invalid(
                "n_clusters must be at least 2 for the silhouette loss to exist",
            ));
        }
        if !(self.tau > 0.0) || !(self.lr > 0.0) {
            return Err(KmapError::invalid("tau and lr must be positive"));
        }
        for (name, v) in [
            ("drop_frac", self.drop_frac),
            ("drop_user_frac", self.drop_user_frac),
            ("train_frac", self.train_frac),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(KmapError::invalid(format!("{name} must be in [0, 1]")));
            }
        }
        Ok(())
    }

    /// Apply the `KMAP_SEED` environment override if present.
    pub fn apply_env_seed(&mut self) -> Result<()> {
        if let Ok(s) = std::env::var("KMAP_SEED") {
            self.seed = s
                .parse()
                .map_err(|_| KmapError::invalid(format!("KMAP_SEED=`{s}` is not an integer")))?;
        }
        Ok(())
    }
}
