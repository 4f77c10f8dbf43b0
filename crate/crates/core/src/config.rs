//! Run configuration: model shape, loss weights, optimizer recipe, data paths.
//!
//! Every field has a default, so a config file only needs the keys it changes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the attribute stream obtains its queries and query-learning parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    /// Separate attribute query embedding (residually added to the object
    /// query) and independent dynamic-conv / self-attention parameters.
    #[default]
    Decoupled,
    /// Attribute query generated from the object query by an MLP; dynamic-conv
    /// and self-attention parameters shared with the object stream.
    Shared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_queries: usize,
    pub dim: usize,
    pub stages: usize,
    /// Attention heads; `None` picks 8 for `dim >= 32`, else 4.
    pub heads: Option<usize>,
    /// Pyramid levels grouped by multi-layer rendering, coarsest first.
    pub mlr_levels: usize,
    pub num_classes: usize,
    pub num_attributes: usize,
    pub query_mode: QueryMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_queries: 10,
            dim: 32,
            stages: 3,
            heads: None,
            mlr_levels: 4,
            num_classes: 3,
            num_attributes: 6,
            query_mode: QueryMode::Decoupled,
        }
    }
}

impl ModelConfig {
    pub fn heads(&self) -> usize {
        self.heads.unwrap_or(if self.dim >= 32 { 8 } else { 4 })
    }

    pub fn ffn_hidden(&self) -> usize {
        2 * self.dim
    }

    /// Backbone stage widths: doubling from `dim / 4` and capped at `dim`.
    pub fn backbone_widths(&self) -> [usize; 4] {
        let base = (self.dim / 4).max(1);
        std::array::from_fn(|i| (base << i).min(self.dim))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.stages == 0 {
            return fail("stages must be >= 1".into());
        }
        if self.num_queries == 0
            || self.dim == 0
            || self.num_classes == 0
            || self.num_attributes == 0
        {
            return fail(
                "num_queries, dim, num_classes and num_attributes must be positive".into(),
            );
        }
        if !self.dim.is_multiple_of(2) {
            return fail(format!(
                "dim {} must be even for the 2-D positional encoding",
                self.dim
            ));
        }
        if !self.dim.is_multiple_of(self.heads()) {
            return fail(format!(
                "dim {} is not divisible by {} heads",
                self.dim,
                self.heads()
            ));
        }
        if !(1..=4).contains(&self.mlr_levels) {
            return fail(format!("mlr_levels {} outside 1..=4", self.mlr_levels));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_cls: f64,
    pub lambda_mask: f64,
    pub lambda_atr: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub dice_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_cls: 1.0,
            lambda_mask: 1.0,
            lambda_atr: 1.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            dice_eps: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda_cls, self.lambda_mask, self.lambda_atr]
            .iter()
            .any(|&l| l.is_nan() || l < 0.0)
        {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fraction of steps spent in linear warmup before cosine decay.
    pub warmup_frac: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_frac: 0.1,
            steps: 2000,
            batch_size: 2,
            grad_clip: Some(1.0),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Annotation file of the training split.
    pub train: Option<PathBuf>,
    /// Annotation file of the evaluation split.
    pub eval: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub seed: u64,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::Config(format!("{}: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
