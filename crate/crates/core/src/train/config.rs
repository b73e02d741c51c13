use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AdamW, TrainConfig, TrainMode};
use crate::data::DEFAULT_MASK_RATE;
use crate::distill::{assign_aspects, parse_layers, AspectWeights, KlDirection, PlanOverride};
use crate::distill::{DistillPlan, DEFAULT_KL_EPSILON};
use crate::error::{MakdError, Result};
use crate::factorize::FactorizationSpec;
use crate::tensor::GeluKind;
use crate::transformer::{ModelConfig, ModelKind};

/// How the student's weights start out.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudentInit {
    /// Truncated SVD of the teacher's projections.
    #[default]
    Svd,
    /// Same factorized shapes, random weights.
    Random,
}

/// Flat key/value run description, read from TOML. Every optimization,
/// plan and factorization setting has a key; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: TrainMode,

    pub corpus: Option<PathBuf>,
    pub teacher: Option<PathBuf>,
    /// Starting student checkpoint; when unset the student is built from
    /// the teacher according to `student_init`.
    pub student: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub resume: Option<PathBuf>,

    pub seq_len: usize,
    pub mask_rate: f64,
    pub heldout_fraction: f64,
    /// Seed of the train/held-out document split, kept apart from `seed` so
    /// runs with different training seeds share one held-out set.
    pub split_seed: u64,
    pub max_vocab: usize,

    // Teacher architecture (pretraining only).
    pub kind: ModelKind,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: Option<usize>,
    pub gelu: String,

    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub eval_interval: u64,
    pub checkpoint_interval: u64,

    pub rank: Option<usize>,
    pub rate: Option<f64>,
    pub factorize_embeddings: bool,
    pub embedding_rank: Option<usize>,
    pub student_init: StudentInit,

    /// Inclusive ranges such as `1-2`; unset means the default split.
    pub matrix_layers: Option<String>,
    pub layer_layers: Option<String>,
    pub model_loss: bool,
    pub temperature: f64,
    pub weight_matrix: f64,
    pub weight_layer: f64,
    pub weight_model: f64,
    pub kl_direction: KlDirection,
    pub kl_epsilon: f64,
    pub scale_model_by_t2: bool,
    pub allow_overlap: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            mode: TrainMode::DistillMakd,
            corpus: None,
            teacher: None,
            student: None,
            out: None,
            metrics: None,
            resume: None,
            seq_len: 32,
            mask_rate: DEFAULT_MASK_RATE,
            heldout_fraction: 0.1,
            split_seed: 0,
            max_vocab: 4096,
            kind: ModelKind::EncoderMlm,
            layers: 4,
            hidden: 128,
            heads: 4,
            ffn: None,
            gelu: "tanh".into(),
            steps: t.steps,
            batch_size: t.batch_size,
            peak_lr: t.peak_lr,
            warmup_fraction: t.warmup_fraction,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            adam_eps: t.adam.eps,
            weight_decay: t.adam.weight_decay,
            grad_clip: t.grad_clip,
            seed: t.seed,
            eval_interval: t.eval_interval,
            checkpoint_interval: t.checkpoint_interval,
            rank: None,
            rate: None,
            factorize_embeddings: false,
            embedding_rank: None,
            student_init: StudentInit::Svd,
            matrix_layers: None,
            layer_layers: None,
            model_loss: true,
            temperature: 1.0,
            weight_matrix: 1.0,
            weight_layer: 1.0,
            weight_model: 1.0,
            kl_direction: KlDirection::StudentTeacher,
            kl_epsilon: DEFAULT_KL_EPSILON,
            scale_model_by_t2: false,
            allow_overlap: false,
        }
    }
}

fn override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    /// Parses TOML text and then applies `key = value` overrides. Override
    /// values are read as TOML literals, falling back to plain strings.
    pub fn from_toml(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| MakdError::config(format!("run config: {e}")))?;
        for (k, v) in overrides {
            table.insert(k.clone(), override_value(v));
        }
        table.try_into().map_err(|e| MakdError::config(format!("run config: {e}")))
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MakdError::io(path, e))?;
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            mode: self.mode,
            steps: self.steps,
            batch_size: self.batch_size,
            peak_lr: self.peak_lr,
            warmup_fraction: self.warmup_fraction,
            adam: AdamW { beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps, weight_decay: self.weight_decay },
            grad_clip: self.grad_clip,
            seed: self.seed,
            eval_interval: self.eval_interval,
            checkpoint_interval: self.checkpoint_interval,
        }
    }

    pub fn factorization_spec(&self) -> Result<FactorizationSpec> {
        let mut spec = match (self.rank, self.rate) {
            (Some(k), None) => FactorizationSpec::uniform(k),
            (None, Some(r)) => FactorizationSpec::rate(r),
            (Some(_), Some(_)) => return Err(MakdError::config("give either rank or rate, not both")),
            (None, None) => return Err(MakdError::config("distillation needs rank or rate")),
        };
        spec.factorize_embeddings = self.factorize_embeddings;
        spec.embedding_rank = self.embedding_rank;
        Ok(spec)
    }

    pub fn plan(&self, layers: usize) -> Result<DistillPlan> {
        let overrides = PlanOverride {
            matrix_layers: self.matrix_layers.as_deref().map(parse_layers).transpose()?,
            layer_layers: self.layer_layers.as_deref().map(parse_layers).transpose()?,
            use_model_loss: Some(self.model_loss),
            allow_overlap: Some(self.allow_overlap),
        };
        let mut plan = assign_aspects(layers, Some(&overrides))?;
        plan.temperature = self.temperature;
        plan.weights = AspectWeights { matrix: self.weight_matrix, layer: self.weight_layer, model: self.weight_model };
        plan.kl_direction = self.kl_direction;
        plan.kl_epsilon = self.kl_epsilon;
        plan.scale_model_by_t2 = self.scale_model_by_t2;
        plan.validate(layers)?;
        Ok(plan)
    }

    /// Teacher architecture for a vocabulary of `vocab_size`.
    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let mut c = ModelConfig::new(self.kind, self.layers, self.hidden, self.heads, vocab_size, self.seq_len);
        if let Some(f) = self.ffn {
            c.ffn = f;
        }
        c.gelu = match self.gelu.as_str() {
            "tanh" => GeluKind::Tanh,
            "erf" => GeluKind::Erf,
            other => return Err(MakdError::config(format!("unknown gelu {other:?}"))),
        };
        c.validate()?;
        Ok(c)
    }
}
