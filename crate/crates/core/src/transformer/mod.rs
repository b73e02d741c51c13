//! Post-norm transformer stacks (encoder with masked-token head, or causal
//! decoder), with every intermediate the distillation losses need exposed
//! through [`Trace`].
//!
//! Conventions: learned absolute position embeddings, output head tied to
//! the token embedding plus a free bias, biases on every projection, no
//! dropout. Weight matrices multiply from the right (`x · W`).

mod config;
mod forward;
mod params;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

pub use config::{check_rank, ModelConfig, ModelKind, Role};
pub use forward::{
    attention_mask, ffn_forward, forward, linear, mha_forward, ActivationTrace, FfnOutput, Input, LayerTrace,
    MhaOutput, Trace,
};

pub use params::{count_params, layout, Embedding, LayerParams, Linear, Norm, Params};

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{MakdError, Result};
use crate::tensor::Tensor;

const EMBEDDING_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel {
    pub config: ModelConfig,
    pub params: Params<Tensor>,
}

impl TransformerModel {
    /// Random initialization: embeddings `N(0, 0.02²)`, projection factors
    /// `N(0, 1/fan_in)`, zero biases, unit norm gains.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = layout(&config).map(|name, shape| {
            if name.ends_with(".gain") {
                Tensor::full(shape, 1.0)
            } else if name.ends_with(".bias") {
                Tensor::zeros(shape)
            } else if name.starts_with("embeddings.") {
                Tensor::randn(shape, EMBEDDING_STD, rng)
            } else {
                Tensor::randn(shape, 1.0 / (shape[0] as f64).sqrt(), rng)
            }
        });
        Ok(TransformerModel { config, params })
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.params.for_each(|_, t| n += t.len());
        n
    }

    /// True when no matrix is stored in factorized form.
    pub fn is_dense(&self) -> bool {
        self.config.is_dense()
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Params<Var> {
        self.params.map(|_, t| tape.leaf(t.clone(), trainable))
    }

    /// Forward pass on a private tape; nothing is trainable.
    pub fn forward(&self, input: &Input) -> Result<ActivationTrace> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let trace = forward(&mut tape, &self.config, &params, input)?;
        Ok(trace.materialize(&tape))
    }

    pub fn logits(&self, input: &Input) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let trace = forward(&mut tape, &self.config, &params, input)?;
        Ok(tape.value(trace.logits).clone())
    }

    pub fn to_checkpoint(&self, extra: &BTreeMap<String, String>) -> Checkpoint {
        let mut meta: BTreeMap<String, String> = self.config.to_pairs().into_iter().collect();
        meta.extend(extra.iter().map(|(k, v)| (k.clone(), v.clone())));
        let mut tensors = Vec::new();
        self.params.for_each(|name, t| tensors.push((name.to_string(), t.clone())));
        Checkpoint { meta, tensors }
    }

    /// Rebuilds a model from a checkpoint; tensors not belonging to the
    /// model (e.g. optimizer state) are ignored.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = ModelConfig::from_pairs(&ck.meta)?;
        let by_name: HashMap<&str, &Tensor> = ck.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let params = layout(&config).try_map(|name, shape| {
            let t = by_name.get(name).ok_or_else(|| MakdError::Architecture(format!("checkpoint lacks {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(MakdError::Architecture(format!(
                    "{name} has shape {:?}, config implies {shape:?}",
                    t.shape()
                )));
            }
            Ok((*t).clone())
        })?;
        Ok(TransformerModel { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint(&BTreeMap::new()).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
