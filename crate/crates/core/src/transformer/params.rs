//! The parameter tree, generic over what sits at each leaf: `Tensor` for a
//! stored model, `Var` once bound to a tape, `Vec<usize>` for a shape-only
//! layout. Leaf names are stable and double as checkpoint tensor names.

use super::config::{ModelConfig, Role};

#[derive(Clone, Debug, PartialEq)]
pub enum Linear<T> {
    /// `x · weight + bias`, weight `n×m`.
    Dense { weight: T, bias: T },
    /// `(x · a) · b + bias`, `a` is `n×k`, `b` is `k×m`. The product `a·b` is
    /// never formed.
    Factorized { a: T, b: T, bias: T },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<T> {
    pub gain: T,
    pub bias: T,
}

/// Token embedding table, optionally stored as a low-rank pair.
#[derive(Clone, Debug, PartialEq)]
pub enum Embedding<T> {
    Dense(T),
    Factorized { a: T, b: T },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
    pub attention_norm: Norm<T>,
    pub up: Linear<T>,
    pub down: Linear<T>,
    pub ffn_norm: Norm<T>,
}

impl<T> LayerParams<T> {
    pub fn linear(&self, role: Role) -> &Linear<T> {
        match role {
            Role::Query => &self.query,
            Role::Key => &self.key,
            Role::Value => &self.value,
            Role::Output => &self.output,
            Role::Up => &self.up,
            Role::Down => &self.down,
        }
    }

    pub fn linear_mut(&mut self, role: Role) -> &mut Linear<T> {
        match role {
            Role::Query => &mut self.query,
            Role::Key => &mut self.key,
            Role::Value => &mut self.value,
            Role::Output => &mut self.output,
            Role::Up => &mut self.up,
            Role::Down => &mut self.down,
        }
    }
}

/// Output logits reuse the token embedding (`logits = H · Eᵀ + head.bias`).
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub token_embedding: Embedding<T>,
    pub position_embedding: T,
    pub layers: Vec<LayerParams<T>>,
    pub output_bias: T,
}

impl<T> Linear<T> {
    fn try_map<U, E>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> Result<U, E>) -> Result<Linear<U>, E> {
        Ok(match self {
            Linear::Dense { weight, bias } => Linear::Dense {
                weight: f(&format!("{prefix}.weight"), weight)?,
                bias: f(&format!("{prefix}.bias"), bias)?,
            },
            Linear::Factorized { a, b, bias } => Linear::Factorized {
                a: f(&format!("{prefix}.a"), a)?,
                b: f(&format!("{prefix}.b"), b)?,
                bias: f(&format!("{prefix}.bias"), bias)?,
            },
        })
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        match self {
            Linear::Dense { weight, bias } => {
                f(&format!("{prefix}.weight"), weight);
                f(&format!("{prefix}.bias"), bias);
            }
            Linear::Factorized { a, b, bias } => {
                f(&format!("{prefix}.a"), a);
                f(&format!("{prefix}.b"), b);
                f(&format!("{prefix}.bias"), bias);
            }
        }
    }

    pub fn bias(&self) -> &T {
        match self {
            Linear::Dense { bias, .. } | Linear::Factorized { bias, .. } => bias,
        }
    }

    pub fn is_factorized(&self) -> bool {
        matches!(self, Linear::Factorized { .. })
    }
}

impl<T> Norm<T> {
    fn try_map<U, E>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> Result<U, E>) -> Result<Norm<U>, E> {
        Ok(Norm { gain: f(&format!("{prefix}.gain"), &self.gain)?, bias: f(&format!("{prefix}.bias"), &self.bias)? })
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        f(&format!("{prefix}.gain"), &mut self.gain);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

impl<T> Params<T> {
    /// Structure-preserving map over every leaf, in canonical order.
    pub fn try_map<U, E>(&self, mut f: impl FnMut(&str, &T) -> Result<U, E>) -> Result<Params<U>, E> {
        let token_embedding = match &self.token_embedding {
            Embedding::Dense(w) => Embedding::Dense(f("embeddings.token.weight", w)?),
            Embedding::Factorized { a, b } => {
                Embedding::Factorized { a: f("embeddings.token.a", a)?, b: f("embeddings.token.b", b)? }
            }
        };
        let position_embedding = f("embeddings.position.weight", &self.position_embedding)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("layers.{i}");
            layers.push(LayerParams {
                query: l.query.try_map(&format!("{p}.attention.query"), &mut f)?,
                key: l.key.try_map(&format!("{p}.attention.key"), &mut f)?,
                value: l.value.try_map(&format!("{p}.attention.value"), &mut f)?,
                output: l.output.try_map(&format!("{p}.attention.output"), &mut f)?,
                attention_norm: l.attention_norm.try_map(&format!("{p}.attention_norm"), &mut f)?,
                up: l.up.try_map(&format!("{p}.ffn.up"), &mut f)?,
                down: l.down.try_map(&format!("{p}.ffn.down"), &mut f)?,
                ffn_norm: l.ffn_norm.try_map(&format!("{p}.ffn_norm"), &mut f)?,
            });
        }
        let output_bias = f("head.bias", &self.output_bias)?;
        Ok(Params { token_embedding, position_embedding, layers, output_bias })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> Params<U> {
        self.try_map(|n, t| Ok::<_, std::convert::Infallible>(f(n, t))).unwrap_or_else(|e| match e {})
    }

    /// Visits every leaf in canonical order.
    pub fn for_each(&self, mut f: impl FnMut(&str, &T)) {
        self.map(|n, t| f(n, t));
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut T)) {
        match &mut self.token_embedding {
            Embedding::Dense(w) => f("embeddings.token.weight", w),
            Embedding::Factorized { a, b } => {
                f("embeddings.token.a", a);
                f("embeddings.token.b", b);
            }
        }
        f("embeddings.position.weight", &mut self.position_embedding);
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = format!("layers.{i}");
            l.query.for_each_mut(&format!("{p}.attention.query"), &mut f);
            l.key.for_each_mut(&format!("{p}.attention.key"), &mut f);
            l.value.for_each_mut(&format!("{p}.attention.value"), &mut f);
            l.output.for_each_mut(&format!("{p}.attention.output"), &mut f);
            l.attention_norm.for_each_mut(&format!("{p}.attention_norm"), &mut f);
            l.up.for_each_mut(&format!("{p}.ffn.up"), &mut f);
            l.down.for_each_mut(&format!("{p}.ffn.down"), &mut f);
            l.ffn_norm.for_each_mut(&format!("{p}.ffn_norm"), &mut f);
        }
        f("head.bias", &mut self.output_bias);
    }

    /// Leaves in canonical order.
    pub fn leaves(&self) -> Vec<(String, &T)> {
        let mut names = Vec::new();
        self.for_each(|n, _| names.push(n.to_string()));
        let mut refs: Vec<&T> = Vec::with_capacity(names.len());
        self.collect_refs(&mut refs);
        names.into_iter().zip(refs).collect()
    }

    fn collect_refs<'a>(&'a self, out: &mut Vec<&'a T>) {
        match &self.token_embedding {
            Embedding::Dense(w) => out.push(w),
            Embedding::Factorized { a, b } => {
                out.push(a);
                out.push(b);
            }
        }
        out.push(&self.position_embedding);
        for l in &self.layers {
            for lin in [&l.query, &l.key, &l.value, &l.output] {
                lin.collect_refs(out);
            }
            out.push(&l.attention_norm.gain);
            out.push(&l.attention_norm.bias);
            l.up.collect_refs(out);
            l.down.collect_refs(out);
            out.push(&l.ffn_norm.gain);
            out.push(&l.ffn_norm.bias);
        }
        out.push(&self.output_bias);
    }
}

impl<T> Linear<T> {
    fn collect_refs<'a>(&'a self, out: &mut Vec<&'a T>) {
        match self {
            Linear::Dense { weight, bias } => {
                out.push(weight);
                out.push(bias);
            }
            Linear::Factorized { a, b, bias } => {
                out.push(a);
                out.push(b);
                out.push(bias);
            }
        }
    }
}

/// Shapes of every parameter implied by `config`.
pub fn layout(config: &ModelConfig) -> Params<Vec<usize>> {
    let (d, v) = (config.hidden, config.vocab_size);
    let linear = |role: Role| {
        let (n, m) = config.role_dims(role);
        match config.ranks.get(&role) {
            Some(&k) => Linear::Factorized { a: vec![n, k], b: vec![k, m], bias: vec![m] },
            None => Linear::Dense { weight: vec![n, m], bias: vec![m] },
        }
    };
    let norm = || Norm { gain: vec![d], bias: vec![d] };
    Params {
        token_embedding: match config.embedding_rank {
            Some(k) => Embedding::Factorized { a: vec![v, k], b: vec![k, d] },
            None => Embedding::Dense(vec![v, d]),
        },
        position_embedding: vec![config.max_seq_len, d],
        layers: (0..config.layers)
            .map(|_| LayerParams {
                query: linear(Role::Query),
                key: linear(Role::Key),
                value: linear(Role::Value),
                output: linear(Role::Output),
                attention_norm: norm(),
                up: linear(Role::Up),
                down: linear(Role::Down),
                ffn_norm: norm(),
            })
            .collect(),
        output_bias: vec![v],
    }
}

/// Total parameter count implied by `config`, without allocating.
pub fn count_params(config: &ModelConfig) -> usize {
    let mut total = 0;
    layout(config).for_each(|_, shape| total += shape.iter().product::<usize>());
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::ModelKind;

    #[test]
    fn leaves_and_for_each_agree_on_order() {
        let c = ModelConfig::new(ModelKind::EncoderMlm, 2, 8, 2, 5, 4).with_uniform_rank(2);
        let lay = layout(&c);
        let mut names = Vec::new();
        lay.for_each(|n, _| names.push(n.to_string()));
        let leaves: Vec<String> = lay.leaves().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, leaves);
        let mut mut_names = Vec::new();
        lay.clone().for_each_mut(|n, _| mut_names.push(n.to_string()));
        assert_eq!(names, mut_names);
        assert!(names.contains(&"layers.1.ffn.down.a".to_string()));
    }

    #[test]
    fn factorized_counts_follow_k_n_plus_m() {
        let dense = ModelConfig::new(ModelKind::EncoderMlm, 1, 8, 2, 5, 4);
        let fact = dense.clone().with_uniform_rank(2);
        // Each of q/k/v/o saves 64 - 2·16; up and down save 256 - 2·40.
        let saved = 4 * (64 - 32) + 2 * (256 - 80);
        assert_eq!(count_params(&dense) - count_params(&fact), saved);
    }
}
