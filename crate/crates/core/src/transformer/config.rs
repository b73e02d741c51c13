use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{MakdError, Result};
use crate::tensor::GeluKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum ModelKind {
    /// Bidirectional attention, masked-token prediction.
    #[default]
    #[serde(rename = "encoder-mlm")]
    EncoderMlm,
    /// Causal attention, next-token prediction.
    #[serde(rename = "decoder-causal")]
    DecoderCausal,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::EncoderMlm => "encoder-mlm",
            ModelKind::DecoderCausal => "decoder-causal",
        })
    }
}

impl FromStr for ModelKind {
    type Err = MakdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder-mlm" => Ok(ModelKind::EncoderMlm),
            "decoder-causal" => Ok(ModelKind::DecoderCausal),
            other => Err(MakdError::config(format!("unknown model kind {other:?}"))),
        }
    }
}

/// The six projection matrices of a transformer layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Query,
    Key,
    Value,
    Output,
    Up,
    Down,
}

impl Role {
    pub const ALL: [Role; 6] = [Role::Query, Role::Key, Role::Value, Role::Output, Role::Up, Role::Down];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Query => "query",
            Role::Key => "key",
            Role::Value => "value",
            Role::Output => "output",
            Role::Up => "up",
            Role::Down => "down",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = MakdError;

    fn from_str(s: &str) -> Result<Self> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| MakdError::config(format!("unknown weight role {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub layers: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Inner rank per projection role; roles absent from the map are dense.
    pub ranks: BTreeMap<Role, usize>,
    /// Inner rank of the token embedding, when it is factorized.
    pub embedding_rank: Option<usize>,
    pub gelu: GeluKind,
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    /// Dense config with `ffn = 4 · hidden`.
    pub fn new(
        kind: ModelKind,
        layers: usize,
        hidden: usize,
        heads: usize,
        vocab_size: usize,
        max_seq_len: usize,
    ) -> Self {
        ModelConfig {
            kind,
            layers,
            hidden,
            ffn: 4 * hidden,
            heads,
            vocab_size,
            max_seq_len,
            ranks: BTreeMap::new(),
            embedding_rank: None,
            gelu: GeluKind::Tanh,
            layer_norm_eps: 1e-12,
        }
    }

    /// BERT-base dimensions: 12 layers, 768 hidden, 3072 ffn, 12 heads.
    pub fn bert_base() -> Self {
        Self::new(ModelKind::EncoderMlm, 12, 768, 12, 30522, 512)
    }

    pub fn with_ffn(mut self, ffn: usize) -> Self {
        self.ffn = ffn;
        self
    }

    pub fn with_uniform_rank(mut self, k: usize) -> Self {
        self.ranks = Role::ALL.into_iter().map(|r| (r, k)).collect();
        self
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// `(rows, cols)` of a projection with the given role.
    pub fn role_dims(&self, role: Role) -> (usize, usize) {
        match role {
            Role::Query | Role::Key | Role::Value | Role::Output => (self.hidden, self.hidden),
            Role::Up => (self.hidden, self.ffn),
            Role::Down => (self.ffn, self.hidden),
        }
    }

    pub fn is_dense(&self) -> bool {
        self.ranks.is_empty() && self.embedding_rank.is_none()
    }

    /// Same architecture with every matrix dense.
    pub fn dense(&self) -> Self {
        ModelConfig { ranks: BTreeMap::new(), embedding_rank: None, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.ffn == 0 {
            return Err(MakdError::config("hidden, heads and ffn must be positive"));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(MakdError::config(format!(
                "hidden size {} is not divisible by head count {}",
                self.hidden, self.heads
            )));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(MakdError::config("vocab_size and max_seq_len must be positive"));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(MakdError::config("layer_norm_eps must be positive"));
        }
        for (&role, &k) in &self.ranks {
            let (n, m) = self.role_dims(role);
            check_rank(role.as_str(), k, n, m)?;
        }
        if let Some(k) = self.embedding_rank {
            check_rank("embedding", k, self.vocab_size, self.hidden)?;
        }
        Ok(())
    }

    /// Flat `config.*` key/value pairs, as stored in checkpoint headers.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("config.kind".to_string(), self.kind.to_string()),
            ("config.layers".into(), self.layers.to_string()),
            ("config.hidden".into(), self.hidden.to_string()),
            ("config.ffn".into(), self.ffn.to_string()),
            ("config.heads".into(), self.heads.to_string()),
            ("config.vocab_size".into(), self.vocab_size.to_string()),
            ("config.max_seq_len".into(), self.max_seq_len.to_string()),
            (
                "config.gelu".into(),
                match self.gelu {
                    GeluKind::Tanh => "tanh".into(),
                    GeluKind::Erf => "erf".into(),
                },
            ),
            ("config.layer_norm_eps".into(), self.layer_norm_eps.to_string()),
        ];
        for (role, k) in &self.ranks {
            out.push((format!("config.rank.{role}"), k.to_string()));
        }
        if let Some(k) = self.embedding_rank {
            out.push(("config.embedding_rank".into(), k.to_string()));
        }
        out
    }

    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let get = |key: &str| -> Result<&String> {
            pairs.get(key).ok_or_else(|| MakdError::config(format!("missing {key}")))
        };
        let num = |key: &str| -> Result<usize> {
            get(key)?.parse().map_err(|_| MakdError::config(format!("{key} is not an integer")))
        };
        let mut ranks = BTreeMap::new();
        for (key, value) in pairs.range("config.rank.".to_string()..) {
            let Some(role) = key.strip_prefix("config.rank.") else {
                break;
            };
            let k = value.parse().map_err(|_| MakdError::config(format!("{key} is not an integer")))?;
            ranks.insert(role.parse()?, k);
        }
        let gelu = match get("config.gelu")?.as_str() {
            "tanh" => GeluKind::Tanh,
            "erf" => GeluKind::Erf,
            other => return Err(MakdError::config(format!("unknown gelu {other:?}"))),
        };
        let config = ModelConfig {
            kind: get("config.kind")?.parse()?,
            layers: num("config.layers")?,
            hidden: num("config.hidden")?,
            ffn: num("config.ffn")?,
            heads: num("config.heads")?,
            vocab_size: num("config.vocab_size")?,
            max_seq_len: num("config.max_seq_len")?,
            ranks,
            embedding_rank: pairs
                .get("config.embedding_rank")
                .map(|v| v.parse())
                .transpose()
                .map_err(|_| MakdError::config("config.embedding_rank is not an integer"))?,
            gelu,
            layer_norm_eps: get("config.layer_norm_eps")?
                .parse()
                .map_err(|_| MakdError::config("config.layer_norm_eps is not a number"))?,
        };
        config.validate()?;
        Ok(config)
    }
}

pub fn check_rank(role: &str, k: usize, n: usize, m: usize) -> Result<()> {
    let max = n.min(m);
    if k == 0 || k > max {
        return Err(MakdError::Rank { role: role.to_string(), rank: k, rows: n, cols: m, max });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_ffn_is_four_times_hidden() {
        let c = ModelConfig::new(ModelKind::EncoderMlm, 2, 16, 4, 10, 8);
        assert_eq!(c.ffn, 64);
        assert_eq!(c.head_dim(), 4);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let c = ModelConfig::new(ModelKind::EncoderMlm, 2, 10, 4, 10, 8);
        assert!(c.validate().is_err());
    }

    #[test]
    fn rejects_rank_above_min_dim() {
        let c = ModelConfig::new(ModelKind::EncoderMlm, 2, 16, 4, 10, 8).with_uniform_rank(17);
        let err = c.validate().unwrap_err();
        assert!(err.to_string().contains("query"), "{err}");
    }

    #[test]
    fn pairs_round_trip() {
        let mut c = ModelConfig::new(ModelKind::DecoderCausal, 3, 16, 2, 11, 9).with_uniform_rank(4);
        c.embedding_rank = Some(3);
        c.gelu = GeluKind::Erf;
        let map: BTreeMap<_, _> = c.to_pairs().into_iter().collect();
        assert_eq!(ModelConfig::from_pairs(&map).unwrap(), c);
    }
}
