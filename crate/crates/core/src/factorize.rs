//! Student construction by truncated SVD of teacher projections, and the
//! parameter / multiply-accumulate accounting that goes with it.
//!
//! A weight `W` (`n×m`) with SVD `U Σ Vᵀ` is replaced by `A = U_k Σ_k`
//! (`n×k`) and `B = V_kᵀ` (`k×m`), which stores `k(n+m)` values instead of
//! `nm`. The bias stays on the output side, so `x·A·B + b` is the rank-`k`
//! affine map closest to the original.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MakdError, Result};
use crate::tensor::{svd, Tensor};
use crate::transformer::{check_rank, count_params, Embedding, Linear, ModelConfig, Role, TransformerModel};

/// Result of truncating one matrix.
#[derive(Clone, Debug)]
pub struct Truncation {
    pub a: Tensor,
    pub b: Tensor,
    /// Full spectrum, descending.
    pub singular_values: Vec<f64>,
    /// `‖W − AB‖_F`, from the discarded singular values.
    pub error: f64,
    /// Fraction of `‖W‖²_F` kept; 1 for a zero matrix.
    pub energy_retained: f64,
}

/// Best rank-`k` factors of `w`: `A = U[:, :k]·diag(S[:k])`, `B = V[:, :k]ᵀ`.
pub fn svd_truncate(w: &Tensor, k: usize) -> Result<(Tensor, Tensor)> {
    truncate(w, k, "matrix").map(|t| (t.a, t.b))
}

pub fn truncate(w: &Tensor, k: usize, role: &str) -> Result<Truncation> {
    if w.shape().len() != 2 {
        return Err(MakdError::Shape { op: "svd_truncate", lhs: w.shape().to_vec(), rhs: vec![] });
    }
    let (n, m) = (w.rows(), w.cols());
    check_rank(role, k, n, m)?;
    let d = svd(w)?;
    let r = d.s.len();
    let mut a = Vec::with_capacity(n * k);
    for i in 0..n {
        for j in 0..k {
            a.push(d.u.at(i, j) * d.s[j]);
        }
    }
    let mut b = Vec::with_capacity(k * m);
    for j in 0..k {
        for i in 0..m {
            b.push(d.v.at(i, j));
        }
    }
    let tail: f64 = d.s[k..r].iter().map(|s| s * s).sum();
    let total: f64 = d.s.iter().map(|s| s * s).sum();
    Ok(Truncation {
        a: Tensor::new(vec![n, k], a)?,
        b: Tensor::new(vec![k, m], b)?,
        error: tail.sqrt(),
        energy_retained: if total > 0.0 { 1.0 - tail / total } else { 1.0 },
        singular_values: d.s,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum RankTarget {
    /// Same inner rank for every covered role.
    Uniform(usize),
    PerRole(BTreeMap<Role, usize>),
    /// Minimum `teacher_params / student_params`; resolved to the largest
    /// uniform rank that still meets it.
    Rate(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorizationSpec {
    pub target: RankTarget,
    pub roles: BTreeSet<Role>,
    pub factorize_embeddings: bool,
    /// Rank of the token-embedding factors; defaults to the uniform rank.
    pub embedding_rank: Option<usize>,
}

impl FactorizationSpec {
    pub fn uniform(k: usize) -> Self {
        FactorizationSpec {
            target: RankTarget::Uniform(k),
            roles: Role::ALL.into_iter().collect(),
            factorize_embeddings: false,
            embedding_rank: None,
        }
    }

    pub fn rate(rate: f64) -> Self {
        FactorizationSpec { target: RankTarget::Rate(rate), ..Self::uniform(1) }
    }

    /// Every covered role at `min(n, m)`: lossless, though larger than dense.
    pub fn full_rank(config: &ModelConfig) -> Self {
        let ranks = Role::ALL
            .into_iter()
            .map(|r| {
                let (n, m) = config.role_dims(r);
                (r, n.min(m))
            })
            .collect();
        FactorizationSpec { target: RankTarget::PerRole(ranks), ..Self::uniform(1) }
    }

    pub fn with_embeddings(mut self, on: bool) -> Self {
        self.factorize_embeddings = on;
        self
    }

    /// The student config this spec produces from `teacher`.
    pub fn student_config(&self, teacher: &ModelConfig) -> Result<ModelConfig> {
        if !teacher.is_dense() {
            return Err(MakdError::invalid("teacher must be dense"));
        }
        let with_uniform = |k: usize| -> Result<ModelConfig> {
            let mut c = teacher.clone();
            c.ranks = self.roles.iter().map(|&r| (r, k)).collect();
            if self.factorize_embeddings {
                c.embedding_rank = Some(self.embedding_rank.unwrap_or(k));
            }
            Ok(c)
        };
        let config = match &self.target {
            RankTarget::Uniform(k) => with_uniform(*k)?,
            RankTarget::PerRole(map) => {
                let mut c = teacher.clone();
                for role in &self.roles {
                    let k = map.get(role).ok_or_else(|| MakdError::config(format!("no rank given for role {role}")))?;
                    c.ranks.insert(*role, *k);
                }
                if self.factorize_embeddings {
                    let k = self
                        .embedding_rank
                        .ok_or_else(|| MakdError::config("embedding_rank required with per-role ranks"))?;
                    c.embedding_rank = Some(k);
                }
                c
            }
            RankTarget::Rate(rate) => {
                if !(*rate > 0.0) {
                    return Err(MakdError::config(format!("compression rate {rate} must be positive")));
                }
                let max_k = self
                    .roles
                    .iter()
                    .map(|&r| {
                        let (n, m) = teacher.role_dims(r);
                        n.min(m)
                    })
                    .min()
                    .unwrap_or(1);
                let teacher_params = count_params(teacher) as f64;
                // Parameter count grows with k, so the feasible set is a prefix.
                let mut best = None;
                for k in 1..=max_k {
                    let c = with_uniform(k)?;
                    if c.validate().is_err() {
                        break;
                    }
                    if teacher_params / count_params(&c) as f64 >= *rate {
                        best = Some(c);
                    } else {
                        break;
                    }
                }
                best.ok_or_else(|| MakdError::config(format!("no uniform rank reaches compression rate {rate}")))?
            }
        };
        for (&role, &k) in &config.ranks {
            let (n, m) = config.role_dims(role);
            check_rank(role.as_str(), k, n, m)?;
        }
        if let Some(k) = config.embedding_rank {
            check_rank("embedding", k, config.vocab_size, config.hidden)?;
        }
        Ok(config)
    }
}

/// Student with the teacher's depth and width. Covered projections are
/// replaced by their truncated SVD factors; biases, norms, position
/// embeddings and (unless requested) token embeddings are copied verbatim.
pub fn build_student(teacher: &TransformerModel, spec: &FactorizationSpec) -> Result<TransformerModel> {
    let config = spec.student_config(&teacher.config)?;
    let mut params = teacher.params.clone();

    let jobs: Vec<(usize, Role, usize)> =
        (0..config.layers).flat_map(|l| config.ranks.iter().map(move |(&r, &k)| (l, r, k))).collect();
    let factored: Vec<(usize, Role, Result<Truncation>)> = jobs
        .par_iter()
        .map(|&(l, role, k)| {
            let res = match teacher.params.layers[l].linear(role) {
                Linear::Dense { weight, .. } => truncate(weight, k, &format!("layers.{l}.{role}")),
                Linear::Factorized { .. } => Err(MakdError::invalid("teacher must be dense")),
            };
            (l, role, res)
        })
        .collect();
    for (l, role, res) in factored {
        let t = res?;
        let bias = teacher.params.layers[l].linear(role).bias().clone();
        *params.layers[l].linear_mut(role) = Linear::Factorized { a: t.a, b: t.b, bias };
    }
    if let Some(k) = config.embedding_rank {
        let Embedding::Dense(w) = &teacher.params.token_embedding else {
            return Err(MakdError::invalid("teacher must be dense"));
        };
        let t = truncate(w, k, "embedding")?;
        params.token_embedding = Embedding::Factorized { a: t.a, b: t.b };
    }
    Ok(TransformerModel { config, params })
}

/// Accounting for one weight matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// `None` when the student keeps the matrix dense.
    pub rank: Option<usize>,
    pub dense_params: usize,
    pub student_params: usize,
    pub truncation_error: Option<f64>,
    pub energy_retained: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub matrices: Vec<MatrixReport>,
    pub teacher_params: usize,
    pub student_params: usize,
    /// `teacher_params / student_params`.
    pub param_ratio: f64,
    /// Multiply-accumulates per token in the projection matrices of the
    /// transformer stack (embeddings and attention scores excluded).
    pub teacher_linear_macs: usize,
    pub student_linear_macs: usize,
    /// `teacher_linear_macs / student_linear_macs`.
    pub flop_ratio: f64,
    /// Matrices whose factorized form is larger than the dense original.
    pub inflated: Vec<String>,
    pub warnings: Vec<String>,
}

fn matrix_cost(n: usize, m: usize, rank: Option<usize>) -> usize {
    match rank {
        Some(k) => k * (n + m),
        None => n * m,
    }
}

/// Multiply-accumulates per token in the six projections of every layer.
pub fn linear_macs_per_token(config: &ModelConfig) -> usize {
    let per_layer: usize = Role::ALL
        .into_iter()
        .map(|r| {
            let (n, m) = config.role_dims(r);
            matrix_cost(n, m, config.ranks.get(&r).copied())
        })
        .sum();
    per_layer * config.layers
}

fn check_same_architecture(t: &ModelConfig, s: &ModelConfig) -> Result<()> {
    let same = t.kind == s.kind
        && t.layers == s.layers
        && t.hidden == s.hidden
        && t.ffn == s.ffn
        && t.heads == s.heads
        && t.vocab_size == s.vocab_size
        && t.max_seq_len == s.max_seq_len;
    if !same {
        return Err(MakdError::Architecture(format!(
            "teacher (L={}, d={}, d_f={}, A_h={}) and student (L={}, d={}, d_f={}, A_h={}) differ",
            t.layers, t.hidden, t.ffn, t.heads, s.layers, s.hidden, s.ffn, s.heads
        )));
    }
    Ok(())
}

impl CompressionReport {
    /// Counts only; needs no weights.
    pub fn from_configs(teacher: &ModelConfig, student: &ModelConfig) -> Result<Self> {
        check_same_architecture(teacher, student)?;
        let mut matrices = Vec::new();
        for l in 0..student.layers {
            for role in Role::ALL {
                let (n, m) = student.role_dims(role);
                let rank = student.ranks.get(&role).copied();
                matrices.push(MatrixReport {
                    name: format!("layers.{l}.{role}"),
                    rows: n,
                    cols: m,
                    rank,
                    dense_params: n * m,
                    student_params: matrix_cost(n, m, rank),
                    truncation_error: None,
                    energy_retained: None,
                });
            }
        }
        let (v, d) = (student.vocab_size, student.hidden);
        matrices.push(MatrixReport {
            name: "embeddings.token".into(),
            rows: v,
            cols: d,
            rank: student.embedding_rank,
            dense_params: v * d,
            student_params: matrix_cost(v, d, student.embedding_rank),
            truncation_error: None,
            energy_retained: None,
        });
        let teacher_linear_macs = linear_macs_per_token(teacher);
        let student_linear_macs = linear_macs_per_token(student);
        let teacher_params = count_params(teacher);
        let student_params = count_params(student);
        let inflated: Vec<String> =
            matrices.iter().filter(|m| m.student_params > m.dense_params).map(|m| m.name.clone()).collect();
        let flop_ratio =
            if student_linear_macs == 0 { 1.0 } else { teacher_linear_macs as f64 / student_linear_macs as f64 };
        let param_ratio = teacher_params as f64 / student_params as f64;
        let mut warnings = Vec::new();
        if !inflated.is_empty() {
            warnings.push(format!("{} matrices are larger factorized than dense (k > nm/(n+m))", inflated.len()));
        }
        if flop_ratio <= 1.0 && student_linear_macs > 0 {
            warnings.push(format!("no linear-layer speedup: flop ratio {flop_ratio:.3} <= 1"));
        }
        if param_ratio <= 1.0 {
            warnings.push(format!("no parameter reduction: ratio {param_ratio:.3} <= 1"));
        }
        Ok(CompressionReport {
            matrices,
            teacher_params,
            student_params,
            param_ratio,
            teacher_linear_macs,
            student_linear_macs,
            flop_ratio,
            inflated,
            warnings,
        })
    }

    pub fn compresses(&self) -> bool {
        self.param_ratio > 1.0 && self.flop_ratio > 1.0
    }
}

/// Full report including per-matrix truncation error `‖W − AB‖_F` and
/// retained energy, measured against the teacher weights.
pub fn compression_report(teacher: &TransformerModel, student: &TransformerModel) -> Result<CompressionReport> {
    if !teacher.is_dense() {
        return Err(MakdError::Architecture("teacher must be dense".into()));
    }
    let mut report = CompressionReport::from_configs(&teacher.config, &student.config)?;
    let measure = |w: &Tensor, approx: Tensor| -> Result<(f64, f64)> {
        let err = w.sub(&approx)?.frobenius_norm();
        let total = w.frobenius_norm();
        let kept = if total > 0.0 { 1.0 - (err * err) / (total * total) } else { 1.0 };
        Ok((err, kept))
    };
    for mr in report.matrices.iter_mut() {
        let (w, approx) = if mr.name == "embeddings.token" {
            match (&teacher.params.token_embedding, &student.params.token_embedding) {
                (Embedding::Dense(w), Embedding::Factorized { a, b }) => (w, a.matmul(b)?),
                (Embedding::Dense(w), Embedding::Dense(s)) => (w, s.clone()),
                _ => unreachable!("teacher checked dense"),
            }
        } else {
            let (l, role) = parse_matrix_name(&mr.name);
            let Linear::Dense { weight, .. } = teacher.params.layers[l].linear(role) else {
                unreachable!("teacher checked dense")
            };
            let approx = match student.params.layers[l].linear(role) {
                Linear::Dense { weight, .. } => weight.clone(),
                Linear::Factorized { a, b, .. } => a.matmul(b)?,
            };
            (weight, approx)
        };
        let (err, kept) = measure(w, approx)?;
        mr.truncation_error = Some(err);
        mr.energy_retained = Some(kept);
    }
    Ok(report)
}

fn parse_matrix_name(name: &str) -> (usize, Role) {
    let rest = name.strip_prefix("layers.").expect("layer matrix name");
    let (l, role) = rest.split_once('.').expect("layer matrix name");
    (l.parse().expect("layer index"), role.parse().expect("role"))
}

impl fmt::Display for CompressionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<22} {:>11} {:>6} {:>12} {:>12} {:>12} {:>8}",
            "matrix", "shape", "rank", "dense", "student", "trunc_err", "energy"
        )?;
        for m in &self.matrices {
            let opt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
            writeln!(
                f,
                "{:<22} {:>11} {:>6} {:>12} {:>12} {:>12} {:>8}",
                m.name,
                format!("{}x{}", m.rows, m.cols),
                m.rank.map_or("dense".into(), |k| k.to_string()),
                m.dense_params,
                m.student_params,
                opt(m.truncation_error, 6),
                opt(m.energy_retained, 4),
            )?;
        }
        writeln!(
            f,
            "total parameters: teacher {} student {} (ratio {:.3})",
            self.teacher_params, self.student_params, self.param_ratio
        )?;
        writeln!(
            f,
            "linear MACs/token: teacher {} student {} (ratio {:.3})",
            self.teacher_linear_macs, self.student_linear_macs, self.flop_ratio
        )?;
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        Ok(())
    }
}
