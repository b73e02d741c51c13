use std::rc::Rc;

use super::config::{ModelConfig, ModelKind};
use super::params::{Embedding, LayerParams, Linear, Params};
use crate::autodiff::{Tape, Var};
use crate::error::{MakdError, Result};
use crate::tensor::Tensor;

/// A padded batch of token ids. `mask[i]` is false on padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Input {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub seq_len: usize,
}

impl Input {
    /// One unpadded sequence.
    pub fn single(ids: &[usize]) -> Self {
        Input { ids: ids.to_vec(), mask: vec![true; ids.len()], batch: 1, seq_len: ids.len() }
    }

    pub fn new(rows: &[Vec<usize>], mask: &[Vec<bool>]) -> Result<Self> {
        let seq_len = rows.first().map(Vec::len).unwrap_or(0);
        if rows.is_empty() || seq_len == 0 {
            return Err(MakdError::invalid("empty input batch"));
        }
        if mask.len() != rows.len() || rows.iter().zip(mask).any(|(r, m)| r.len() != seq_len || m.len() != seq_len) {
            return Err(MakdError::invalid("ragged input batch or mask"));
        }
        Ok(Input { ids: rows.concat(), mask: mask.concat(), batch: rows.len(), seq_len })
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq_len
    }
}

/// Per-layer intermediates. Row `b·seq_len + i` is position `i` of sequence
/// `b` in every tensor.
#[derive(Clone, Debug)]
pub struct LayerTrace<T> {
    /// Per head, `rows × d_k`.
    pub queries: Vec<T>,
    pub keys: Vec<T>,
    pub values: Vec<T>,
    /// Per head, `rows × seq_len`: sequence `b`'s attention matrix occupies
    /// rows `b·seq_len ..`.
    pub attention: Vec<T>,
    /// Post-norm attention sub-layer output, `rows × d`.
    pub attention_output: T,
    /// GELU activation between the two FFN projections, `rows × d_f`.
    pub ffn_up: T,
    /// Down-projection output including its bias, `rows × d`.
    pub ffn_down: T,
    /// Layer output, `rows × d`.
    pub hidden: T,
}

#[derive(Clone, Debug)]
pub struct Trace<T> {
    pub embeddings: T,
    pub layers: Vec<LayerTrace<T>>,
    pub logits: T,
    pub batch: usize,
    pub seq_len: usize,
    /// Non-padding positions, one entry per row.
    pub valid: Rc<[bool]>,
}

/// A fully materialized forward pass.
pub type ActivationTrace = Trace<Tensor>;

impl<T> Trace<T> {
    /// `layer` is 1-based, matching the usual `H^l` indexing.
    pub fn layer(&self, layer: usize) -> Result<&LayerTrace<T>> {
        if layer == 0 || layer > self.layers.len() {
            return Err(MakdError::invalid(format!("layer {layer} out of range 1..={}", self.layers.len())));
        }
        Ok(&self.layers[layer - 1])
    }

    pub fn heads(&self) -> usize {
        self.layers.first().map(|l| l.queries.len()).unwrap_or(0)
    }
}

impl ActivationTrace {
    /// Records every tensor on `tape` as a constant.
    pub fn to_tape(&self, tape: &mut Tape) -> Trace<Var> {
        let mut c = |x: &Tensor| tape.constant(x.clone());
        let embeddings = c(&self.embeddings);
        let layers = self
            .layers
            .iter()
            .map(|l| LayerTrace {
                queries: l.queries.iter().map(&mut c).collect(),
                keys: l.keys.iter().map(&mut c).collect(),
                values: l.values.iter().map(&mut c).collect(),
                attention: l.attention.iter().map(&mut c).collect(),
                attention_output: c(&l.attention_output),
                ffn_up: c(&l.ffn_up),
                ffn_down: c(&l.ffn_down),
                hidden: c(&l.hidden),
            })
            .collect();
        Trace {
            embeddings,
            layers,
            logits: c(&self.logits),
            batch: self.batch,
            seq_len: self.seq_len,
            valid: self.valid.clone(),
        }
    }
}

impl Trace<Var> {
    pub fn materialize(&self, tape: &Tape) -> ActivationTrace {
        let v = |x: &Var| tape.value(*x).clone();
        let vs = |xs: &[Var]| xs.iter().map(v).collect::<Vec<_>>();
        Trace {
            embeddings: v(&self.embeddings),
            layers: self
                .layers
                .iter()
                .map(|l| LayerTrace {
                    queries: vs(&l.queries),
                    keys: vs(&l.keys),
                    values: vs(&l.values),
                    attention: vs(&l.attention),
                    attention_output: v(&l.attention_output),
                    ffn_up: v(&l.ffn_up),
                    ffn_down: v(&l.ffn_down),
                    hidden: v(&l.hidden),
                })
                .collect(),
            logits: v(&self.logits),
            batch: self.batch,
            seq_len: self.seq_len,
            valid: self.valid.clone(),
        }
    }
}

pub fn linear(tape: &mut Tape, x: Var, lin: &Linear<Var>) -> Result<Var> {
    let (y, bias) = match lin {
        Linear::Dense { weight, bias } => (tape.matmul(x, *weight)?, *bias),
        Linear::Factorized { a, b, bias } => {
            let inner = tape.matmul(x, *a)?;
            (tape.matmul(inner, *b)?, *bias)
        }
    };
    tape.add_row_vector(y, bias)
}

/// Attention visibility for one sequence, `seq_len × seq_len` row-major.
pub fn attention_mask(kind: ModelKind, key_mask: &[bool]) -> Vec<bool> {
    let t = key_mask.len();
    let mut m = Vec::with_capacity(t * t);
    for i in 0..t {
        for (j, &k) in key_mask.iter().enumerate() {
            m.push(k && (kind == ModelKind::EncoderMlm || j <= i));
        }
    }
    m
}

pub struct MhaOutput {
    pub output: Var,
    pub queries: Vec<Var>,
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
    pub attention: Vec<Var>,
}

/// Multi-head self-attention sub-layer followed by the residual and
/// post-norm: `LN(H + concat_a(softmax(Q_a K_aᵀ / √d_k) V_a) · W^O)`.
/// `masks[b]` is the `seq_len × seq_len` visibility of sequence `b`.
pub fn mha_forward(
    tape: &mut Tape,
    config: &ModelConfig,
    layer: &LayerParams<Var>,
    h_prev: Var,
    masks: &[Vec<bool>],
    seq_len: usize,
) -> Result<MhaOutput> {
    let rows = tape.value(h_prev).rows();
    let batch = masks.len();
    if batch * seq_len != rows || masks.iter().any(|m| m.len() != seq_len * seq_len) {
        return Err(MakdError::Shape {
            op: "mha_forward",
            lhs: tape.value(h_prev).shape().to_vec(),
            rhs: vec![batch, seq_len, seq_len],
        });
    }
    let dk = config.head_dim();
    let scale = 1.0 / (dk as f64).sqrt();
    let q = linear(tape, h_prev, &layer.query)?;
    let k = linear(tape, h_prev, &layer.key)?;
    let v = linear(tape, h_prev, &layer.value)?;

    let mut out = MhaOutput {
        output: h_prev,
        queries: Vec::with_capacity(config.heads),
        keys: Vec::with_capacity(config.heads),
        values: Vec::with_capacity(config.heads),
        attention: Vec::with_capacity(config.heads),
    };
    let mut head_outputs = Vec::with_capacity(config.heads);
    for a in 0..config.heads {
        let qa = tape.block(q, 0, rows, a * dk, dk)?;
        let ka = tape.block(k, 0, rows, a * dk, dk)?;
        let va = tape.block(v, 0, rows, a * dk, dk)?;
        let att = tape.attention_weights(qa, ka, masks, scale)?;
        let head_out = tape.attention_apply(att, va)?;
        out.queries.push(qa);
        out.keys.push(ka);
        out.values.push(va);
        out.attention.push(att);
        head_outputs.push(head_out);
    }
    let concat = if head_outputs.len() == 1 { head_outputs[0] } else { tape.concat_cols(&head_outputs)? };
    let projected = linear(tape, concat, &layer.output)?;
    let residual = tape.add(h_prev, projected)?;
    let norm = &layer.attention_norm;
    out.output = tape.layer_norm(residual, norm.gain, norm.bias, config.layer_norm_eps)?;
    Ok(out)
}

pub struct FfnOutput {
    pub hidden: Var,
    pub up: Var,
    pub down: Var,
}

/// `LN(O + gelu(O·W^U + b^U)·W^D + b^D)`.
pub fn ffn_forward(
    tape: &mut Tape,
    config: &ModelConfig,
    layer: &LayerParams<Var>,
    attn_out: Var,
) -> Result<FfnOutput> {
    let pre = linear(tape, attn_out, &layer.up)?;
    let up = tape.gelu(pre, config.gelu);
    let down = linear(tape, up, &layer.down)?;
    let residual = tape.add(attn_out, down)?;
    let norm = &layer.ffn_norm;
    let hidden = tape.layer_norm(residual, norm.gain, norm.bias, config.layer_norm_eps)?;
    Ok(FfnOutput { hidden, up, down })
}

/// Runs the full stack on `tape` and returns handles to every intermediate.
pub fn forward(tape: &mut Tape, config: &ModelConfig, params: &Params<Var>, input: &Input) -> Result<Trace<Var>> {
    if input.seq_len > config.max_seq_len {
        return Err(MakdError::invalid(format!(
            "sequence length {} exceeds max_seq_len {}",
            input.seq_len, config.max_seq_len
        )));
    }
    if input.ids.len() != input.rows() || input.mask.len() != input.rows() {
        return Err(MakdError::invalid("input ids/mask do not match batch × seq_len"));
    }
    if let Some(&bad) = input.ids.iter().find(|&&id| id >= config.vocab_size) {
        return Err(MakdError::invalid(format!("token id {bad} out of range for vocabulary of {}", config.vocab_size)));
    }

    let ids: Rc<[usize]> = Rc::from(input.ids.clone());
    let tok = match &params.token_embedding {
        Embedding::Dense(w) => tape.gather_rows(*w, ids)?,
        Embedding::Factorized { a, b } => {
            let rows = tape.gather_rows(*a, ids)?;
            tape.matmul(rows, *b)?
        }
    };
    let positions: Rc<[usize]> = (0..input.batch).flat_map(|_| 0..input.seq_len).collect();
    let pos = tape.gather_rows(params.position_embedding, positions)?;
    let embeddings = tape.add(tok, pos)?;

    let masks: Vec<Vec<bool>> = input.mask.chunks(input.seq_len).map(|m| attention_mask(config.kind, m)).collect();

    let mut h = embeddings;
    let mut layers = Vec::with_capacity(config.layers);
    for layer in &params.layers {
        let mha = mha_forward(tape, config, layer, h, &masks, input.seq_len)?;
        let ffn = ffn_forward(tape, config, layer, mha.output)?;
        layers.push(LayerTrace {
            queries: mha.queries,
            keys: mha.keys,
            values: mha.values,
            attention: mha.attention,
            attention_output: mha.output,
            ffn_up: ffn.up,
            ffn_down: ffn.down,
            hidden: ffn.hidden,
        });
        h = ffn.hidden;
    }

    let logits = match &params.token_embedding {
        Embedding::Dense(w) => tape.matmul_nt(h, *w)?,
        Embedding::Factorized { a, b } => {
            let inner = tape.matmul_nt(h, *b)?;
            tape.matmul_nt(inner, *a)?
        }
    };
    let logits = tape.add_row_vector(logits, params.output_bias)?;

    Ok(Trace {
        embeddings,
        layers,
        logits,
        batch: input.batch,
        seq_len: input.seq_len,
        valid: Rc::from(input.mask.clone()),
    })
}
