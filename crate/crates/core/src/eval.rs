//! Quality and agreement metrics, greedy generation, Rouge-L and a forward
//! throughput benchmark.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::log_softmax_rows;
use crate::data::{Batch, EOS};
use crate::error::{MakdError, Result};
use crate::factorize::linear_macs_per_token;
use crate::transformer::{Input, ModelKind, TransformerModel};

const PROB_FLOOR: f64 = 1e-10;

/// Fraction of labelled positions whose arg-max logit equals the label.
pub fn label_accuracy(model: &TransformerModel, batches: &[Batch]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for batch in batches {
        let logits = model.logits(&batch.input()?)?;
        let pred = logits.argmax_rows();
        for (p, label) in pred.iter().zip(batch.labels.iter().flatten()) {
            if let Some(y) = label {
                total += 1;
                hit += usize::from(p == y);
            }
        }
    }
    if total == 0 {
        return Err(MakdError::invalid("no labelled positions to evaluate"));
    }
    Ok(hit as f64 / total as f64)
}

/// [`label_accuracy`] restricted to masked-token models.
pub fn masked_accuracy(model: &TransformerModel, batches: &[Batch]) -> Result<f64> {
    if model.config.kind != ModelKind::EncoderMlm {
        return Err(MakdError::invalid("masked accuracy needs an encoder-mlm model"));
    }
    label_accuracy(model, batches)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    /// Mean over valid positions of `KL(p_teacher ‖ p_student)`.
    pub logit_kl: f64,
    /// Per layer, mean over heads and valid query rows of
    /// `KL(A_teacher ‖ A_student)`.
    pub attention_kl: Vec<f64>,
    /// Fraction of valid positions where both models pick the same token.
    pub top1: f64,
    pub positions: usize,
}

fn kl_rows(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.max(PROB_FLOOR).ln() - qi.max(PROB_FLOOR).ln()))
        .sum()
}

pub fn agreement(student: &TransformerModel, teacher: &TransformerModel, batches: &[Batch]) -> Result<AgreementReport> {
    let (s, t) = (&student.config, &teacher.config);
    if s.layers != t.layers || s.heads != t.heads || s.vocab_size != t.vocab_size || s.kind != t.kind {
        return Err(MakdError::Architecture(
            "agreement needs matching layer count, heads, vocabulary and model kind".into(),
        ));
    }
    let mut logit_kl = 0.0;
    let mut attention_kl = vec![0.0; s.layers];
    let mut same = 0usize;
    let mut positions = 0usize;
    for batch in batches {
        let input = batch.input()?;
        let ts = student.forward(&input)?;
        let tt = teacher.forward(&input)?;
        let (ls, lt) = (log_softmax_rows(&ts.logits), log_softmax_rows(&tt.logits));
        let (ps, pt) = (ts.logits.argmax_rows(), tt.logits.argmax_rows());
        for (i, &valid) in input.mask.iter().enumerate() {
            if !valid {
                continue;
            }
            positions += 1;
            same += usize::from(ps[i] == pt[i]);
            logit_kl += lt.row(i).iter().zip(ls.row(i)).map(|(a, b)| a.exp() * (a - b)).sum::<f64>();
            for (l, (lsl, ltl)) in ts.layers.iter().zip(&tt.layers).enumerate() {
                let per_head: f64 =
                    lsl.attention.iter().zip(&ltl.attention).map(|(a_s, a_t)| kl_rows(a_t.row(i), a_s.row(i))).sum();
                attention_kl[l] += per_head / s.heads as f64;
            }
        }
    }
    if positions == 0 {
        return Err(MakdError::invalid("no valid positions to compare"));
    }
    let n = positions as f64;
    Ok(AgreementReport {
        logit_kl: logit_kl / n,
        attention_kl: attention_kl.into_iter().map(|x| x / n).collect(),
        top1: same as f64 / n,
        positions,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RougeL {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when the candidate was empty and precision defaulted to 0.
    pub empty_candidate: bool,
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based precision, recall and F1 of `candidate` against `reference`.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> Result<RougeL> {
    if reference.is_empty() {
        return Err(MakdError::invalid("rouge-l needs a non-empty reference"));
    }
    if candidate.is_empty() {
        return Ok(RougeL { precision: 0.0, recall: 0.0, f1: 0.0, empty_candidate: true });
    }
    let lcs = lcs_len(candidate, reference) as f64;
    let precision = lcs / candidate.len() as f64;
    let recall = lcs / reference.len() as f64;
    let f1 = if lcs == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(RougeL { precision, recall, f1, empty_candidate: false })
}

/// Rouge-L over whitespace tokens of two strings.
pub fn rouge_l_text(candidate: &str, reference: &str) -> Result<RougeL> {
    let c: Vec<&str> = candidate.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    rouge_l(&c, &r)
}

/// Greedy continuation of `prompt` until `[EOS]`, `max_new` tokens, or the
/// model's maximum length. Returns only the new tokens, without `[EOS]`.
pub fn greedy_generate(model: &TransformerModel, prompt: &[usize], max_new: usize) -> Result<Vec<usize>> {
    if model.config.kind != ModelKind::DecoderCausal {
        return Err(MakdError::invalid("generation needs a decoder-causal model"));
    }
    if prompt.is_empty() {
        return Err(MakdError::invalid("generation needs a non-empty prompt"));
    }
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_new && seq.len() < model.config.max_seq_len {
        let logits = model.logits(&Input::single(&seq))?;
        let next = logits.block(seq.len() - 1, 1, 0, logits.cols()).argmax_rows()[0];
        if next == EOS {
            break;
        }
        out.push(next);
        seq.push(next);
    }
    Ok(out)
}

/// Mean Rouge-L F1 of `candidate`'s greedy outputs against `reference`'s on
/// the same prompts. Prompts where the reference model produces nothing are
/// skipped.
pub fn generation_agreement(
    candidate: &TransformerModel,
    reference: &TransformerModel,
    prompts: &[Vec<usize>],
    max_new: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for p in prompts {
        let r = greedy_generate(reference, p, max_new)?;
        if r.is_empty() {
            continue;
        }
        let c = greedy_generate(candidate, p, max_new)?;
        total += rouge_l(&c, &r)?.f1;
        n += 1;
    }
    if n == 0 {
        return Err(MakdError::invalid("reference model generated nothing on every prompt"));
    }
    Ok(total / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub seq_len: usize,
    pub repetitions: usize,
    pub median_seconds: f64,
    pub tokens_per_second: f64,
    pub linear_macs_per_token: usize,
}

/// Median wall-clock time of a forward pass over `repetitions` timed runs,
/// after `warmup` untimed ones.
pub fn throughput_bench(
    model: &TransformerModel,
    seq_len: usize,
    repetitions: usize,
    warmup: usize,
) -> Result<BenchReport> {
    if repetitions == 0 {
        return Err(MakdError::invalid("benchmark needs at least one repetition"));
    }
    let ids: Vec<usize> = (0..seq_len).map(|i| i % model.config.vocab_size).collect();
    let input = Input::single(&ids);
    for _ in 0..warmup {
        model.logits(&input)?;
    }
    let mut times: Vec<f64> = (0..repetitions)
        .map(|_| {
            let start = Instant::now();
            model.logits(&input).map(|_| start.elapsed().as_secs_f64())
        })
        .collect::<Result<_>>()?;
    times.sort_by(f64::total_cmp);
    let median = if repetitions % 2 == 1 {
        times[repetitions / 2]
    } else {
        0.5 * (times[repetitions / 2 - 1] + times[repetitions / 2])
    };
    Ok(BenchReport {
        seq_len,
        repetitions,
        median_seconds: median,
        tokens_per_second: seq_len as f64 / median,
        linear_macs_per_token: linear_macs_per_token(&model.config),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::ModelConfig;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rouge_examples() {
        let r = rouge_l_text("a b c", "a b c").unwrap();
        assert_eq!(r.f1, 1.0);
        assert_eq!(rouge_l_text("a b", "c d").unwrap().f1, 0.0);
        let r = rouge_l_text("the cat sat", "the dog sat").unwrap();
        assert!((r.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rouge_empty_cases() {
        let r = rouge_l::<u32>(&[], &[1]).unwrap();
        assert!(r.empty_candidate && r.f1 == 0.0);
        assert!(rouge_l::<u32>(&[1], &[]).is_err());
    }

    #[test]
    fn self_agreement_is_perfect() {
        let cfg = ModelConfig::new(ModelKind::EncoderMlm, 2, 8, 2, 11, 6);
        let m = TransformerModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = Batch::pad(&[vec![3, 5, 6, 4], vec![3, 7, 4]], 4).unwrap();
        let r = agreement(&m, &m, &[b]).unwrap();
        assert!(r.logit_kl.abs() < 1e-12);
        assert!(r.attention_kl.iter().all(|x| x.abs() < 1e-12));
        assert_eq!(r.top1, 1.0);
        assert_eq!(r.positions, 7);
    }

    #[test]
    fn accuracy_needs_labels() {
        let cfg = ModelConfig::new(ModelKind::EncoderMlm, 1, 8, 2, 11, 6);
        let m = TransformerModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = Batch::pad(&[vec![3, 5, 4]], 3).unwrap();
        assert!(masked_accuracy(&m, &[b]).is_err());
    }

    #[test]
    fn generation_stops_at_length_limit() {
        let cfg = ModelConfig::new(ModelKind::DecoderCausal, 1, 8, 2, 11, 6);
        let m = TransformerModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let out = greedy_generate(&m, &[3, 5], 100).unwrap();
        assert!(out.len() <= 4);
        assert_eq!(out, greedy_generate(&m, &[3, 5], 100).unwrap());
    }

    proptest! {
        #[test]
        fn rouge_bounds_and_symmetry(a in proptest::collection::vec(0u8..4, 1..10), b in proptest::collection::vec(0u8..4, 1..10)) {
            let r = rouge_l(&a, &b).unwrap();
            for x in [r.precision, r.recall, r.f1] {
                prop_assert!((0.0..=1.0).contains(&x));
            }
            if a.len() == b.len() {
                prop_assert!((rouge_l(&b, &a).unwrap().f1 - r.f1).abs() < 1e-15);
            }
        }
    }
}
