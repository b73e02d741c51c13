//! Corpora, the word-level tokenizer, and batch construction.
//!
//! A corpus is plain UTF-8 text with one document per line. Tokens are
//! lowercased whitespace-separated words.

use std::collections::HashMap;
use std::path::Path;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{MakdError, Result};
use crate::transformer::{Input, ModelKind};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const MASK: usize = 2;
/// Sequence start (`[CLS]` for encoders, `[BOS]` for decoders).
pub const BOS: usize = 3;
/// Sequence end (`[SEP]` / `[EOS]`).
pub const EOS: usize = 4;
pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[MASK]", "[BOS]", "[EOS]"];
pub const DEFAULT_MASK_RATE: f64 = 0.15;

pub fn is_special(id: usize) -> bool {
    id < SPECIAL_TOKENS.len()
}

/// Lowercased whitespace tokens of one line.
pub fn words(line: &str) -> impl Iterator<Item = String> + '_ {
    line.split_whitespace().map(str::to_lowercase)
}

/// Reads non-empty lines of a text file.
pub fn load_corpus(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| MakdError::io(path, e))?;
    let docs: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    if docs.is_empty() {
        return Err(MakdError::invalid(format!("{} contains no documents", path.display())));
    }
    Ok(docs)
}

/// Deterministic shuffle-and-split into `(train, heldout)`.
pub fn split_corpus(docs: &[String], heldout_fraction: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    let mut docs = docs.to_vec();
    docs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ((docs.len() as f64) * heldout_fraction).round() as usize;
    let n = n.min(docs.len().saturating_sub(1));
    let heldout = docs.split_off(docs.len() - n);
    (docs, heldout)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Tokenizer {
    /// Frequency-ranked vocabulary of at most `max_size` entries including
    /// the specials. Ties are broken alphabetically.
    pub fn build(docs: &[String], max_size: usize) -> Result<Self> {
        if max_size <= SPECIAL_TOKENS.len() {
            return Err(MakdError::config(format!(
                "vocabulary size must exceed the {} special tokens",
                SPECIAL_TOKENS.len()
            )));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for doc in docs {
            for w in words(doc) {
                *counts.entry(w).or_default() += 1;
            }
        }
        for s in SPECIAL_TOKENS {
            counts.remove(&s.to_lowercase());
        }
        if counts.is_empty() {
            return Err(MakdError::invalid("cannot build a vocabulary from an empty corpus"));
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(w, _)| w))
            .take(max_size)
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Tokenizer { tokens, index }
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        words(text).map(|w| self.id(&w).unwrap_or(UNK)).collect()
    }

    /// Space-joined tokens; padding and sequence delimiters are dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| !matches!(id, PAD | BOS | EOS))
            .map(|&id| self.token(id).unwrap_or(SPECIAL_TOKENS[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One `token<TAB>id` line per entry, in id order.
    pub fn to_text(&self) -> String {
        self.tokens.iter().enumerate().map(|(i, t)| format!("{t}\t{i}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| MakdError::invalid(format!("vocabulary line {} lacks a tab", n + 1)))?;
            let id: usize =
                id.trim().parse().map_err(|_| MakdError::invalid(format!("bad id on vocabulary line {}", n + 1)))?;
            if id != tokens.len() {
                return Err(MakdError::invalid(format!(
                    "vocabulary ids must be dense and ordered; line {} has id {id}",
                    n + 1
                )));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() <= SPECIAL_TOKENS.len() || tokens.iter().zip(SPECIAL_TOKENS).any(|(a, b)| a != b) {
            return Err(MakdError::invalid("vocabulary does not start with the special tokens"));
        }
        Ok(Self::from_tokens(tokens))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| MakdError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MakdError::io(path, e))?;
        Self::from_text(&text)
    }
}

/// A padded batch. Row `b` of every field belongs to sequence `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub tokens: Vec<Vec<usize>>,
    /// False on padding.
    pub attention: Vec<Vec<bool>>,
    /// Prediction targets: original ids at masked positions (encoder) or the
    /// following token (decoder).
    pub labels: Vec<Vec<Option<usize>>>,
}

impl Batch {
    /// Right-pads (and truncates) each sequence to `seq_len`.
    pub fn pad(seqs: &[Vec<usize>], seq_len: usize) -> Result<Self> {
        if seqs.is_empty() || seq_len == 0 {
            return Err(MakdError::invalid("empty batch"));
        }
        let mut tokens = Vec::with_capacity(seqs.len());
        let mut attention = Vec::with_capacity(seqs.len());
        for s in seqs {
            let n = s.len().min(seq_len);
            let mut row = s[..n].to_vec();
            row.resize(seq_len, PAD);
            tokens.push(row);
            attention.push((0..seq_len).map(|i| i < n).collect());
        }
        Ok(Batch { labels: vec![vec![None; seq_len]; seqs.len()], tokens, attention })
    }

    pub fn input(&self) -> Result<Input> {
        Input::new(&self.tokens, &self.attention)
    }

    pub fn flat_labels(&self) -> Rc<[Option<usize>]> {
        self.labels.iter().flatten().copied().collect()
    }

    /// Flattened indicator of positions that carry a label.
    pub fn label_rows(&self) -> Vec<bool> {
        self.labels.iter().flatten().map(Option::is_some).collect()
    }

    pub fn label_count(&self) -> usize {
        self.labels.iter().flatten().filter(|l| l.is_some()).count()
    }
}

/// Masked-token corruption: in each sequence `ceil(rate · n)` (at least one)
/// of the `n` non-special positions are selected; 80% become `[MASK]`, 10%
/// a random non-special token, 10% stay. Labels hold the original ids.
/// Sequences without a maskable position are left unlabelled.
pub fn mlm_mask<R: Rng + ?Sized>(batch: &Batch, rate: f64, vocab_size: usize, rng: &mut R) -> Result<Batch> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(MakdError::config(format!("mask rate must be in (0, 1), got {rate}")));
    }
    if vocab_size <= SPECIAL_TOKENS.len() {
        return Err(MakdError::config("vocabulary has no ordinary tokens"));
    }
    let mut out = batch.clone();
    for (b, (row, att)) in batch.tokens.iter().zip(&batch.attention).enumerate() {
        out.labels[b] = vec![None; row.len()];
        let mut candidates: Vec<usize> = (0..row.len()).filter(|&i| att[i] && !is_special(row[i])).collect();
        if candidates.is_empty() {
            log::warn!("sequence {b} has no maskable positions; skipped");
            continue;
        }
        let count = ((rate * candidates.len() as f64).ceil() as usize).clamp(1, candidates.len());
        let (chosen, _) = candidates.partial_shuffle(rng, count);
        chosen.sort_unstable();
        for &i in chosen.iter() {
            out.labels[b][i] = Some(row[i]);
            let r: f64 = rng.random();
            if r < 0.8 {
                out.tokens[b][i] = MASK;
            } else if r < 0.9 {
                out.tokens[b][i] = rng.random_range(SPECIAL_TOKENS.len()..vocab_size);
            }
        }
    }
    Ok(out)
}

/// Next-token labels at every non-pad position except the last one of each
/// sequence.
pub fn causal_labels(batch: &Batch) -> Batch {
    let mut out = batch.clone();
    for (b, (row, att)) in batch.tokens.iter().zip(&batch.attention).enumerate() {
        out.labels[b] =
            (0..row.len()).map(|i| (att[i] && i + 1 < row.len() && att[i + 1]).then(|| row[i + 1])).collect();
    }
    out
}

/// Independent RNG stream for `(seed, step)`; `purpose` separates uses that
/// share a step (batch sampling, masking, ...).
pub fn step_rng(seed: u64, step: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(step);
    rng
}

const PURPOSE_SAMPLE: u64 = 1;
const PURPOSE_MASK: u64 = 2;

/// Encoded documents plus the task framing used to turn them into batches.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub kind: ModelKind,
    pub sequences: Vec<Vec<usize>>,
    pub seq_len: usize,
    pub vocab_size: usize,
    pub mask_rate: f64,
}

impl Dataset {
    /// Wraps each document as `[BOS] words [EOS]`, truncated to `seq_len`.
    pub fn new(
        kind: ModelKind,
        docs: &[String],
        tokenizer: &Tokenizer,
        seq_len: usize,
        mask_rate: f64,
    ) -> Result<Self> {
        if docs.is_empty() {
            return Err(MakdError::invalid("dataset has no documents"));
        }
        if seq_len < 2 {
            return Err(MakdError::config("seq_len must be at least 2"));
        }
        let sequences = docs
            .iter()
            .map(|d| {
                let mut s = vec![BOS];
                s.extend(tokenizer.encode(d));
                s.push(EOS);
                s.truncate(seq_len);
                s
            })
            .collect();
        Ok(Dataset { kind, sequences, seq_len, vocab_size: tokenizer.vocab_size(), mask_rate })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Frames `seqs` for the dataset's task: masked for an encoder, shifted
    /// labels for a decoder.
    pub fn frame<R: Rng + ?Sized>(&self, seqs: &[Vec<usize>], rng: &mut R) -> Result<Batch> {
        let seq_len = seqs.iter().map(Vec::len).max().unwrap_or(0).min(self.seq_len);
        let padded = Batch::pad(seqs, seq_len.max(1))?;
        match self.kind {
            ModelKind::EncoderMlm => mlm_mask(&padded, self.mask_rate, self.vocab_size, rng),
            ModelKind::DecoderCausal => Ok(causal_labels(&padded)),
        }
    }

    /// Training batch for `step`: `batch_size` sequences sampled without
    /// replacement (with replacement once the batch exceeds the corpus).
    /// Depends only on `(seed, step)`.
    pub fn sample(&self, batch_size: usize, seed: u64, step: u64) -> Result<Batch> {
        let mut rng = step_rng(seed, step, PURPOSE_SAMPLE);
        let picks: Vec<Vec<usize>> = if batch_size <= self.len() {
            rand::seq::index::sample(&mut rng, self.len(), batch_size)
                .into_iter()
                .map(|i| self.sequences[i].clone())
                .collect()
        } else {
            (0..batch_size).map(|_| self.sequences[rng.random_range(0..self.len())].clone()).collect()
        };
        self.frame(&picks, &mut step_rng(seed, step, PURPOSE_MASK))
    }

    /// Every sequence once, in order, in batches of `batch_size`, with
    /// masking fixed by `seed`.
    pub fn fixed_batches(&self, batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
        self.sequences
            .chunks(batch_size.max(1))
            .enumerate()
            .map(|(i, chunk)| self.frame(chunk, &mut step_rng(seed, i as u64, PURPOSE_MASK)))
            .collect()
    }
}

/// Synthetic corpora with enough structure for a small model to learn.
pub mod synthetic {
    use super::*;

    const TOPICS: [([&str; 6], [&str; 2]); 8] = [
        (["cow", "horse", "pig", "hen", "goat", "sheep"], ["barn", "field"]),
        (["fish", "crab", "whale", "seal", "shark", "eel"], ["reef", "bay"]),
        (["fox", "wolf", "deer", "owl", "bear", "boar"], ["woods", "glade"]),
        (["hawk", "crow", "swan", "bat", "kite", "lark"], ["clouds", "wind"]),
        (["ant", "bee", "moth", "wasp", "fly", "beetle"], ["hive", "leaf"]),
        (["frog", "toad", "newt", "duck", "heron", "otter"], ["pond", "reeds"]),
        (["camel", "lizard", "snake", "scorpion", "hare", "vulture"], ["dune", "oasis"]),
        (["dog", "cat", "mouse", "rat", "parrot", "rabbit"], ["house", "garden"]),
    ];
    const VERBS: [(&str, &str); 10] = [
        ("sees", "see"),
        ("likes", "like"),
        ("chases", "chase"),
        ("follows", "follow"),
        ("watches", "watch"),
        ("finds", "find"),
        ("hears", "hear"),
        ("helps", "help"),
        ("meets", "meet"),
        ("avoids", "avoid"),
    ];
    const ADJECTIVES: [&str; 10] = ["big", "small", "old", "young", "quiet", "quick", "brown", "white", "lazy", "wild"];

    /// Noun index within the topic and whether it is plural.
    type NounPick = (usize, bool);

    fn noun_word(topic: usize, (i, plural): NounPick) -> String {
        let n = TOPICS[topic].0[i];
        if plural {
            format!("{n}s")
        } else {
            n.to_string()
        }
    }

    fn pick_noun(rng: &mut impl Rng) -> NounPick {
        (rng.random_range(0..6), rng.random_bool(0.5))
    }

    /// One clause; returns the words and the subject so a later clause can
    /// refer back to it.
    fn sentence(rng: &mut impl Rng, topic: usize, subject: Option<NounPick>) -> (Vec<String>, NounPick) {
        let subject = subject.unwrap_or_else(|| pick_noun(rng));
        let mut w = vec!["the".to_string()];
        if rng.random_bool(0.5) {
            w.push(ADJECTIVES[rng.random_range(0..ADJECTIVES.len())].into());
        }
        w.push(noun_word(topic, subject));
        let (sing, plur) = VERBS[rng.random_range(0..VERBS.len())];
        w.push(if subject.1 { plur } else { sing }.into());
        w.push("the".into());
        w.push(noun_word(topic, pick_noun(rng)));
        if rng.random_bool(0.5) {
            w.push("near".into());
            w.push("the".into());
            w.push(TOPICS[topic].1[rng.random_range(0..2)].into());
        }
        (w, subject)
    }

    /// Short documents of topic-consistent clauses with subject–verb number
    /// agreement. A second clause repeats the first subject half the time.
    pub fn grammar_corpus(docs: usize, seed: u64) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..docs)
            .map(|_| {
                let topic = rng.random_range(0..TOPICS.len());
                let (mut words, subject) = sentence(&mut rng, topic, None);
                if rng.random_bool(0.7) {
                    let repeat = rng.random_bool(0.5).then_some(subject);
                    words.push("and".into());
                    words.extend(sentence(&mut rng, topic, repeat).0);
                }
                words.join(" ")
            })
            .collect()
    }

    const SYLLABLES: [&str; 12] = ["ka", "lo", "mi", "zu", "re", "ta", "ni", "vo", "pe", "su", "do", "ga"];
    const HOMES: [&str; 12] =
        ["barn", "field", "reef", "bay", "woods", "glade", "hive", "pond", "dune", "house", "garden", "cave"];
    const FOODS: [&str; 12] =
        ["seeds", "fish", "berries", "grass", "honey", "worms", "bread", "corn", "nuts", "apples", "roots", "eggs"];
    const COLORS: [&str; 8] = ["red", "blue", "green", "black", "white", "brown", "grey", "gold"];

    /// Name of entity `i`: its base-12 digits spelled as syllables, at
    /// least two of them.
    fn entity_name(mut i: usize) -> String {
        let mut name = String::new();
        loop {
            name.push_str(SYLLABLES[i % 12]);
            i /= 12;
            if i == 0 && name.len() >= 4 {
                return name;
            }
        }
    }

    /// Statements about a fixed population of `entities` named creatures,
    /// each with a home, a food and a color drawn once from `seed`. A line
    /// names one creature and states one to three of its facts in random
    /// order, so predicting a masked fact means remembering it.
    pub fn facts_corpus(docs: usize, entities: usize, seed: u64) -> Vec<String> {
        if entities == 0 {
            return Vec::new();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let facts: Vec<[String; 3]> = (0..entities)
            .map(|_| {
                [
                    format!("lives in the {}", HOMES[rng.random_range(0..HOMES.len())]),
                    format!("eats {}", FOODS[rng.random_range(0..FOODS.len())]),
                    format!("is {}", COLORS[rng.random_range(0..COLORS.len())]),
                ]
            })
            .collect();
        (0..docs)
            .map(|_| {
                let e = rng.random_range(0..entities);
                let mut parts: Vec<&str> = facts[e].iter().map(String::as_str).collect();
                parts.shuffle(&mut rng);
                let k = rng.random_range(1..=parts.len());
                format!("{} {}", entity_name(e), parts[..k].join(" and "))
            })
            .collect()
    }

    /// Balanced sequences over three bracket pairs, space separated.
    pub fn bracket_corpus(docs: usize, max_depth: usize, seed: u64) -> Vec<String> {
        const PAIRS: [(&str, &str); 3] = [("(", ")"), ("[", "]"), ("{", "}")];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..docs)
            .map(|_| {
                let mut out = Vec::new();
                let mut stack = Vec::new();
                let target = rng.random_range(2..=8);
                while out.len() < 2 * target || !stack.is_empty() {
                    let open = stack.len() < max_depth.max(1)
                        && out.len() + stack.len() < 2 * target
                        && (stack.is_empty() || rng.random_bool(0.5));
                    if open {
                        let p = rng.random_range(0..PAIRS.len());
                        out.push(PAIRS[p].0);
                        stack.push(p);
                    } else {
                        out.push(PAIRS[stack.pop().unwrap()].1);
                    }
                }
                out.join(" ")
            })
            .collect()
    }

    pub const INSTRUCTION_SEPARATOR: &str = "=";
    const SYMBOLS: [&str; 8] = ["a", "b", "c", "d", "e", "f", "g", "h"];

    /// `<op> x1 .. xn = <answer>` lines for the operations copy, reverse,
    /// sort, first and last.
    pub fn instruction_corpus(docs: usize, seed: u64) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..docs)
            .map(|_| {
                let n = rng.random_range(2..=5);
                let xs: Vec<&str> = (0..n).map(|_| SYMBOLS[rng.random_range(0..SYMBOLS.len())]).collect();
                let (op, answer): (&str, Vec<&str>) = match rng.random_range(0..5) {
                    0 => ("copy", xs.clone()),
                    1 => ("reverse", xs.iter().rev().copied().collect()),
                    2 => {
                        let mut s = xs.clone();
                        s.sort_unstable();
                        ("sort", s)
                    }
                    3 => ("first", vec![xs[0]]),
                    _ => ("last", vec![xs[n - 1]]),
                };
                format!("{op} {} {INSTRUCTION_SEPARATOR} {}", xs.join(" "), answer.join(" "))
            })
            .collect()
    }

    /// Splits an instruction line into `(prompt including the separator,
    /// answer)`.
    pub fn split_instruction(line: &str) -> Option<(String, String)> {
        let (prompt, answer) = line.split_once(INSTRUCTION_SEPARATOR)?;
        Some((format!("{} {INSTRUCTION_SEPARATOR}", prompt.trim()), answer.trim().to_string()))
    }
}
