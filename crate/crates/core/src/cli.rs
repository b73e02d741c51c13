//! The `makd` command line: argument parsing, dispatch, run manifests and
//! exit codes.
//!
//! Exit status is 0 on success, 2 for usage and argument errors (including
//! out-of-range ranks), 3 when an input file is missing and 1 otherwise. A
//! failing command prints one line `error[<category>] <message>` to stderr.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::data::{self, load_corpus, split_corpus, synthetic, Batch, Dataset, Tokenizer, BOS};
use crate::error::{MakdError, Result};
use crate::eval;
use crate::factorize::{build_student, compression_report, FactorizationSpec};
use crate::train::{init_student, RunConfig, RunOptions, TrainMode, Trainer};
use crate::transformer::{Input, ModelConfig, ModelKind, TransformerModel};

#[derive(Debug, Parser)]
#[command(name = "makd", version, about = "Low-rank students distilled from small transformer teachers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain a dense teacher on a corpus (masked or causal LM).
    PretrainTeacher(TrainArgs),
    /// Build a low-rank student from a teacher by truncated SVD.
    Factorize(FactorizeArgs),
    /// Distill a teacher into a factorized student.
    Distill(TrainArgs),
    /// Accuracy, teacher agreement and generation quality on a corpus.
    Eval(EvalArgs),
    /// Forward-pass throughput of a model, optionally against a baseline.
    Bench(BenchArgs),
    /// Print a checkpoint's configuration, parameter counts and trace shapes.
    Inspect(InspectArgs),
    /// Write one of the bundled synthetic corpora.
    Corpus(CorpusArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run configuration; every key can also be given with --set.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. --set steps=200.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_key_value)]
    pub set: Vec<(String, String)>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct FactorizeArgs {
    #[arg(long)]
    pub teacher: PathBuf,
    /// Inner rank of every projection.
    #[arg(long, value_parser = parse_rank, conflicts_with = "rate")]
    pub rank: Option<usize>,
    /// Minimum compression ratio; the largest uniform rank meeting it is used.
    #[arg(long)]
    pub rate: Option<f64>,
    /// Also factorize the token embedding table.
    #[arg(long)]
    pub embeddings: bool,
    #[arg(long, value_parser = parse_rank)]
    pub embedding_rank: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON compression report; defaults to `<out>.report.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Accepted for uniformity; truncation is deterministic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Heldout,
    Train,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Also report agreement with this teacher.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Heldout)]
    pub split: Split,
    #[arg(long, default_value_t = 0.1)]
    pub heldout_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    /// Defaults to the model's maximum sequence length.
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = data::DEFAULT_MASK_RATE)]
    pub mask_rate: f64,
    /// Seed of the evaluation masks.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Tokens generated per prompt (decoders only).
    #[arg(long, default_value_t = 16)]
    pub max_new: usize,
    /// Number of corpus prompts used for generation metrics.
    #[arg(long, default_value_t = 100)]
    pub prompts: usize,
    /// Write the key = value report here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Checkpoint to time. Without it, a random model of --hidden/--layers
    /// is timed dense and at --rank.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Baseline checkpoint; the report includes baseline / model time.
    #[arg(long)]
    pub against: Option<PathBuf>,
    #[arg(long, default_value_t = 768)]
    pub hidden: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 12)]
    pub heads: usize,
    #[arg(long, default_value_t = 256, value_parser = parse_rank)]
    pub rank: usize,
    #[arg(long, default_value_t = 128)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 10)]
    pub reps: usize,
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub checkpoint: PathBuf,
    /// Print JSON instead of text.
    #[arg(long)]
    pub json: bool,
    /// Sequence length of the probe input used for trace shapes.
    #[arg(long, default_value_t = 4)]
    pub probe_len: usize,
    /// Accepted for uniformity; inspection is deterministic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CorpusKind {
    Grammar,
    Facts,
    Instruction,
    Brackets,
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    #[arg(long, value_enum)]
    pub kind: CorpusKind,
    #[arg(long, default_value_t = 1000)]
    pub docs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Maximum nesting for the bracket corpus.
    #[arg(long, default_value_t = 4)]
    pub max_depth: usize,
    /// Population size for the facts corpus.
    #[arg(long, default_value_t = 150)]
    pub entities: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_key_value(s: &str) -> std::result::Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(format!("empty key in {s:?}"));
    }
    Ok((k.to_string(), v.trim().to_string()))
}

fn parse_rank(s: &str) -> std::result::Result<usize, String> {
    let k: usize = s.parse().map_err(|_| format!("rank must be a positive integer, got {s:?}"))?;
    if k == 0 {
        return Err("rank 0 out of range; ranks run from 1 to min(rows, cols) of each matrix".into());
    }
    Ok(k)
}

/// Everything needed to reproduce one command's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub version: String,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: BTreeMap<String, PathBuf>,
    pub duration_seconds: f64,
}

impl RunManifest {
    fn new(command: &str, config: serde_json::Value, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            argv: std::env::args().collect(),
            config,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            duration_seconds: 0.0,
        }
    }

    /// Writes the manifest next to `artifact` as `<artifact>.manifest.json`.
    fn write_beside(&mut self, artifact: &Path, started: Instant) -> Result<PathBuf> {
        self.duration_seconds = started.elapsed().as_secs_f64();
        let path = sibling(artifact, "manifest.json");
        let text = serde_json::to_string_pretty(self).map_err(|e| MakdError::invalid(format!("manifest: {e}")))?;
        std::fs::write(&path, text + "\n").map_err(|e| MakdError::io(&path, e))?;
        Ok(path)
    }
}

/// `<path>.<suffix>`, keeping the original extension.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

/// Vocabulary file stored beside a checkpoint.
pub fn vocab_path(checkpoint: &Path) -> PathBuf {
    sibling(checkpoint, "vocab")
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

fn required<'a>(v: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    v.as_deref().ok_or_else(|| MakdError::config(format!("missing required key `{key}`")))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir).map_err(|e| MakdError::io(dir, e)),
        _ => Ok(()),
    }
}

/// Exit status for a failed command.
pub fn exit_code(err: &MakdError) -> i32 {
    match err.category() {
        "missing-file" => 3,
        "rank" | "invalid-argument" | "config" => 2,
        _ => 1,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit status.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            if code != 0 {
                eprintln!("error[usage] invalid command line");
            }
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}] {}", e.category(), single_line(&e.to_string()));
            exit_code(&e)
        }
    }
}

fn single_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PretrainTeacher(a) => pretrain_teacher(&a),
        Command::Factorize(a) => factorize(&a),
        Command::Distill(a) => distill(&a),
        Command::Eval(a) => evaluate(&a),
        Command::Bench(a) => bench(&a),
        Command::Inspect(a) => inspect(&a),
        Command::Corpus(a) => corpus(&a),
    }
}

fn load_run_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut overrides = args.set.clone();
    if let Some(seed) = args.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    match &args.config {
        Some(path) => RunConfig::load(path, &overrides),
        None => RunConfig::from_toml("", &overrides),
    }
}

/// Train and held-out documents of the configured corpus.
fn split_docs(cfg: &RunConfig) -> Result<(Vec<String>, Vec<String>)> {
    let docs = load_corpus(required(&cfg.corpus, "corpus")?)?;
    if !(0.0..1.0).contains(&cfg.heldout_fraction) {
        return Err(MakdError::config("heldout_fraction must be in [0, 1)"));
    }
    Ok(split_corpus(&docs, cfg.heldout_fraction, cfg.split_seed))
}

/// Fixed evaluation batches over the held-out documents; masks depend only
/// on `split_seed`, so runs that differ in `seed` see identical batches.
fn heldout_batches(
    cfg: &RunConfig,
    kind: ModelKind,
    held: &[String],
    tok: &Tokenizer,
    seq_len: usize,
) -> Result<Option<Vec<Batch>>> {
    if held.is_empty() {
        return Ok(None);
    }
    let ds = Dataset::new(kind, held, tok, seq_len, cfg.mask_rate)?;
    Ok(Some(ds.fixed_batches(cfg.batch_size, cfg.split_seed)?))
}

fn report_records(records: &[crate::train::MetricsRecord]) {
    if let Some(last) = records.last() {
        print!("step {} loss {:.6}", last.step, last.loss);
        for (k, v) in &last.eval {
            print!(" {k} {v:.6}");
        }
        println!();
    }
}

fn pretrain_teacher(args: &TrainArgs) -> Result<()> {
    let started = Instant::now();
    let mut cfg = load_run_config(args)?;
    cfg.mode = TrainMode::TeacherPretrain;
    let out = required(&cfg.out, "out")?.to_path_buf();
    let (train, held) = split_docs(&cfg)?;
    let tok = Tokenizer::build(&train, cfg.max_vocab)?;
    let data = Dataset::new(cfg.kind, &train, &tok, cfg.seq_len, cfg.mask_rate)?;
    let eval_batches = heldout_batches(&cfg, cfg.kind, &held, &tok, cfg.seq_len)?;
    let model_config = cfg.model_config(tok.vocab_size())?;
    let model = TransformerModel::init(model_config, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let mut trainer = Trainer::pretrain(model, cfg.train_config())?;
    if let Some(resume) = &cfg.resume {
        trainer.restore(&Checkpoint::load(resume)?)?;
    }

    ensure_parent(&out)?;
    tok.save(&vocab_path(&out))?;
    let records = trainer.run(
        &data,
        &RunOptions {
            eval_batches: eval_batches.as_deref(),
            metrics: cfg.metrics.as_deref(),
            checkpoint: Some(&out),
            stop_at: None,
        },
    )?;
    report_records(&records);

    let mut manifest = RunManifest::new("pretrain-teacher", to_json(&cfg), cfg.seed);
    manifest.inputs.insert("corpus".into(), required(&cfg.corpus, "corpus")?.into());
    if let Some(r) = &cfg.resume {
        manifest.inputs.insert("resume".into(), r.clone());
    }
    manifest.outputs.insert("checkpoint".into(), out.clone());
    manifest.outputs.insert("vocab".into(), vocab_path(&out));
    if let Some(m) = &cfg.metrics {
        manifest.outputs.insert("metrics".into(), m.clone());
    }
    let m = manifest.write_beside(&out, started)?;
    println!("wrote {} ({} parameters), manifest {}", out.display(), trainer.model.num_params(), m.display());
    Ok(())
}

fn copy_vocab(from_checkpoint: &Path, to_checkpoint: &Path) -> Result<Option<PathBuf>> {
    let src = vocab_path(from_checkpoint);
    if !src.exists() {
        return Ok(None);
    }
    let dst = vocab_path(to_checkpoint);
    std::fs::copy(&src, &dst).map_err(|e| MakdError::io(&dst, e))?;
    Ok(Some(dst))
}

fn factorize(args: &FactorizeArgs) -> Result<()> {
    let started = Instant::now();
    let mut spec = match (args.rank, args.rate) {
        (Some(k), None) => FactorizationSpec::uniform(k),
        (None, Some(r)) => FactorizationSpec::rate(r),
        _ => return Err(MakdError::invalid("give exactly one of --rank or --rate")),
    };
    spec.factorize_embeddings = args.embeddings || args.embedding_rank.is_some();
    spec.embedding_rank = args.embedding_rank;
    let teacher = TransformerModel::load(&args.teacher)?;
    let student = build_student(&teacher, &spec)?;
    let report = compression_report(&teacher, &student)?;

    ensure_parent(&args.out)?;
    student.save(&args.out)?;
    let report_path = args.report.clone().unwrap_or_else(|| sibling(&args.out, "report.json"));
    let json = serde_json::to_string_pretty(&report).map_err(|e| MakdError::invalid(format!("report: {e}")))?;
    std::fs::write(&report_path, json + "\n").map_err(|e| MakdError::io(&report_path, e))?;
    print!("{report}");

    let mut manifest = RunManifest::new("factorize", to_json(&spec), args.seed);
    manifest.inputs.insert("teacher".into(), args.teacher.clone());
    manifest.outputs.insert("checkpoint".into(), args.out.clone());
    manifest.outputs.insert("report".into(), report_path);
    if let Some(v) = copy_vocab(&args.teacher, &args.out)? {
        manifest.outputs.insert("vocab".into(), v);
    }
    manifest.write_beside(&args.out, started)?;
    Ok(())
}

fn distill(args: &TrainArgs) -> Result<()> {
    let started = Instant::now();
    let cfg = load_run_config(args)?;
    if cfg.mode == TrainMode::TeacherPretrain {
        return Err(MakdError::config("distill needs mode distill-makd or distill-logit-only"));
    }
    let out = required(&cfg.out, "out")?.to_path_buf();
    let teacher_path = required(&cfg.teacher, "teacher")?;
    let teacher = TransformerModel::load(teacher_path)?;
    let tok = Tokenizer::load(&vocab_path(teacher_path))?;
    if tok.vocab_size() != teacher.config.vocab_size {
        return Err(MakdError::Architecture(format!(
            "vocabulary has {} entries, teacher expects {}",
            tok.vocab_size(),
            teacher.config.vocab_size
        )));
    }
    let seq_len = cfg.seq_len.min(teacher.config.max_seq_len);
    let (train, held) = split_docs(&cfg)?;
    let kind = teacher.config.kind;
    let data = Dataset::new(kind, &train, &tok, seq_len, cfg.mask_rate)?;
    let eval_batches = heldout_batches(&cfg, kind, &held, &tok, seq_len)?;
    let plan = cfg.plan(teacher.config.layers)?;
    let student = match &cfg.student {
        Some(path) => TransformerModel::load(path)?,
        None => init_student(&teacher, &cfg.factorization_spec()?, cfg.student_init, cfg.seed)?,
    };
    let mut trainer = Trainer::distill(student, &teacher, plan, cfg.train_config())?;
    if let Some(resume) = &cfg.resume {
        trainer.restore(&Checkpoint::load(resume)?)?;
    }

    ensure_parent(&out)?;
    tok.save(&vocab_path(&out))?;
    let records = trainer.run(
        &data,
        &RunOptions {
            eval_batches: eval_batches.as_deref(),
            metrics: cfg.metrics.as_deref(),
            checkpoint: Some(&out),
            stop_at: None,
        },
    )?;
    report_records(&records);

    let mut manifest = RunManifest::new("distill", to_json(&cfg), cfg.seed);
    manifest.inputs.insert("corpus".into(), required(&cfg.corpus, "corpus")?.into());
    manifest.inputs.insert("teacher".into(), teacher_path.into());
    for (key, p) in [("student", &cfg.student), ("resume", &cfg.resume)] {
        if let Some(p) = p {
            manifest.inputs.insert(key.into(), p.clone());
        }
    }
    manifest.outputs.insert("checkpoint".into(), out.clone());
    manifest.outputs.insert("vocab".into(), vocab_path(&out));
    if let Some(m) = &cfg.metrics {
        manifest.outputs.insert("metrics".into(), m.clone());
    }
    let m = manifest.write_beside(&out, started)?;
    println!("wrote {} ({} parameters), manifest {}", out.display(), trainer.model.num_params(), m.display());
    Ok(())
}

fn load_vocab_for(model: &Path, fallback: Option<&Path>) -> Result<Tokenizer> {
    let primary = vocab_path(model);
    match fallback {
        Some(f) if !primary.exists() => Tokenizer::load(&vocab_path(f)),
        _ => Tokenizer::load(&primary),
    }
}

/// Prompts and reference answers for generation metrics: the text before
/// and after the instruction separator, or the first half of each line.
fn prompt_pairs(docs: &[String], limit: usize) -> Vec<(String, String)> {
    docs.iter()
        .take(limit)
        .filter_map(|line| {
            synthetic::split_instruction(line).or_else(|| {
                let words: Vec<&str> = line.split_whitespace().collect();
                (words.len() >= 2).then(|| {
                    let (p, a) = words.split_at(words.len() / 2);
                    (p.join(" "), a.join(" "))
                })
            })
        })
        .collect()
}

fn encode_prompt(tok: &Tokenizer, prompt: &str) -> Vec<usize> {
    std::iter::once(BOS).chain(tok.encode(prompt)).collect()
}

fn evaluate(args: &EvalArgs) -> Result<()> {
    let started = Instant::now();
    let model = TransformerModel::load(&args.model)?;
    let teacher = args.teacher.as_deref().map(TransformerModel::load).transpose()?;
    let tok = load_vocab_for(&args.model, args.teacher.as_deref())?;
    if tok.vocab_size() != model.config.vocab_size {
        return Err(MakdError::Architecture("vocabulary does not match the model".into()));
    }
    let docs = load_corpus(&args.corpus)?;
    let docs = match args.split {
        Split::All => docs,
        Split::Train => split_corpus(&docs, args.heldout_fraction, args.split_seed).0,
        Split::Heldout => split_corpus(&docs, args.heldout_fraction, args.split_seed).1,
    };
    if docs.is_empty() {
        return Err(MakdError::invalid("the selected split has no documents"));
    }
    let kind = model.config.kind;
    let seq_len = args.seq_len.unwrap_or(model.config.max_seq_len).min(model.config.max_seq_len);
    let batches =
        Dataset::new(kind, &docs, &tok, seq_len, args.mask_rate)?.fixed_batches(args.batch_size, args.seed)?;

    let mut report: Vec<(String, String)> = vec![
        ("model".into(), args.model.display().to_string()),
        ("kind".into(), kind.to_string()),
        ("parameters".into(), model.num_params().to_string()),
        ("documents".into(), docs.len().to_string()),
    ];
    let acc_key = match kind {
        ModelKind::EncoderMlm => "masked_accuracy",
        ModelKind::DecoderCausal => "next_token_accuracy",
    };
    report.push((acc_key.into(), format!("{:.6}", eval::label_accuracy(&model, &batches)?)));
    if let Some(teacher) = &teacher {
        let a = eval::agreement(&model, teacher, &batches)?;
        report.push(("logit_kl".into(), format!("{:.6}", a.logit_kl)));
        report.push(("top1_agreement".into(), format!("{:.6}", a.top1)));
        for (l, kl) in a.attention_kl.iter().enumerate() {
            report.push((format!("attention_kl.{}", l + 1), format!("{kl:.6}")));
        }
    }
    if kind == ModelKind::DecoderCausal {
        let pairs = prompt_pairs(&docs, args.prompts);
        let prompts: Vec<Vec<usize>> = pairs.iter().map(|(p, _)| encode_prompt(&tok, p)).collect();
        let mut f1 = 0.0;
        for (ids, (_, answer)) in prompts.iter().zip(&pairs) {
            let out = eval::greedy_generate(&model, ids, args.max_new)?;
            f1 += eval::rouge_l_text(&tok.decode(&out), answer)?.f1;
        }
        if !pairs.is_empty() {
            report.push(("rouge_l_reference".into(), format!("{:.6}", f1 / pairs.len() as f64)));
        }
        if let Some(teacher) = &teacher {
            let r = eval::generation_agreement(&model, teacher, &prompts, args.max_new)?;
            report.push(("rouge_l_teacher".into(), format!("{r:.6}")));
        }
    }

    let text: String = report.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    print!("{text}");
    if let Some(out) = &args.out {
        ensure_parent(out)?;
        std::fs::write(out, &text).map_err(|e| MakdError::io(out, e))?;
        let config = serde_json::json!({
            "split": format!("{:?}", args.split).to_lowercase(),
            "heldout_fraction": args.heldout_fraction,
            "split_seed": args.split_seed,
            "seq_len": seq_len,
            "batch_size": args.batch_size,
            "mask_rate": args.mask_rate,
            "max_new": args.max_new,
            "prompts": args.prompts,
        });
        let mut manifest = RunManifest::new("eval", config, args.seed);
        manifest.inputs.insert("model".into(), args.model.clone());
        manifest.inputs.insert("corpus".into(), args.corpus.clone());
        if let Some(t) = &args.teacher {
            manifest.inputs.insert("teacher".into(), t.clone());
        }
        manifest.outputs.insert("report".into(), out.clone());
        manifest.write_beside(out, started)?;
    }
    Ok(())
}

fn bench(args: &BenchArgs) -> Result<()> {
    let started = Instant::now();
    let (model, baseline) = match &args.model {
        Some(path) => (TransformerModel::load(path)?, args.against.as_deref().map(TransformerModel::load).transpose()?),
        None => {
            let dense_cfg =
                ModelConfig::new(ModelKind::EncoderMlm, args.layers, args.hidden, args.heads, 1000, args.seq_len);
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            let dense = TransformerModel::init(dense_cfg.clone(), &mut rng)?;
            let low = TransformerModel::init(dense_cfg.with_uniform_rank(args.rank), &mut rng)?;
            (low, Some(dense))
        }
    };
    let seq_len = args.seq_len.min(model.config.max_seq_len);
    let r = eval::throughput_bench(&model, seq_len, args.reps, args.warmup)?;
    let mut json = serde_json::json!({ "model": to_json(&r) });
    println!(
        "model: {:.3} ms/forward, {:.1} tokens/s, {} linear MACs/token",
        r.median_seconds * 1e3,
        r.tokens_per_second,
        r.linear_macs_per_token
    );
    if let Some(b) = &baseline {
        let rb = eval::throughput_bench(b, seq_len, args.reps, args.warmup)?;
        let speedup = rb.median_seconds / r.median_seconds;
        let mac_ratio = rb.linear_macs_per_token as f64 / r.linear_macs_per_token as f64;
        println!(
            "baseline: {:.3} ms/forward, {:.1} tokens/s, {} linear MACs/token",
            rb.median_seconds * 1e3,
            rb.tokens_per_second,
            rb.linear_macs_per_token
        );
        println!("speedup {speedup:.3} (MAC ratio {mac_ratio:.3})");
        json["baseline"] = to_json(&rb);
        json["speedup"] = speedup.into();
        json["mac_ratio"] = mac_ratio.into();
    }
    if let Some(out) = &args.out {
        ensure_parent(out)?;
        let text = serde_json::to_string_pretty(&json).map_err(|e| MakdError::invalid(e.to_string()))?;
        std::fs::write(out, text + "\n").map_err(|e| MakdError::io(out, e))?;
        let config = serde_json::json!({
            "hidden": args.hidden, "layers": args.layers, "heads": args.heads, "rank": args.rank,
            "seq_len": seq_len, "reps": args.reps, "warmup": args.warmup,
        });
        let mut manifest = RunManifest::new("bench", config, args.seed);
        for (k, p) in [("model", &args.model), ("against", &args.against)] {
            if let Some(p) = p {
                manifest.inputs.insert(k.into(), p.clone());
            }
        }
        manifest.outputs.insert("report".into(), out.clone());
        manifest.write_beside(out, started)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct InspectReport {
    kind: String,
    layers: usize,
    hidden: usize,
    ffn: usize,
    heads: usize,
    vocab_size: usize,
    max_seq_len: usize,
    ranks: BTreeMap<String, usize>,
    embedding_rank: Option<usize>,
    parameters: usize,
    tensors: Vec<(String, Vec<usize>)>,
    training: BTreeMap<String, String>,
    trace_shapes: Vec<(String, Vec<usize>)>,
}

fn inspect(args: &InspectArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let model = TransformerModel::from_checkpoint(&ck)?;
    let c = &model.config;
    let t = args.probe_len.clamp(1, c.max_seq_len);
    let ids: Vec<usize> = (0..t).map(|i| i % c.vocab_size).collect();
    let trace = model.forward(&Input::single(&ids))?;
    let mut shapes = vec![("embeddings".to_string(), trace.embeddings.shape().to_vec())];
    for (l, layer) in trace.layers.iter().enumerate() {
        let per_head = |name: &str, ts: &[crate::tensor::Tensor]| {
            (format!("layers.{l}.{name}[{}]", ts.len()), ts[0].shape().to_vec())
        };
        shapes.push(per_head("queries", &layer.queries));
        shapes.push(per_head("keys", &layer.keys));
        shapes.push(per_head("values", &layer.values));
        shapes.push(per_head("attention", &layer.attention));
        shapes.push((format!("layers.{l}.attention_output"), layer.attention_output.shape().to_vec()));
        shapes.push((format!("layers.{l}.ffn_up"), layer.ffn_up.shape().to_vec()));
        shapes.push((format!("layers.{l}.ffn_down"), layer.ffn_down.shape().to_vec()));
        shapes.push((format!("layers.{l}.hidden"), layer.hidden.shape().to_vec()));
    }
    shapes.push(("logits".to_string(), trace.logits.shape().to_vec()));
    let report = InspectReport {
        kind: c.kind.to_string(),
        layers: c.layers,
        hidden: c.hidden,
        ffn: c.ffn,
        heads: c.heads,
        vocab_size: c.vocab_size,
        max_seq_len: c.max_seq_len,
        ranks: c.ranks.iter().map(|(r, k)| (r.to_string(), *k)).collect(),
        embedding_rank: c.embedding_rank,
        parameters: model.num_params(),
        tensors: ck.manifest().entries,
        training: ck
            .meta
            .iter()
            .filter(|(k, _)| k.starts_with("train."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect(),
        trace_shapes: shapes,
    };
    if args.json {
        let text = serde_json::to_string_pretty(&report).map_err(|e| MakdError::invalid(e.to_string()))?;
        println!("{text}");
        return Ok(());
    }
    println!("kind: {}", report.kind);
    println!("L: {}", report.layers);
    println!("d: {}", report.hidden);
    println!("d_f: {}", report.ffn);
    println!("A_h: {}", report.heads);
    println!("vocab: {}", report.vocab_size);
    println!("max_seq_len: {}", report.max_seq_len);
    if report.ranks.is_empty() {
        println!("ranks: dense");
    } else {
        let r: Vec<String> = report.ranks.iter().map(|(k, v)| format!("{k}={v}")).collect();
        println!("ranks: {}", r.join(" "));
    }
    if let Some(k) = report.embedding_rank {
        println!("embedding_rank: {k}");
    }
    println!("parameters: {}", report.parameters);
    for (k, v) in &report.training {
        println!("{k}: {v}");
    }
    println!("tensors:");
    for (name, shape) in &report.tensors {
        println!("  {name} {shape:?}");
    }
    println!("trace shapes (probe length {t}):");
    for (name, shape) in &report.trace_shapes {
        println!("  {name} {shape:?}");
    }
    Ok(())
}

fn corpus(args: &CorpusArgs) -> Result<()> {
    let started = Instant::now();
    let docs = match args.kind {
        CorpusKind::Grammar => synthetic::grammar_corpus(args.docs, args.seed),
        CorpusKind::Facts => synthetic::facts_corpus(args.docs, args.entities, args.seed),
        CorpusKind::Instruction => synthetic::instruction_corpus(args.docs, args.seed),
        CorpusKind::Brackets => synthetic::bracket_corpus(args.docs, args.max_depth, args.seed),
    };
    ensure_parent(&args.out)?;
    let text: String = docs.iter().map(|d| format!("{d}\n")).collect();
    std::fs::write(&args.out, text).map_err(|e| MakdError::io(&args.out, e))?;
    let config = serde_json::json!({
        "kind": format!("{:?}", args.kind).to_lowercase(),
        "docs": args.docs,
        "max_depth": args.max_depth,
        "entities": args.entities,
    });
    let mut manifest = RunManifest::new("corpus", config, args.seed);
    manifest.outputs.insert("corpus".into(), args.out.clone());
    manifest.write_beside(&args.out, started)?;
    println!("wrote {} documents to {}", docs.len(), args.out.display());
    Ok(())
}
