//! Teacher pretraining and student distillation loops.
//!
//! Every source of randomness in a step (batch sampling, masking) is drawn
//! from a stream keyed by `(seed, step)`, so a run resumed from a checkpoint
//! continues exactly as the uninterrupted run would.

mod config;
mod optim;

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use config::{RunConfig, StudentInit};
pub use optim::{adamw_step, adamw_update, clip_global_norm, AdamState, AdamW};

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::data::{Batch, Dataset};
use crate::distill::{total_loss, DistillPlan, LossReport};
use crate::error::{MakdError, Result};
use crate::eval;
use crate::factorize::{build_student, FactorizationSpec};
use crate::tensor::Tensor;
use crate::transformer::{forward, ModelConfig, Params, TransformerModel};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Masked or next-token prediction on the corpus labels.
    TeacherPretrain,
    /// All aspects selected by the plan.
    #[default]
    DistillMakd,
    /// Model aspect only.
    DistillLogitOnly,
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::TeacherPretrain => "teacher-pretrain",
            TrainMode::DistillMakd => "distill-makd",
            TrainMode::DistillLogitOnly => "distill-logit-only",
        })
    }
}

impl std::str::FromStr for TrainMode {
    type Err = MakdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher-pretrain" => Ok(TrainMode::TeacherPretrain),
            "distill-makd" => Ok(TrainMode::DistillMakd),
            "distill-logit-only" => Ok(TrainMode::DistillLogitOnly),
            other => Err(MakdError::config(format!("unknown training mode {other:?}"))),
        }
    }
}

/// Optimization settings. Reference scale for the original recipe is batch
/// 512 for 400k steps; the defaults here suit toy corpora.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub adam: AdamW,
    pub grad_clip: f64,
    pub seed: u64,
    pub eval_interval: u64,
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::default(),
            steps: 5000,
            batch_size: 32,
            peak_lr: 1e-4,
            warmup_fraction: 0.1,
            adam: AdamW::default(),
            grad_clip: 1.0,
            seed: 0,
            eval_interval: 100,
            checkpoint_interval: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(MakdError::config("steps and batch_size must be positive"));
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return Err(MakdError::config("peak_lr must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(MakdError::config("warmup_fraction must lie in [0, 1]"));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(MakdError::config("adam betas must lie in [0, 1) and eps be positive"));
        }
        if a.weight_decay < 0.0 {
            return Err(MakdError::config("weight_decay must be non-negative"));
        }
        if self.eval_interval == 0 || self.checkpoint_interval == 0 {
            return Err(MakdError::config("eval and checkpoint intervals must be positive"));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> u64 {
        ((self.warmup_fraction * self.steps as f64).round() as u64).max(1)
    }

    /// Linear warmup from `peak/W` to `peak` over `W` steps, then linear
    /// decay reaching 0 at the last step.
    pub fn learning_rate(&self, step: u64) -> f64 {
        let w = self.warmup_steps();
        if step < w {
            return self.peak_lr * (step + 1) as f64 / w as f64;
        }
        let last = self.steps.saturating_sub(1);
        if last <= w {
            return self.peak_lr;
        }
        let remaining = last.saturating_sub(step) as f64;
        self.peak_lr * remaining / (last - w) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub adam: AdamState,
    /// Step and value of the best evaluation accuracy seen so far.
    pub best_eval: Option<(u64, f64)>,
}

/// One line of the metrics log: averages over the steps since the previous
/// record, plus evaluation metrics at this step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub losses: Option<LossReport>,
    pub grad_norm: f64,
    pub eval: BTreeMap<String, f64>,
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub loss: f64,
    pub report: Option<LossReport>,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Default)]
pub struct RunOptions<'a> {
    pub eval_batches: Option<&'a [Batch]>,
    /// JSON-lines metrics log. Truncated on a fresh run, appended to on
    /// resume.
    pub metrics: Option<&'a Path>,
    pub checkpoint: Option<&'a Path>,
    /// Stop early after this many total steps (for staged runs).
    pub stop_at: Option<u64>,
}

pub struct Trainer<'t> {
    pub config: TrainConfig,
    pub model: TransformerModel,
    teacher: Option<&'t TransformerModel>,
    plan: Option<DistillPlan>,
    pub state: TrainState,
}

fn check_pair(student: &ModelConfig, teacher: &ModelConfig) -> Result<()> {
    let same = student.kind == teacher.kind
        && student.layers == teacher.layers
        && student.hidden == teacher.hidden
        && student.ffn == teacher.ffn
        && student.heads == teacher.heads
        && student.vocab_size == teacher.vocab_size;
    if !same {
        return Err(MakdError::Architecture(
            "student and teacher differ in kind, depth, width, heads or vocabulary".into(),
        ));
    }
    Ok(())
}

impl<'t> Trainer<'t> {
    pub fn pretrain(model: TransformerModel, mut config: TrainConfig) -> Result<Self> {
        config.mode = TrainMode::TeacherPretrain;
        config.validate()?;
        let adam = AdamState::zeros_like(&model.params);
        Ok(Trainer { config, model, teacher: None, plan: None, state: TrainState { step: 0, adam, best_eval: None } })
    }

    /// `plan` is reduced to its model aspect in logit-only mode.
    pub fn distill(
        student: TransformerModel,
        teacher: &'t TransformerModel,
        plan: DistillPlan,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        check_pair(&student.config, &teacher.config)?;
        let plan = match config.mode {
            TrainMode::TeacherPretrain => return Err(MakdError::config("distillation needs a distill-* mode")),
            TrainMode::DistillMakd => plan,
            TrainMode::DistillLogitOnly => DistillPlan {
                matrix_layers: Default::default(),
                layer_layers: Default::default(),
                use_model_loss: true,
                ..plan
            },
        };
        plan.validate(student.config.layers)?;
        let adam = AdamState::zeros_like(&student.params);
        Ok(Trainer {
            config,
            model: student,
            teacher: Some(teacher),
            plan: Some(plan),
            state: TrainState { step: 0, adam, best_eval: None },
        })
    }

    pub fn plan(&self) -> Option<&DistillPlan> {
        self.plan.as_ref()
    }

    /// Restores model and optimizer state written by [`Self::to_checkpoint`]
    /// into a trainer built with the same configuration.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        let model = TransformerModel::from_checkpoint(ck)?;
        if model.config != self.model.config {
            return Err(MakdError::Architecture("checkpoint model config differs from the run's".into()));
        }
        let meta = |k: &str| -> Result<&String> {
            ck.meta.get(k).ok_or_else(|| MakdError::config(format!("checkpoint lacks {k}; not a training checkpoint")))
        };
        let parse = |k: &str| -> Result<u64> {
            meta(k)?.parse().map_err(|_| MakdError::config(format!("{k} is not an integer")))
        };
        let step = parse("train.step")?;
        let t = parse("train.adam_t")?;
        if step > self.config.steps {
            return Err(MakdError::config(format!(
                "checkpoint is at step {step}, beyond the configured {} steps",
                self.config.steps
            )));
        }
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, p) in model.params.leaves() {
            for (prefix, out) in [("opt.m.", &mut m), ("opt.v.", &mut v)] {
                let key = format!("{prefix}{name}");
                let tensor = ck.get(&key).ok_or_else(|| MakdError::config(format!("checkpoint lacks {key}")))?;
                if tensor.shape() != p.shape() {
                    return Err(MakdError::config(format!("{key} has the wrong shape")));
                }
                out.push(tensor.clone());
            }
        }
        let best_eval = match (ck.meta.get("train.best_step"), ck.meta.get("train.best_eval")) {
            (Some(s), Some(v)) => Some((
                s.parse().map_err(|_| MakdError::config("bad train.best_step"))?,
                v.parse().map_err(|_| MakdError::config("bad train.best_eval"))?,
            )),
            _ => None,
        };
        self.model = model;
        self.state = TrainState { step, adam: AdamState { t, m, v }, best_eval };
        Ok(())
    }

    /// Model parameters plus optimizer moments and the step counter.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut extra = BTreeMap::new();
        extra.insert("train.step".to_string(), self.state.step.to_string());
        extra.insert("train.adam_t".to_string(), self.state.adam.t.to_string());
        extra.insert("train.mode".to_string(), self.config.mode.to_string());
        extra.insert("train.seed".to_string(), self.config.seed.to_string());
        if let Some((s, v)) = self.state.best_eval {
            extra.insert("train.best_step".to_string(), s.to_string());
            extra.insert("train.best_eval".to_string(), format!("{v:?}"));
        }
        let mut ck = self.model.to_checkpoint(&extra);
        let names: Vec<String> = self.model.params.leaves().into_iter().map(|(n, _)| n).collect();
        for (prefix, moments) in [("opt.m.", &self.state.adam.m), ("opt.v.", &self.state.adam.v)] {
            for (name, t) in names.iter().zip(moments) {
                ck.tensors.push((format!("{prefix}{name}"), t.clone()));
            }
        }
        ck
    }

    /// One optimization step on the batch for the current step index.
    pub fn step(&mut self, data: &Dataset) -> Result<StepOutcome> {
        let step = self.state.step;
        let batch = data.sample(self.config.batch_size, self.config.seed, step)?;
        let input = batch.input()?;

        let mut tape = Tape::new();
        let vars = self.model.bind(&mut tape, true);
        let student = forward(&mut tape, &self.model.config, &vars, &input)?;
        let (loss, report) = match (self.teacher, &self.plan) {
            (Some(teacher), Some(plan)) => {
                let tvars = teacher.bind(&mut tape, false);
                let tt = forward(&mut tape, &teacher.config, &tvars, &input)?;
                let rows = batch.label_rows();
                let g = total_loss(&mut tape, &student, &tt, plan, Some(&rows))?;
                (g.total, Some(g.report))
            }
            _ => (tape.label_cross_entropy(student.logits, batch.flat_labels())?, None),
        };
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(MakdError::NonFinite(format!("training loss at step {step}")));
        }

        let mut grads = tape.backward(loss)?;
        let var_list: Vec<_> = vars.leaves().into_iter().map(|(_, v)| *v).collect();
        let mut i = 0;
        let mut grads = self.model.params.map(|_, p| {
            let g = grads.take_or_zeros(var_list[i], p);
            i += 1;
            g
        });
        let grad_norm = clip_global_norm(&mut grads, self.config.grad_clip);
        let lr = self.config.learning_rate(step);
        adamw_step(&mut self.model.params, &grads, &mut self.state.adam, lr, &self.config.adam)?;
        self.state.step += 1;
        Ok(StepOutcome { loss: loss_value, report, lr, grad_norm })
    }

    /// Evaluation metrics on fixed batches: label accuracy, plus agreement
    /// with the teacher when distilling.
    pub fn evaluate(&self, batches: &[Batch]) -> Result<BTreeMap<String, f64>> {
        let mut out = BTreeMap::new();
        out.insert("accuracy".to_string(), eval::label_accuracy(&self.model, batches)?);
        if let Some(teacher) = self.teacher {
            let a = eval::agreement(&self.model, teacher, batches)?;
            out.insert("logit_kl".to_string(), a.logit_kl);
            out.insert("top1_agreement".to_string(), a.top1);
        }
        Ok(out)
    }

    /// Trains until `config.steps` (or `opts.stop_at`), writing a metrics
    /// record every `eval_interval` steps and at the end.
    pub fn run(&mut self, data: &Dataset, opts: &RunOptions<'_>) -> Result<Vec<MetricsRecord>> {
        let end = opts.stop_at.unwrap_or(self.config.steps).min(self.config.steps);
        let mut log = match opts.metrics {
            Some(path) => Some(
                OpenOptions::new()
                    .create(true)
                    .write(true)
                    .append(self.state.step > 0)
                    .truncate(self.state.step == 0)
                    .open(path)
                    .map_err(|e| MakdError::io(path, e))?,
            ),
            None => None,
        };
        let mut records = Vec::new();
        let mut acc = Interval::default();
        while self.state.step < end {
            let out = self.step(data)?;
            acc.add(&out);
            let step = self.state.step;
            let boundary = step.is_multiple_of(self.config.eval_interval) || step == self.config.steps;
            if boundary {
                let mut record = acc.finish(step, out.lr);
                if let Some(batches) = opts.eval_batches {
                    record.eval = self.evaluate(batches)?;
                    if let Some(&a) = record.eval.get("accuracy") {
                        if self.state.best_eval.is_none_or(|(_, b)| a > b) {
                            self.state.best_eval = Some((step, a));
                        }
                    }
                }
                log::info!(
                    "step {step}: loss {:.5} lr {:.3e} grad_norm {:.3}{}",
                    record.loss,
                    record.lr,
                    record.grad_norm,
                    record.eval.iter().map(|(k, v)| format!(" {k} {v:.5}")).collect::<String>()
                );
                if let (Some(file), Some(path)) = (log.as_mut(), opts.metrics) {
                    let line = serde_json::to_string(&record)
                        .map_err(|e| MakdError::invalid(format!("metrics record: {e}")))?;
                    writeln!(file, "{line}").map_err(|e| MakdError::io(path, e))?;
                }
                records.push(record);
            }
            if let Some(path) = opts.checkpoint {
                if step.is_multiple_of(self.config.checkpoint_interval) || step == end {
                    self.to_checkpoint().save(path)?;
                }
            }
        }
        Ok(records)
    }
}

#[derive(Default)]
struct Interval {
    n: usize,
    loss: f64,
    grad_norm: f64,
    reports: Vec<LossReport>,
}

impl Interval {
    fn add(&mut self, out: &StepOutcome) {
        self.n += 1;
        self.loss += out.loss;
        self.grad_norm += out.grad_norm;
        if let Some(r) = &out.report {
            self.reports.push(r.clone());
        }
    }

    fn finish(&mut self, step: u64, lr: f64) -> MetricsRecord {
        let n = self.n.max(1) as f64;
        let losses = mean_report(&self.reports);
        let record = MetricsRecord {
            step,
            lr,
            loss: self.loss / n,
            losses,
            grad_norm: self.grad_norm / n,
            eval: BTreeMap::new(),
        };
        *self = Interval::default();
        record
    }
}

fn mean_report(reports: &[LossReport]) -> Option<LossReport> {
    let first = reports.first()?;
    let n = reports.len() as f64;
    let mut out = first.clone();
    let avg = |f: &dyn Fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    out.matrix = avg(&|r| r.matrix);
    out.layer = avg(&|r| r.layer);
    out.model = avg(&|r| r.model);
    out.total = avg(&|r| r.total);
    for (i, l) in out.layers.iter_mut().enumerate() {
        let opt = |f: &dyn Fn(&LossReport) -> Option<f64>| {
            f(first).map(|_| reports.iter().map(|r| f(r).unwrap_or(0.0)).sum::<f64>() / n)
        };
        l.attn = opt(&|r| r.layers[i].attn);
        l.hidden = opt(&|r| r.layers[i].hidden);
        l.mha = opt(&|r| r.layers[i].mha);
        l.ffn = opt(&|r| r.layers[i].ffn);
    }
    Some(out)
}

/// Reads a metrics log written by [`Trainer::run`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| MakdError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| MakdError::invalid(format!("bad metrics line: {e}"))))
        .collect()
}

/// Pretrains a freshly initialized model on `data`.
pub fn pretrain_run<R: Rng + ?Sized>(
    config: ModelConfig,
    tcfg: &TrainConfig,
    data: &Dataset,
    opts: &RunOptions<'_>,
    rng: &mut R,
) -> Result<(TransformerModel, Vec<MetricsRecord>)> {
    let model = TransformerModel::init(config, rng)?;
    let mut trainer = Trainer::pretrain(model, tcfg.clone())?;
    let records = trainer.run(data, opts)?;
    Ok((trainer.model, records))
}

/// A factorized student shaped by `spec`: truncated teacher weights, or a
/// random draw seeded from `seed`.
pub fn init_student(
    teacher: &TransformerModel,
    spec: &FactorizationSpec,
    init: StudentInit,
    seed: u64,
) -> Result<TransformerModel> {
    match init {
        StudentInit::Svd => build_student(teacher, spec),
        StudentInit::Random => {
            let config = spec.student_config(&teacher.config)?;
            TransformerModel::init(config, &mut crate::data::step_rng(seed, 0, 0xD15C))
        }
    }
}

/// Builds a student from `teacher` and distills into it. The teacher is
/// only ever read.
pub fn distill_run(
    teacher: &TransformerModel,
    spec: &FactorizationSpec,
    init: StudentInit,
    plan: &DistillPlan,
    tcfg: &TrainConfig,
    data: &Dataset,
    opts: &RunOptions<'_>,
) -> Result<(TransformerModel, Vec<MetricsRecord>)> {
    let student = init_student(teacher, spec, init, tcfg.seed)?;
    let mut trainer = Trainer::distill(student, teacher, plan.clone(), tcfg.clone())?;
    let records = trainer.run(data, opts)?;
    Ok((trainer.model, records))
}

/// Gradient of `loss` with respect to every parameter, in canonical order.
/// Used for finite-difference checks and tooling.
pub fn parameter_gradients(
    model: &TransformerModel,
    loss: impl FnOnce(&mut Tape, &Params<crate::autodiff::Var>) -> Result<crate::autodiff::Var>,
) -> Result<(f64, Params<Tensor>)> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let l = loss(&mut tape, &vars)?;
    let value = tape.value(l).item();
    let mut grads = tape.backward(l)?;
    let var_list: Vec<_> = vars.leaves().into_iter().map(|(_, v)| *v).collect();
    let mut i = 0;
    let g = model.params.map(|_, p| {
        let g = grads.take_or_zeros(var_list[i], p);
        i += 1;
        g
    });
    Ok((value, g))
}
