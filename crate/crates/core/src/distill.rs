//! Distillation objectives over paired teacher/student traces, and the
//! per-layer assignment of objectives ("aspects").
//!
//! * matrix aspect: per-head Q/K/V and FFN up/down activations, MSE
//! * layer aspect: attention distributions (KL) and hidden states (MSE)
//! * model aspect: temperature-softened cross-entropy on the logits
//!
//! All functions record onto a [`Tape`], so the same code produces both the
//! loss values and their gradients. Padded query rows never contribute.

use std::collections::BTreeSet;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{MakdError, Result};
use crate::tensor::Tensor;
use crate::transformer::{ActivationTrace, Trace};

pub const DEFAULT_KL_EPSILON: f64 = 1e-10;

/// Argument order of the attention KL.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlDirection {
    /// `KL(A_student ‖ A_teacher)`.
    #[default]
    StudentTeacher,
    /// `KL(A_teacher ‖ A_student)`.
    TeacherStudent,
}

impl fmt::Display for KlDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KlDirection::StudentTeacher => "student-teacher",
            KlDirection::TeacherStudent => "teacher-student",
        })
    }
}

impl FromStr for KlDirection {
    type Err = MakdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "student-teacher" => Ok(KlDirection::StudentTeacher),
            "teacher-student" => Ok(KlDirection::TeacherStudent),
            other => Err(MakdError::config(format!("unknown kl direction {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AspectWeights {
    pub matrix: f64,
    pub layer: f64,
    pub model: f64,
}

impl Default for AspectWeights {
    fn default() -> Self {
        AspectWeights { matrix: 1.0, layer: 1.0, model: 1.0 }
    }
}

/// Which objectives apply where. Layer indices are 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillPlan {
    pub matrix_layers: BTreeSet<usize>,
    pub layer_layers: BTreeSet<usize>,
    pub use_model_loss: bool,
    pub temperature: f64,
    pub weights: AspectWeights,
    pub kl_epsilon: f64,
    pub kl_direction: KlDirection,
    /// Multiply the model loss by `t²` in the total.
    pub scale_model_by_t2: bool,
    /// Permit a layer to appear in both aspect sets.
    pub allow_overlap: bool,
}

/// Partial plan used to replace the default layer assignment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlanOverride {
    pub matrix_layers: Option<BTreeSet<usize>>,
    pub layer_layers: Option<BTreeSet<usize>>,
    pub use_model_loss: Option<bool>,
    pub allow_overlap: Option<bool>,
}

impl DistillPlan {
    /// Shallow half matrix, deep half layer, model loss on. For odd `L` the
    /// middle layer goes to the layer aspect.
    pub fn hierarchical(layers: usize) -> Self {
        let m = layers / 2;
        DistillPlan {
            matrix_layers: (1..=m).collect(),
            layer_layers: (m + 1..=layers).collect(),
            use_model_loss: true,
            temperature: 1.0,
            weights: AspectWeights::default(),
            kl_epsilon: DEFAULT_KL_EPSILON,
            kl_direction: KlDirection::default(),
            scale_model_by_t2: false,
            allow_overlap: false,
        }
    }

    /// Only the output distribution is matched.
    pub fn logit_only(layers: usize) -> Self {
        DistillPlan { matrix_layers: BTreeSet::new(), layer_layers: BTreeSet::new(), ..Self::hierarchical(layers) }
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(MakdError::config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.kl_epsilon > 0.0) {
            return Err(MakdError::config("kl_epsilon must be positive"));
        }
        let w = &self.weights;
        if [w.matrix, w.layer, w.model].iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(MakdError::config("aspect weights must be finite and non-negative"));
        }
        for (name, set) in [("matrix", &self.matrix_layers), ("layer", &self.layer_layers)] {
            if let Some(&bad) = set.iter().find(|&&l| l == 0 || l > layers) {
                return Err(MakdError::config(format!("{name} aspect layer {bad} out of range 1..={layers}")));
            }
        }
        if !self.allow_overlap {
            if let Some(l) = self.matrix_layers.intersection(&self.layer_layers).next() {
                return Err(MakdError::config(format!(
                    "layer {l} has both matrix and layer aspects; set allow_overlap to permit this"
                )));
            }
        }
        Ok(())
    }
}

/// Default hierarchical plan for an `L`-layer pair, optionally with the
/// layer assignment replaced.
pub fn assign_aspects(layers: usize, overrides: Option<&PlanOverride>) -> Result<DistillPlan> {
    if layers == 0 {
        return Err(MakdError::config("distillation needs at least one layer"));
    }
    let mut plan = DistillPlan::hierarchical(layers);
    if let Some(o) = overrides {
        if let Some(s) = &o.matrix_layers {
            plan.matrix_layers = s.clone();
        }
        if let Some(s) = &o.layer_layers {
            plan.layer_layers = s.clone();
        }
        if let Some(b) = o.use_model_loss {
            plan.use_model_loss = b;
        }
        if let Some(b) = o.allow_overlap {
            plan.allow_overlap = b;
        }
    }
    plan.validate(layers)?;
    Ok(plan)
}

/// Parses inclusive ranges such as `1-6`, `2,4-5` or `none`.
pub fn parse_layers(s: &str) -> Result<BTreeSet<usize>> {
    let s = s.trim();
    let mut out = BTreeSet::new();
    if s.is_empty() || s == "none" {
        return Ok(out);
    }
    let num =
        |t: &str| t.trim().parse::<usize>().map_err(|_| MakdError::config(format!("bad layer index {t:?} in {s:?}")));
    for part in s.split(',') {
        match part.split_once('-') {
            Some((lo, hi)) => {
                let (lo, hi) = (num(lo)?, num(hi)?);
                if lo > hi {
                    return Err(MakdError::config(format!("empty layer range {part:?}")));
                }
                out.extend(lo..=hi);
            }
            None => {
                out.insert(num(part)?);
            }
        }
    }
    Ok(out)
}

/// Inverse of [`parse_layers`], collapsing runs into ranges.
pub fn format_layers(set: &BTreeSet<usize>) -> String {
    if set.is_empty() {
        return "none".into();
    }
    let mut parts = Vec::new();
    let mut iter = set.iter().copied().peekable();
    while let Some(lo) = iter.next() {
        let mut hi = lo;
        while iter.peek() == Some(&(hi + 1)) {
            hi = iter.next().unwrap();
        }
        parts.push(if lo == hi { lo.to_string() } else { format!("{lo}-{hi}") });
    }
    parts.join(",")
}

/// How an interval written `[L/2, L]` is read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpperHalf {
    /// `{⌊L/2⌋+1 .. L}`, disjoint from the lower half.
    Disjoint,
    /// `{⌊L/2⌋ .. L}`, sharing the middle layer with the lower half.
    Inclusive,
}

/// The eight layer-range configurations of the layer-placement ablation:
/// matrix-only on lower/upper/all, layer-only on lower/upper/all, both
/// aspects on all layers with model loss, and the hierarchical split.
pub fn ablation_grid(layers: usize, reading: UpperHalf) -> Result<Vec<(String, DistillPlan)>> {
    if layers < 2 {
        return Err(MakdError::config("the ablation grid needs at least two layers"));
    }
    let m = layers / 2;
    let lower: BTreeSet<usize> = (1..=m).collect();
    let upper: BTreeSet<usize> = match reading {
        UpperHalf::Disjoint => (m + 1..=layers).collect(),
        UpperHalf::Inclusive => (m..=layers).collect(),
    };
    let all: BTreeSet<usize> = (1..=layers).collect();
    let none = BTreeSet::new;
    let rows = [
        (lower.clone(), none(), false),
        (upper.clone(), none(), false),
        (all.clone(), none(), false),
        (none(), lower.clone(), false),
        (none(), upper.clone(), false),
        (none(), all.clone(), false),
        (all.clone(), all.clone(), true),
        (lower, upper, true),
    ];
    rows.into_iter()
        .map(|(matrix, layer, model)| {
            let label = format!(
                "matrix={} layer={} model={}",
                format_layers(&matrix),
                format_layers(&layer),
                if model { "on" } else { "off" }
            );
            let overlap = matrix.intersection(&layer).next().is_some();
            let plan = assign_aspects(
                layers,
                Some(&PlanOverride {
                    matrix_layers: Some(matrix),
                    layer_layers: Some(layer),
                    use_model_loss: Some(model),
                    allow_overlap: Some(overlap),
                }),
            )?;
            Ok((label, plan))
        })
        .collect()
}

fn check_pair(student: &Trace<Var>, teacher: &Trace<Var>, layer: usize) -> Result<()> {
    if student.batch != teacher.batch || student.seq_len != teacher.seq_len {
        return Err(MakdError::Architecture(format!(
            "traces cover different inputs: {}x{} vs {}x{}",
            student.batch, student.seq_len, teacher.batch, teacher.seq_len
        )));
    }
    if student.valid != teacher.valid {
        return Err(MakdError::Architecture("traces use different padding masks".into()));
    }
    let (s, t) = (student.layer(layer)?, teacher.layer(layer)?);
    if s.queries.len() != t.queries.len() {
        return Err(MakdError::Architecture(format!(
            "layer {layer}: student has {} heads, teacher {}",
            s.queries.len(),
            t.queries.len()
        )));
    }
    Ok(())
}

/// Sum of `parts`, or a zero constant when empty.
fn add_all(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    let Some((&first, rest)) = parts.split_first() else {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    };
    rest.iter().try_fold(first, |acc, &p| tape.add(acc, p))
}

/// Head-averaged attention KL at `layer`, averaged over valid query rows.
pub fn attn_kl_loss(
    tape: &mut Tape,
    student: &Trace<Var>,
    teacher: &Trace<Var>,
    layer: usize,
    eps: f64,
    direction: KlDirection,
) -> Result<Var> {
    check_pair(student, teacher, layer)?;
    let (s, t) = (student.layer(layer)?, teacher.layer(layer)?);
    let heads = s.attention.len();
    let mut parts = Vec::with_capacity(heads);
    for (&a_s, &a_t) in s.attention.iter().zip(&t.attention) {
        let (p, q) = match direction {
            KlDirection::StudentTeacher => (a_s, a_t),
            KlDirection::TeacherStudent => (a_t, a_s),
        };
        parts.push(tape.row_kl(p, q, student.valid.clone(), eps)?);
    }
    let total = add_all(tape, &parts)?;
    Ok(tape.scale(total, 1.0 / heads as f64))
}

pub fn hidden_mse_loss(tape: &mut Tape, student: &Trace<Var>, teacher: &Trace<Var>, layer: usize) -> Result<Var> {
    check_pair(student, teacher, layer)?;
    let (s, t) = (student.layer(layer)?, teacher.layer(layer)?);
    tape.row_mse(s.hidden, t.hidden, student.valid.clone())
}

pub fn layer_loss(
    tape: &mut Tape,
    student: &Trace<Var>,
    teacher: &Trace<Var>,
    layer: usize,
    eps: f64,
    direction: KlDirection,
) -> Result<Var> {
    let attn = attn_kl_loss(tape, student, teacher, layer, eps, direction)?;
    let hidden = hidden_mse_loss(tape, student, teacher, layer)?;
    tape.add(attn, hidden)
}

/// Head-averaged sum of query, key and value MSEs at `layer`. Heads are
/// paired by position.
pub fn mha_matrix_loss(tape: &mut Tape, student: &Trace<Var>, teacher: &Trace<Var>, layer: usize) -> Result<Var> {
    check_pair(student, teacher, layer)?;
    let (s, t) = (student.layer(layer)?, teacher.layer(layer)?);
    let heads = s.queries.len();
    let mut parts = Vec::with_capacity(3 * heads);
    for a in 0..heads {
        for (xs, xt) in [(s.queries[a], t.queries[a]), (s.keys[a], t.keys[a]), (s.values[a], t.values[a])] {
            parts.push(tape.row_mse(xs, xt, student.valid.clone())?);
        }
    }
    let total = add_all(tape, &parts)?;
    Ok(tape.scale(total, 1.0 / heads as f64))
}

/// MSE of the FFN up activation plus MSE of the down-projection output.
pub fn ffn_matrix_loss(tape: &mut Tape, student: &Trace<Var>, teacher: &Trace<Var>, layer: usize) -> Result<Var> {
    check_pair(student, teacher, layer)?;
    let (s, t) = (student.layer(layer)?, teacher.layer(layer)?);
    let up = tape.row_mse(s.ffn_up, t.ffn_up, student.valid.clone())?;
    let down = tape.row_mse(s.ffn_down, t.ffn_down, student.valid.clone())?;
    tape.add(up, down)
}

pub fn matrix_loss(tape: &mut Tape, student: &Trace<Var>, teacher: &Trace<Var>, layer: usize) -> Result<Var> {
    let mha = mha_matrix_loss(tape, student, teacher, layer)?;
    let ffn = ffn_matrix_loss(tape, student, teacher, layer)?;
    tape.add(mha, ffn)
}

/// Mean over `rows` of `CE(softmax(z_T/t), softmax(z_S/t))`.
pub fn model_loss(
    tape: &mut Tape,
    student_logits: Var,
    teacher_logits: Var,
    temperature: f64,
    rows: Rc<[bool]>,
) -> Result<Var> {
    tape.soft_cross_entropy(student_logits, teacher_logits, temperature, rows)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerLosses {
    pub layer: usize,
    pub attn: Option<f64>,
    pub hidden: Option<f64>,
    pub mha: Option<f64>,
    pub ffn: Option<f64>,
}

/// Values of every active component for one batch. Inactive per-layer
/// components are `None`; inactive aggregates are 0.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub layers: Vec<LayerLosses>,
    pub matrix: f64,
    pub layer: f64,
    pub model: f64,
    pub total: f64,
}

impl LossReport {
    /// Loss values for two materialized traces.
    pub fn compute(
        student: &ActivationTrace,
        teacher: &ActivationTrace,
        plan: &DistillPlan,
        model_rows: Option<&[bool]>,
    ) -> Result<LossReport> {
        let mut tape = Tape::new();
        let s = student.to_tape(&mut tape);
        let t = teacher.to_tape(&mut tape);
        Ok(total_loss(&mut tape, &s, &t, plan, model_rows)?.report)
    }
}

pub struct LossGraph {
    pub total: Var,
    pub report: LossReport,
}

/// Weighted combination of the aspects selected by `plan`. `model_rows`
/// picks the positions that carry the model loss (masked positions for an
/// encoder, labelled positions for a decoder); `None` means every valid row.
pub fn total_loss(
    tape: &mut Tape,
    student: &Trace<Var>,
    teacher: &Trace<Var>,
    plan: &DistillPlan,
    model_rows: Option<&[bool]>,
) -> Result<LossGraph> {
    if student.layers.len() != teacher.layers.len() {
        return Err(MakdError::Architecture(format!(
            "student has {} layers, teacher {}",
            student.layers.len(),
            teacher.layers.len()
        )));
    }
    plan.validate(student.layers.len())?;

    let mut report = LossReport::default();
    let mut matrix_parts = Vec::new();
    let mut layer_parts = Vec::new();
    let used: BTreeSet<usize> = plan.matrix_layers.union(&plan.layer_layers).copied().collect();
    for &l in &used {
        let mut entry = LayerLosses { layer: l, ..Default::default() };
        if plan.matrix_layers.contains(&l) {
            let mha = mha_matrix_loss(tape, student, teacher, l)?;
            let ffn = ffn_matrix_loss(tape, student, teacher, l)?;
            entry.mha = Some(tape.value(mha).item());
            entry.ffn = Some(tape.value(ffn).item());
            matrix_parts.push(tape.add(mha, ffn)?);
        }
        if plan.layer_layers.contains(&l) {
            let attn = attn_kl_loss(tape, student, teacher, l, plan.kl_epsilon, plan.kl_direction)?;
            let hidden = hidden_mse_loss(tape, student, teacher, l)?;
            entry.attn = Some(tape.value(attn).item());
            entry.hidden = Some(tape.value(hidden).item());
            layer_parts.push(tape.add(attn, hidden)?);
        }
        report.layers.push(entry);
    }

    let matrix = add_all(tape, &matrix_parts)?;
    let layer = add_all(tape, &layer_parts)?;
    report.matrix = tape.value(matrix).item();
    report.layer = tape.value(layer).item();
    let mut terms = vec![tape.scale(matrix, plan.weights.matrix), tape.scale(layer, plan.weights.layer)];
    if plan.use_model_loss {
        let rows: Rc<[bool]> = match model_rows {
            Some(r) => Rc::from(r),
            None => student.valid.clone(),
        };
        let model = model_loss(tape, student.logits, teacher.logits, plan.temperature, rows)?;
        report.model = tape.value(model).item();
        let factor = if plan.scale_model_by_t2 { plan.temperature * plan.temperature } else { 1.0 };
        terms.push(tape.scale(model, plan.weights.model * factor));
    }
    let total = add_all(tape, &terms)?;
    report.total = tape.value(total).item();
    if !report.total.is_finite() {
        return Err(MakdError::NonFinite("distillation loss".into()));
    }
    Ok(LossGraph { total, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::LayerTrace;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn trace(layers: usize, heads: usize, rows: usize, dk: usize, seed: u64) -> ActivationTrace {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = heads * dk;
        let prob = |rng: &mut ChaCha8Rng| {
            let x = Tensor::randn(&[rows, rows], 1.0, rng);
            crate::tensor::softmax_rows(&x, None).unwrap()
        };
        Trace {
            embeddings: Tensor::randn(&[rows, d], 1.0, &mut rng),
            layers: (0..layers)
                .map(|_| LayerTrace {
                    queries: (0..heads).map(|_| Tensor::randn(&[rows, dk], 1.0, &mut rng)).collect(),
                    keys: (0..heads).map(|_| Tensor::randn(&[rows, dk], 1.0, &mut rng)).collect(),
                    values: (0..heads).map(|_| Tensor::randn(&[rows, dk], 1.0, &mut rng)).collect(),
                    attention: (0..heads).map(|_| prob(&mut rng)).collect(),
                    attention_output: Tensor::randn(&[rows, d], 1.0, &mut rng),
                    ffn_up: Tensor::randn(&[rows, 4 * d], 1.0, &mut rng),
                    ffn_down: Tensor::randn(&[rows, d], 1.0, &mut rng),
                    hidden: Tensor::randn(&[rows, d], 1.0, &mut rng),
                })
                .collect(),
            logits: Tensor::randn(&[rows, 5], 1.0, &mut rng),
            batch: 1,
            seq_len: rows,
            valid: vec![true; rows].into(),
        }
    }

    fn eval(
        f: impl Fn(&mut Tape, &Trace<Var>, &Trace<Var>) -> Result<Var>,
        s: &ActivationTrace,
        t: &ActivationTrace,
    ) -> f64 {
        let mut tape = Tape::new();
        let (sv, tv) = (s.to_tape(&mut tape), t.to_tape(&mut tape));
        let v = f(&mut tape, &sv, &tv).unwrap();
        tape.value(v).item()
    }

    #[test]
    fn default_plan_for_twelve_layers() {
        let p = assign_aspects(12, None).unwrap();
        assert_eq!(p.matrix_layers, (1..=6).collect());
        assert_eq!(p.layer_layers, (7..=12).collect());
        assert!(p.use_model_loss);
        assert!(p.matrix_layers.contains(&6));
    }

    #[test]
    fn two_and_three_layer_plans() {
        let p = assign_aspects(2, None).unwrap();
        assert_eq!(p.matrix_layers, [1].into());
        assert_eq!(p.layer_layers, [2].into());
        let p = assign_aspects(3, None).unwrap();
        assert_eq!(p.matrix_layers, [1].into());
        assert_eq!(p.layer_layers, [2, 3].into());
    }

    #[test]
    fn overlap_requires_flag() {
        let all: BTreeSet<usize> = (1..=4).collect();
        let mut o = PlanOverride { matrix_layers: Some(all.clone()), layer_layers: Some(all), ..Default::default() };
        assert!(assign_aspects(4, Some(&o)).is_err());
        o.allow_overlap = Some(true);
        assert!(assign_aspects(4, Some(&o)).is_ok());
    }

    #[test]
    fn out_of_range_layer_is_rejected() {
        let o = PlanOverride { matrix_layers: Some([0].into()), ..Default::default() };
        assert!(assign_aspects(4, Some(&o)).is_err());
        let o = PlanOverride { layer_layers: Some([5].into()), ..Default::default() };
        assert!(assign_aspects(4, Some(&o)).is_err());
    }

    #[test]
    fn layer_ranges_round_trip() {
        let s = parse_layers("1-3, 5,7-8").unwrap();
        assert_eq!(s, [1, 2, 3, 5, 7, 8].into());
        assert_eq!(format_layers(&s), "1-3,5,7-8");
        assert!(parse_layers("none").unwrap().is_empty());
        assert!(parse_layers("4-2").is_err());
        assert!(parse_layers("x").is_err());
    }

    #[test]
    fn ablation_grid_has_eight_distinct_plans() {
        for reading in [UpperHalf::Disjoint, UpperHalf::Inclusive] {
            let grid = ablation_grid(12, reading).unwrap();
            assert_eq!(grid.len(), 8);
            for i in 0..8 {
                for j in i + 1..8 {
                    assert_ne!(grid[i].1, grid[j].1);
                }
            }
        }
    }

    #[test]
    fn kl_of_point_mass_against_uniform_is_ln2() {
        let mut s = trace(1, 1, 2, 2, 1);
        let mut t = s.clone();
        s.layers[0].attention[0] = Tensor::from_rows(&[[1.0, 0.0], [0.5, 0.5]]).unwrap();
        t.layers[0].attention[0] = Tensor::from_rows(&[[0.5, 0.5], [0.5, 0.5]]).unwrap();
        s.valid = vec![true, false].into();
        t.valid = s.valid.clone();
        let v = eval(|tp, a, b| attn_kl_loss(tp, a, b, 1, DEFAULT_KL_EPSILON, KlDirection::StudentTeacher), &s, &t);
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn heads_are_averaged() {
        let s = trace(1, 2, 3, 2, 2);
        let t = trace(1, 2, 3, 2, 3);
        let head = |h: usize| {
            let mut s1 = s.clone();
            let mut t1 = t.clone();
            for tr in [&mut s1, &mut t1] {
                let l = &mut tr.layers[0];
                l.attention = vec![l.attention[h].clone()];
                l.queries.truncate(1);
            }
            eval(|tp, a, b| attn_kl_loss(tp, a, b, 1, DEFAULT_KL_EPSILON, KlDirection::StudentTeacher), &s1, &t1)
        };
        let both = eval(|tp, a, b| attn_kl_loss(tp, a, b, 1, DEFAULT_KL_EPSILON, KlDirection::StudentTeacher), &s, &t);
        assert!((both - (head(0) + head(1)) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn constant_offsets_give_squared_offset() {
        let t = trace(1, 2, 3, 2, 4);
        let mut s = t.clone();
        s.layers[0].hidden = t.layers[0].hidden.map(|x| x + 0.5);
        s.layers[0].values = t.layers[0].values.iter().map(|v| v.map(|x| x - 2.0)).collect();
        s.layers[0].ffn_up = t.layers[0].ffn_up.map(|x| x + 3.0);
        assert!((eval(|tp, a, b| hidden_mse_loss(tp, a, b, 1), &s, &t) - 0.25).abs() < 1e-12);
        assert!((eval(|tp, a, b| mha_matrix_loss(tp, a, b, 1), &s, &t) - 4.0).abs() < 1e-12);
        assert!((eval(|tp, a, b| ffn_matrix_loss(tp, a, b, 1), &s, &t) - 9.0).abs() < 1e-12);
    }

    #[test]
    fn head_count_mismatch_is_an_error() {
        let s = trace(1, 2, 3, 2, 5);
        let t = trace(1, 1, 3, 4, 6);
        let mut tape = Tape::new();
        let (sv, tv) = (s.to_tape(&mut tape), t.to_tape(&mut tape));
        assert!(attn_kl_loss(&mut tape, &sv, &tv, 1, 1e-10, KlDirection::StudentTeacher).is_err());
    }

    #[test]
    fn model_loss_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::from_rows(&[[0.0, 0.0]]).unwrap());
        let rows: Rc<[bool]> = vec![true].into();
        let v = model_loss(&mut tape, z, z, 1.0, rows.clone()).unwrap();
        assert!((tape.value(v).item() - std::f64::consts::LN_2).abs() < 1e-12);
        let zt = tape.constant(Tensor::from_rows(&[[2.0, 0.0]]).unwrap());
        let zs = tape.constant(Tensor::from_rows(&[[0.0, 2.0]]).unwrap());
        let v = model_loss(&mut tape, zs, zt, 1.0, rows.clone()).unwrap();
        let e2 = 2f64.exp();
        let (pt, ps) = ([e2 / (e2 + 1.0), 1.0 / (e2 + 1.0)], [1.0 / (e2 + 1.0), e2 / (e2 + 1.0)]);
        let oracle = -(pt[0] * ps[0].ln() + pt[1] * ps[1].ln());
        assert!((tape.value(v).item() - oracle).abs() < 1e-12);
        assert!(model_loss(&mut tape, zs, zt, 0.0, rows).is_err());
    }

    #[test]
    fn self_distillation_is_zero_except_teacher_entropy() {
        let t = trace(4, 2, 5, 3, 7);
        let plan = DistillPlan::hierarchical(4);
        let r = LossReport::compute(&t, &t, &plan, None).unwrap();
        assert_eq!(r.matrix, 0.0);
        assert_eq!(r.layer, 0.0);
        let probs = crate::tensor::softmax_rows(&t.logits, None).unwrap();
        let entropy: f64 =
            (0..probs.rows()).map(|i| -probs.row(i).iter().map(|p| p * p.ln()).sum::<f64>()).sum::<f64>()
                / probs.rows() as f64;
        assert!((r.model - entropy).abs() < 1e-12);
    }

    #[test]
    fn total_recomposes_components() {
        let s = trace(4, 2, 5, 3, 8);
        let t = trace(4, 2, 5, 3, 9);
        let mut plan = DistillPlan::hierarchical(4);
        plan.weights = AspectWeights { matrix: 0.5, layer: 2.0, model: 3.0 };
        plan.temperature = 2.0;
        plan.scale_model_by_t2 = true;
        let r = LossReport::compute(&s, &t, &plan, None).unwrap();
        let m: f64 = r.layers.iter().filter_map(|l| Some(l.mha? + l.ffn?)).sum();
        let y: f64 = r.layers.iter().filter_map(|l| Some(l.attn? + l.hidden?)).sum();
        assert!((r.matrix - m).abs() < 1e-12 && (r.layer - y).abs() < 1e-12);
        assert!((r.total - (0.5 * m + 2.0 * y + 12.0 * r.model)).abs() < 1e-10);
        assert_eq!(r.layers[0].attn, None);
        assert_eq!(r.layers[3].mha, None);
    }

    #[test]
    fn zero_weights_give_zero_total() {
        let s = trace(2, 2, 4, 2, 10);
        let t = trace(2, 2, 4, 2, 11);
        let mut plan = DistillPlan::hierarchical(2);
        plan.weights = AspectWeights { matrix: 0.0, layer: 0.0, model: 0.0 };
        assert_eq!(LossReport::compute(&s, &t, &plan, None).unwrap().total, 0.0);
    }

    #[test]
    fn padded_rows_are_ignored() {
        let t = trace(2, 2, 4, 2, 12);
        let mut s = trace(2, 2, 4, 2, 13);
        let valid: Rc<[bool]> = vec![true, true, false, false].into();
        let mut t = t;
        t.valid = valid.clone();
        s.valid = valid;
        for (ls, lt) in s.layers.iter_mut().zip(&t.layers) {
            for r in 0..2 {
                ls.hidden.row_mut(r).copy_from_slice(lt.hidden.row(r));
            }
        }
        assert_eq!(eval(|tp, a, b| hidden_mse_loss(tp, a, b, 2), &s, &t), 0.0);
    }
}
