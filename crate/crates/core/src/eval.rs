//! Continual-learning metrics and the sequential-versus-joint update gap.
//!
//! The gap experiment compares two sequential gradient steps (task A, then
//! task B at the updated point) with one step on the summed gradients:
//!
//! ```text
//! θ_seq   = θ − η∇L_A(θ) − η∇L_B(θ − η∇L_A(θ))
//! θ_joint = θ − η(∇L_A(θ) + ∇L_B(θ))
//! ```
//!
//! Their difference is `η²·H_B·∇L_A(θ) + O(η³)`, exact when `L_B` is
//! quadratic.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datastream::{LabeledDataset, MetaSample, PseudoSequence, Sample};
use crate::linalg::{norm, DenseMatrix};
use crate::mepo::{self, loss_gradient, mean_loss};
use crate::net::{masked_argmax, FlatParams, MlpModel, NetError, ParamBlock};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation log is empty")]
    EmptyLog,
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("task {0} has no accuracy history")]
    MissingRecords(usize),
    #[error("gap {gap:e} at eta {eta:e} is below 1e-14; the losses commute")]
    DegenerateGap { eta: f64, gap: f64 },
    #[error("invalid step sizes: {0}")]
    InvalidEtas(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Gaps below this are indistinguishable from rounding.
pub const DEGENERATE_GAP: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub samples_seen: usize,
    pub seen_classes: BTreeSet<usize>,
    pub anytime_accuracy: f64,
}

/// Accuracy history of one task's test classes at task boundaries, and its
/// accuracy after the whole stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAccuracy {
    pub task: usize,
    pub history: Vec<f64>,
    pub final_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalLog {
    pub records: Vec<EvalRecord>,
    pub task_table: Vec<TaskAccuracy>,
}

pub const CSV_HEADER: &str = "samples_seen,seen_class_count,anytime_accuracy";

impl EvalLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{}",
                r.samples_seen,
                r.seen_classes.len(),
                r.anytime_accuracy
            );
        }
        out
    }

    /// Parses the CSV produced by [`EvalLog::to_csv`] into
    /// `(samples_seen, seen_class_count, anytime_accuracy)` rows.
    pub fn parse_csv(text: &str) -> Result<Vec<(usize, usize, f64)>> {
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(EvalError::Parse("missing CSV header".into()));
        }
        lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                let bad = || EvalError::Parse(format!("bad CSV row {l:?}"));
                let mut it = l.split(',');
                let a = it.next().and_then(|t| t.parse().ok()).ok_or_else(bad)?;
                let b = it.next().and_then(|t| t.parse().ok()).ok_or_else(bad)?;
                let c = it.next().and_then(|t| t.parse().ok()).ok_or_else(bad)?;
                if it.next().is_some() {
                    return Err(bad());
                }
                Ok((a, b, c))
            })
            .collect()
    }
}

/// Fraction of `samples` whose masked argmax equals the label.
pub fn accuracy<'a>(
    model: &MlpModel,
    samples: impl IntoIterator<Item = &'a Sample>,
    mask: &[usize],
    use_adapter: bool,
) -> Result<f64> {
    let use_adapter = use_adapter && model.adapter.is_some();
    let mut total = 0usize;
    let mut correct = 0usize;
    for s in samples {
        let fwd = model.forward(s.x.as_slice(), use_adapter)?;
        total += 1;
        correct += usize::from(masked_argmax(fwd.logits.as_slice(), mask) == Some(s.y));
    }
    if total == 0 {
        return Err(EvalError::EmptyTestSet);
    }
    Ok(correct as f64 / total as f64)
}

/// Accuracy over every class of `test`, after the stream.
pub fn compute_last(model: &MlpModel, test: &LabeledDataset) -> Result<f64> {
    let mask: Vec<usize> = (0..test.class_count).collect();
    accuracy(model, &test.samples, &mask, true)
}

/// Mean anytime accuracy. With uniformly spaced evaluation points this is
/// the arithmetic mean; otherwise it is the trapezoidal area divided by the
/// span. Both are written as offsets from the first accuracy so a constant
/// log returns that constant exactly.
pub fn compute_auc(log: &EvalLog) -> Result<f64> {
    let r = &log.records;
    let first = r.first().ok_or(EvalError::EmptyLog)?;
    let a0 = first.anytime_accuracy;
    if r.len() == 1 {
        return Ok(a0);
    }
    let step = r[1].samples_seen as i64 - r[0].samples_seen as i64;
    let uniform = r
        .windows(2)
        .all(|w| w[1].samples_seen as i64 - w[0].samples_seen as i64 == step);
    if uniform {
        let n = r.len() as f64;
        return Ok(a0 + r.iter().map(|x| x.anytime_accuracy - a0).sum::<f64>() / n);
    }
    let span = (r[r.len() - 1].samples_seen - r[0].samples_seen) as f64;
    let area: f64 = r
        .windows(2)
        .map(|w| {
            let width = (w[1].samples_seen - w[0].samples_seen) as f64;
            width * ((w[0].anytime_accuracy + w[1].anytime_accuracy) / 2.0 - a0)
        })
        .sum();
    Ok(a0 + area / span)
}

/// Mean over tasks of `max(0, peak history − final)`. An empty table
/// (single-task stream) has no forgetting.
pub fn compute_forgetting(table: &[TaskAccuracy]) -> Result<f64> {
    if table.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for t in table {
        let peak = t
            .history
            .iter()
            .copied()
            .fold(None, |m: Option<f64>, a| Some(m.map_or(a, |m| m.max(a))))
            .ok_or(EvalError::MissingRecords(t.task))?;
        total += (peak - t.final_acc).max(0.0);
    }
    Ok(total / table.len() as f64)
}

/// Two losses over a shared parameter vector.
pub trait TaskPair {
    fn dim(&self) -> usize;
    fn grad_a(&self, theta: &[f64]) -> Result<Vec<f64>>;
    fn grad_b(&self, theta: &[f64]) -> Result<Vec<f64>>;
}

/// `L_A = ½(θ−a)ᵀH_A(θ−a)` and `L_B = ½(θ−b)ᵀH_B(θ−b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticPair {
    pub h_a: DenseMatrix,
    pub a: Vec<f64>,
    pub h_b: DenseMatrix,
    pub b: Vec<f64>,
}

impl QuadraticPair {
    pub fn new(h_a: DenseMatrix, a: Vec<f64>, h_b: DenseMatrix, b: Vec<f64>) -> Result<Self> {
        let d = a.len();
        if h_a.shape() != (d, d) || h_b.shape() != (d, d) || b.len() != d {
            return Err(EvalError::DimensionMismatch(format!(
                "quadratic pair with targets of dim {} and {}",
                d,
                b.len()
            )));
        }
        Ok(Self { h_a, a, h_b, b })
    }

    /// `η²·‖H_B·∇L_A(θ)‖`, the exact gap for this pair.
    pub fn predicted_gap(&self, theta: &[f64], eta: f64) -> Result<f64> {
        let ga = self.grad_a(theta)?;
        Ok(eta * eta * norm(&self.h_b.matvec(&ga).map_err(NetError::from)?))
    }

    fn grad(h: &DenseMatrix, target: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        if theta.len() != target.len() {
            return Err(EvalError::DimensionMismatch(format!(
                "theta of dim {} for a pair of dim {}",
                theta.len(),
                target.len()
            )));
        }
        let diff: Vec<f64> = theta.iter().zip(target).map(|(t, a)| t - a).collect();
        Ok(h.matvec(&diff).map_err(NetError::from)?)
    }
}

impl TaskPair for QuadraticPair {
    fn dim(&self) -> usize {
        self.a.len()
    }
    fn grad_a(&self, theta: &[f64]) -> Result<Vec<f64>> {
        Self::grad(&self.h_a, &self.a, theta)
    }
    fn grad_b(&self, theta: &[f64]) -> Result<Vec<f64>> {
        Self::grad(&self.h_b, &self.b, theta)
    }
}

/// Losses with constant gradients; the gap is identically zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPair {
    pub g_a: Vec<f64>,
    pub g_b: Vec<f64>,
}

impl TaskPair for LinearPair {
    fn dim(&self) -> usize {
        self.g_a.len()
    }
    fn grad_a(&self, _: &[f64]) -> Result<Vec<f64>> {
        Ok(self.g_a.clone())
    }
    fn grad_b(&self, _: &[f64]) -> Result<Vec<f64>> {
        Ok(self.g_b.clone())
    }
}

/// Mean cross-entropy on two sample sets of one model, as functions of the
/// parameters in `blocks`.
#[derive(Debug, Clone)]
pub struct MlpTaskPair<'a> {
    pub model: MlpModel,
    pub data: &'a LabeledDataset,
    pub task_a: Vec<MetaSample>,
    pub task_b: Vec<MetaSample>,
    pub blocks: Vec<ParamBlock>,
}

impl MlpTaskPair<'_> {
    /// Current values of the parameters the pair is a function of.
    pub fn theta(&self) -> Result<Vec<f64>> {
        Ok(self.model.flatten_blocks(&self.blocks)?)
    }

    fn grad(&self, theta: &[f64], task: &[MetaSample]) -> Result<Vec<f64>> {
        let mut m = self.model.clone();
        m.load_blocks(&self.blocks, theta)?;
        loss_gradient(&m, self.data, task, &self.blocks).map_err(mepo_to_eval)
    }
}

fn mepo_to_eval(e: mepo::MepoError) -> EvalError {
    match e {
        mepo::MepoError::Net(n) => EvalError::Net(n),
        mepo::MepoError::Eval(e) => e,
        other => EvalError::DimensionMismatch(other.to_string()),
    }
}

impl TaskPair for MlpTaskPair<'_> {
    fn dim(&self) -> usize {
        self.model.flatten_blocks(&self.blocks).map_or(0, |v| v.len())
    }
    fn grad_a(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.grad(theta, &self.task_a)
    }
    fn grad_b(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.grad(theta, &self.task_b)
    }
}

/// `‖θ_seq − θ_joint‖` at `theta` for step size `eta`, both paths computed
/// explicitly.
pub fn sequential_joint_gap<P: TaskPair + ?Sized>(pair: &P, theta: &[f64], eta: f64) -> Result<f64> {
    if theta.len() != pair.dim() {
        return Err(EvalError::DimensionMismatch(format!(
            "theta of dim {} for a pair of dim {}",
            theta.len(),
            pair.dim()
        )));
    }
    let ga = pair.grad_a(theta)?;
    let gb = pair.grad_b(theta)?;
    let mid: Vec<f64> = theta.iter().zip(&ga).map(|(t, g)| t - eta * g).collect();
    let gb_mid = pair.grad_b(&mid)?;
    let seq: Vec<f64> = mid.iter().zip(&gb_mid).map(|(t, g)| t - eta * g).collect();
    let joint: Vec<f64> = theta
        .iter()
        .zip(ga.iter().zip(&gb))
        .map(|(t, (a, b))| t - eta * (a + b))
        .collect();
    Ok(seq
        .iter()
        .zip(&joint)
        .map(|(s, j)| (s - j) * (s - j))
        .sum::<f64>()
        .sqrt())
}

#[derive(Debug, Clone)]
pub struct GapExperiment<P> {
    pub pair: P,
    pub theta: Vec<f64>,
    pub etas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapResult {
    pub etas: Vec<f64>,
    pub gaps: Vec<f64>,
    /// Least-squares fit of `log10 gap = slope·log10 η + intercept`.
    pub slope: f64,
    pub intercept: f64,
}

impl GapResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("eta,gap\n");
        for (e, g) in self.etas.iter().zip(&self.gaps) {
            let _ = writeln!(out, "{e},{g}");
        }
        out
    }

    pub fn fit_json(&self) -> serde_json::Value {
        serde_json::json!({ "slope": self.slope, "intercept": self.intercept })
    }
}

/// Least-squares slope and intercept of `y` against `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Measures the gap for every step size and fits its log-log slope.
pub fn theorem_gap<P: TaskPair>(exp: &GapExperiment<P>) -> Result<GapResult> {
    let etas = &exp.etas;
    if etas.len() < 2 {
        return Err(EvalError::InvalidEtas("need at least two step sizes".into()));
    }
    if etas.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
        return Err(EvalError::InvalidEtas("step sizes must be positive".into()));
    }
    let distinct: BTreeSet<u64> = etas.iter().map(|e| e.to_bits()).collect();
    if distinct.len() != etas.len() {
        return Err(EvalError::InvalidEtas("step sizes must be distinct".into()));
    }
    let lo = etas.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = etas.iter().copied().fold(0.0, f64::max);
    if hi / lo < 100.0 * (1.0 - 1e-12) {
        return Err(EvalError::InvalidEtas(format!(
            "step sizes span {lo:e}..{hi:e}, less than two decades"
        )));
    }
    let mut gaps = Vec::with_capacity(etas.len());
    for &eta in etas {
        let gap = sequential_joint_gap(&exp.pair, &exp.theta, eta)?;
        if gap < DEGENERATE_GAP {
            return Err(EvalError::DegenerateGap { eta, gap });
        }
        gaps.push(gap);
    }
    let lx: Vec<f64> = etas.iter().map(|e| e.log10()).collect();
    let ly: Vec<f64> = gaps.iter().map(|g| g.log10()).collect();
    let (slope, intercept) = linear_fit(&lx, &ly);
    Ok(GapResult {
        etas: etas.clone(),
        gaps,
        slope,
        intercept,
    })
}

/// `J̃(θ) = Σ_t L_t(θ) + L_joint(θ)`, each term a mean loss over the full
/// head.
pub fn surrogate_objective(
    model: &MlpModel,
    data: &LabeledDataset,
    seq: &PseudoSequence,
) -> mepo::Result<f64> {
    let mut total = mean_loss(model, data, &seq.joint_set)?;
    for task in &seq.tasks {
        total += mean_loss(model, data, task)?;
    }
    Ok(total)
}

/// Backbone gradient of [`surrogate_objective`], every term at the same θ.
pub fn surrogate_objective_grad(
    model: &MlpModel,
    data: &LabeledDataset,
    seq: &PseudoSequence,
) -> mepo::Result<FlatParams> {
    if seq.tasks.is_empty() {
        return Err(mepo::MepoError::Empty("pseudo task list"));
    }
    let blocks = [ParamBlock::Backbone];
    let mut total = loss_gradient(model, data, &seq.joint_set, &blocks)?;
    for task in &seq.tasks {
        for (t, g) in total.iter_mut().zip(loss_gradient(model, data, task, &blocks)?) {
            *t += g;
        }
    }
    Ok(FlatParams::from(total))
}
