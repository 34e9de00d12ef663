//! Meta post-refinement of a pretrained backbone, the meta covariance
//! reference, and covariance-aligned continual training.
//!
//! The three phases are:
//!
//! 1. [`meta_refine`]: for each meta-epoch, sample a pseudo task sequence
//!    from pretraining data, train a copy of the model sequentially over its
//!    tasks ([`inner_loop`]), refine it on the held-out joint set
//!    ([`outer_loop`]), and pull the backbone towards the result with a
//!    first-order (Reptile) step.
//! 2. [`build_cov_ref`]: class prototypes under the refined backbone and the
//!    covariance of those prototypes, factored once.
//! 3. [`run_gcl`]: one pass over a Si-Blurry stream, training only an adapter
//!    and the head, with each batch's features whitened by their own
//!    covariance and recolored by the reference ([`align_batch`]) before being
//!    blended with the raw features ([`combine_features`]).

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datastream::{
    sample_pseudo_sequence, DataError, LabeledDataset, MetaSample, PseudoSequence, Sample,
    TaskStream,
};
use crate::eval::{accuracy, EvalLog, EvalRecord, TaskAccuracy};
use crate::linalg::{
    cholesky, sample_covariance, solve_lower_transposed, solve_lower_triangular, DenseMatrix,
    FeatVec, LinalgError,
};
use crate::net::{
    masked_argmax, masked_ce_loss, reptile_blend, Dense, MlpModel, NetError, OptimizerState, ParamBlock,
};
use crate::seed::derive_seed_indexed;

#[derive(Debug, Error)]
pub enum MepoError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("label {label} out of range for a head with {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("need at least 2 reference classes, got {0}")]
    TooFewClasses(usize),
    #[error("batch of {0} features is too small to align")]
    BatchTooSmall(usize),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
}

pub type Result<T> = std::result::Result<T, MepoError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MepoConfig {
    pub meta_epochs: usize,
    pub tasks_per_epoch: usize,
    pub eta_theta: f64,
    pub eta_psi: f64,
    pub eta_meta: f64,
    pub gamma: f64,
    pub class_count_meta: usize,
    pub samples_per_class_meta: usize,
    pub inner_batch_size: usize,
    pub seed: u64,
}

impl Default for MepoConfig {
    fn default() -> Self {
        Self {
            meta_epochs: 20,
            tasks_per_epoch: 5,
            eta_theta: 1e-3,
            eta_psi: 1e-2,
            eta_meta: 1.0,
            gamma: 0.3,
            class_count_meta: 20,
            samples_per_class_meta: 80,
            inner_batch_size: 16,
            seed: 0,
        }
    }
}

impl MepoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MepoError::InvalidConfig(m));
        if !(self.eta_theta > 0.0 && self.eta_psi > 0.0) {
            return bad(format!(
                "learning rates must be positive ({}, {})",
                self.eta_theta, self.eta_psi
            ));
        }
        if !(0.0..=1.0).contains(&self.eta_meta) {
            return bad(format!("eta_meta {} outside [0, 1]", self.eta_meta));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma {} outside (0, 1)", self.gamma));
        }
        if self.tasks_per_epoch == 0 || self.inner_batch_size == 0 {
            return bad("tasks_per_epoch and inner_batch_size must be positive".into());
        }
        Ok(())
    }
}

/// Mean masked cross-entropy over a batch and its accumulated gradients,
/// with every head class in the mask.
fn batch_gradients(
    model: &MlpModel,
    data: &LabeledDataset,
    batch: &[MetaSample],
) -> Result<(f64, crate::net::Gradients)> {
    let classes = model.class_count();
    let mask: Vec<usize> = (0..classes).collect();
    let mut grads = model.zero_gradients(false);
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for s in batch {
        if s.label >= classes {
            return Err(MepoError::LabelOutOfRange {
                label: s.label,
                classes,
            });
        }
        let fwd = model.forward(data.samples[s.index].x.as_slice(), false)?;
        let (l, g) = masked_ce_loss(fwd.logits.as_slice(), s.label, &mask)?;
        loss += l * scale;
        let gf = model.backward_head(fwd.feature.as_slice(), &g, scale, &mut grads)?;
        model.backward_backbone(&fwd.cache, &gf, false, scale, &mut grads)?;
    }
    Ok((loss, grads))
}

/// Mean cross-entropy of `samples` over all head classes.
pub fn mean_loss(model: &MlpModel, data: &LabeledDataset, samples: &[MetaSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(MepoError::Empty("sample set"));
    }
    Ok(batch_gradients(model, data, samples)?.0)
}

/// Gradient of the mean loss over `samples` for the requested blocks.
pub fn loss_gradient(
    model: &MlpModel,
    data: &LabeledDataset,
    samples: &[MetaSample],
    blocks: &[ParamBlock],
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(MepoError::Empty("sample set"));
    }
    let (_, grads) = batch_gradients(model, data, samples)?;
    Ok(grads.flatten_blocks(blocks)?)
}

/// One SGD step on a batch: backbone at `eta_theta`, head at `eta_psi`.
pub fn sgd_step(
    model: &mut MlpModel,
    data: &LabeledDataset,
    batch: &[MetaSample],
    eta_theta: f64,
    eta_psi: f64,
) -> Result<f64> {
    let (loss, grads) = batch_gradients(model, data, batch)?;
    model.apply_step(&[ParamBlock::Backbone], &grads, &mut OptimizerState::sgd(eta_theta))?;
    model.apply_step(&[ParamBlock::Head], &grads, &mut OptimizerState::sgd(eta_psi))?;
    Ok(loss)
}

/// Sequential training over pseudo tasks in order, one online pass per task
/// in batches of `batch_size`. The whole backbone and the head train.
pub fn inner_loop(
    model: &MlpModel,
    data: &LabeledDataset,
    tasks: &[Vec<MetaSample>],
    eta_theta: f64,
    eta_psi: f64,
    batch_size: usize,
) -> Result<MlpModel> {
    if tasks.is_empty() {
        return Err(MepoError::Empty("pseudo task list"));
    }
    if batch_size == 0 {
        return Err(MepoError::InvalidConfig("batch size 0".into()));
    }
    let mut m = model.clone();
    for task in tasks {
        for batch in task.chunks(batch_size) {
            sgd_step(&mut m, data, batch, eta_theta, eta_psi)?;
        }
    }
    Ok(m)
}

/// One pass of SGD over the held-out joint set. The head moves too, at
/// `eta_psi`, so the backbone gradient is taken against a current head.
pub fn outer_loop(
    model: &MlpModel,
    data: &LabeledDataset,
    joint_set: &[MetaSample],
    eta_theta: f64,
    eta_psi: f64,
    batch_size: usize,
) -> Result<MlpModel> {
    if joint_set.is_empty() {
        return Err(MepoError::Empty("joint set"));
    }
    if batch_size == 0 {
        return Err(MepoError::InvalidConfig("batch size 0".into()));
    }
    let mut m = model.clone();
    for batch in joint_set.chunks(batch_size) {
        sgd_step(&mut m, data, batch, eta_theta, eta_psi)?;
    }
    Ok(m)
}

/// The pseudo sequence and fresh head used in meta-epoch `epoch` (0-based).
pub fn epoch_plan(
    model: &MlpModel,
    pre: &LabeledDataset,
    cfg: &MepoConfig,
    epoch: usize,
) -> Result<(PseudoSequence, Dense)> {
    let seq = sample_pseudo_sequence(
        pre,
        cfg.class_count_meta,
        cfg.samples_per_class_meta,
        cfg.gamma,
        cfg.tasks_per_epoch,
        derive_seed_indexed(cfg.seed, "pseudo-sequence", epoch as u64),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_indexed(cfg.seed, "meta-head", epoch as u64));
    let head = Dense::init(model.feature_dim(), cfg.class_count_meta, &mut rng);
    Ok((seq, head))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean joint-set loss after the outer loop.
    pub joint_loss: f64,
}

#[derive(Debug, Clone)]
pub struct Refined {
    pub model: MlpModel,
    pub log: Vec<EpochLog>,
}

/// Meta-refines the backbone of `theta0`. The returned model keeps
/// `theta0`'s head and adapter; only backbone values change.
pub fn meta_refine(theta0: &MlpModel, pre: &LabeledDataset, cfg: &MepoConfig) -> Result<Refined> {
    cfg.validate()?;
    let mut current = theta0.clone();
    let mut log = Vec::with_capacity(cfg.meta_epochs);
    for k in 0..cfg.meta_epochs {
        let (seq, head) = epoch_plan(&current, pre, cfg, k)?;
        let mut learner = current.clone();
        learner.adapter = None;
        learner.head = head;
        let after_inner = inner_loop(
            &learner,
            pre,
            &seq.tasks,
            cfg.eta_theta,
            cfg.eta_psi,
            cfg.inner_batch_size,
        )?;
        let refined = outer_loop(
            &after_inner,
            pre,
            &seq.joint_set,
            cfg.eta_theta,
            cfg.eta_psi,
            cfg.inner_batch_size,
        )?;
        let joint_loss = mean_loss(&refined, pre, &seq.joint_set)?;
        let blended = reptile_blend(
            &current.flatten_backbone(),
            &refined.flatten_backbone(),
            cfg.eta_meta,
        )?;
        current.load_backbone(&blended)?;
        log.push(EpochLog {
            epoch: k + 1,
            joint_loss,
        });
    }
    Ok(Refined {
        model: current,
        log,
    })
}

/// Reference geometry: class prototypes under a frozen backbone, their
/// covariance, and its regularized Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct CovRef {
    pub prototypes: Vec<(usize, FeatVec)>,
    pub global_mean: FeatVec,
    pub sigma_pre: DenseMatrix,
    pub l_pre: DenseMatrix,
    pub epsilon: f64,
    pub feature_dim: usize,
}

/// Builds the reference from per-class input groups, using the backbone
/// without any adapter.
pub fn build_cov_ref(
    backbone: &MlpModel,
    ref_data: &[(usize, Vec<FeatVec>)],
    epsilon: f64,
) -> Result<CovRef> {
    if ref_data.len() < 2 {
        return Err(MepoError::TooFewClasses(ref_data.len()));
    }
    let d = backbone.feature_dim();
    let mut prototypes = Vec::with_capacity(ref_data.len());
    for (class, xs) in ref_data {
        if xs.is_empty() {
            return Err(MepoError::Empty("reference class"));
        }
        let mut mu = vec![0.0; d];
        for x in xs {
            let cache = backbone.forward_backbone(x.as_slice(), false)?;
            for (m, f) in mu.iter_mut().zip(cache.feature()) {
                *m += f;
            }
        }
        let n = xs.len() as f64;
        mu.iter_mut().for_each(|m| *m /= n);
        prototypes.push((*class, FeatVec::new(mu)?));
    }
    let protos: Vec<FeatVec> = prototypes.iter().map(|(_, p)| p.clone()).collect();
    let (global_mean, sigma_pre) = sample_covariance(&protos)?;
    let l_pre = cholesky(&sigma_pre, epsilon)?;
    Ok(CovRef {
        prototypes,
        global_mean,
        sigma_pre,
        l_pre,
        epsilon,
        feature_dim: d,
    })
}

impl CovRef {
    /// Text layout: `covref <feature_dim> <class_count> <epsilon>`, one
    /// `class_id v1 .. vD` line per prototype, then the global mean (as a
    /// `1 × D` matrix), `sigma_pre` and `l_pre` in the matrix text layout.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "covref {} {} {:?}\n",
            self.feature_dim,
            self.prototypes.len(),
            self.epsilon
        );
        for (c, p) in &self.prototypes {
            let vals: Vec<String> = p.as_slice().iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "{c} {}", vals.join(" "));
        }
        DenseMatrix::new(1, self.feature_dim, self.global_mean.as_slice().to_vec())
            .expect("finite mean")
            .write_text(&mut out);
        self.sigma_pre.write_text(&mut out);
        self.l_pre.write_text(&mut out);
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| MepoError::Parse("empty covref".into()))?;
        let toks: Vec<&str> = header.split_whitespace().collect();
        let bad = || MepoError::Parse(format!("bad covref header {header:?}"));
        if toks.len() != 4 || toks[0] != "covref" {
            return Err(bad());
        }
        let feature_dim: usize = toks[1].parse().map_err(|_| bad())?;
        let classes: usize = toks[2].parse().map_err(|_| bad())?;
        let epsilon: f64 = toks[3].parse().map_err(|_| bad())?;
        let mut prototypes = Vec::with_capacity(classes);
        for _ in 0..classes {
            let line = lines
                .next()
                .ok_or_else(|| MepoError::Parse("missing prototype".into()))?;
            let mut it = line.split_whitespace();
            let c: usize = it
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| MepoError::Parse(format!("bad prototype line {line:?}")))?;
            let vals: Vec<f64> = it
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| MepoError::Parse(e.to_string()))?;
            if vals.len() != feature_dim {
                return Err(MepoError::Parse(format!("prototype {c} has wrong length")));
            }
            prototypes.push((c, FeatVec::new(vals)?));
        }
        let mean = DenseMatrix::read_text(&mut lines)?;
        let sigma_pre = DenseMatrix::read_text(&mut lines)?;
        let l_pre = DenseMatrix::read_text(&mut lines)?;
        if mean.shape() != (1, feature_dim)
            || sigma_pre.shape() != (feature_dim, feature_dim)
            || l_pre.shape() != (feature_dim, feature_dim)
        {
            return Err(MepoError::Parse("covref matrix shapes".into()));
        }
        Ok(Self {
            prototypes,
            global_mean: FeatVec::new(mean.into_vec())?,
            sigma_pre,
            l_pre,
            epsilon,
            feature_dim,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeanPolicy {
    /// Transform centered deviations, then add the batch mean back.
    PreserveBatchMean,
    /// Transform the uncentered features directly.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    pub alpha: f64,
    pub epsilon: f64,
    pub mean_policy: MeanPolicy,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            epsilon: crate::linalg::DEFAULT_EPSILON,
            mean_policy: MeanPolicy::PreserveBatchMean,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(MepoError::InvalidConfig(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if !(self.epsilon >= 0.0) {
            return Err(MepoError::InvalidConfig(format!("epsilon {}", self.epsilon)));
        }
        Ok(())
    }
}

/// The fitted whitening–recoloring map `f ↦ L_pre · L_cur⁻¹ · (f − f̄) + f̄`
/// for one batch (no centering under [`MeanPolicy::Raw`]).
#[derive(Debug, Clone)]
pub struct BatchAlignment<'a> {
    reference: &'a CovRef,
    l_cur: DenseMatrix,
    mean: FeatVec,
    policy: MeanPolicy,
}

impl<'a> BatchAlignment<'a> {
    pub fn fit(features: &[FeatVec], reference: &'a CovRef, cfg: &AlignConfig) -> Result<Self> {
        if features.len() < 2 {
            return Err(MepoError::BatchTooSmall(features.len()));
        }
        if let Some(f) = features.iter().find(|f| f.dim() != reference.feature_dim) {
            return Err(MepoError::Linalg(LinalgError::DimensionMismatch(format!(
                "feature of dim {} against a reference of dim {}",
                f.dim(),
                reference.feature_dim
            ))));
        }
        let (mean, sigma_cur) = sample_covariance(features)?;
        let l_cur = cholesky(&sigma_cur, cfg.epsilon)?;
        Ok(Self {
            reference,
            l_cur,
            mean,
            policy: cfg.mean_policy,
        })
    }

    pub fn l_cur(&self) -> &DenseMatrix {
        &self.l_cur
    }

    pub fn apply(&self, f: &FeatVec) -> Result<FeatVec> {
        let d = f.dim();
        let dev: Vec<f64> = match self.policy {
            MeanPolicy::PreserveBatchMean => f
                .as_slice()
                .iter()
                .zip(self.mean.as_slice())
                .map(|(a, m)| a - m)
                .collect(),
            MeanPolicy::Raw => f.as_slice().to_vec(),
        };
        let white = solve_lower_triangular(&self.l_cur, &DenseMatrix::new(d, 1, dev)?)?;
        let mut out = self.reference.l_pre.matvec(white.as_slice())?;
        if self.policy == MeanPolicy::PreserveBatchMean {
            for (o, m) in out.iter_mut().zip(self.mean.as_slice()) {
                *o += m;
            }
        }
        Ok(FeatVec::new(out)?)
    }

    /// Transpose of the map's linear part applied to `g`:
    /// `L_cur⁻ᵀ · L_preᵀ · g`. Batch statistics are treated as constants.
    pub fn pullback(&self, g: &[f64]) -> Result<Vec<f64>> {
        let t = self.reference.l_pre.matvec_transposed(g)?;
        let d = t.len();
        Ok(solve_lower_transposed(&self.l_cur, &DenseMatrix::new(d, 1, t)?)?.into_vec())
    }
}

/// Aligns a batch of features to the reference covariance.
pub fn align_batch(features: &[FeatVec], reference: &CovRef, cfg: &AlignConfig) -> Result<Vec<FeatVec>> {
    let map = BatchAlignment::fit(features, reference, cfg)?;
    features.iter().map(|f| map.apply(f)).collect()
}

/// `alpha·f_hat + (1 − alpha)·f`; the endpoints return an input verbatim.
pub fn combine_features(f: &FeatVec, f_hat: &FeatVec, alpha: f64) -> Result<FeatVec> {
    if f.dim() != f_hat.dim() {
        return Err(MepoError::Linalg(LinalgError::DimensionMismatch(format!(
            "combine {} with {}",
            f.dim(),
            f_hat.dim()
        ))));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(MepoError::InvalidConfig(format!("alpha {alpha} outside [0, 1]")));
    }
    if alpha == 0.0 {
        return Ok(f.clone());
    }
    if alpha == 1.0 {
        return Ok(f_hat.clone());
    }
    Ok(FeatVec::from(
        f.as_slice()
            .iter()
            .zip(f_hat.as_slice())
            .map(|(a, b)| alpha * b + (1.0 - alpha) * a)
            .collect::<Vec<_>>(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskPolicy {
    /// Every class seen so far in the stream, including the current batch.
    Seen,
    /// Only the classes present in the current batch.
    Batch,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Mean loss before the update.
    pub loss: f64,
    /// True when alignment was requested but the batch fell back to raw
    /// features.
    pub fallback: bool,
}

struct BatchPass {
    caches: Vec<crate::net::ForwardCache>,
    inputs: Vec<FeatVec>,
    loss: f64,
    fallback: bool,
}

/// Forward pass of a GCL batch, optionally accumulating gradients.
fn gcl_pass(
    model: &MlpModel,
    batch: &[&Sample],
    reference: Option<&CovRef>,
    cfg: &AlignConfig,
    mask: &[usize],
    grads: Option<&mut crate::net::Gradients>,
) -> Result<BatchPass> {
    let caches = batch
        .iter()
        .map(|s| model.forward_backbone(s.x.as_slice(), true))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let feats: Vec<FeatVec> = caches
        .iter()
        .map(|c| FeatVec::from(c.feature().to_vec()))
        .collect();

    let mut fallback = false;
    let alignment = match reference {
        Some(r) if cfg.alpha > 0.0 => match BatchAlignment::fit(&feats, r, cfg) {
            Ok(a) => Some(a),
            Err(MepoError::BatchTooSmall(_))
            | Err(MepoError::Linalg(LinalgError::NotPositiveDefinite { .. })) => {
                fallback = true;
                None
            }
            Err(e) => return Err(e),
        },
        _ => None,
    };
    let inputs = match &alignment {
        Some(a) => feats
            .iter()
            .map(|f| combine_features(f, &a.apply(f)?, cfg.alpha))
            .collect::<Result<Vec<_>>>()?,
        None => feats,
    };

    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grads = grads;
    for ((s, cache), input) in batch.iter().zip(&caches).zip(&inputs) {
        let logits = model.head_logits(input.as_slice())?;
        let (l, g) = masked_ce_loss(&logits, s.y, mask)?;
        loss += l * scale;
        if let Some(grads) = grads.as_deref_mut() {
            let g_in = model.backward_head(input.as_slice(), &g, scale, grads)?;
            let g_feat = match &alignment {
                Some(a) => {
                    let pulled = a.pullback(&g_in)?;
                    g_in.iter()
                        .zip(pulled)
                        .map(|(raw, al)| cfg.alpha * al + (1.0 - cfg.alpha) * raw)
                        .collect()
                }
                None => g_in,
            };
            model.backward_backbone(cache, &g_feat, true, scale, grads)?;
        }
    }
    Ok(BatchPass {
        caches,
        inputs,
        loss,
        fallback,
    })
}

/// Mean masked loss of a batch under the GCL forward path, without updating.
pub fn gcl_batch_loss(
    model: &MlpModel,
    batch: &[&Sample],
    reference: Option<&CovRef>,
    cfg: &AlignConfig,
    mask: &[usize],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(MepoError::Empty("batch"));
    }
    Ok(gcl_pass(model, batch, reference, cfg, mask, None)?.loss)
}

/// Features fed to the head for a batch (after alignment and blending when a
/// reference is given).
pub fn gcl_head_inputs(
    model: &MlpModel,
    batch: &[&Sample],
    reference: Option<&CovRef>,
    cfg: &AlignConfig,
) -> Result<Vec<FeatVec>> {
    let mask: Vec<usize> = (0..model.class_count()).collect();
    let pass = gcl_pass(model, batch, reference, cfg, &mask, None)?;
    debug_assert_eq!(pass.caches.len(), pass.inputs.len());
    Ok(pass.inputs)
}

/// One GCL update of the adapter and head. The backbone is never touched.
pub fn gcl_train_step(
    model: &mut MlpModel,
    batch: &[&Sample],
    reference: Option<&CovRef>,
    cfg: &AlignConfig,
    mask: &[usize],
    opt: &mut OptimizerState,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(MepoError::Empty("batch"));
    }
    if model.adapter.is_none() {
        return Err(MepoError::Net(NetError::MissingAdapter));
    }
    let mut grads = model.zero_gradients(true);
    let pass = gcl_pass(model, batch, reference, cfg, mask, Some(&mut grads))?;
    model.apply_step(&[ParamBlock::Adapter, ParamBlock::Head], &grads, opt)?;
    Ok(StepReport {
        loss: pass.loss,
        fallback: pass.fallback,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GclConfig {
    /// Adam learning rate for the adapter and head.
    pub lr: f64,
    pub align: AlignConfig,
    pub mask_policy: MaskPolicy,
    /// Evaluate whenever the number of samples seen crosses a multiple of
    /// this value.
    pub eval_interval: usize,
    pub test_features: TestFeatures,
    /// Batch size for aligned evaluation.
    pub eval_batch_size: usize,
    /// Seeds the fixed order in which test samples are batched.
    pub eval_seed: u64,
}

impl Default for GclConfig {
    fn default() -> Self {
        Self {
            lr: 5e-3,
            align: AlignConfig::default(),
            mask_policy: MaskPolicy::Seen,
            eval_interval: 128,
            test_features: TestFeatures::Aligned,
            eval_batch_size: 64,
            eval_seed: 0,
        }
    }
}

/// Features the head sees at evaluation time when a reference is present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestFeatures {
    /// Raw adapted features.
    Raw,
    /// The same batch-wise alignment and blend as in training, over test
    /// batches in a fixed shuffled order.
    Aligned,
}

/// Accuracy of the GCL model on `samples`, feeding the head the features
/// selected by `cfg.test_features`.
pub fn evaluate_gcl(
    model: &MlpModel,
    samples: &[&Sample],
    reference: Option<&CovRef>,
    cfg: &GclConfig,
    mask: &[usize],
) -> Result<f64> {
    let aligned = reference.is_some()
        && cfg.test_features == TestFeatures::Aligned
        && cfg.align.alpha > 0.0;
    if !aligned {
        return Ok(accuracy(model, samples.iter().copied(), mask, true)?);
    }
    if samples.is_empty() {
        return Err(MepoError::Eval(crate::eval::EvalError::EmptyTestSet));
    }
    if cfg.eval_batch_size == 0 {
        return Err(MepoError::InvalidConfig("eval_batch_size 0".into()));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.eval_seed));
    let mut correct = 0usize;
    for chunk in order.chunks(cfg.eval_batch_size) {
        let batch: Vec<&Sample> = chunk.iter().map(|&i| samples[i]).collect();
        let inputs = gcl_head_inputs(model, &batch, reference, &cfg.align)?;
        for (s, f) in batch.iter().zip(&inputs) {
            let logits = model.head_logits(f.as_slice())?;
            correct += usize::from(masked_argmax(&logits, mask) == Some(s.y));
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

#[derive(Debug, Clone)]
pub struct GclOutcome {
    pub log: EvalLog,
    pub model: MlpModel,
    /// Batches that trained on raw features because alignment failed.
    pub fallbacks: usize,
    pub steps: usize,
}

/// Online single pass over `stream`, whose batches index into `train`.
///
/// `model` must carry an adapter; its backbone stays frozen. After every
/// `eval_interval` samples the anytime accuracy on the test samples of the
/// classes seen so far (predicting among seen classes) is recorded. At the
/// end of each task, per-task accuracies are recorded for forgetting, where a
/// task's test classes are the classes whose home is that task.
pub fn run_gcl(
    stream: &TaskStream,
    train: &LabeledDataset,
    test: &LabeledDataset,
    model: MlpModel,
    reference: Option<&CovRef>,
    cfg: &GclConfig,
) -> Result<GclOutcome> {
    cfg.align.validate()?;
    if cfg.eval_interval == 0 {
        return Err(MepoError::InvalidConfig("eval_interval 0".into()));
    }
    if model.adapter.is_none() {
        return Err(MepoError::Net(NetError::MissingAdapter));
    }
    if train.input_dim != model.input_dim() || test.input_dim != model.input_dim() {
        return Err(MepoError::InvalidConfig(format!(
            "data of dim {} for a model expecting {}",
            train.input_dim,
            model.input_dim()
        )));
    }
    if train.class_count > model.class_count() {
        return Err(MepoError::LabelOutOfRange {
            label: train.class_count - 1,
            classes: model.class_count(),
        });
    }
    let mut model = model;
    let mut opt = OptimizerState::adam(cfg.lr);
    let mut seen: BTreeSet<usize> = BTreeSet::new();
    let mut log = EvalLog::default();
    let mut samples_seen = 0usize;
    let mut next_eval = cfg.eval_interval;
    let mut fallbacks = 0;
    let mut steps = 0;
    let mut task_histories: Vec<(usize, Vec<f64>)> = Vec::new();

    let task_test: Vec<Vec<Sample>> = stream
        .tasks
        .iter()
        .map(|t| {
            test.samples
                .iter()
                .filter(|s| stream.home_task.get(s.y) == Some(&t.id))
                .cloned()
                .collect()
        })
        .collect();

    for (ti, task) in stream.tasks.iter().enumerate() {
        for batch_idx in &task.batches {
            let batch: Vec<&Sample> = batch_idx.iter().map(|&i| &train.samples[i]).collect();
            let batch_labels: BTreeSet<usize> = batch.iter().map(|s| s.y).collect();
            seen.extend(batch_labels.iter().copied());
            let mask: Vec<usize> = match cfg.mask_policy {
                MaskPolicy::Seen => seen.iter().copied().collect(),
                MaskPolicy::Batch => batch_labels.into_iter().collect(),
            };
            let report = gcl_train_step(&mut model, &batch, reference, &cfg.align, &mask, &mut opt)?;
            fallbacks += usize::from(report.fallback);
            steps += 1;
            samples_seen += batch.len();
            if samples_seen >= next_eval {
                while next_eval <= samples_seen {
                    next_eval += cfg.eval_interval;
                }
                let seen_mask: Vec<usize> = seen.iter().copied().collect();
                let seen_test: Vec<&Sample> =
                    test.samples.iter().filter(|s| seen.contains(&s.y)).collect();
                let acc = if seen_test.is_empty() {
                    0.0
                } else {
                    evaluate_gcl(&model, &seen_test, reference, cfg, &seen_mask)?
                };
                log.records.push(EvalRecord {
                    samples_seen,
                    seen_classes: seen.clone(),
                    anytime_accuracy: acc,
                });
            }
        }

        // Per-task accuracy snapshot at this task boundary.
        let seen_mask: Vec<usize> = seen.iter().copied().collect();
        for (tj, samples) in task_test.iter().enumerate().take(ti + 1) {
            let visible: Vec<&Sample> = samples.iter().filter(|s| seen.contains(&s.y)).collect();
            if visible.is_empty() {
                continue;
            }
            let acc = evaluate_gcl(&model, &visible, reference, cfg, &seen_mask)?;
            match task_histories.iter_mut().find(|(t, _)| *t == tj) {
                Some((_, h)) => h.push(acc),
                None => task_histories.push((tj, vec![acc])),
            }
        }
    }

    log.task_table = task_histories
        .into_iter()
        .filter_map(|(task, mut history)| {
            let final_acc = history.pop()?;
            (!history.is_empty()).then_some(TaskAccuracy {
                task,
                history,
                final_acc,
            })
        })
        .collect();

    Ok(GclOutcome {
        log,
        model,
        fallbacks,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastream::gen_gaussian_dataset;
    use crate::net::Activation;

    fn tiny_model(seed: u64, classes: usize) -> MlpModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MlpModel::new(&[3, 5, 4], classes, Activation::Tanh, &mut rng).unwrap()
    }

    fn spd(d: usize, seed: u64) -> DenseMatrix {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DenseMatrix::new(
            d,
            d,
            (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        a.matmul(&a.transpose())
            .unwrap()
            .add(&DenseMatrix::identity(d).scale(0.5))
            .unwrap()
    }

    fn reference_from_sigma(sigma: DenseMatrix, epsilon: f64) -> CovRef {
        let d = sigma.rows();
        CovRef {
            prototypes: vec![],
            global_mean: FeatVec::zeros(d),
            l_pre: cholesky(&sigma, epsilon).unwrap(),
            sigma_pre: sigma,
            epsilon,
            feature_dim: d,
        }
    }

    fn gaussian_batch(n: usize, d: usize, seed: u64) -> Vec<FeatVec> {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                FeatVec::from(
                    (0..d)
                        .map(|k| 2.0 + k as f64 + { let z: f64 = StandardNormal.sample(&mut rng); z } * (1.0 + k as f64))
                        .collect::<Vec<f64>>(),
                )
            })
            .collect()
    }

    #[test]
    fn zero_rates_leave_model_unchanged() {
        let data = gen_gaussian_dataset(4, 6, 3, 0.5, 1).unwrap();
        let seq = sample_pseudo_sequence(&data, 4, 6, 0.3, 2, 2).unwrap();
        let m = tiny_model(1, 4);
        let out = inner_loop(&m, &data, &seq.tasks, 0.0, 0.0, 4).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn single_batch_inner_loop_is_one_sgd_step() {
        let data = gen_gaussian_dataset(3, 4, 3, 0.5, 2).unwrap();
        let task: Vec<MetaSample> = (0..6)
            .map(|i| MetaSample {
                index: i * 2,
                label: data.samples[i * 2].y,
            })
            .collect();
        let m = tiny_model(2, 3);
        let out = inner_loop(&m, &data, std::slice::from_ref(&task), 0.1, 0.2, 64).unwrap();
        let mut manual = m.clone();
        sgd_step(&mut manual, &data, &task, 0.1, 0.2).unwrap();
        assert_eq!(out, manual);
    }

    #[test]
    fn inner_loop_rejects_unknown_labels() {
        let data = gen_gaussian_dataset(5, 2, 3, 0.5, 2).unwrap();
        let task = vec![MetaSample { index: 9, label: 4 }];
        assert!(matches!(
            inner_loop(&tiny_model(0, 3), &data, &[task], 0.1, 0.1, 4),
            Err(MepoError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn outer_loop_with_frozen_backbone_rate() {
        let data = gen_gaussian_dataset(3, 5, 3, 0.5, 3).unwrap();
        let joint: Vec<MetaSample> = (0..15)
            .map(|i| MetaSample {
                index: i,
                label: data.samples[i].y,
            })
            .collect();
        let m = tiny_model(3, 3);
        let out = outer_loop(&m, &data, &joint, 0.0, 0.5, 8).unwrap();
        assert_eq!(out.backbone, m.backbone);
        assert_ne!(out.head, m.head);
        assert!(matches!(
            outer_loop(&m, &data, &[], 0.1, 0.1, 8),
            Err(MepoError::Empty(_))
        ));
    }

    #[test]
    fn single_class_joint_set_has_no_gradient() {
        // With one head class the masked loss is identically zero.
        let data = gen_gaussian_dataset(1, 6, 3, 0.5, 3).unwrap();
        let joint: Vec<MetaSample> = (0..6).map(|i| MetaSample { index: i, label: 0 }).collect();
        let m = tiny_model(4, 1);
        assert_eq!(outer_loop(&m, &data, &joint, 0.3, 0.3, 4).unwrap(), m);
    }

    #[test]
    fn meta_refine_no_ops() {
        let data = gen_gaussian_dataset(6, 10, 3, 0.5, 4).unwrap();
        let m = tiny_model(5, 6);
        let cfg = MepoConfig {
            meta_epochs: 0,
            class_count_meta: 4,
            samples_per_class_meta: 10,
            tasks_per_epoch: 2,
            ..MepoConfig::default()
        };
        assert_eq!(meta_refine(&m, &data, &cfg).unwrap().model, m);
        let cfg = MepoConfig {
            meta_epochs: 3,
            eta_meta: 0.0,
            ..cfg
        };
        let out = meta_refine(&m, &data, &cfg).unwrap();
        assert_eq!(out.model, m);
        assert_eq!(out.log.len(), 3);
    }

    #[test]
    fn meta_refine_moves_only_the_backbone() {
        let data = gen_gaussian_dataset(6, 10, 3, 0.5, 4).unwrap();
        let m = tiny_model(6, 6);
        let cfg = MepoConfig {
            meta_epochs: 2,
            class_count_meta: 4,
            samples_per_class_meta: 10,
            tasks_per_epoch: 2,
            eta_theta: 0.05,
            ..MepoConfig::default()
        };
        let out = meta_refine(&m, &data, &cfg).unwrap();
        assert_ne!(out.model.backbone, m.backbone);
        assert_eq!(out.model.head, m.head);
    }

    #[test]
    fn two_class_reference_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut m = MlpModel::new(&[2, 2], 2, Activation::Identity, &mut rng).unwrap();
        m.backbone[0] = Dense {
            weight: DenseMatrix::identity(2),
            bias: FeatVec::zeros(2),
        };
        let p = [1.0, 3.0];
        let q = [-1.0, 0.5];
        let refs = vec![
            (0, vec![FeatVec::from(p.to_vec())]),
            (1, vec![FeatVec::from(q.to_vec())]),
        ];
        let r = build_cov_ref(&m, &refs, 1e-4).unwrap();
        assert_eq!(r.global_mean.as_slice(), &[0.0, 1.75]);
        let diff = [p[0] - q[0], p[1] - q[1]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((r.sigma_pre[(i, j)] - 0.5 * diff[i] * diff[j]).abs() < 1e-12);
            }
        }
        let rec = r.l_pre.matmul(&r.l_pre.transpose()).unwrap();
        let target = r.sigma_pre.add(&DenseMatrix::identity(2).scale(1e-4)).unwrap();
        assert!(rec.relative_error(&target).unwrap() < 1e-10);
    }

    #[test]
    fn identical_prototypes_need_regularizer() {
        let m = tiny_model(8, 2);
        let x = FeatVec::from(vec![0.1, 0.2, 0.3]);
        let refs = vec![(0, vec![x.clone()]), (1, vec![x])];
        let r = build_cov_ref(&m, &refs, 1e-4).unwrap();
        assert_eq!(r.sigma_pre, DenseMatrix::zeros(4, 4));
        assert!(matches!(
            build_cov_ref(&m, &refs, 0.0),
            Err(MepoError::Linalg(LinalgError::NotPositiveDefinite { .. }))
        ));
        assert!(matches!(
            build_cov_ref(&m, &refs[..1], 1e-4),
            Err(MepoError::TooFewClasses(1))
        ));
    }

    #[test]
    fn covref_text_round_trip() {
        let data = gen_gaussian_dataset(4, 5, 3, 0.5, 9).unwrap();
        let refs = crate::datastream::sample_reference_subsets(&data, 4, 5, 1).unwrap();
        let r = build_cov_ref(&tiny_model(9, 4), &refs, 1e-4).unwrap();
        assert_eq!(CovRef::from_text(&r.to_text()).unwrap(), r);
    }

    #[test]
    fn aligning_to_own_covariance_is_identity() {
        let batch = gaussian_batch(40, 4, 1);
        let (_, sigma) = sample_covariance(&batch).unwrap();
        let r = reference_from_sigma(sigma, 0.0);
        let cfg = AlignConfig {
            epsilon: 0.0,
            ..AlignConfig::default()
        };
        let out = align_batch(&batch, &r, &cfg).unwrap();
        for (a, b) in out.iter().zip(&batch) {
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                assert!((x - y).abs() <= 1e-10 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn quadrupled_covariance_halves_deviations() {
        let sigma = spd(3, 2);
        let l = cholesky(&sigma, 0.0).unwrap();
        // Batch whose covariance is exactly 4Σ: rows ±√(N−1)·2·L·e_k around m.
        let mean = [1.0, -2.0, 0.5];
        let n = 6.0f64;
        let mut batch = Vec::new();
        for k in 0..3 {
            for sign in [1.0, -1.0] {
                let col: Vec<f64> = (0..3).map(|i| l[(i, k)]).collect();
                let s = sign * 2.0 * ((n - 1.0) / 2.0).sqrt();
                batch.push(FeatVec::from(
                    (0..3).map(|i| mean[i] + s * col[i]).collect::<Vec<_>>(),
                ));
            }
        }
        let (_, cur) = sample_covariance(&batch).unwrap();
        assert!(cur.relative_error(&sigma.scale(4.0)).unwrap() < 1e-12);
        let r = reference_from_sigma(sigma, 0.0);
        let cfg = AlignConfig {
            epsilon: 0.0,
            ..AlignConfig::default()
        };
        let out = align_batch(&batch, &r, &cfg).unwrap();
        for (a, b) in out.iter().zip(&batch) {
            for i in 0..3 {
                let want = 0.5 * (b[i] - mean[i]);
                assert!((a[i] - mean[i] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aligned_covariance_matches_reference() {
        let sigma = spd(6, 5);
        let r = reference_from_sigma(sigma.clone(), 1e-12);
        let batch = gaussian_batch(64, 6, 3);
        let cfg = AlignConfig {
            epsilon: 1e-12,
            ..AlignConfig::default()
        };
        let out = align_batch(&batch, &r, &cfg).unwrap();
        let (mean_out, cov_out) = sample_covariance(&out).unwrap();
        assert!(cov_out.relative_error(&sigma).unwrap() <= 1e-8);
        let (mean_in, _) = sample_covariance(&batch).unwrap();
        for (a, b) in mean_out.as_slice().iter().zip(mean_in.as_slice()) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
        // Idempotent up to the regularizer.
        let again = align_batch(&out, &r, &cfg).unwrap();
        for (a, b) in again.iter().zip(&out) {
            let diff: f64 = a
                .as_slice()
                .iter()
                .zip(b.as_slice())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            assert!(diff <= 1e-8 * b.norm());
        }
    }

    #[test]
    fn alignment_errors() {
        let r = reference_from_sigma(spd(3, 1), 1e-4);
        let cfg = AlignConfig::default();
        assert!(matches!(
            align_batch(&gaussian_batch(1, 3, 0), &r, &cfg),
            Err(MepoError::BatchTooSmall(1))
        ));
        assert!(align_batch(&gaussian_batch(5, 4, 0), &r, &cfg).is_err());
        let same = vec![FeatVec::from(vec![1.0, 2.0, 3.0]); 4];
        let zero_eps = AlignConfig {
            epsilon: 0.0,
            ..cfg
        };
        assert!(matches!(
            align_batch(&same, &r, &zero_eps),
            Err(MepoError::Linalg(LinalgError::NotPositiveDefinite { .. }))
        ));
    }

    #[test]
    fn pullback_is_transpose_of_linear_map() {
        let r = reference_from_sigma(spd(4, 8), 1e-4);
        let batch = gaussian_batch(20, 4, 9);
        let cfg = AlignConfig {
            mean_policy: MeanPolicy::Raw,
            ..AlignConfig::default()
        };
        let map = BatchAlignment::fit(&batch, &r, &cfg).unwrap();
        let u = FeatVec::from(vec![0.3, -1.0, 2.0, 0.7]);
        let g = [1.5, 0.2, -0.4, 0.9];
        let lhs = crate::linalg::dot(map.apply(&u).unwrap().as_slice(), &g);
        let rhs = crate::linalg::dot(u.as_slice(), &map.pullback(&g).unwrap());
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn combine_endpoints_and_midpoint() {
        let f = FeatVec::from(vec![2.0, 0.0]);
        let h = FeatVec::from(vec![0.0, 2.0]);
        assert_eq!(combine_features(&f, &h, 0.0).unwrap(), f);
        assert_eq!(combine_features(&f, &h, 1.0).unwrap(), h);
        assert_eq!(combine_features(&f, &h, 0.5).unwrap().as_slice(), &[1.0, 1.0]);
        assert!(combine_features(&f, &FeatVec::zeros(3), 0.5).is_err());
    }

    fn gcl_fixture() -> (MlpModel, LabeledDataset, CovRef) {
        let data = gen_gaussian_dataset(3, 8, 3, 0.6, 12).unwrap();
        let m = tiny_model(12, 3).with_zero_adapter();
        let refs = crate::datastream::sample_reference_subsets(&data, 3, 8, 0).unwrap();
        let r = build_cov_ref(&m, &refs, 1e-4).unwrap();
        (m, data, r)
    }

    #[test]
    fn gcl_step_leaves_backbone_frozen() {
        let (mut m, data, r) = gcl_fixture();
        let before = m.clone();
        let batch: Vec<&Sample> = data.samples.iter().collect();
        let mut opt = OptimizerState::adam(1e-2);
        for _ in 0..2 {
            gcl_train_step(&mut m, &batch, Some(&r), &AlignConfig::default(), &[0, 1, 2], &mut opt)
                .unwrap();
        }
        assert_eq!(m.backbone, before.backbone);
        assert_ne!(m.adapter, before.adapter);
        assert_ne!(m.head, before.head);
    }

    #[test]
    fn gcl_zero_rate_changes_nothing() {
        let (mut m, data, r) = gcl_fixture();
        let before = m.clone();
        let batch: Vec<&Sample> = data.samples.iter().collect();
        let rep = gcl_train_step(
            &mut m,
            &batch,
            Some(&r),
            &AlignConfig::default(),
            &[0, 1, 2],
            &mut OptimizerState::adam(0.0),
        )
        .unwrap();
        assert!(rep.loss > 0.0);
        assert_eq!(m, before);
    }

    #[test]
    fn gcl_step_reduces_batch_loss() {
        let (mut m, data, r) = gcl_fixture();
        let batch: Vec<&Sample> = data.samples.iter().collect();
        let cfg = AlignConfig::default();
        let mask = [0, 1, 2];
        for reference in [None, Some(&r)] {
            let mut model = m.clone();
            let before = gcl_batch_loss(&model, &batch, reference, &cfg, &mask).unwrap();
            let mut opt = OptimizerState::sgd(1e-3);
            gcl_train_step(&mut model, &batch, reference, &cfg, &mask, &mut opt).unwrap();
            let after = gcl_batch_loss(&model, &batch, reference, &cfg, &mask).unwrap();
            assert!(after < before, "{after} !< {before}");
        }
        m.adapter = None;
        assert!(gcl_train_step(
            &mut m,
            &batch,
            None,
            &cfg,
            &mask,
            &mut OptimizerState::sgd(0.1)
        )
        .is_err());
    }

    #[test]
    fn gcl_step_without_reference_ignores_alpha() {
        let (m, data, _) = gcl_fixture();
        let batch: Vec<&Sample> = data.samples.iter().collect();
        let mut a = m.clone();
        let mut b = m.clone();
        let c1 = AlignConfig {
            alpha: 0.1,
            ..AlignConfig::default()
        };
        let c2 = AlignConfig {
            alpha: 0.9,
            ..AlignConfig::default()
        };
        gcl_train_step(&mut a, &batch, None, &c1, &[0, 1, 2], &mut OptimizerState::adam(0.01)).unwrap();
        gcl_train_step(&mut b, &batch, None, &c2, &[0, 1, 2], &mut OptimizerState::adam(0.01)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_sample_batch_falls_back() {
        let (mut m, data, r) = gcl_fixture();
        let batch = vec![&data.samples[0]];
        let rep = gcl_train_step(
            &mut m,
            &batch,
            Some(&r),
            &AlignConfig::default(),
            &[0, 1, 2],
            &mut OptimizerState::adam(0.01),
        )
        .unwrap();
        assert!(rep.fallback);
    }
}
