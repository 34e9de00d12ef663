//! Experiment orchestration: configuration, the pretrain → refine → covref
//! → gcl → theory stages, the ablation sweep, and artifact I/O.
//!
//! Every stage is a deterministic function of the resolved configuration and
//! its input artifacts. Per-stage randomness comes from
//! [`derive_seed`](crate::seed::derive_seed) applied to the master seed and a
//! fixed stage label.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datastream::{
    make_siblurry_stream, sample_pseudo_sequence, sample_reference_subsets, DataError,
    GaussianClusters, LabeledDataset, Sample, SiBlurryConfig,
};
use crate::eval::{
    accuracy, compute_auc, compute_forgetting, compute_last, sequential_joint_gap, theorem_gap,
    EvalError, EvalLog, GapExperiment, GapResult, MlpTaskPair,
};
use crate::linalg::{dot, norm, DenseMatrix, FeatVec, LinalgError};
use crate::mepo::{
    build_cov_ref, evaluate_gcl, meta_refine, run_gcl, CovRef, EpochLog, GclConfig, MepoConfig, MepoError,
};
use crate::net::{
    masked_ce_loss, Activation, Dense, MlpModel, NetError, OptimizerState, ParamBlock,
};
use crate::seed::{derive_seed, derive_seed_indexed};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Mepo(#[from] MepoError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "ConfigError",
            CliError::MissingArtifact(_) => "MissingArtifact",
            CliError::Io { .. } => "IoError",
            CliError::Json(_) => "JsonError",
            CliError::Mepo(_) => "MepoError",
            CliError::Eval(_) => "EvalError",
            CliError::Net(_) => "NetError",
            CliError::Data(_) => "DataError",
            CliError::Linalg(_) => "LinalgError",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Json(_) => 2,
            CliError::MissingArtifact(_) => 3,
            CliError::Io { .. } => 4,
            _ => 1,
        }
    }

    /// One-line JSON description for stderr.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({ "error": self.kind(), "message": self.to_string() }).to_string()
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub classes: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub activation: Activation,
    /// Class centers are drawn from `N(0, center_scale²·I)`.
    pub center_scale: f64,
    /// Per-coordinate standard deviation of samples around their center.
    pub spread: f64,
    /// Coordinates along which class centers vary; 0 means all of them.
    pub signal_dims: usize,
    /// Standard deviation of the remaining, class-independent coordinates.
    pub nuisance_spread: f64,
    /// Rotate inputs by a fixed random orthogonal map shared by all data.
    pub mix: bool,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            classes: 30,
            samples_per_class: 200,
            input_dim: 16,
            hidden: vec![32],
            feature_dim: 16,
            activation: Activation::Tanh,
            center_scale: 1.0,
            spread: 0.35,
            signal_dims: 6,
            nuisance_spread: 1.0,
            mix: true,
            epochs: 5,
            lr: 5e-3,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DownstreamConfig {
    /// New classes, drawn from the same center distribution as pretraining.
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self {
            classes: 20,
            train_per_class: 200,
            test_per_class: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub m: f64,
    pub n: f64,
    pub tasks: usize,
    pub batch_size: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            m: 0.5,
            n: 0.1,
            tasks: 5,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CovRefConfig {
    /// Pretraining classes in the reference set; 0 means all.
    pub classes: usize,
    pub samples_per_class: usize,
    pub epsilon: f64,
}

impl Default for CovRefConfig {
    fn default() -> Self {
        Self {
            classes: 0,
            samples_per_class: 50,
            epsilon: crate::linalg::DEFAULT_EPSILON,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    /// Step sizes for the gap-versus-step-size fit.
    pub etas: Vec<f64>,
    /// Two-task probes drawn from pretraining data for the θ* versus θ₀
    /// comparison.
    pub probes: usize,
    pub probe_eta: f64,
    pub probe_classes: usize,
    pub probe_samples_per_class: usize,
    /// Parameters the gap is measured over.
    pub probe_params: ProbeParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeParams {
    Backbone,
    BackboneHead,
}

impl ProbeParams {
    fn blocks(self) -> Vec<ParamBlock> {
        match self {
            ProbeParams::Backbone => vec![ParamBlock::Backbone],
            ProbeParams::BackboneHead => vec![ParamBlock::Backbone, ParamBlock::Head],
        }
    }
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            etas: vec![1e-1, 3e-2, 1e-2, 3e-3, 1e-3, 3e-4, 1e-4],
            probes: 8,
            probe_eta: 1e-2,
            probe_classes: 10,
            probe_samples_per_class: 40,
            probe_params: ProbeParams::Backbone,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub pretrain: PretrainConfig,
    pub downstream: DownstreamConfig,
    pub stream: StreamConfig,
    pub refine: MepoConfig,
    pub covref: CovRefConfig,
    pub gcl: GclConfig,
    pub theory: TheoryConfig,
    pub meta_rep: bool,
    pub meta_cov: bool,
    pub alpha_sweep: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Output directory; `--out` overrides it. Not part of the echoed config.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            pretrain: PretrainConfig::default(),
            downstream: DownstreamConfig::default(),
            stream: StreamConfig::default(),
            refine: MepoConfig {
                eta_theta: 0.05,
                eta_psi: 0.5,
                ..MepoConfig::default()
            },
            covref: CovRefConfig::default(),
            gcl: GclConfig::default(),
            theory: TheoryConfig::default(),
            meta_rep: true,
            meta_cov: true,
            alpha_sweep: vec![0.0, 0.1, 0.3, 0.5, 0.7, 1.0],
            seeds: vec![0, 1, 2, 3, 4],
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_artifact(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CliError::Config(m.to_string()));
        let p = &self.pretrain;
        if p.classes < 2 || p.samples_per_class == 0 || p.input_dim == 0 || p.feature_dim == 0 {
            return bad("pretraining needs ≥ 2 classes and positive sizes");
        }
        if p.hidden.contains(&0) || p.batch_size == 0 || !(p.lr >= 0.0) {
            return bad("pretraining hidden widths, batch size and lr must be positive");
        }
        if !(p.spread >= 0.0 && p.center_scale > 0.0 && p.nuisance_spread >= 0.0) {
            return bad("spreads must be ≥ 0 and center_scale > 0");
        }
        if p.signal_dims > p.input_dim {
            return bad("signal_dims exceeds input_dim");
        }
        let d = &self.downstream;
        if d.classes == 0 || d.train_per_class == 0 || d.test_per_class == 0 {
            return bad("downstream sizes must be positive");
        }
        if self.stream.batch_size == 0 {
            return bad("stream batch size must be positive");
        }
        let nested = |e: &dyn std::fmt::Display| CliError::Config(e.to_string());
        self.siblurry().validate().map_err(|e| nested(&e))?;
        self.refine.validate().map_err(|e| nested(&e))?;
        self.gcl.align.validate().map_err(|e| nested(&e))?;
        if self.gcl.eval_interval == 0 {
            return bad("eval_interval must be positive");
        }
        if self.alpha_sweep.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return bad("alpha sweep values must lie in [0, 1]");
        }
        if self.covref.classes == 1 || self.covref.classes > p.classes {
            return bad("covref classes must be 0 (all) or in 2..=pretrain classes");
        }
        Ok(())
    }

    fn siblurry(&self) -> SiBlurryConfig {
        SiBlurryConfig {
            m: self.stream.m,
            n: self.stream.n,
            tasks: self.stream.tasks,
            seed: derive_seed(self.seed, "stream"),
        }
    }

    /// The configuration as echoed into outputs (without the output path).
    pub fn echo(&self) -> serde_json::Value {
        let mut c = self.clone();
        c.out_dir = None;
        serde_json::to_value(c).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.echo().to_string().as_bytes())
    }

    /// The configuration with `meta_rep`, `meta_cov` and `alpha` overridden.
    pub fn cell(&self, meta_rep: bool, meta_cov: bool, alpha: f64) -> Self {
        let mut c = self.clone();
        c.meta_rep = meta_rep;
        c.meta_cov = meta_cov;
        c.gcl.align.alpha = alpha;
        c
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Pretraining data and the downstream train/test splits, all generated from
/// the master seed.
#[derive(Debug, Clone)]
pub struct World {
    pub pre: LabeledDataset,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

/// Random orthogonal matrix from Gram–Schmidt on a Gaussian matrix.
fn random_orthogonal(dim: usize, seed: u64) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for r in &rows {
            let p = dot(&v, r);
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= p * b);
        }
        let n = norm(&v);
        if n > 1e-8 {
            rows.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    DenseMatrix::from_rows(&rows).expect("square finite rows")
}

/// Pads signal coordinates with class-independent noise and applies the
/// shared mixing map.
fn embed(
    data: LabeledDataset,
    input_dim: usize,
    nuisance_spread: f64,
    mixing: Option<&DenseMatrix>,
    seed: u64,
) -> Result<LabeledDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = data
        .samples
        .into_iter()
        .map(|s| {
            let mut x = s.x.into_vec();
            while x.len() < input_dim {
                x.push(nuisance_spread * rng.sample::<f64, _>(StandardNormal));
            }
            let x = match mixing {
                Some(q) => q.matvec(&x)?,
                None => x,
            };
            Ok(Sample {
                x: FeatVec::new(x)?,
                y: s.y,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LabeledDataset {
        samples,
        class_count: data.class_count,
        input_dim,
    })
}

pub fn build_world(cfg: &ExperimentConfig) -> Result<World> {
    let p = &cfg.pretrain;
    let signal = if p.signal_dims == 0 { p.input_dim } else { p.signal_dims };
    let mixing = p.mix.then(|| random_orthogonal(p.input_dim, derive_seed(cfg.seed, "world-mixing")));
    let make = |classes: usize, centers: &str, splits: &[(&str, usize)]| -> Result<Vec<LabeledDataset>> {
        let clusters = GaussianClusters::new(
            classes,
            signal,
            p.center_scale,
            p.spread,
            derive_seed(cfg.seed, centers),
        )?;
        splits
            .iter()
            .map(|(label, n)| {
                let d = clusters.sample(*n, derive_seed(cfg.seed, label))?;
                embed(
                    d,
                    p.input_dim,
                    p.nuisance_spread,
                    mixing.as_ref(),
                    derive_seed(cfg.seed, &format!("{label}-nuisance")),
                )
            })
            .collect()
    };
    let pre = make(p.classes, "pretrain-centers", &[("pretrain-data", p.samples_per_class)])?
        .remove(0);
    let d = &cfg.downstream;
    let mut down = make(
        d.classes,
        "downstream-centers",
        &[
            ("downstream-train", d.train_per_class),
            ("downstream-test", d.test_per_class),
        ],
    )?;
    let test = down.pop().expect("two splits");
    let train = down.pop().expect("two splits");
    Ok(World { pre, train, test })
}

fn initial_model(cfg: &ExperimentConfig) -> Result<MlpModel> {
    let p = &cfg.pretrain;
    let mut dims = vec![p.input_dim];
    dims.extend(&p.hidden);
    dims.push(p.feature_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "pretrain-init"));
    Ok(MlpModel::new(&dims, p.classes, p.activation, &mut rng)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub train_accuracy: f64,
}

fn dataset_loss(model: &MlpModel, data: &LabeledDataset) -> Result<f64> {
    let mask: Vec<usize> = (0..model.class_count()).collect();
    let mut total = 0.0;
    for s in &data.samples {
        let fwd = model.forward(s.x.as_slice(), false)?;
        total += masked_ce_loss(fwd.logits.as_slice(), s.y, &mask)?.0;
    }
    Ok(total / data.len() as f64)
}

/// Joint supervised training on the pretraining data with Adam over shuffled
/// minibatches.
pub fn stage_pretrain(cfg: &ExperimentConfig, world: &World) -> Result<(MlpModel, PretrainReport)> {
    let p = &cfg.pretrain;
    let mut model = initial_model(cfg)?;
    let initial_loss = dataset_loss(&model, &world.pre)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "pretrain-order"));
    let mut opt = OptimizerState::adam(p.lr);
    let blocks = [ParamBlock::Backbone, ParamBlock::Head];
    let mask: Vec<usize> = (0..model.class_count()).collect();
    let mut order: Vec<usize> = (0..world.pre.len()).collect();
    for _ in 0..p.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(p.batch_size) {
            let mut grads = model.zero_gradients(false);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let s = &world.pre.samples[i];
                let fwd = model.forward(s.x.as_slice(), false)?;
                let (_, g) = masked_ce_loss(fwd.logits.as_slice(), s.y, &mask)?;
                let gf = model.backward_head(fwd.feature.as_slice(), &g, scale, &mut grads)?;
                model.backward_backbone(&fwd.cache, &gf, false, scale, &mut grads)?;
            }
            model.apply_step(&blocks, &grads, &mut opt)?;
        }
    }
    let final_loss = dataset_loss(&model, &world.pre)?;
    let train_accuracy = accuracy(&model, &world.pre.samples, &mask, false)?;
    Ok((
        model,
        PretrainReport {
            initial_loss,
            final_loss,
            train_accuracy,
        },
    ))
}

pub fn stage_refine(cfg: &ExperimentConfig, theta0: &MlpModel, world: &World) -> Result<crate::mepo::Refined> {
    let mut mc = cfg.refine.clone();
    mc.seed = derive_seed(cfg.seed, "refine");
    Ok(meta_refine(theta0, &world.pre, &mc)?)
}

pub fn stage_covref(cfg: &ExperimentConfig, backbone: &MlpModel, world: &World) -> Result<CovRef> {
    let classes = match cfg.covref.classes {
        0 => world.pre.class_count,
        c => c,
    };
    let subsets = sample_reference_subsets(
        &world.pre,
        classes,
        cfg.covref.samples_per_class,
        derive_seed(cfg.seed, "covref"),
    )?;
    Ok(build_cov_ref(backbone, &subsets, cfg.covref.epsilon)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub a_auc: f64,
    pub a_last: f64,
    pub forgetting: f64,
    pub seed: u64,
    pub meta_rep: bool,
    pub meta_cov: bool,
    pub alpha: f64,
    pub fallbacks: usize,
    pub steps: usize,
    pub config_hash: String,
    pub config: serde_json::Value,
    /// SHA-256 of each input artifact, keyed by role.
    pub inputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct GclReport {
    pub metrics: Metrics,
    pub log: EvalLog,
}

/// Online continual training on the downstream stream from `backbone`,
/// with a fresh head and a zero adapter. `covref` switches alignment on.
pub fn stage_gcl(
    cfg: &ExperimentConfig,
    backbone: &MlpModel,
    covref: Option<&CovRef>,
    world: &World,
) -> Result<GclReport> {
    let stream = make_siblurry_stream(&world.train, &cfg.siblurry(), cfg.stream.batch_size)?;
    let mut model = backbone.clone();
    model.adapter = None;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "gcl-head"));
    model.reset_head(cfg.downstream.classes, &mut rng);
    let model = model.with_zero_adapter();
    let mut gcl = cfg.gcl;
    gcl.eval_seed = derive_seed(cfg.seed, "gcl-eval-order");
    let out = run_gcl(&stream, &world.train, &world.test, model, covref, &gcl)?;
    let a_auc = if out.log.records.is_empty() {
        0.0
    } else {
        compute_auc(&out.log)?
    };
    let a_last = if covref.is_some() {
        let all: Vec<&Sample> = world.test.samples.iter().collect();
        let mask: Vec<usize> = (0..world.test.class_count).collect();
        evaluate_gcl(&out.model, &all, covref, &gcl, &mask)?
    } else {
        compute_last(&out.model, &world.test)?
    };
    let forgetting = compute_forgetting(&out.log.task_table)?;
    let mut inputs = BTreeMap::new();
    inputs.insert("backbone".to_string(), sha256_hex(backbone.to_checkpoint().as_bytes()));
    if let Some(r) = covref {
        inputs.insert("covref".to_string(), sha256_hex(r.to_text().as_bytes()));
    }
    Ok(GclReport {
        metrics: Metrics {
            a_auc,
            a_last,
            forgetting,
            seed: cfg.seed,
            meta_rep: cfg.meta_rep,
            meta_cov: cfg.meta_cov,
            alpha: cfg.gcl.align.alpha,
            fallbacks: out.fallbacks,
            steps: out.steps,
            config_hash: cfg.hash(),
            config: cfg.echo(),
            inputs,
        },
        log: out.log,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    /// Gap versus step size at the refined backbone on the first probe.
    pub fit: GapResult,
    pub probe_eta: f64,
    pub gaps_pretrained: Vec<f64>,
    pub gaps_refined: Vec<f64>,
    pub mean_gap_pretrained: f64,
    pub mean_gap_refined: f64,
}

fn probe_pair<'a>(
    cfg: &ExperimentConfig,
    model: &MlpModel,
    world: &'a World,
    probe: usize,
) -> Result<MlpTaskPair<'a>> {
    let t = &cfg.theory;
    let seq = sample_pseudo_sequence(
        &world.pre,
        t.probe_classes,
        t.probe_samples_per_class,
        cfg.refine.gamma,
        2,
        derive_seed_indexed(cfg.seed, "theory-probe", probe as u64),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_indexed(cfg.seed, "theory-head", probe as u64));
    let mut m = model.clone();
    m.adapter = None;
    m.head = Dense::init(m.feature_dim(), t.probe_classes, &mut rng);
    let mut tasks = seq.tasks.into_iter();
    Ok(MlpTaskPair {
        model: m,
        data: &world.pre,
        task_a: tasks.next().unwrap_or_default(),
        task_b: tasks.next().unwrap_or_default(),
        blocks: t.probe_params.blocks(),
    })
}

/// Sequential-versus-joint gap on two-task probes drawn from pretraining
/// data, at the pretrained and refined backbones.
pub fn stage_theory(
    cfg: &ExperimentConfig,
    theta0: &MlpModel,
    theta_star: &MlpModel,
    world: &World,
) -> Result<TheoryReport> {
    let t = &cfg.theory;
    if t.probes == 0 {
        return Err(CliError::Config("theory.probes must be positive".into()));
    }
    let gaps = |model: &MlpModel| -> Result<Vec<f64>> {
        (0..t.probes)
            .map(|p| {
                let pair = probe_pair(cfg, model, world, p)?;
                Ok(sequential_joint_gap(&pair, &pair.theta()?, t.probe_eta)?)
            })
            .collect()
    };
    let gaps_pretrained = gaps(theta0)?;
    let gaps_refined = gaps(theta_star)?;
    let pair = probe_pair(cfg, theta_star, world, 0)?;
    let fit = theorem_gap(&GapExperiment {
        theta: pair.theta()?,
        pair,
        etas: t.etas.clone(),
    })?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(TheoryReport {
        fit,
        probe_eta: t.probe_eta,
        mean_gap_pretrained: mean(&gaps_pretrained),
        mean_gap_refined: mean(&gaps_refined),
        gaps_pretrained,
        gaps_refined,
    })
}

/// Everything one master seed produces before the GCL phase.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub cfg: ExperimentConfig,
    pub world: World,
    pub theta0: MlpModel,
    pub pretrain: PretrainReport,
    pub theta_star: MlpModel,
    pub refine_log: Vec<EpochLog>,
    pub covref_pretrained: CovRef,
    pub covref_refined: CovRef,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let world = build_world(cfg)?;
    let (theta0, pretrain) = stage_pretrain(cfg, &world)?;
    let refined = stage_refine(cfg, &theta0, &world)?;
    let covref_pretrained = stage_covref(cfg, &theta0, &world)?;
    let covref_refined = stage_covref(cfg, &refined.model, &world)?;
    Ok(Prepared {
        cfg: cfg.clone(),
        world,
        theta0,
        pretrain,
        theta_star: refined.model,
        refine_log: refined.log,
        covref_pretrained,
        covref_refined,
    })
}

impl Prepared {
    pub fn backbone(&self, meta_rep: bool) -> &MlpModel {
        if meta_rep {
            &self.theta_star
        } else {
            &self.theta0
        }
    }

    pub fn covref(&self, meta_rep: bool) -> &CovRef {
        if meta_rep {
            &self.covref_refined
        } else {
            &self.covref_pretrained
        }
    }

    /// Runs one GCL cell of the ablation grid.
    pub fn run_cell(&self, meta_rep: bool, meta_cov: bool, alpha: f64) -> Result<GclReport> {
        let cfg = self.cfg.cell(meta_rep, meta_cov, alpha);
        let covref = meta_cov.then(|| self.covref(meta_rep));
        stage_gcl(&cfg, self.backbone(meta_rep), covref, &self.world)
    }
}

pub fn flag_name(on: bool) -> &'static str {
    if on {
        "on"
    } else {
        "off"
    }
}

pub fn cell_dir_name(meta_rep: bool, meta_cov: bool, alpha: f64) -> String {
    format!(
        "rep-{}-cov-{}-alpha-{alpha}",
        flag_name(meta_rep),
        flag_name(meta_cov)
    )
}

pub fn read_artifact(path: &Path) -> Result<String> {
    match fs::read_to_string(path) {
        Ok(s) => Ok(s),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(CliError::MissingArtifact(path.to_path_buf()))
        }
        Err(source) => Err(CliError::Io {
            path: path.to_path_buf(),
            source,
        }),
    }
}

pub fn write_artifact(path: &Path, contents: &str) -> Result<()> {
    let io = |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io)?;
    }
    fs::write(path, contents).map_err(io)
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub const BACKBONE_FILE: &str = "backbone.ckpt";
pub const REFINED_FILE: &str = "refined.ckpt";

pub fn covref_file(meta_rep: bool) -> &'static str {
    if meta_rep {
        "covref-refined.txt"
    } else {
        "covref-pretrained.txt"
    }
}

fn load_model(path: &Path) -> Result<MlpModel> {
    Ok(MlpModel::from_checkpoint(&read_artifact(path)?)?)
}

fn write_gcl_report(dir: &Path, report: &GclReport) -> Result<()> {
    write_artifact(&dir.join("metrics.json"), &to_json_pretty(&report.metrics)?)?;
    write_artifact(&dir.join("eval_log.csv"), &report.log.to_csv())
}

/// `pretrain`: writes `backbone.ckpt` and `pretrain.json`.
pub fn cmd_pretrain(cfg: &ExperimentConfig, out: &Path) -> Result<PretrainReport> {
    cfg.validate()?;
    let world = build_world(cfg)?;
    let (model, report) = stage_pretrain(cfg, &world)?;
    write_artifact(&out.join(BACKBONE_FILE), &model.to_checkpoint())?;
    write_artifact(&out.join("pretrain.json"), &to_json_pretty(&report)?)?;
    Ok(report)
}

/// `refine`: reads `backbone.ckpt`, writes `refined.ckpt` and
/// `refine_log.json`.
pub fn cmd_refine(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    let theta0 = load_model(&out.join(BACKBONE_FILE))?;
    let world = build_world(cfg)?;
    let refined = stage_refine(cfg, &theta0, &world)?;
    write_artifact(&out.join(REFINED_FILE), &refined.model.to_checkpoint())?;
    write_artifact(&out.join("refine_log.json"), &to_json_pretty(&refined.log)?)?;
    Ok(refined.log)
}

fn backbone_path(cfg: &ExperimentConfig, out: &Path) -> PathBuf {
    out.join(if cfg.meta_rep { REFINED_FILE } else { BACKBONE_FILE })
}

/// `covref`: builds the reference from the backbone selected by
/// `meta_rep`.
pub fn cmd_covref(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let backbone = load_model(&backbone_path(cfg, out))?;
    let world = build_world(cfg)?;
    let r = stage_covref(cfg, &backbone, &world)?;
    let path = out.join(covref_file(cfg.meta_rep));
    write_artifact(&path, &r.to_text())?;
    Ok(path)
}

/// `gcl`: one ablation cell; writes `metrics.json` and `eval_log.csv` under
/// a directory named after the cell.
pub fn cmd_gcl(cfg: &ExperimentConfig, out: &Path) -> Result<Metrics> {
    cfg.validate()?;
    let backbone = load_model(&backbone_path(cfg, out))?;
    let covref = if cfg.meta_cov {
        Some(CovRef::from_text(&read_artifact(&out.join(covref_file(cfg.meta_rep)))?)?)
    } else {
        None
    };
    let world = build_world(cfg)?;
    let report = stage_gcl(cfg, &backbone, covref.as_ref(), &world)?;
    let dir = out.join(cell_dir_name(cfg.meta_rep, cfg.meta_cov, cfg.gcl.align.alpha));
    write_gcl_report(&dir, &report)?;
    Ok(report.metrics)
}

/// `theory`: reads both checkpoints; writes `gap.csv`, `gap_fit.json` and
/// `gap_compare.json`.
pub fn cmd_theory(cfg: &ExperimentConfig, out: &Path) -> Result<TheoryReport> {
    cfg.validate()?;
    let theta0 = load_model(&out.join(BACKBONE_FILE))?;
    let theta_star = load_model(&out.join(REFINED_FILE))?;
    let world = build_world(cfg)?;
    let report = stage_theory(cfg, &theta0, &theta_star, &world)?;
    write_artifact(&out.join("gap.csv"), &report.fit.to_csv())?;
    write_artifact(&out.join("gap_fit.json"), &to_json_pretty(&report.fit.fit_json())?)?;
    write_artifact(&out.join("gap_compare.json"), &to_json_pretty(&report)?)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub seeds: Vec<u64>,
    /// Mean A_AUC per ablation cell name over seeds.
    pub mean_auc: BTreeMap<String, f64>,
    pub metric_files: usize,
}

/// `sweep`: for every seed, prepares all upstream artifacts and runs the
/// 2 × 2 ablation grid at the configured α plus the α sweep with both flags
/// on. Seeds and cells run in parallel; each writes its own directory.
pub fn cmd_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<SweepSummary> {
    cfg.validate()?;
    if cfg.seeds.is_empty() {
        return Err(CliError::Config("sweep needs at least one seed".into()));
    }
    let alpha = cfg.gcl.align.alpha;
    let mut cells: Vec<(bool, bool, f64)> = vec![
        (false, false, alpha),
        (true, false, alpha),
        (false, true, alpha),
        (true, true, alpha),
    ];
    for &a in &cfg.alpha_sweep {
        if !cells.contains(&(true, true, a)) {
            cells.push((true, true, a));
        }
    }
    let per_seed: Vec<Vec<(String, Metrics)>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| -> Result<Vec<(String, Metrics)>> {
            let scfg = cfg.with_seed(seed);
            let prep = prepare(&scfg)?;
            let dir = out.join(format!("seed-{seed}"));
            write_artifact(&dir.join(BACKBONE_FILE), &prep.theta0.to_checkpoint())?;
            write_artifact(&dir.join(REFINED_FILE), &prep.theta_star.to_checkpoint())?;
            write_artifact(&dir.join(covref_file(false)), &prep.covref_pretrained.to_text())?;
            write_artifact(&dir.join(covref_file(true)), &prep.covref_refined.to_text())?;
            cells
                .par_iter()
                .map(|&(rep, cov, a)| {
                    let report = prep.run_cell(rep, cov, a)?;
                    let name = cell_dir_name(rep, cov, a);
                    write_gcl_report(&dir.join(&name), &report)?;
                    Ok((name, report.metrics))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut files = 0;
    for seed_cells in &per_seed {
        for (name, m) in seed_cells {
            let e = sums.entry(name.clone()).or_insert((0.0, 0));
            e.0 += m.a_auc;
            e.1 += 1;
            files += 1;
        }
    }
    let summary = SweepSummary {
        seeds: cfg.seeds.clone(),
        mean_auc: sums
            .into_iter()
            .map(|(k, (s, n))| (k, s / n as f64))
            .collect(),
        metric_files: files,
    };
    write_artifact(&out.join("summary.json"), &to_json_pretty(&summary)?)?;
    Ok(summary)
}
