//! Synthetic data, the Si-Blurry stream constructor, and the pseudo task
//! sequence sampler used by meta-refinement.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::FeatVec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("invalid count: {0}")]
    InvalidCount(String),
    #[error("invalid stream config: {0}")]
    InvalidConfig(String),
    #[error("{classes} classes cannot cover {tasks} tasks")]
    TooFewClasses { classes: usize, tasks: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("need {needed} classes, dataset has {available}")]
    InsufficientClasses { needed: usize, available: usize },
    #[error("class {class} has {available} samples, need {needed}")]
    InsufficientSamples {
        class: usize,
        needed: usize,
        available: usize,
    },
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: FeatVec,
    pub y: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub samples: Vec<Sample>,
    pub class_count: usize,
    pub input_dim: usize,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample indices grouped by class, each group in dataset order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.class_count];
        for (i, s) in self.samples.iter().enumerate() {
            groups[s.y].push(i);
        }
        groups
    }

    /// Keeps only samples whose label is in `classes`.
    pub fn restrict_to(&self, classes: &BTreeSet<usize>) -> LabeledDataset {
        LabeledDataset {
            samples: self
                .samples
                .iter()
                .filter(|s| classes.contains(&s.y))
                .cloned()
                .collect(),
            class_count: self.class_count,
            input_dim: self.input_dim,
        }
    }
}

/// Isotropic Gaussian clusters around seeded random centers.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianClusters {
    pub centers: Vec<FeatVec>,
    pub spread: f64,
}

impl GaussianClusters {
    /// Centers are drawn from `N(0, center_scale² I)`.
    pub fn new(
        class_count: usize,
        input_dim: usize,
        center_scale: f64,
        spread: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_rng(class_count, input_dim, center_scale, spread, &mut rng)
    }

    fn with_rng<R: Rng>(
        class_count: usize,
        input_dim: usize,
        center_scale: f64,
        spread: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if class_count == 0 || input_dim == 0 {
            return Err(DataError::InvalidCount(format!(
                "class_count {class_count}, input_dim {input_dim}"
            )));
        }
        if !(spread > 0.0 && spread.is_finite()) || !(center_scale >= 0.0) {
            return Err(DataError::InvalidCount(format!(
                "spread {spread}, center scale {center_scale}"
            )));
        }
        let centers = (0..class_count)
            .map(|_| {
                FeatVec::from(
                    (0..input_dim)
                        .map(|_| center_scale * rng.sample::<f64, _>(StandardNormal))
                        .collect::<Vec<_>>(),
                )
            })
            .collect();
        Ok(Self { centers, spread })
    }

    pub fn class_count(&self) -> usize {
        self.centers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.centers[0].dim()
    }

    /// Draws `samples_per_class` points per class, grouped by class.
    pub fn sample(&self, samples_per_class: usize, seed: u64) -> Result<LabeledDataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(samples_per_class, &mut rng)
    }

    fn sample_with<R: Rng>(&self, samples_per_class: usize, rng: &mut R) -> Result<LabeledDataset> {
        if samples_per_class == 0 {
            return Err(DataError::InvalidCount("samples_per_class is 0".into()));
        }
        let mut samples = Vec::with_capacity(self.class_count() * samples_per_class);
        for (y, c) in self.centers.iter().enumerate() {
            for _ in 0..samples_per_class {
                let x: Vec<f64> = c
                    .as_slice()
                    .iter()
                    .map(|m| m + self.spread * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                samples.push(Sample {
                    x: FeatVec::from(x),
                    y,
                });
            }
        }
        Ok(LabeledDataset {
            samples,
            class_count: self.class_count(),
            input_dim: self.input_dim(),
        })
    }
}

/// Unit-scale Gaussian clusters; centers and samples both come from `seed`.
pub fn gen_gaussian_dataset(
    class_count: usize,
    samples_per_class: usize,
    input_dim: usize,
    cluster_spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clusters = GaussianClusters::with_rng(class_count, input_dim, 1.0, cluster_spread, &mut rng)?;
    clusters.sample_with(samples_per_class, &mut rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiBlurryConfig {
    /// Disjoint class ratio.
    pub m: f64,
    /// Blurry sample ratio.
    pub n: f64,
    /// Number of tasks.
    pub tasks: usize,
    pub seed: u64,
}

impl Default for SiBlurryConfig {
    fn default() -> Self {
        Self {
            m: 0.5,
            n: 0.1,
            tasks: 5,
            seed: 0,
        }
    }
}

impl SiBlurryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.m) || !(0.0..=1.0).contains(&self.n) {
            return Err(DataError::InvalidConfig(format!(
                "m = {}, n = {} must lie in [0, 1]",
                self.m, self.n
            )));
        }
        if self.tasks == 0 {
            return Err(DataError::InvalidConfig("need at least one task".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamTask {
    pub id: usize,
    /// Batches of indices into the source dataset.
    pub batches: Vec<Vec<usize>>,
    pub labels: BTreeSet<usize>,
}

impl StreamTask {
    pub fn sample_count(&self) -> usize {
        self.batches.iter().map(Vec::len).sum()
    }
}

/// A Si-Blurry task sequence over a source dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<StreamTask>,
    pub disjoint_classes: BTreeSet<usize>,
    pub blurry_classes: BTreeSet<usize>,
    /// Task holding each class's samples (all of them for disjoint classes,
    /// the retained share for blurry ones).
    pub home_task: Vec<usize>,
}

impl TaskStream {
    pub fn sample_count(&self) -> usize {
        self.tasks.iter().map(StreamTask::sample_count).sum()
    }

    pub fn batch_count(&self) -> usize {
        self.tasks.iter().map(|t| t.batches.len()).sum()
    }

    /// One line per sample: `task_id batch_id class_id sample_index`.
    /// Batch ids restart at zero within each task.
    pub fn to_manifest(&self, data: &LabeledDataset) -> String {
        let mut out = String::new();
        for task in &self.tasks {
            for (b, batch) in task.batches.iter().enumerate() {
                for &i in batch {
                    let _ = writeln!(out, "{} {} {} {}", task.id, b, data.samples[i].y, i);
                }
            }
        }
        out
    }
}

/// Splits `total` into `weights.len()` parts proportional to the weights by
/// largest remainder, after giving every part `floor` first.
fn proportional_counts(total: usize, weights: &[f64], floor: usize) -> Vec<usize> {
    let k = weights.len();
    let spare = total - floor * k;
    let wsum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / wsum * spare as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = spare - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts.iter().map(|c| c + floor).collect()
}

/// Builds a Si-Blurry stream.
///
/// `round(m·|Y|)` classes are disjoint and are split over tasks in sizes
/// drawn from normalized uniform weights, with every task getting at least
/// one when there are enough. Each remaining (blurry) class picks a home
/// task that keeps `round((1 − n)·count)` of its samples; every other sample
/// of that class goes to a uniformly chosen different task. Tasks are then
/// shuffled and cut into batches, keeping the final partial batch.
pub fn make_siblurry_stream(
    data: &LabeledDataset,
    cfg: &SiBlurryConfig,
    batch_size: usize,
) -> Result<TaskStream> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(DataError::InvalidCount("batch_size is 0".into()));
    }
    let classes = data.class_count;
    let t = cfg.tasks;
    if classes < t {
        return Err(DataError::TooFewClasses { classes, tasks: t });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut order: Vec<usize> = (0..classes).collect();
    order.shuffle(&mut rng);
    let n_disjoint = (cfg.m * classes as f64).round() as usize;
    let (disjoint, blurry) = order.split_at(n_disjoint);

    let mut home_task = vec![0usize; classes];
    if n_disjoint >= t {
        let weights: Vec<f64> = (0..t).map(|_| rng.random::<f64>() + 1e-12).collect();
        let counts = proportional_counts(n_disjoint, &weights, 1);
        let mut it = disjoint.iter();
        for (task, &count) in counts.iter().enumerate() {
            for &c in it.by_ref().take(count) {
                home_task[c] = task;
            }
        }
    } else {
        let mut tasks: Vec<usize> = (0..t).collect();
        tasks.shuffle(&mut rng);
        for (&c, &task) in disjoint.iter().zip(&tasks) {
            home_task[c] = task;
        }
    }
    for &c in blurry {
        home_task[c] = rng.random_range(0..t);
    }

    let by_class = data.indices_by_class();
    let mut task_samples: Vec<Vec<usize>> = vec![Vec::new(); t];
    for &c in &order {
        let mut idx = by_class[c].clone();
        idx.shuffle(&mut rng);
        let home = home_task[c];
        let keep = if disjoint.contains(&c) {
            idx.len()
        } else {
            ((1.0 - cfg.n) * idx.len() as f64).round() as usize
        };
        let (kept, leaked) = idx.split_at(keep);
        task_samples[home].extend_from_slice(kept);
        for &i in leaked {
            let dest = if t == 1 {
                home
            } else {
                let r = rng.random_range(0..t - 1);
                if r >= home {
                    r + 1
                } else {
                    r
                }
            };
            task_samples[dest].push(i);
        }
    }

    let tasks = task_samples
        .into_iter()
        .enumerate()
        .map(|(id, mut idx)| {
            idx.shuffle(&mut rng);
            let labels = idx.iter().map(|&i| data.samples[i].y).collect();
            StreamTask {
                id,
                batches: idx.chunks(batch_size).map(<[usize]>::to_vec).collect(),
                labels,
            }
        })
        .collect();

    Ok(TaskStream {
        tasks,
        disjoint_classes: disjoint.iter().copied().collect(),
        blurry_classes: blurry.iter().copied().collect(),
        home_task,
    })
}

/// A sample drawn for meta-refinement, labelled by its position in the
/// sequence's meta class list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MetaSample {
    pub index: usize,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoSequence {
    pub tasks: Vec<Vec<MetaSample>>,
    pub joint_set: Vec<MetaSample>,
    /// Source class ids; a sample's `label` indexes this list.
    pub meta_classes: Vec<usize>,
    pub split_ratio: f64,
}

impl PseudoSequence {
    pub fn task_labels(&self, t: usize) -> BTreeSet<usize> {
        self.tasks[t].iter().map(|s| s.label).collect()
    }
}

/// Samples a pseudo task sequence from pretraining data.
///
/// Picks `class_count_meta` classes without replacement and
/// `samples_per_class` samples from each; a fraction `gamma` of each class
/// (at least one sample, never all) is held out for the joint set. The class
/// list is cut into `t_prime` contiguous near-equal groups, one per task.
pub fn sample_pseudo_sequence(
    pre: &LabeledDataset,
    class_count_meta: usize,
    samples_per_class: usize,
    gamma: f64,
    t_prime: usize,
    seed: u64,
) -> Result<PseudoSequence> {
    if t_prime == 0 || class_count_meta == 0 || t_prime > class_count_meta {
        return Err(DataError::InvalidCount(format!(
            "{t_prime} pseudo tasks over {class_count_meta} classes"
        )));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(DataError::InvalidConfig(format!("gamma {gamma} outside (0, 1)")));
    }
    if class_count_meta > pre.class_count {
        return Err(DataError::InsufficientClasses {
            needed: class_count_meta,
            available: pre.class_count,
        });
    }
    if samples_per_class < 2 {
        return Err(DataError::InsufficientSamples {
            class: 0,
            needed: 2,
            available: samples_per_class,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let by_class = pre.indices_by_class();
    let mut classes: Vec<usize> = (0..pre.class_count).collect();
    classes.shuffle(&mut rng);
    classes.truncate(class_count_meta);

    let n_joint = ((gamma * samples_per_class as f64).round() as usize).clamp(1, samples_per_class - 1);
    let base = class_count_meta / t_prime;
    let extra = class_count_meta % t_prime;
    let mut tasks = vec![Vec::new(); t_prime];
    let mut joint_set = Vec::new();
    let mut task_of_label = Vec::with_capacity(class_count_meta);
    for t in 0..t_prime {
        task_of_label.extend(std::iter::repeat_n(t, base + usize::from(t < extra)));
    }
    for (label, &c) in classes.iter().enumerate() {
        if by_class[c].len() < samples_per_class {
            return Err(DataError::InsufficientSamples {
                class: c,
                needed: samples_per_class,
                available: by_class[c].len(),
            });
        }
        let mut idx = by_class[c].clone();
        idx.shuffle(&mut rng);
        idx.truncate(samples_per_class);
        let (held, seq) = idx.split_at(n_joint);
        joint_set.extend(held.iter().map(|&index| MetaSample { index, label }));
        tasks[task_of_label[label]].extend(seq.iter().map(|&index| MetaSample { index, label }));
    }
    for task in &mut tasks {
        task.shuffle(&mut rng);
    }
    joint_set.shuffle(&mut rng);
    Ok(PseudoSequence {
        tasks,
        joint_set,
        meta_classes: classes,
        split_ratio: gamma,
    })
}

/// Draws up to `per_class` samples from each of `class_count` randomly chosen
/// classes, returned as per-class groups of inputs (ordered by class id).
pub fn sample_reference_subsets(
    pre: &LabeledDataset,
    class_count: usize,
    per_class: usize,
    seed: u64,
) -> Result<Vec<(usize, Vec<FeatVec>)>> {
    if class_count > pre.class_count {
        return Err(DataError::InsufficientClasses {
            needed: class_count,
            available: pre.class_count,
        });
    }
    if per_class == 0 {
        return Err(DataError::InvalidCount("per_class is 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let by_class = pre.indices_by_class();
    let mut classes: Vec<usize> = (0..pre.class_count).collect();
    classes.shuffle(&mut rng);
    classes.truncate(class_count);
    classes.sort_unstable();
    classes
        .into_iter()
        .map(|c| {
            let mut idx = by_class[c].clone();
            if idx.is_empty() {
                return Err(DataError::InsufficientSamples {
                    class: c,
                    needed: 1,
                    available: 0,
                });
            }
            idx.shuffle(&mut rng);
            idx.truncate(per_class);
            Ok((c, idx.iter().map(|&i| pre.samples[i].x.clone()).collect()))
        })
        .collect()
}
