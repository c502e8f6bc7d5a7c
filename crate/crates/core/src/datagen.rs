//! Scenario construction: synthetic drifting Gaussian streams, pre-extracted
//! feature files, feature-space view augmentation and the exemplar buffer.
//!
//! Ground-truth classes of unlabeled samples are kept behind
//! [`UnlabeledSet::hidden_labels`], which needs an [`EvalAccess`] token that
//! only the evaluation side of the crate can create.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::rng::{self, tag};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassKind {
    Known,
    Novel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub kind: ClassKind,
    /// Task (0-based) in which the class appears.
    pub task: usize,
}

/// Features with their class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn empty(dim: usize) -> Self {
        Self {
            features: Tensor::zeros(0, dim),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn concat(&self, other: &LabeledSet) -> Result<LabeledSet> {
        Ok(LabeledSet {
            features: Tensor::vstack(&[&self.features, &other.features])?,
            labels: self.labels.iter().chain(&other.labels).copied().collect(),
        })
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledSet {
        LabeledSet {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Proof of being on the evaluation side. Constructible only inside the crate.
#[derive(Debug)]
pub struct EvalAccess(());

impl EvalAccess {
    pub(crate) fn grant() -> Self {
        EvalAccess(())
    }
}

/// Unlabeled training samples. Their true classes are retained for
/// evaluation but are not readable by training code.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSet {
    features: Tensor,
    hidden: Vec<usize>,
}

impl UnlabeledSet {
    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.hidden.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden.is_empty()
    }

    pub fn hidden_labels(&self, _access: &EvalAccess) -> &[usize] {
        &self.hidden
    }
}

/// One task: labeled known-class samples, unlabeled known and novel samples,
/// and a labeled held-out test split.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub index: usize,
    pub known_classes: Vec<usize>,
    pub novel_classes: Vec<usize>,
    pub labeled: LabeledSet,
    pub unlabeled: UnlabeledSet,
    pub test: LabeledSet,
}

impl TaskData {
    pub fn num_classes(&self) -> usize {
        self.known_classes.len() + self.novel_classes.len()
    }

    pub fn num_novel(&self) -> usize {
        self.novel_classes.len()
    }

    pub fn dim(&self) -> usize {
        self.test.features.cols()
    }

    /// All training features, labeled first.
    pub fn train_features(&self) -> Result<Tensor> {
        Tensor::vstack(&[&self.labeled.features, &self.unlabeled.features])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub tasks: Vec<TaskData>,
    pub class_registry: BTreeMap<usize, ClassInfo>,
    pub dim: usize,
    pub seed: u64,
}

impl Scenario {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }
}

/// Per-task transform applied cumulatively to the data-generating process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Drift {
    None,
    /// Rotation of every coordinate pair `(2i, 2i+1)` by the angle.
    Rotation { angle_deg: f64 },
    /// Random linear map with singular values in `[1/bound, bound]`.
    RandomLinear { spectral_bound: f64 },
    Translation { offset: Vec<f64> },
}

impl Drift {
    fn validate(&self, dim: usize) -> Result<()> {
        match self {
            Drift::RandomLinear { spectral_bound } if *spectral_bound < 1.0 => {
                Err(Error::arg("spectral_bound must be at least 1"))
            }
            Drift::Translation { offset } if offset.len() != dim => Err(Error::arg(format!(
                "translation offset has {} entries, dim is {dim}",
                offset.len()
            ))),
            Drift::Rotation { angle_deg } if !angle_deg.is_finite() => Err(Error::arg("angle must be finite")),
            _ => Ok(()),
        }
    }

    /// The single-step affine map `x -> x·A + b`.
    fn affine(&self, dim: usize, seed: u64) -> (Tensor, Vec<f64>) {
        match self {
            Drift::None => (Tensor::identity(dim), vec![0.0; dim]),
            Drift::Rotation { angle_deg } => {
                let (s, c) = angle_deg.to_radians().sin_cos();
                let mut a = Tensor::identity(dim);
                for p in 0..dim / 2 {
                    let (i, j) = (2 * p, 2 * p + 1);
                    a.row_mut(i)[i] = c;
                    a.row_mut(i)[j] = s;
                    a.row_mut(j)[i] = -s;
                    a.row_mut(j)[j] = c;
                }
                (a, vec![0.0; dim])
            }
            Drift::RandomLinear { spectral_bound } => {
                let mut r = rng::stream(seed, &[tag::SCENARIO, 0x6472_6966]);
                let q1 = random_orthogonal(dim, &mut r);
                let q2 = random_orthogonal(dim, &mut r);
                let lo = spectral_bound.recip().ln();
                let hi = spectral_bound.ln();
                let mut scaled = q1.clone();
                for i in 0..dim {
                    let s = if hi > lo { r.random_range(lo..=hi).exp() } else { 1.0 };
                    scaled.row_mut(i).iter_mut().for_each(|v| *v *= s);
                }
                (scaled.matmul(&q2).expect("square"), vec![0.0; dim])
            }
            Drift::Translation { offset } => (Tensor::identity(dim), offset.clone()),
        }
    }
}

/// Random orthogonal matrix by Gram-Schmidt on a Gaussian matrix.
pub fn random_orthogonal<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Tensor {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for e in &rows {
            let p: f64 = v.iter().zip(e).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(e).for_each(|(vi, ei)| *vi -= p * ei);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            rows.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    Tensor::from_rows(&rows).expect("square")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub dim: usize,
    pub classes_per_task: usize,
    pub known_fraction: f64,
    pub labeled_fraction: f64,
    pub samples_per_class: usize,
    pub cluster_std: f64,
    pub cluster_separation: f64,
    pub drift: Drift,
    pub test_fraction: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            classes_per_task: 20,
            known_fraction: 0.8,
            labeled_fraction: 0.5,
            samples_per_class: 50,
            cluster_std: 1.0,
            cluster_separation: 10.0,
            drift: Drift::None,
            test_fraction: 0.2,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.classes_per_task == 0 || self.samples_per_class < 2 {
            return Err(Error::arg("dim and classes_per_task must be positive, samples_per_class at least 2"));
        }
        if !(self.cluster_std > 0.0 && self.cluster_separation > 0.0) {
            return Err(Error::arg("cluster_std and cluster_separation must be positive"));
        }
        check_fractions(self.known_fraction, self.labeled_fraction, self.test_fraction)?;
        known_count(self.classes_per_task, self.known_fraction)?;
        self.drift.validate(self.dim)
    }
}

fn check_fractions(known: f64, labeled: f64, test: f64) -> Result<()> {
    for (name, v) in [("known_fraction", known), ("labeled_fraction", labeled)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::arg(format!("{name} must lie in [0, 1], got {v}")));
        }
    }
    if !(0.0..1.0).contains(&test) {
        return Err(Error::arg(format!("test_fraction must lie in [0, 1), got {test}")));
    }
    Ok(())
}

fn known_count(classes: usize, known_fraction: f64) -> Result<usize> {
    let k = (classes as f64 * known_fraction + 1e-9).floor() as usize;
    if k < 1 {
        return Err(Error::arg(format!(
            "{classes} classes with known_fraction {known_fraction} leave no labeled class"
        )));
    }
    Ok(k)
}

/// Splits shared by synthetic generation and file ingestion.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Splits {
    known_fraction: f64,
    labeled_fraction: f64,
    test_fraction: f64,
}

/// Build a scenario from per-class samples. `task_classes[t]` lists the
/// classes of task `t`; the first `known` of each (after shuffling) are known.
fn assemble(
    samples: &BTreeMap<usize, Vec<Vec<f64>>>,
    task_classes: Vec<Vec<usize>>,
    splits: Splits,
    dim: usize,
    seed: u64,
) -> Result<Scenario> {
    let mut registry = BTreeMap::new();
    let mut tasks = Vec::with_capacity(task_classes.len());
    for (t, mut classes) in task_classes.into_iter().enumerate() {
        let mut r = rng::stream(seed, &[tag::SPLIT, t as u64]);
        classes.shuffle(&mut r);
        let n_known = known_count(classes.len(), splits.known_fraction)?;
        let mut known: Vec<usize> = classes[..n_known].to_vec();
        let mut novel: Vec<usize> = classes[n_known..].to_vec();
        known.sort_unstable();
        novel.sort_unstable();

        let (mut lab_x, mut lab_y) = (Vec::new(), Vec::new());
        let (mut unl_x, mut unl_y) = (Vec::new(), Vec::new());
        let (mut test_x, mut test_y) = (Vec::new(), Vec::new());
        for &c in known.iter().chain(&novel) {
            let is_known = known.binary_search(&c).is_ok();
            registry.insert(
                c,
                ClassInfo {
                    kind: if is_known { ClassKind::Known } else { ClassKind::Novel },
                    task: t,
                },
            );
            let rows = &samples[&c];
            let mut idx: Vec<usize> = (0..rows.len()).collect();
            let mut cr = rng::stream(seed, &[tag::SPLIT, t as u64, c as u64]);
            idx.shuffle(&mut cr);
            let n_test = ((rows.len() as f64) * splits.test_fraction).round() as usize;
            let n_test = n_test.min(rows.len().saturating_sub(1));
            let train = &idx[n_test..];
            for &i in &idx[..n_test] {
                test_x.push(rows[i].clone());
                test_y.push(c);
            }
            let n_lab = if is_known {
                ((train.len() as f64) * splits.labeled_fraction).round().max(1.0) as usize
            } else {
                0
            };
            let n_lab = n_lab.min(train.len());
            for (j, &i) in train.iter().enumerate() {
                if j < n_lab {
                    lab_x.push(rows[i].clone());
                    lab_y.push(c);
                } else {
                    unl_x.push(rows[i].clone());
                    unl_y.push(c);
                }
            }
        }
        let to_tensor = |rows: Vec<Vec<f64>>| -> Result<Tensor> {
            if rows.is_empty() {
                Ok(Tensor::zeros(0, dim))
            } else {
                Tensor::from_rows(&rows)
            }
        };
        tasks.push(TaskData {
            index: t,
            known_classes: known,
            novel_classes: novel,
            labeled: LabeledSet {
                features: to_tensor(lab_x)?,
                labels: lab_y,
            },
            unlabeled: UnlabeledSet {
                features: to_tensor(unl_x)?,
                hidden: unl_y,
            },
            test: LabeledSet {
                features: to_tensor(test_x)?,
                labels: test_y,
            },
        });
    }
    Ok(Scenario {
        tasks,
        class_registry: registry,
        dim,
        seed,
    })
}

/// Draw the raw per-class samples of a synthetic scenario, with the drift
/// applied `t` times to every sample of task `t`.
fn synthetic_samples(
    cfg: &SyntheticConfig,
    n_tasks: usize,
    seed: u64,
) -> Result<(BTreeMap<usize, Vec<Vec<f64>>>, Vec<Vec<usize>>)> {
    cfg.validate()?;
    if n_tasks == 0 {
        return Err(Error::arg("need at least one task"));
    }
    let total = n_tasks * cfg.classes_per_task;
    let mut r = rng::stream(seed, &[tag::SCENARIO]);
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut r);
    let task_classes: Vec<Vec<usize>> = order.chunks(cfg.classes_per_task).map(|c| c.to_vec()).collect();

    let (step, shift) = cfg.drift.affine(cfg.dim, seed);
    let mut samples = BTreeMap::new();
    // cumulative transform of task t: x -> x·A_t + b_t
    let mut a_t = Tensor::identity(cfg.dim);
    let mut b_t = vec![0.0; cfg.dim];
    for (t, classes) in task_classes.iter().enumerate() {
        if t > 0 {
            a_t = a_t.matmul(&step)?;
            let b_row = Tensor::from_vec(1, cfg.dim, b_t.clone())?.matmul(&step)?;
            b_t = b_row.data().iter().zip(&shift).map(|(x, s)| x + s).collect();
        }
        for &c in classes {
            let mut cr = rng::stream(seed, &[tag::SCENARIO, 1, c as u64]);
            let dir: Vec<f64> = (0..cfg.dim).map(|_| cr.sample(StandardNormal)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mean: Vec<f64> = dir.iter().map(|v| v / norm * cfg.cluster_separation).collect();
            let mut rows = Vec::with_capacity(cfg.samples_per_class * cfg.dim);
            for _ in 0..cfg.samples_per_class {
                for m in &mean {
                    rows.push(m + cfg.cluster_std * cr.sample::<f64, _>(StandardNormal));
                }
            }
            let x = Tensor::from_vec(cfg.samples_per_class, cfg.dim, rows)?.matmul(&a_t)?;
            let per: Vec<Vec<f64>> = x
                .iter_rows()
                .map(|row| row.iter().zip(&b_t).map(|(v, b)| v + b).collect())
                .collect();
            samples.insert(c, per);
        }
    }
    Ok((samples, task_classes))
}

pub fn make_synthetic_scenario(cfg: &SyntheticConfig, n_tasks: usize, seed: u64) -> Result<Scenario> {
    let (samples, task_classes) = synthetic_samples(cfg, n_tasks, seed)?;
    let splits = Splits {
        known_fraction: cfg.known_fraction,
        labeled_fraction: cfg.labeled_fraction,
        test_fraction: cfg.test_fraction,
    };
    assemble(&samples, task_classes, splits, cfg.dim, seed)
}

/// How a feature file is cut into tasks and splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub n_tasks: usize,
    pub known_fraction: f64,
    pub labeled_fraction: f64,
    pub test_fraction: f64,
    /// Shuffle class ids (seeded) before cutting them into task blocks.
    pub shuffle_classes: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            n_tasks: 5,
            known_fraction: 0.8,
            labeled_fraction: 0.5,
            test_fraction: 0.2,
            shuffle_classes: true,
        }
    }
}

const HEADER_PREFIX: &str = "gccd-features v1 dim=";

/// Parse the `gccd-features v1` text format into per-class rows.
pub fn parse_feature_table(text: &str) -> Result<(usize, BTreeMap<usize, Vec<Vec<f64>>>)> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Format("empty feature file".into()))?;
    let dim: usize = header
        .trim()
        .strip_prefix(HEADER_PREFIX)
        .and_then(|d| d.parse().ok())
        .filter(|&d| d > 0)
        .ok_or_else(|| Error::Format(format!("bad header {header:?}, expected `{HEADER_PREFIX}<d>`")))?;
    let mut classes: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let class: usize = fields
            .next()
            .and_then(|c| c.trim().parse().ok())
            .ok_or_else(|| Error::Parse {
                line: line_no,
                message: "class id must be a non-negative integer".into(),
            })?;
        let values = fields
            .map(|f| {
                f.trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                    line: line_no,
                    message: format!("bad value {f:?}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != dim {
            return Err(Error::Format(format!(
                "line {line_no} has {} values, header declares dim={dim}",
                values.len()
            )));
        }
        classes.entry(class).or_default().push(values);
    }
    if classes.is_empty() {
        return Err(Error::Format("feature file has no rows".into()));
    }
    Ok((dim, classes))
}

pub fn load_feature_dataset(path: &Path, split: &SplitSpec, seed: u64) -> Result<Scenario> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    scenario_from_table(&text, split, seed)
}

pub fn scenario_from_table(text: &str, split: &SplitSpec, seed: u64) -> Result<Scenario> {
    check_fractions(split.known_fraction, split.labeled_fraction, split.test_fraction)?;
    if split.n_tasks == 0 {
        return Err(Error::arg("need at least one task"));
    }
    let (dim, samples) = parse_feature_table(text)?;
    let mut ids: Vec<usize> = samples.keys().copied().collect();
    if ids.len() < split.n_tasks {
        return Err(Error::Format(format!("{} classes cannot fill {} tasks", ids.len(), split.n_tasks)));
    }
    if let Some((c, _)) = samples.iter().find(|(_, rows)| rows.len() < 2) {
        return Err(Error::Format(format!("class {c} needs at least two rows")));
    }
    if split.shuffle_classes {
        ids.shuffle(&mut rng::stream(seed, &[tag::SCENARIO]));
    }
    let (base, extra) = (ids.len() / split.n_tasks, ids.len() % split.n_tasks);
    let mut task_classes = Vec::with_capacity(split.n_tasks);
    let mut off = 0;
    for t in 0..split.n_tasks {
        let n = base + usize::from(t < extra);
        task_classes.push(ids[off..off + n].to_vec());
        off += n;
    }
    let splits = Splits {
        known_fraction: split.known_fraction,
        labeled_fraction: split.labeled_fraction,
        test_fraction: split.test_fraction,
    };
    assemble(&samples, task_classes, splits, dim, seed)
}

/// Render synthetic samples (every class, every row) as a feature table.
pub fn synthetic_feature_table(cfg: &SyntheticConfig, n_tasks: usize, seed: u64) -> Result<String> {
    let (samples, _) = synthetic_samples(cfg, n_tasks, seed)?;
    let mut out = format!("{HEADER_PREFIX}{}\n", cfg.dim);
    for (c, rows) in &samples {
        for row in rows {
            write!(out, "{c}").expect("string write");
            for v in row {
                write!(out, ",{v}").expect("string write");
            }
            out.push('\n');
        }
    }
    Ok(out)
}

/// Feature-space augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Standard deviation of the additive Gaussian noise.
    pub strength: f64,
    /// Fraction of coordinates zeroed independently in each view.
    pub mask_fraction: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            strength: 0.1,
            mask_fraction: 0.1,
        }
    }
}

/// Two independently noised and masked copies of `batch`.
pub fn augment_views(batch: &Tensor, cfg: &AugmentConfig, seed: u64) -> (Tensor, Tensor) {
    let mut r = rng::stream(seed, &[tag::AUGMENT]);
    let view = |r: &mut rng::Rng| {
        let mut v = batch.clone();
        for x in v.data_mut() {
            if cfg.strength > 0.0 {
                *x += cfg.strength * r.sample::<f64, _>(StandardNormal);
            }
            if cfg.mask_fraction > 0.0 && r.random::<f64>() < cfg.mask_fraction {
                *x = 0.0;
            }
        }
        v
    };
    let a = view(&mut r);
    let b = view(&mut r);
    (a, b)
}

/// Up to `m` randomly chosen labeled samples per known class.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExemplarBuffer {
    pub m: usize,
    entries: BTreeMap<usize, Vec<Vec<f64>>>,
}

impl ExemplarBuffer {
    pub fn new(m: usize) -> Self {
        Self {
            m,
            entries: BTreeMap::new(),
        }
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }

    pub fn count(&self, class: usize) -> usize {
        self.entries.get(&class).map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_labeled(&self, dim: usize) -> LabeledSet {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (&c, xs) in &self.entries {
            for x in xs {
                rows.extend_from_slice(x);
                labels.push(c);
            }
        }
        LabeledSet {
            features: Tensor::from_vec(labels.len(), dim, rows).expect("rows have the scenario width"),
            labels,
        }
    }
}

/// Store `m` uniformly chosen labeled samples of every known class of `task`.
pub fn buffer_update(buf: &ExemplarBuffer, task: &TaskData, m: usize, seed: u64) -> ExemplarBuffer {
    let mut out = buf.clone();
    out.m = m;
    if m == 0 {
        return out;
    }
    for &c in &task.known_classes {
        let idx: Vec<usize> = (0..task.labeled.len()).filter(|&i| task.labeled.labels[i] == c).collect();
        let mut r = rng::stream(seed, &[tag::BUFFER, task.index as u64, c as u64]);
        let chosen: Vec<Vec<f64>> = idx
            .choose_multiple(&mut r, m.min(idx.len()))
            .map(|&i| task.labeled.features.row(i).to_vec())
            .collect();
        out.entries.insert(c, chosen);
    }
    out
}
