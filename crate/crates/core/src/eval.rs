//! Continual-discovery metrics: task-agnostic accuracy, forgetting,
//! plasticity, centroid-distance tracking and task confusion, plus report
//! serialization.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clustering::{cluster_mapping, CentroidStore};
use crate::datagen::{ClassInfo, ClassKind, Scenario};
use crate::diffcore::{Mlp, Tensor};
use crate::engine::{ncc_assign, MethodConfig};
use crate::{Error, Result};

/// Task-agnostic accuracy over all, known and novel classes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TagAccuracy {
    pub all: f64,
    pub known: f64,
    pub novel: f64,
}

/// Mean distance from stored centroids of past tasks to the true class means
/// in the current latent space, before and after adaptation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidDistances {
    /// Task after which the distances were measured.
    pub task: usize,
    pub known_before: Option<f64>,
    pub known_after: Option<f64>,
    pub novel_before: Option<f64>,
    pub novel_after: Option<f64>,
    /// Stored classes without test samples (or unmatched clusters).
    pub excluded: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: MethodConfig,
    /// Row `l` holds the accuracy on tasks `0..=l` after training task `l`.
    pub acc_matrix: Vec<Vec<f64>>,
    pub tag: TagAccuracy,
    pub forgetting: Option<f64>,
    pub plasticity: Option<f64>,
    pub centroid_distances: Vec<CentroidDistances>,
    /// Rows are true tasks, columns predicted tasks.
    pub task_confusion: Vec<Vec<usize>>,
}

/// Map every prediction to a class: known classes keep their id, discovered
/// clusters are matched to novel classes by Hungarian matching.
pub fn resolve_mapping(preds: &[usize], truths: &[usize], registry: &BTreeMap<usize, ClassInfo>) -> BTreeMap<usize, usize> {
    let fixed: BTreeMap<usize, usize> = registry
        .iter()
        .filter(|(_, info)| info.kind == ClassKind::Known)
        .map(|(&c, _)| (c, c))
        .collect();
    cluster_mapping(preds, truths, &fixed)
}

/// Overall, known-only and novel-only fraction of correct predictions.
/// `preds` may hold raw cluster ids; they are resolved once over the whole
/// input. Restricted fractions with no samples are 0.
pub fn tag_accuracy(preds: &[usize], truths: &[usize], registry: &BTreeMap<usize, ClassInfo>) -> TagAccuracy {
    let mapping = resolve_mapping(preds, truths, registry);
    tag_accuracy_mapped(preds, truths, registry, &mapping)
}

fn tag_accuracy_mapped(
    preds: &[usize],
    truths: &[usize],
    registry: &BTreeMap<usize, ClassInfo>,
    mapping: &BTreeMap<usize, usize>,
) -> TagAccuracy {
    let mut hits = [0usize; 2];
    let mut counts = [0usize; 2];
    for (p, t) in preds.iter().zip(truths) {
        let k = usize::from(registry.get(t).is_some_and(|i| i.kind == ClassKind::Novel));
        counts[k] += 1;
        if mapping.get(p) == Some(t) {
            hits[k] += 1;
        }
    }
    let frac = |h: usize, n: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
    TagAccuracy {
        all: frac(hits[0] + hits[1], counts[0] + counts[1]),
        known: frac(hits[0], counts[0]),
        novel: frac(hits[1], counts[1]),
    }
}

/// Average drop from each earlier task's best accuracy to its final one.
/// Absent with fewer than two tasks.
pub fn forgetting(acc: &[Vec<f64>]) -> Option<f64> {
    let n = acc.len();
    if n < 2 {
        return None;
    }
    let last = &acc[n - 1];
    let total: f64 = (0..n - 1)
        .map(|j| {
            let best = (j..n).map(|l| acc[l][j]).fold(f64::NEG_INFINITY, f64::max);
            best - last[j]
        })
        .sum();
    Some(total / (n - 1) as f64)
}

/// Mean accuracy on each task right after learning it, from the second task
/// on. Absent with fewer than two tasks.
pub fn plasticity(acc: &[Vec<f64>]) -> Option<f64> {
    let n = acc.len();
    if n < 2 {
        return None;
    }
    Some((1..n).map(|l| acc[l][l]).sum::<f64>() / (n - 1) as f64)
}

/// Counts of (true task, predicted task) pairs. The predicted task of an id
/// is the discovery task of its centroid, or its registry task.
pub fn task_confusion(
    preds: &[usize],
    truths: &[usize],
    registry: &BTreeMap<usize, ClassInfo>,
    store: &CentroidStore,
    n_tasks: usize,
) -> Vec<Vec<usize>> {
    let by_id: BTreeMap<usize, usize> = store.entries().iter().map(|e| (e.class_id, e.task_id)).collect();
    let mut m = vec![vec![0usize; n_tasks]; n_tasks];
    for (p, t) in preds.iter().zip(truths) {
        let pt = by_id.get(p).copied().or_else(|| registry.get(p).map(|i| i.task));
        if let (Some(pt), Some(info)) = (pt, registry.get(t)) {
            if pt < n_tasks && info.task < n_tasks {
                m[info.task][pt] += 1;
            }
        }
    }
    m
}

/// NCC outcome on every test set seen so far.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub after_task: usize,
    /// Accuracy on tasks `0..=after_task`.
    pub accuracies: Vec<f64>,
    pub tag: TagAccuracy,
    pub mapping: BTreeMap<usize, usize>,
    pub task_confusion: Vec<Vec<usize>>,
}

/// Embed the test sets of tasks `0..=n` with `encoder` and classify them
/// against `store`.
pub fn evaluate_after_task(scenario: &Scenario, encoder: &Mlp, store: &CentroidStore, n: usize) -> Result<Evaluation> {
    let mut preds = Vec::new();
    let mut truths = Vec::new();
    let mut bounds = Vec::with_capacity(n + 1);
    let entries = store.entries();
    for task in &scenario.tasks[..=n] {
        let z = encoder.forward_eval(&task.test.features)?;
        let start = preds.len();
        if z.rows() > 0 {
            preds.extend(ncc_assign(store, &z)?.into_iter().map(|i| entries[i].class_id));
        }
        truths.extend_from_slice(&task.test.labels);
        bounds.push((start, preds.len()));
    }
    let registry = &scenario.class_registry;
    let mapping = resolve_mapping(&preds, &truths, registry);
    let accuracies = bounds
        .iter()
        .map(|&(a, b)| {
            if b == a {
                0.0
            } else {
                let hits = (a..b).filter(|&i| mapping.get(&preds[i]) == Some(&truths[i])).count();
                hits as f64 / (b - a) as f64
            }
        })
        .collect();
    Ok(Evaluation {
        after_task: n,
        accuracies,
        tag: tag_accuracy_mapped(&preds, &truths, registry, &mapping),
        task_confusion: task_confusion(&preds, &truths, registry, store, n + 1),
        mapping,
    })
}

/// Accuracy of `store` on the unlabeled training data of `task`, the
/// transductive measure used for category discovery.
pub fn unlabeled_accuracy(
    task: &crate::datagen::TaskData,
    encoder: &Mlp,
    store: &CentroidStore,
    registry: &BTreeMap<usize, ClassInfo>,
) -> Result<TagAccuracy> {
    let access = crate::datagen::EvalAccess::grant();
    let truths = task.unlabeled.hidden_labels(&access);
    let z = encoder.forward_eval(task.unlabeled.features())?;
    if z.rows() == 0 {
        return Ok(TagAccuracy::default());
    }
    let entries = store.entries();
    let preds: Vec<usize> = ncc_assign(store, &z)?.into_iter().map(|i| entries[i].class_id).collect();
    Ok(tag_accuracy(&preds, truths, registry))
}

/// Distances of past-task centroids to the class means of their test data in
/// the space of `encoder`, before and after adaptation. Novel clusters are
/// identified with classes through `mapping`.
pub fn centroid_distance_report(
    before: &CentroidStore,
    after: &CentroidStore,
    encoder: &Mlp,
    scenario: &Scenario,
    task: usize,
    mapping: &BTreeMap<usize, usize>,
) -> Result<CentroidDistances> {
    let mut rows: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for t in &scenario.tasks[..task] {
        let z = encoder.forward_eval(&t.test.features)?;
        for (row, &c) in z.iter_rows().zip(&t.test.labels) {
            rows.entry(c).or_default().push(row.to_vec());
        }
    }
    let means: BTreeMap<usize, Vec<f64>> = rows
        .into_iter()
        .map(|(c, r)| Ok((c, Tensor::from_rows(&r)?.mean_rows())))
        .collect::<Result<_>>()?;
    let after_by_id: BTreeMap<usize, &Vec<f64>> = after.entries().iter().map(|e| (e.class_id, &e.centroid)).collect();
    let mut sums: BTreeMap<(ClassKind, bool), (f64, usize)> = BTreeMap::new();
    let mut excluded = Vec::new();
    for e in before.entries().iter().filter(|e| e.task_id < task) {
        let class = if e.kind == ClassKind::Known { Some(e.class_id) } else { mapping.get(&e.class_id).copied() };
        let (Some(mean), Some(adapted)) = (class.and_then(|c| means.get(&c)), after_by_id.get(&e.class_id)) else {
            excluded.push(e.class_id);
            continue;
        };
        for (is_after, c) in [(false, &e.centroid), (true, *adapted)] {
            let d = c.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let s = sums.entry((e.kind, is_after)).or_default();
            s.0 += d;
            s.1 += 1;
        }
    }
    let mean_of = |k, a| sums.get(&(k, a)).map(|&(s, n)| s / n as f64);
    Ok(CentroidDistances {
        task,
        known_before: mean_of(ClassKind::Known, false),
        known_after: mean_of(ClassKind::Known, true),
        novel_before: mean_of(ClassKind::Novel, false),
        novel_after: mean_of(ClassKind::Novel, true),
        excluded,
    })
}

pub(crate) fn build_report(
    scenario: &Scenario,
    config: MethodConfig,
    evals: &[Evaluation],
    centroid_distances: Vec<CentroidDistances>,
) -> Result<MetricsReport> {
    let last = evals.last().ok_or_else(|| Error::state("no task was evaluated"))?;
    let acc_matrix: Vec<Vec<f64>> = evals.iter().map(|e| e.accuracies.clone()).collect();
    let mut confusion = last.task_confusion.clone();
    confusion.resize(scenario.num_tasks(), vec![0; scenario.num_tasks()]);
    let report = MetricsReport {
        config,
        forgetting: forgetting(&acc_matrix),
        plasticity: plasticity(&acc_matrix),
        acc_matrix,
        tag: last.tag,
        centroid_distances,
        task_confusion: confusion,
    };
    Ok(report.rounded())
}

fn round6(x: f64) -> f64 {
    let r = (x * 1e6).round() / 1e6;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

impl MetricsReport {
    /// Copy with every metric rounded to 6 decimals.
    pub fn rounded(&self) -> Self {
        let o = |v: Option<f64>| v.map(round6);
        Self {
            config: self.config.clone(),
            acc_matrix: self.acc_matrix.iter().map(|r| r.iter().copied().map(round6).collect()).collect(),
            tag: TagAccuracy {
                all: round6(self.tag.all),
                known: round6(self.tag.known),
                novel: round6(self.tag.novel),
            },
            forgetting: o(self.forgetting),
            plasticity: o(self.plasticity),
            centroid_distances: self
                .centroid_distances
                .iter()
                .map(|d| CentroidDistances {
                    task: d.task,
                    known_before: o(d.known_before),
                    known_after: o(d.known_after),
                    novel_before: o(d.novel_before),
                    novel_after: o(d.novel_after),
                    excluded: d.excluded.clone(),
                })
                .collect(),
            task_confusion: self.task_confusion.clone(),
        }
    }

    /// Share of test samples predicted into the last task's classes.
    pub fn last_task_mass(&self) -> f64 {
        let total: usize = self.task_confusion.iter().flatten().sum();
        let last: usize = self.task_confusion.iter().filter_map(|r| r.last()).sum();
        if total == 0 {
            0.0
        } else {
            last as f64 / total as f64
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(&self.rounded()).map_err(|e| Error::Format(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }

    /// Long-format rows `(metric, task, value)`.
    pub fn csv_rows(&self) -> Vec<CsvRow> {
        let r = self.rounded();
        let mut rows = Vec::new();
        let mut push = |metric: &str, task: String, value: f64| {
            rows.push(CsvRow {
                metric: metric.to_string(),
                task,
                value,
            })
        };
        push("tag_all", String::new(), r.tag.all);
        push("tag_known", String::new(), r.tag.known);
        push("tag_novel", String::new(), r.tag.novel);
        if let Some(f) = r.forgetting {
            push("forgetting", String::new(), f);
        }
        if let Some(p) = r.plasticity {
            push("plasticity", String::new(), p);
        }
        for d in &r.centroid_distances {
            for (name, v) in [
                ("centroid_known_before", d.known_before),
                ("centroid_known_after", d.known_after),
                ("centroid_novel_before", d.novel_before),
                ("centroid_novel_after", d.novel_after),
            ] {
                if let Some(v) = v {
                    push(name, d.task.to_string(), v);
                }
            }
        }
        for (l, row) in r.acc_matrix.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                push("acc", format!("{l}:{j}"), v);
            }
        }
        for (t, row) in r.task_confusion.iter().enumerate() {
            for (p, &v) in row.iter().enumerate() {
                push("confusion", format!("{t}:{p}"), v as f64);
            }
        }
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,task,value\n");
        for row in self.csv_rows() {
            let _ = writeln!(s, "{},{},{}", row.metric, row.task, row.value);
        }
        s
    }

    /// Accuracy on every task after each training step, one row per step,
    /// with the running mean in the last column. Missing entries are `NaN`.
    pub fn to_tsv(&self) -> String {
        let r = self.rounded();
        let n = r.acc_matrix.len();
        let mut s = String::from("# after");
        for j in 0..n {
            let _ = write!(s, "\ttask_{j}");
        }
        s.push_str("\tmean\n");
        for (l, row) in r.acc_matrix.iter().enumerate() {
            let _ = write!(s, "{l}");
            for j in 0..n {
                match row.get(j) {
                    Some(v) => {
                        let _ = write!(s, "\t{v}");
                    }
                    None => s.push_str("\tNaN"),
                }
            }
            let mean = if row.is_empty() { 0.0 } else { row.iter().sum::<f64>() / row.len() as f64 };
            let _ = writeln!(s, "\t{}", round6(mean));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub metric: String,
    pub task: String,
    pub value: f64,
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "metric,task,value")) => {}
        _ => return Err(Error::Format("missing `metric,task,value` header".into())),
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let parts: Vec<&str> = l.split(',').collect();
            let [metric, task, value] = parts[..] else {
                return Err(Error::Parse {
                    line: i + 1,
                    message: "expected three fields".into(),
                });
            };
            Ok(CsvRow {
                metric: metric.to_string(),
                task: task.to_string(),
                value: value.parse().map_err(|_| Error::Parse {
                    line: i + 1,
                    message: format!("bad value `{value}`"),
                })?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
    Tsv,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
            ReportFormat::Tsv => "tsv",
        }
    }
}

pub fn serialize_report(report: &MetricsReport, path: &Path, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Json => report.to_json()?,
        ReportFormat::Csv => report.to_csv(),
        ReportFormat::Tsv => report.to_tsv(),
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_report(path: &Path) -> Result<MetricsReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    MetricsReport::from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn registry(kinds: &[(usize, ClassKind, usize)]) -> BTreeMap<usize, ClassInfo> {
        kinds.iter().map(|&(c, kind, task)| (c, ClassInfo { kind, task })).collect()
    }

    #[test]
    fn tag_accuracy_known_right_novel_wrong() {
        let reg = registry(&[(0, ClassKind::Known, 0), (1, ClassKind::Novel, 0)]);
        let mut preds = vec![0; 8];
        let mut truths = vec![0; 8];
        preds.extend([0, 0]);
        truths.extend([1, 1]);
        let t = tag_accuracy(&preds, &truths, &reg);
        assert_eq!((t.all, t.known, t.novel), (0.8, 1.0, 0.0));
    }

    #[test]
    fn novel_cluster_ids_are_matched() {
        let reg = registry(&[(0, ClassKind::Known, 0), (1, ClassKind::Novel, 0), (2, ClassKind::Novel, 0)]);
        let preds = [0, 1_000_001, 1_000_000, 1_000_000];
        let truths = [0, 1, 2, 2];
        let t = tag_accuracy(&preds, &truths, &reg);
        assert_eq!((t.all, t.known, t.novel), (1.0, 1.0, 1.0));
    }

    #[test]
    fn forgetting_and_plasticity_closed_forms() {
        let a = vec![vec![0.8], vec![0.6, 0.7]];
        assert!((forgetting(&a).unwrap() - 0.2).abs() < 1e-12);
        assert!((plasticity(&a).unwrap() - 0.7).abs() < 1e-12);
        let rising = vec![vec![0.5], vec![0.6, 0.7], vec![0.7, 0.8, 0.9]];
        assert_eq!(forgetting(&rising), Some(0.0));
        let p = vec![vec![0.1], vec![0.2, 0.7], vec![0.3, 0.4, 0.5]];
        assert!((plasticity(&p).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(forgetting(&[vec![0.5]]), None);
        assert_eq!(plasticity(&[vec![0.5]]), None);
    }

    #[test]
    fn confusion_of_last_task_predictions_is_one_column() {
        let reg = registry(&[(0, ClassKind::Known, 0), (1, ClassKind::Known, 1), (2, ClassKind::Known, 2)]);
        let store = CentroidStore::new();
        let m = task_confusion(&[2, 2, 2], &[0, 1, 2], &reg, &store, 3);
        assert_eq!(m, vec![vec![0, 0, 1], vec![0, 0, 1], vec![0, 0, 1]]);
        let d = task_confusion(&[0, 1, 2], &[0, 1, 2], &reg, &store, 3);
        assert_eq!(d, vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]]);
    }

    fn sample_report() -> MetricsReport {
        MetricsReport {
            config: MethodConfig::camp().resolved(),
            acc_matrix: vec![vec![0.9], vec![0.81234567, 0.7]],
            tag: TagAccuracy {
                all: 0.75,
                known: 0.8,
                novel: 0.55,
            },
            forgetting: Some(0.1),
            plasticity: Some(0.7),
            centroid_distances: vec![CentroidDistances {
                task: 1,
                known_before: Some(2.5),
                known_after: Some(0.5),
                novel_before: None,
                novel_after: None,
                excluded: vec![],
            }],
            task_confusion: vec![vec![5, 1], vec![0, 6]],
        }
    }

    #[test]
    fn json_round_trip_and_stability() {
        let r = sample_report();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        serialize_report(&r, &p, ReportFormat::Json).unwrap();
        assert_eq!(load_report(&p).unwrap(), r.rounded());
        assert_eq!(r.to_json().unwrap(), r.to_json().unwrap());
        assert!(r.to_json().unwrap().contains("0.812346"));
    }

    #[test]
    fn csv_row_count_and_round_trip() {
        let r = sample_report();
        let rows = parse_csv(&r.to_csv()).unwrap();
        // 5 scalars, 2 distances, 3 accuracy entries, 4 confusion cells
        assert_eq!(rows.len(), 5 + 2 + 3 + 4);
        assert_eq!(rows, r.csv_rows());
    }

    #[test]
    fn tsv_marks_missing_entries() {
        let t = sample_report().to_tsv();
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "# after\ttask_0\ttask_1\tmean");
        assert_eq!(lines[1], "0\t0.9\tNaN\t0.9");
    }
}
