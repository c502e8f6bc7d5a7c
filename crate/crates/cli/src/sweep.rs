//! Cross-product sweeps over method settings.
//!
//! Every cell of the product of the configured axes is run once per replicate
//! seed. Cells run concurrently on a pool of `jobs` threads, but rows are
//! always reported in axis order. A failing run is recorded in its row and the
//! sweep carries on.

use std::fmt::{self, Debug, Write as _};
use std::path::PathBuf;

use gccd_core::adaptation::{AdapterKind, AdapterSpec};
use gccd_core::engine::{run_scenario, Distiller, MethodConfig};
use gccd_core::eval::{MetricsReport, ReportFormat};
use log::{info, warn};

use crate::config::SweepSection;
use crate::table::{fmt_metric, Table};
use crate::{write_report, CliError, Phase, RunConfig};

/// One point of the axis product. `None` keeps the configured value.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Cell {
    pub distiller: Option<Distiller>,
    pub adapter: Option<AdapterKind>,
    pub alpha: Option<f64>,
    pub exemplars_per_class: Option<usize>,
}

impl Cell {
    pub fn apply(&self, base: &MethodConfig) -> MethodConfig {
        let mut cfg = base.clone();
        if let Some(d) = self.distiller {
            cfg.distiller = d;
        }
        if let Some(kind) = self.adapter {
            cfg.adapter = Some(AdapterSpec {
                kind,
                ..base.adapter.unwrap_or_default()
            });
        }
        if let Some(a) = self.alpha {
            cfg.alpha = Some(a);
        }
        if let Some(m) = self.exemplars_per_class {
            cfg.exemplars_per_class = m;
        }
        cfg
    }

    /// File-name safe label.
    pub fn slug(&self) -> String {
        let s = self.to_string();
        if s.is_empty() {
            "base".into()
        } else {
            s.replace('=', "-").replace(',', "_")
        }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if let Some(d) = self.distiller {
            parts.push(format!("distiller={}", d.name()));
        }
        if let Some(a) = self.adapter {
            parts.push(format!("adapter={}", a.name()));
        }
        if let Some(a) = self.alpha {
            parts.push(format!("alpha={a}"));
        }
        if let Some(m) = self.exemplars_per_class {
            parts.push(format!("m={m}"));
        }
        f.write_str(&parts.join(","))
    }
}

fn dedup<T: PartialEq + Debug + Clone>(axis: &str, values: &[T]) -> Vec<T> {
    let mut out: Vec<T> = Vec::with_capacity(values.len());
    for v in values {
        if out.contains(v) {
            warn!("sweep axis {axis}: dropping duplicate value {v:?}");
        } else {
            out.push(v.clone());
        }
    }
    out
}

fn axis<T: Copy>(values: Vec<T>) -> Vec<Option<T>> {
    if values.is_empty() {
        vec![None]
    } else {
        values.into_iter().map(Some).collect()
    }
}

/// Deduplicated cells in axis order: distiller, adapter, alpha, exemplars.
pub fn expand(axes: &SweepSection) -> Vec<Cell> {
    let distillers = axis(dedup("distiller", &axes.distiller));
    let adapters = axis(dedup("adapter", &axes.adapter));
    let alphas = axis(dedup("alpha", &axes.alpha));
    let exemplars = axis(dedup("exemplars_per_class", &axes.exemplars_per_class));
    let mut cells = Vec::new();
    for &distiller in &distillers {
        for &adapter in &adapters {
            for &alpha in &alphas {
                for &exemplars_per_class in &exemplars {
                    cells.push(Cell {
                        distiller,
                        adapter,
                        alpha,
                        exemplars_per_class,
                    });
                }
            }
        }
    }
    cells
}

/// Seed-averaged results of one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub cell: Cell,
    pub completed: usize,
    pub all: Option<f64>,
    pub known: Option<f64>,
    pub novel: Option<f64>,
    pub forgetting: Option<f64>,
    pub plasticity: Option<f64>,
    /// `(seed, message)` of every failed run.
    pub failures: Vec<(u64, String)>,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl SweepRow {
    fn aggregate(cell: Cell, runs: Vec<(u64, Result<MetricsReport, String>)>) -> Self {
        let ok: Vec<&MetricsReport> = runs.iter().filter_map(|(_, r)| r.as_ref().ok()).collect();
        Self {
            cell,
            completed: ok.len(),
            all: mean(ok.iter().map(|r| Some(r.tag.all))),
            known: mean(ok.iter().map(|r| Some(r.tag.known))),
            novel: mean(ok.iter().map(|r| Some(r.tag.novel))),
            forgetting: mean(ok.iter().map(|r| r.forgetting)),
            plasticity: mean(ok.iter().map(|r| r.plasticity)),
            failures: runs.into_iter().filter_map(|(s, r)| r.err().map(|e| (s, e))).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub files: Vec<PathBuf>,
}

impl SweepOutcome {
    pub fn failed_runs(&self) -> usize {
        self.rows.iter().map(|r| r.failures.len()).sum()
    }

    pub fn table(&self) -> String {
        let mut t = Table::new(["cell", "runs", "all", "known", "novel", "forgetting", "plasticity"]);
        for r in &self.rows {
            let label = r.cell.to_string();
            t.row([
                if label.is_empty() { "base".into() } else { label },
                format!("{}/{}", r.completed, r.completed + r.failures.len()),
                fmt_metric(r.all),
                fmt_metric(r.known),
                fmt_metric(r.novel),
                fmt_metric(r.forgetting),
                fmt_metric(r.plasticity),
            ]);
        }
        t.render()
    }

    /// Tab-separated aggregate with one row per cell.
    pub fn to_tsv(&self) -> String {
        let na = |v: Option<f64>| v.map_or_else(|| "NaN".to_string(), |v| format!("{v:.6}"));
        let mut out = String::from("distiller\tadapter\talpha\texemplars\truns\tfailed\tall\tknown\tnovel\tforgetting\tplasticity\n");
        for r in &self.rows {
            let c = &r.cell;
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                c.distiller.map_or("-", Distiller::name),
                c.adapter.map_or("-", AdapterKind::name),
                c.alpha.map_or_else(|| "-".into(), |a| a.to_string()),
                c.exemplars_per_class.map_or_else(|| "-".into(), |m| m.to_string()),
                r.completed,
                r.failures.len(),
                na(r.all),
                na(r.known),
                na(r.novel),
                na(r.forgetting),
                na(r.plasticity),
            )
            .expect("string write");
        }
        out
    }
}

/// Run every cell of `cfg.sweep` on up to `jobs` threads.
pub fn cmd_sweep(cfg: &RunConfig, jobs: usize) -> Result<SweepOutcome, CliError> {
    let cells = expand(&cfg.sweep);
    let seeds = if cfg.sweep.seeds.is_empty() {
        vec![cfg.seed]
    } else {
        dedup("seeds", &cfg.sweep.seeds)
    };
    let scenarios = seeds
        .iter()
        .map(|&seed| RunConfig { seed, ..cfg.clone() }.build_scenario())
        .collect::<Result<Vec<_>, _>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {jobs} worker threads: {e}")))?;

    let work: Vec<(usize, usize)> = (0..cells.len()).flat_map(|c| (0..seeds.len()).map(move |s| (c, s))).collect();
    let results: Vec<Result<MetricsReport, String>> = pool.install(|| {
        use rayon::prelude::*;
        work.par_iter()
            .map(|&(c, s)| {
                let method = cells[c].apply(&cfg.method);
                let out = method
                    .validate()
                    .and_then(|_| run_scenario(&scenarios[s], &method, seeds[s]))
                    .map_err(|e| e.to_string());
                match &out {
                    Ok(r) => info!("cell {} seed {}: all {:.4}", cells[c], seeds[s], r.tag.all),
                    Err(e) => warn!("cell {} seed {} failed: {e}", cells[c], seeds[s]),
                }
                out
            })
            .collect()
    });

    let cell_dir = cfg.output.dir.join("cells");
    let mut files = Vec::new();
    let mut results = results.into_iter();
    let mut rows = Vec::with_capacity(cells.len());
    for cell in &cells {
        let runs: Vec<(u64, Result<MetricsReport, String>)> =
            seeds.iter().map(|&s| (s, results.next().expect("one result per run"))).collect();
        for (seed, run) in &runs {
            if let Ok(report) = run {
                let stem = format!("{}_seed{seed}", cell.slug());
                files.extend(write_report(report, &cell_dir, &stem, &[ReportFormat::Json])?);
            }
        }
        rows.push(SweepRow::aggregate(*cell, runs));
    }
    let outcome = SweepOutcome { rows, files };
    let path = cfg.output.dir.join("sweep.tsv");
    std::fs::create_dir_all(&cfg.output.dir)
        .and_then(|_| std::fs::write(&path, outcome.to_tsv()))
        .map_err(|e| CliError::Runtime {
            phase: Phase::Output,
            source: gccd_core::Error::Io {
                path: path.clone(),
                source: e,
            },
        })?;
    let mut outcome = outcome;
    outcome.files.push(path);
    Ok(outcome)
}
