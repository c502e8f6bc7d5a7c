//! Fixed-width text tables for standard output.

use gccd_core::eval::MetricsReport;

/// Left-aligned first column, right-aligned value columns.
#[derive(Debug, Clone, Default)]
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn row<S: Into<String>>(&mut self, cells: impl IntoIterator<Item = S>) {
        self.rows.push(cells.into_iter().map(Into::into).collect());
    }

    pub fn render(&self) -> String {
        let cols = self.rows.iter().map(Vec::len).chain([self.header.len()]).max().unwrap_or(0);
        let mut widths = vec![0; cols];
        for r in std::iter::once(&self.header).chain(&self.rows) {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |r: &[String]| {
            let cells: Vec<String> = r
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    if i == 0 {
                        format!("{c:<w$}", w = widths[i])
                    } else {
                        format!("{c:>w$}", w = widths[i])
                    }
                })
                .collect();
            cells.join("  ").trim_end().to_string()
        };
        let mut out = line(&self.header);
        out.push('\n');
        out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * cols.saturating_sub(1)));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }
}

pub fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

/// Final all/known/novel accuracy, forgetting and plasticity.
pub fn summary(report: &MetricsReport) -> String {
    let mut t = Table::new(["metric", "value"]);
    t.row(["tag_all".to_string(), fmt_metric(Some(report.tag.all))]);
    t.row(["tag_known".to_string(), fmt_metric(Some(report.tag.known))]);
    t.row(["tag_novel".to_string(), fmt_metric(Some(report.tag.novel))]);
    t.row(["forgetting".to_string(), fmt_metric(report.forgetting)]);
    t.row(["plasticity".to_string(), fmt_metric(report.plasticity)]);
    t.render()
}

/// Accuracy on each task after each training step.
pub fn acc_matrix(report: &MetricsReport) -> String {
    let n = report.acc_matrix.len();
    let mut t = Table::new(std::iter::once("after".to_string()).chain((0..n).map(|j| format!("task{j}"))));
    for (l, row) in report.acc_matrix.iter().enumerate() {
        let cells = (0..n).map(|j| row.get(j).map_or_else(|| "-".into(), |v| format!("{v:.4}")));
        t.row(std::iter::once(l.to_string()).chain(cells));
    }
    t.render()
}
