//! Evaluation records, method comparison tables and heatmap export.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use mop_core::eval::{evaluate_plan, EvalReport};
use mop_core::moe::{CalibrationCache, MoeLayer};
use mop_core::prune::{run_method, MethodConfig, SearchOptions};
use mop_core::{Method, PruningPlan};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// One method invocation: which method, how many experts to keep, the
/// general-core size for gvp/mop and the method seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSpec {
    pub method: Method,
    pub r: usize,
    pub m: Option<usize>,
    pub seed: u64,
}

impl RunSpec {
    pub fn label(&self) -> String {
        let mut s = format!("{}_r{}", self.method, self.r);
        if let Some(m) = self.m {
            let _ = write!(s, "_m{m}");
        }
        let _ = write!(s, "_s{}", self.seed);
        s
    }
}

#[derive(Debug, Clone)]
pub struct MethodRun {
    pub spec: RunSpec,
    pub plan: PruningPlan,
    pub report: EvalReport,
    pub wall_ms: f64,
}

/// Prunes with every spec on `calibration` and evaluates on `heldout`.
/// Runs may execute concurrently; the result follows the order of `specs`.
pub fn compare_methods(
    layer: &MoeLayer,
    calibration: &CalibrationCache,
    heldout: &CalibrationCache,
    specialist_domain: Option<&[Option<usize>]>,
    specs: &[RunSpec],
    opts: SearchOptions,
) -> anyhow::Result<Vec<MethodRun>> {
    anyhow::ensure!(!specs.is_empty(), "no method configurations to compare");
    specs
        .par_iter()
        .map(|spec| {
            let start = Instant::now();
            let cfg = MethodConfig {
                method: spec.method,
                r: spec.r,
                m: spec.m,
                seed: spec.seed,
            };
            let plan = run_method(calibration, layer, &cfg, opts)
                .with_context(|| format!("running {}", spec.label()))?;
            let wall_ms = start.elapsed().as_secs_f64() * 1e3;
            let report = evaluate_plan(layer, &plan, heldout, specialist_domain)
                .with_context(|| format!("evaluating {}", spec.label()))?;
            Ok(MethodRun {
                spec: *spec,
                plan,
                report,
                wall_ms,
            })
        })
        .collect()
}

/// Serialised form of an [`EvalReport`]. `wall_ms` is the only field that
/// varies between identical runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportRecord {
    pub label: String,
    pub method: String,
    pub r: usize,
    pub m: Option<usize>,
    pub k: Option<usize>,
    pub seed: Option<u64>,
    pub kept: Vec<usize>,
    pub n_tokens: usize,
    pub overall_loss: f64,
    pub per_domain_loss: Vec<f64>,
    pub domain_sizes: Vec<usize>,
    pub worst_domain_loss: f64,
    pub mean_domain_loss: f64,
    pub coverage: Option<f64>,
    /// `heatmap[domain][layer][slot]`, slots in `kept` order.
    pub heatmap: Vec<Vec<Vec<f64>>>,
    pub wall_ms: Option<f64>,
}

impl ReportRecord {
    pub fn new(label: impl Into<String>, report: &EvalReport, wall_ms: Option<f64>) -> Self {
        Self {
            label: label.into(),
            method: report.method.as_str().to_string(),
            r: report.params.r,
            m: report.params.m,
            k: report.params.k,
            seed: report.params.seed,
            kept: report.kept.clone(),
            n_tokens: report.n_tokens,
            overall_loss: report.overall_loss,
            per_domain_loss: report.per_domain_loss.clone(),
            domain_sizes: report.domain_sizes.clone(),
            worst_domain_loss: report.worst_domain_loss,
            mean_domain_loss: report.mean_domain_loss(),
            coverage: report.coverage,
            heatmap: report.heatmap.clone(),
            wall_ms,
        }
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing report {}", path.display()))
    }

    /// Per-domain losses as CSV, one row per domain plus an `overall` row.
    pub fn loss_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["scope", "tokens", "loss", "loss_per_token"])
            .unwrap();
        let rows = self
            .per_domain_loss
            .iter()
            .zip(&self.domain_sizes)
            .enumerate()
            .map(|(d, (l, &n))| (format!("domain_{d}"), n, *l))
            .chain([("overall".to_string(), self.n_tokens, self.overall_loss)]);
        for (scope, n, loss) in rows {
            w.write_record([
                scope,
                n.to_string(),
                loss.to_string(),
                (loss / n as f64).to_string(),
            ])
            .unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub label: String,
    pub method: String,
    pub r: usize,
    pub m: Option<usize>,
    pub seed: Option<u64>,
    pub kept: Vec<usize>,
    pub overall_loss: f64,
    pub mean_domain_loss: f64,
    pub worst_domain_loss: f64,
    pub coverage: Option<f64>,
    pub wall_ms: Option<f64>,
    /// Differences against the first row.
    pub delta_overall: f64,
    pub delta_worst: f64,
    pub delta_coverage: Option<f64>,
}

pub fn comparison_rows(records: &[ReportRecord]) -> Vec<ComparisonRow> {
    let Some(base) = records.first() else {
        return Vec::new();
    };
    records
        .iter()
        .map(|r| ComparisonRow {
            label: r.label.clone(),
            method: r.method.clone(),
            r: r.r,
            m: r.m,
            seed: r.seed,
            kept: r.kept.clone(),
            overall_loss: r.overall_loss,
            mean_domain_loss: r.mean_domain_loss,
            worst_domain_loss: r.worst_domain_loss,
            coverage: r.coverage,
            wall_ms: r.wall_ms,
            delta_overall: r.overall_loss - base.overall_loss,
            delta_worst: r.worst_domain_loss - base.worst_domain_loss,
            delta_coverage: r.coverage.zip(base.coverage).map(|(a, b)| a - b),
        })
        .collect()
}

const HEADER: [&str; 13] = [
    "label",
    "method",
    "r",
    "m",
    "kept",
    "overall_loss",
    "mean_domain_loss",
    "worst_domain_loss",
    "coverage",
    "delta_overall",
    "delta_worst",
    "delta_coverage",
    "wall_ms",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

fn kept_str(kept: &[usize]) -> String {
    kept.iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Machine-readable table; floats use their shortest round-trip form.
pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(HEADER).unwrap();
    for r in rows {
        w.write_record([
            r.label.clone(),
            r.method.clone(),
            r.r.to_string(),
            opt(r.m),
            kept_str(&r.kept),
            r.overall_loss.to_string(),
            r.mean_domain_loss.to_string(),
            r.worst_domain_loss.to_string(),
            opt(r.coverage),
            r.delta_overall.to_string(),
            r.delta_worst.to_string(),
            opt(r.delta_coverage),
            opt(r.wall_ms.map(|t| format!("{t:.3}"))),
        ])
        .unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

/// Column-aligned table for terminals.
pub fn comparison_text(rows: &[ComparisonRow]) -> String {
    let f = |v: f64| format!("{v:.6}");
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.label.clone(),
                r.method.clone(),
                r.r.to_string(),
                opt(r.m),
                kept_str(&r.kept),
                f(r.overall_loss),
                f(r.mean_domain_loss),
                f(r.worst_domain_loss),
                opt(r.coverage.map(|c| format!("{c:.3}"))),
                format!("{:+.6}", r.delta_overall),
                format!("{:+.6}", r.delta_worst),
                opt(r.delta_coverage.map(|c| format!("{c:+.3}"))),
                opt(r.wall_ms.map(|t| format!("{t:.1}"))),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..HEADER.len())
        .map(|c| {
            cells
                .iter()
                .map(|row| row[c].len())
                .chain([HEADER[c].len()])
                .max()
                .unwrap()
        })
        .collect();
    let mut out = String::new();
    let mut line = |row: &[&str]| {
        let parts: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            // text columns flush left, numbers flush right
            .map(|(c, (v, &w))| {
                if c < 2 || c == 4 {
                    format!("{v:<w$}")
                } else {
                    format!("{v:>w$}")
                }
            })
            .collect();
        out.push_str(parts.join("  ").trim_end());
        out.push('\n');
    };
    line(&HEADER);
    for row in &cells {
        line(&row.iter().map(String::as_str).collect::<Vec<_>>());
    }
    out
}

/// Writes `<prefix>domain_<d>.csv` for every domain of the heatmap: one row
/// per layer, one column per retained expert, six decimals. Returns the
/// written paths.
pub fn export_heatmap_csv(record: &ReportRecord, prefix: &Path) -> anyhow::Result<Vec<PathBuf>> {
    anyhow::ensure!(
        !record.heatmap.is_empty(),
        "report `{}` has no heatmap",
        record.label
    );
    let mut written = Vec::with_capacity(record.heatmap.len());
    for (d, layers) in record.heatmap.iter().enumerate() {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header: Vec<String> = std::iter::once("layer".to_string())
            .chain(record.kept.iter().map(|e| format!("expert_{e}")))
            .collect();
        w.write_record(&header)?;
        for (l, row) in layers.iter().enumerate() {
            anyhow::ensure!(
                row.len() == record.kept.len(),
                "heatmap row has {} cells for {} retained experts",
                row.len(),
                record.kept.len()
            );
            let cells = std::iter::once(l.to_string()).chain(row.iter().map(|v| format!("{v:.6}")));
            w.write_record(cells)?;
        }
        let mut name = prefix.as_os_str().to_owned();
        name.push(format!("domain_{d}.csv"));
        let path = PathBuf::from(name);
        std::fs::write(&path, w.into_inner()?)
            .with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
    }
    Ok(written)
}

/// Every `*.report.json` in `dir`, sorted by file name.
pub fn load_reports(dir: &Path) -> anyhow::Result<Vec<ReportRecord>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    paths.retain(|p| p.to_str().is_some_and(|s| s.ends_with(".report.json")));
    paths.sort();
    paths.iter().map(|p| ReportRecord::load(p)).collect()
}
