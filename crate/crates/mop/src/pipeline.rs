//! Generation helpers and the end-to-end experiment run.

use std::path::{Path, PathBuf};

use anyhow::Context;
use mop_core::moe::{CalibrationCache, MoeLayer};
use mop_core::planted::{generate_calibration, generate_layer, PlantedLayer};
use mop_core::prune::{default_m, SearchOptions};

use crate::codec::{self, ModelArchive, PlanRecord};
use crate::config::{ExperimentConfig, MethodChoice, ModelConfig};
use crate::output::{record_provenance, Outputs, ProvenanceEntry};
use crate::report::{
    compare_methods, comparison_csv, comparison_rows, comparison_text, ComparisonRow,
};
use crate::report::{export_heatmap_csv, ReportRecord, RunSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Calibration,
    Heldout,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Calibration => "calibration",
            Split::Heldout => "heldout",
        }
    }
}

pub fn generate_model(cfg: &ModelConfig) -> anyhow::Result<PlantedLayer> {
    Ok(generate_layer(&cfg.spec(), cfg.shape())?)
}

pub fn generate_split(
    cfg: &ExperimentConfig,
    layer: &MoeLayer,
    split: Split,
) -> anyhow::Result<CalibrationCache> {
    let s = match split {
        Split::Calibration => &cfg.calibration,
        Split::Heldout => &cfg.heldout,
    };
    Ok(generate_calibration(
        layer,
        &cfg.model.spec(),
        s.tokens_per_domain,
        s.seed,
    )?)
}

/// Archive metadata shared by everything generated from one config.
pub fn config_metadata(cfg: &ExperimentConfig) -> Vec<(&'static str, String)> {
    vec![
        ("config_hash", cfg.hash()),
        ("model_seed", cfg.model.seed.to_string()),
        ("calibration_seed", cfg.calibration.seed.to_string()),
        ("heldout_seed", cfg.heldout.seed.to_string()),
    ]
}

/// Expands the config's method list into individual runs, resolving
/// `enum` by the budget and defaulting `m` to `⌈r/2⌉` for gvp and mop.
pub fn run_specs(cfg: &ExperimentConfig) -> anyhow::Result<Vec<RunSpec>> {
    let n = cfg.model.n_experts();
    let mut specs = Vec::new();
    for e in &cfg.methods {
        let choice: MethodChoice = e.method.parse().map_err(anyhow::Error::msg)?;
        let method = choice.resolve(n, e.r, cfg.budget);
        let m = method
            .uses_m()
            .then(|| e.m.unwrap_or_else(|| default_m(e.r)));
        specs.extend(e.seeds.iter().map(|&seed| RunSpec {
            method,
            r: e.r,
            m,
            seed,
        }));
    }
    Ok(specs)
}

#[derive(Debug, Clone)]
pub struct ExperimentSummary {
    pub rows: Vec<ComparisonRow>,
    pub table: String,
    pub files: Vec<PathBuf>,
}

/// Generates the model and both splits, runs every configured method,
/// and writes archives, plans, reports, heatmaps and comparison tables
/// under `out_dir`. On error nothing written by this call is left behind.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> anyhow::Result<ExperimentSummary> {
    cfg.validate()?;
    let mut out = Outputs::new();
    for sub in ["", "plans", "reports", "heatmaps"] {
        out.dir(&out_dir.join(sub))?;
    }
    let meta = config_metadata(cfg);

    let planted = generate_model(&cfg.model).context("generating model")?;
    let model = ModelArchive {
        layer: planted.layer,
        specialist_domain: Some(planted.specialist_domain),
    };
    codec::save_model(&model, &out.archive(&out_dir.join("model")), &meta)?;
    let calibration = generate_split(cfg, &model.layer, Split::Calibration)?;
    codec::save_cache(
        &calibration,
        &out.archive(&out_dir.join("calibration")),
        &meta,
    )?;
    let heldout = generate_split(cfg, &model.layer, Split::Heldout)?;
    codec::save_cache(&heldout, &out.archive(&out_dir.join("heldout")), &meta)?;

    let specs = run_specs(cfg)?;
    let opts = SearchOptions {
        budget: cfg.budget,
        ..SearchOptions::default()
    };
    let runs = compare_methods(
        &model.layer,
        &calibration,
        &heldout,
        model.specialist_domain.as_deref(),
        &specs,
        opts,
    )?;

    let mut records = Vec::with_capacity(runs.len());
    for (i, run) in runs.iter().enumerate() {
        let label = format!("{i:02}_{}", run.spec.label());
        let mut plan = PlanRecord::from_plan(&run.plan);
        plan.metadata.insert("config_hash".into(), cfg.hash());
        codec::save_plan(
            &plan,
            &out.file(out_dir.join(format!("plans/{label}.plan.json"))),
        )?;
        let mut diag = codec::diagnostics_archive(&run.plan);
        diag.metadata
            .extend(meta.iter().map(|(k, v)| (k.to_string(), v.clone())));
        let diag_path = out.archive(&out_dir.join(format!("plans/{label}.diag")));
        crate::store::write_archive(&diag, &diag_path)?;

        let record = ReportRecord::new(&label, &run.report, Some(run.wall_ms));
        record.save(&out.file(out_dir.join(format!("reports/{label}.report.json"))))?;
        std::fs::write(
            out.file(out_dir.join(format!("reports/{label}.csv"))),
            record.loss_csv(),
        )?;
        for f in export_heatmap_csv(&record, &out_dir.join(format!("heatmaps/{label}_")))? {
            out.file(f);
        }
        records.push(record);
    }

    let rows = comparison_rows(&records);
    let table = comparison_text(&rows);
    std::fs::write(out.file(out_dir.join("comparison.txt")), &table)?;
    std::fs::write(
        out.file(out_dir.join("comparison.csv")),
        comparison_csv(&rows),
    )?;

    let entry = ProvenanceEntry::new("run", Some(cfg))
        .seed("model", cfg.model.seed)
        .seed("calibration", cfg.calibration.seed)
        .seed("heldout", cfg.heldout.seed)
        .outputs(out_dir, out.files());
    let files = out.files().to_vec();
    record_provenance(out_dir, "run", entry)?;
    out.commit();
    Ok(ExperimentSummary { rows, table, files })
}
