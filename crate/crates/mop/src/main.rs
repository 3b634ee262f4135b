use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mop_core::eval::evaluate_plan;
use mop_core::prune::{default_m, run_method, MethodConfig, SearchOptions};

use mop::codec::{self, ModelArchive, PlanRecord};
use mop::config::{ExperimentConfig, MethodChoice};
use mop::output::{record_provenance, Outputs, ProvenanceEntry};
use mop::pipeline::{self, Split};
use mop::report::ReportRecord;
use mop::report::{
    comparison_csv, comparison_rows, comparison_text, export_heatmap_csv, load_reports,
};
use mop::store::write_archive;

/// Expert pruning experiments on synthetic mixture-of-experts layers.
#[derive(Parser)]
#[command(name = "mop", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted layer archive.
    GenModel {
        #[command(flatten)]
        config: ConfigArgs,
        /// Archive path prefix; writes `<out>.json` and `<out>.bin`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a calibration or held-out cache for a model archive.
    GenCalib {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Calibration)]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prune a model on a calibration cache and write the plan.
    Prune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        /// random, frequency, enum, enum_exhaustive, enum_greedy, gvp or mop.
        #[arg(long)]
        method: MethodChoice,
        #[arg(long)]
        r: usize,
        /// General-core size for gvp and mop; defaults to ceil(r/2).
        #[arg(long)]
        m: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = mop_core::prune::DEFAULT_BUDGET)]
        budget: u64,
        /// Plan file; diagnostics go next to it as `<stem>.diag.{json,bin}`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a plan on a held-out cache.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        heldout: PathBuf,
        /// Output directory for the report, loss CSV and heatmaps.
        #[arg(long)]
        out: PathBuf,
        /// Report name; defaults to the plan file stem.
        #[arg(long)]
        label: Option<String>,
    },
    /// Aggregate every report in a directory into one comparison table.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Generate, prune with every configured method, evaluate and report.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Calibration,
    Heldout,
}

/// Config file plus per-field overrides; flags win over the file.
#[derive(Args)]
struct ConfigArgs {
    /// JSON experiment config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model_seed: Option<u64>,
    #[arg(long)]
    n_domains: Option<usize>,
    #[arg(long)]
    specialists_per_domain: Option<usize>,
    #[arg(long)]
    n_generalists: Option<usize>,
    #[arg(long)]
    duplicate_noise: Option<f32>,
    #[arg(long)]
    domain_separation: Option<f32>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    ff_dim: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    calib_tokens: Option<usize>,
    #[arg(long)]
    calib_seed: Option<u64>,
    #[arg(long)]
    heldout_tokens: Option<usize>,
    #[arg(long)]
    heldout_seed: Option<u64>,
    #[arg(long)]
    budget: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($flag:ident => $($field:ident).+) => {
                if let Some(v) = &self.$flag {
                    c.$($field).+ = v.clone();
                }
            };
        }
        set!(model_seed => model.seed);
        set!(n_domains => model.n_domains);
        set!(specialists_per_domain => model.specialists_per_domain);
        set!(n_generalists => model.n_generalists);
        set!(duplicate_noise => model.duplicate_noise);
        set!(domain_separation => model.domain_separation);
        set!(hidden_dim => model.hidden_dim);
        set!(ff_dim => model.ff_dim);
        set!(top_k => model.top_k);
        set!(calib_tokens => calibration.tokens_per_domain);
        set!(calib_seed => calibration.seed);
        set!(heldout_tokens => heldout.tokens_per_domain);
        set!(heldout_seed => heldout.seed);
        set!(budget => budget);
        set!(output_dir => output_dir);
        c.validate()?;
        Ok(c)
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map_or_else(String::new, |n| n.to_string_lossy().into_owned())
}

fn print_shapes(archive: &mop::store::Archive) {
    for a in &archive.arrays {
        println!("  {:<20} {:?} {:?}", a.name, a.shape, a.data.dtype());
    }
}

fn gen_model(config: &ConfigArgs, out_prefix: &Path) -> anyhow::Result<()> {
    let cfg = config.resolve()?;
    let mut out = Outputs::new();
    let dir = parent_dir(out_prefix);
    out.dir(&dir)?;
    let planted = pipeline::generate_model(&cfg.model)?;
    let model = ModelArchive {
        layer: planted.layer,
        specialist_domain: Some(planted.specialist_domain),
    };
    let archive = codec::save_model(
        &model,
        &out.archive(out_prefix),
        &pipeline::config_metadata(&cfg),
    )?;
    let entry = ProvenanceEntry::new("gen-model", Some(&cfg))
        .seed("model", cfg.model.seed)
        .outputs(&dir, out.files());
    record_provenance(&dir, &format!("gen-model:{}", file_name(out_prefix)), entry)?;
    out.commit();
    println!(
        "model {} ({} experts)",
        out_prefix.display(),
        model.layer.n_experts()
    );
    print_shapes(&archive);
    println!("config hash {}", cfg.hash());
    Ok(())
}

fn gen_calib(
    config: &ConfigArgs,
    model_path: &Path,
    split: SplitArg,
    out_prefix: &Path,
) -> anyhow::Result<()> {
    let cfg = config.resolve()?;
    let model = codec::load_model(model_path)?;
    let split = match split {
        SplitArg::Calibration => Split::Calibration,
        SplitArg::Heldout => Split::Heldout,
    };
    let seed = match split {
        Split::Calibration => cfg.calibration.seed,
        Split::Heldout => cfg.heldout.seed,
    };
    let mut out = Outputs::new();
    let dir = parent_dir(out_prefix);
    out.dir(&dir)?;
    let cache = pipeline::generate_split(&cfg, &model.layer, split)?;
    let mut meta = pipeline::config_metadata(&cfg);
    meta.push(("split", split.as_str().to_string()));
    let archive = codec::save_cache(&cache, &out.archive(out_prefix), &meta)?;
    let entry = ProvenanceEntry::new("gen-calib", Some(&cfg))
        .seed(split.as_str(), seed)
        .param("model", model_path.display())
        .outputs(&dir, out.files());
    record_provenance(&dir, &format!("gen-calib:{}", file_name(out_prefix)), entry)?;
    out.commit();
    println!(
        "{} cache {} ({} tokens)",
        split.as_str(),
        out_prefix.display(),
        cache.n_tokens()
    );
    print_shapes(&archive);
    println!("config hash {}", cfg.hash());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn prune(
    model_path: &Path,
    cache_path: &Path,
    choice: MethodChoice,
    r: usize,
    m: Option<usize>,
    seed: u64,
    budget: u64,
    out_path: &Path,
) -> anyhow::Result<()> {
    let model = codec::load_model(model_path)?;
    let cache = codec::load_cache(cache_path)?;
    let method = choice.resolve(model.layer.n_experts(), r, budget);
    if m.is_some() && !method.uses_m() {
        bail!("--m only applies to gvp and mop");
    }
    let m = method.uses_m().then(|| m.unwrap_or_else(|| default_m(r)));
    let opts = SearchOptions {
        budget,
        ..SearchOptions::default()
    };
    let plan = run_method(
        &cache,
        &model.layer,
        &MethodConfig { method, r, m, seed },
        opts,
    )?;

    let mut out = Outputs::new();
    let dir = parent_dir(out_path);
    out.dir(&dir)?;
    let mut record = PlanRecord::from_plan(&plan);
    record
        .metadata
        .insert("model".into(), model_path.display().to_string());
    record
        .metadata
        .insert("cache".into(), cache_path.display().to_string());
    codec::save_plan(&record, &out.file(out_path))?;
    let diag_prefix = out_path.with_extension("diag");
    write_archive(
        &codec::diagnostics_archive(&plan),
        &out.archive(&diag_prefix),
    )?;
    let entry = ProvenanceEntry::new("prune", None)
        .seed("method", seed)
        .param("method", method)
        .param("r", r)
        .param("m", m.map_or_else(String::new, |m| m.to_string()))
        .param("budget", budget)
        .param("model", model_path.display())
        .param("cache", cache_path.display())
        .outputs(&dir, out.files());
    record_provenance(&dir, &format!("prune:{}", file_name(out_path)), entry)?;
    out.commit();
    println!("{}", plan.summary());
    if let Some(search) = record.search {
        println!("search {search}, {} subsets examined", record.losses.len());
    }
    Ok(())
}

fn eval(
    model_path: &Path,
    plan_path: &Path,
    heldout_path: &Path,
    dir: &Path,
    label: Option<String>,
) -> anyhow::Result<()> {
    let model = codec::load_model(model_path)?;
    let plan = codec::load_plan(plan_path)?
        .to_plan()
        .with_context(|| format!("plan {}", plan_path.display()))?;
    let heldout = codec::load_cache(heldout_path)?;
    let report = evaluate_plan(
        &model.layer,
        &plan,
        &heldout,
        model.specialist_domain.as_deref(),
    )?;
    let label = label.unwrap_or_else(|| {
        let name = file_name(plan_path);
        name.strip_suffix(".plan.json")
            .or_else(|| name.strip_suffix(".json"))
            .unwrap_or(&name)
            .to_string()
    });
    let record = ReportRecord::new(&label, &report, None);

    let mut out = Outputs::new();
    out.dir(dir)?;
    record.save(&out.file(dir.join(format!("{label}.report.json"))))?;
    std::fs::write(
        out.file(dir.join(format!("{label}.csv"))),
        record.loss_csv(),
    )?;
    for f in export_heatmap_csv(&record, &dir.join(format!("{label}_")))? {
        out.file(f);
    }
    let entry = ProvenanceEntry::new("eval", None)
        .param("model", model_path.display())
        .param("plan", plan_path.display())
        .param("heldout", heldout_path.display())
        .outputs(dir, out.files());
    record_provenance(dir, &format!("eval:{label}"), entry)?;
    out.commit();
    println!(
        "{label}: overall {:.6}, worst domain {:.6}, coverage {}",
        record.overall_loss,
        record.worst_domain_loss,
        record
            .coverage
            .map_or_else(|| "n/a".into(), |c| format!("{c:.3}"))
    );
    Ok(())
}

fn report(dir: &Path) -> anyhow::Result<()> {
    let records = load_reports(dir)?;
    if records.is_empty() {
        bail!("no *.report.json files in {}", dir.display());
    }
    let rows = comparison_rows(&records);
    let table = comparison_text(&rows);
    let mut out = Outputs::new();
    std::fs::write(out.file(dir.join("comparison.txt")), &table)?;
    std::fs::write(out.file(dir.join("comparison.csv")), comparison_csv(&rows))?;
    let entry = ProvenanceEntry::new("report", None)
        .param("reports", records.len())
        .outputs(dir, out.files());
    record_provenance(dir, "report", entry)?;
    out.commit();
    print!("{table}");
    Ok(())
}

fn run(config: &ConfigArgs) -> anyhow::Result<()> {
    let cfg = config.resolve()?;
    let summary = pipeline::run_experiment(&cfg, &cfg.output_dir)?;
    print!("{}", summary.table);
    println!(
        "{} files written to {}",
        summary.files.len() + 1,
        cfg.output_dir.display()
    );
    println!("config hash {}", cfg.hash());
    Ok(())
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("MOP_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("MOP_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::GenModel { config, out } => gen_model(config, out),
        Command::GenCalib {
            config,
            model,
            split,
            out,
        } => gen_calib(config, model, *split, out),
        Command::Prune {
            model,
            cache,
            method,
            r,
            m,
            seed,
            budget,
            out,
        } => prune(model, cache, *method, *r, *m, *seed, *budget, out),
        Command::Eval {
            model,
            plan,
            heldout,
            out,
            label,
        } => eval(model, plan, heldout, out, label.clone()),
        Command::Report { dir } => report(dir),
        Command::Run { config } => run(config),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
