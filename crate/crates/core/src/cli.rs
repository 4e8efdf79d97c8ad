//! Command-line front end. Every command writes its outputs atomically and
//! is fully determined by its arguments, config and seed.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use indexmap::IndexMap;

use crate::config::RunConfig;
use crate::dataset::{ingest_csv, load_adjacency, split_chronological, TrafficSeries};
use crate::error::{Error, Result};
use crate::experiment::{evaluate_range, pca_embedding, train_on_series};
use crate::graph::build_adaptive_graph;
use crate::io::{read_bytes, read_to_string, write_atomic};
use crate::metrics::{HorizonReport, ReportMeta};
use crate::model::Forecaster;
use crate::pca::{EmbeddingTable, PcaProjection};
use crate::sweep::{parse_k_range, sweep_components, sweep_csv};
use crate::synth::{generate, SynthSpec};
use crate::transfer::{
    adaptation_split, comparison_csv, comparison_json, comparison_table, historical_average_baseline,
    infer_shift, run_comparison, ComparisonEntry, ShiftKind, SourceModels, TransferPlan, TransferStrategy,
};

pub const MODEL_FILE: &str = "model.stpf";
pub const PROJECTION_FILE: &str = "proj.stpj";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const TEST_REPORT_FILE: &str = "test_report.json";

/// Exit status for usage and configuration errors.
pub const EXIT_USAGE: i32 = 2;
/// Exit status for runtime and data errors.
pub const EXIT_RUNTIME: i32 = 1;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

#[derive(Debug, Parser)]
#[command(name = "stpca", version, about = "Traffic forecasting with adaptive or PCA node embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a traffic CSV and print a summary.
    Ingest(IngestArgs),
    /// Generate synthetic train and shifted series with known node roles.
    Synth(SynthArgs),
    /// Train a model from a run config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Evaluate a checkpoint on a shifted target under several strategies.
    Transfer(TransferArgs),
    /// Train one pca model per component count plus an adaptive baseline.
    SweepComponents(SweepArgs),
    /// Write embedding coordinates and optionally the adaptive graph.
    ExportEmbeddings(ExportArgs),
    /// Render report or comparison JSON.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    pub input: PathBuf,
    /// Edge list `src,dst,weight` to attach.
    #[arg(long)]
    pub adjacency: Option<PathBuf>,
    /// Write the parsed series back out in canonical form.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 40)]
    pub nodes: usize,
    #[arg(long, default_value_t = 4)]
    pub roles: usize,
    #[arg(long, default_value_t = 28)]
    pub days: usize,
    #[arg(long, default_value_t = 48)]
    pub steps_per_day: usize,
    #[arg(long, default_value_t = 0.5)]
    pub shift_fraction: f64,
    #[arg(long, default_value_t = 2.0)]
    pub noise_std: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value` override, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Overrides `output.dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalStrategy {
    /// The checkpoint's embedding as stored.
    Vanilla,
    /// Embedding slot set to zero.
    Zero,
    /// Embedding recomputed from the data's training split.
    Pca,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalRange {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Projection for `--strategy pca`.
    #[arg(long)]
    pub proj: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = EvalStrategy::Vanilla)]
    pub strategy: EvalStrategy,
    #[arg(long, value_enum, default_value_t = EvalRange::Test)]
    pub range: EvalRange,
    /// Train, validation and test fractions.
    #[arg(long, default_value = "0.6,0.2,0.2", value_parser = parse_split)]
    pub split: [f64; 3],
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ShiftArg {
    Auto,
    CrossYear,
    CrossCity,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Projection used by the pca strategy.
    #[arg(long)]
    pub proj: Option<PathBuf>,
    /// Separate checkpoint for the pca strategy, usually one trained with
    /// pca embeddings.
    #[arg(long)]
    pub pca_model: Option<PathBuf>,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long, default_value = "vanilla,zero,pca", value_delimiter = ',', value_parser = parse_strategies)]
    pub strategies: Vec<TransferStrategy>,
    /// Fit a new projection on the target's adaptation days.
    #[arg(long)]
    pub refit_projection: bool,
    #[arg(long, default_value_t = crate::transfer::DEFAULT_ADAPTATION_FRACTION)]
    pub adaptation_fraction: f64,
    #[arg(long, value_enum, default_value_t = ShiftArg::Auto)]
    pub shift: ShiftArg,
    /// Append a historical-average baseline entry.
    #[arg(long)]
    pub baseline: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub finetune_epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub finetune_lr: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write `strategy,horizon,mae,rmse,mape` rows.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Component counts, e.g. `1..8` or `2,4,8`.
    #[arg(long, default_value = "1..8")]
    pub k: String,
    /// Overrides `data.shifted`.
    #[arg(long)]
    pub shifted: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Series supplying node ids and, with `--proj`, the profiles to embed.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub proj: Option<PathBuf>,
    /// Also write the adaptive graph built from the exported embedding.
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    pub min_weight: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Text,
    Csv,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
    pub format: ReportFormat,
}

fn parse_split(s: &str) -> std::result::Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|_| "expected three comma-separated fractions".to_string())
}

fn parse_strategies(s: &str) -> std::result::Result<TransferStrategy, String> {
    s.trim().parse().map_err(|e: Error| e.to_string())
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn load_projection(path: &Path) -> Result<PcaProjection> {
    PcaProjection::from_bytes(&read_bytes(path)?)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(a) => ingest(&a),
        Command::Synth(a) => synth(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Transfer(a) => transfer(&a),
        Command::SweepComponents(a) => sweep(&a),
        Command::ExportEmbeddings(a) => export(&a),
        Command::Report(a) => report(&a),
    }
}

fn ingest(a: &IngestArgs) -> Result<()> {
    let mut series = ingest_csv(&a.input)?;
    if let Some(adj) = &a.adjacency {
        let m = load_adjacency(adj, series.node_ids())?;
        series = series.with_adjacency(m)?;
    }
    let zeros = series.values().iter().filter(|v| **v == 0.0).count();
    let summary = serde_json::json!({
        "nodes": series.num_nodes(),
        "steps": series.total_steps(),
        "interval_minutes": series.interval_minutes(),
        "steps_per_day": series.steps_per_day(),
        "start": series.start().format("%Y-%m-%dT%H:%M:%S").to_string(),
        "zero_fraction": zeros as f64 / series.values().len() as f64,
        "edges": series.adjacency().map(|m| m.iter().filter(|w| **w != 0.0).count()),
    });
    println!("{}", serde_json::to_string_pretty(&summary).expect("plain data serializes"));
    if let Some(out) = &a.out {
        series.write_csv(out)?;
    }
    Ok(())
}

fn synth(a: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        n_nodes: a.nodes,
        n_roles: a.roles,
        days: a.days,
        steps_per_day: a.steps_per_day,
        shift_fraction: a.shift_fraction,
        noise_std: a.noise_std,
        seed: a.seed,
    };
    let out = generate(&spec)?;
    out.train.write_csv(&a.out.join("train.csv"))?;
    out.shifted.write_csv(&a.out.join("shifted.csv"))?;
    write_text(&a.out.join("roles.csv"), &out.roles_csv())?;
    println!("wrote {} nodes x {} steps to {}", spec.n_nodes, out.train.total_steps(), a.out.display());
    Ok(())
}

fn load_data(cfg: &mut RunConfig) -> Result<TrafficSeries> {
    let series = ingest_csv(cfg.data_path()?)?;
    cfg.resolve(&series);
    Ok(series)
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    let series = load_data(&mut cfg)?;
    let dir = cfg.output_dir.clone();
    cfg.write_resolved(&dir)?;
    let run = train_on_series(&series, &cfg.experiment)?;
    run.model.save(&dir.join(MODEL_FILE))?;
    if let Some(p) = &run.projection {
        write_atomic(&dir.join(PROJECTION_FILE), &p.to_bytes())?;
    }
    write_text(&dir.join(TRAIN_LOG_FILE), &run.report.to_csv())?;
    let mut extra = IndexMap::new();
    extra.insert("range".into(), "test".into());
    extra.insert("best_epoch".into(), run.report.best_epoch.to_string());
    if let Some(p) = &run.projection {
        extra.insert("components".into(), p.num_components().to_string());
        extra.insert("projection".into(), p.id());
    }
    let meta = ReportMeta {
        dataset: stem(cfg.data_path()?),
        strategy: cfg.experiment.strategy.to_string(),
        seed: cfg.experiment.train.seed,
        model_id: run.model.id(),
        extra,
    };
    let rep = evaluate_range(&run.model, &series, run.splits.test.clone(), meta)?;
    write_text(&dir.join(TEST_REPORT_FILE), &rep.to_json())?;
    println!(
        "best epoch {} of {}, val MAE {:.4}, test MAE {:.4}",
        run.report.best_epoch,
        run.report.epochs.len(),
        run.report.best_val_mae,
        rep.average.mae
    );
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let source = Forecaster::load(&a.model)?;
    let data = ingest_csv(&a.data)?;
    let splits = split_chronological(data.total_steps(), a.split).map_err(|e| Error::Config(e.to_string()))?;
    let range = match a.range {
        EvalRange::Train => splits.train.clone(),
        EvalRange::Val => splits.val.clone(),
        EvalRange::Test => splits.test.clone(),
        EvalRange::All => 0..data.total_steps(),
    };
    let mut model = source.clone();
    let mut extra = IndexMap::new();
    extra.insert("range".into(), format!("{:?}", a.range).to_lowercase());
    extra.insert("checkpoint".into(), source.id());
    let strategy = match a.strategy {
        EvalStrategy::Vanilla => "vanilla",
        EvalStrategy::Zero => {
            model.set_embedding(&EmbeddingTable::zeros(data.num_nodes(), model.config().embed_dim)?)?;
            "zero"
        }
        EvalStrategy::Pca => {
            let path = a
                .proj
                .as_ref()
                .ok_or_else(|| Error::Config("--strategy pca needs --proj".into()))?;
            let proj = load_projection(path)?;
            let table = pca_embedding(&data, splits.train.clone(), model.normalizer(), &proj)?;
            model.set_embedding(&table)?;
            extra.insert("projection".into(), proj.id());
            "pca"
        }
    };
    let meta = ReportMeta {
        dataset: stem(&a.data),
        strategy: strategy.into(),
        seed: a.seed,
        model_id: model.id(),
        extra,
    };
    let rep = evaluate_range(&model, &data, range, meta)?;
    write_text(&a.out, &rep.to_json())?;
    print!("{}", rep.to_text());
    Ok(())
}

fn transfer(a: &TransferArgs) -> Result<()> {
    let base = Forecaster::load(&a.model)?;
    let pca_model = a.pca_model.as_deref().map(Forecaster::load).transpose()?;
    let projection = a.proj.as_deref().map(load_projection).transpose()?;
    let target = ingest_csv(&a.target)?;
    let sources = SourceModels {
        base: &base,
        pca_model: pca_model.as_ref(),
        projection: projection.as_ref(),
    };
    let mut plan = TransferPlan {
        source: stem(&a.model),
        target: stem(&a.target),
        adaptation_fraction: a.adaptation_fraction,
        refit_projection: a.refit_projection,
        ..TransferPlan::default()
    };
    plan.finetune.seed = a.seed;
    plan.finetune.max_epochs = a.finetune_epochs;
    plan.finetune.patience = plan.finetune.patience.min(a.finetune_epochs);
    plan.finetune.lr = a.finetune_lr;
    plan.validate()?;
    let kind = match a.shift {
        ShiftArg::Auto => infer_shift(&sources, &target),
        ShiftArg::CrossYear => ShiftKind::CrossYear,
        ShiftArg::CrossCity => ShiftKind::CrossCity,
    };
    if kind == ShiftKind::CrossYear && target.num_nodes() != base.num_nodes() {
        return Err(Error::Shape(format!(
            "cross-year target has {} nodes, source has {}",
            target.num_nodes(),
            base.num_nodes()
        )));
    }
    let mut entries = run_comparison(sources, &target, &plan, &a.strategies, kind)?;
    if a.baseline {
        let split = adaptation_split(&target, a.adaptation_fraction)?;
        let c = base.config();
        let mut report = historical_average_baseline(&target, &split, c.l1, c.l2)?;
        report.meta.dataset = plan.target.clone();
        report.meta.seed = a.seed;
        entries.push(ComparisonEntry {
            strategy: report.meta.strategy.clone(),
            report,
        });
    }
    write_text(&a.out, &comparison_json(&entries))?;
    if let Some(csv) = &a.csv {
        write_text(csv, &comparison_csv(&entries))?;
    }
    print!("{}", comparison_table(&entries));
    Ok(())
}

fn sweep(a: &SweepArgs) -> Result<()> {
    let ks = parse_k_range(&a.k)?;
    let mut cfg = a.config.load()?;
    if let Some(s) = &a.shifted {
        cfg.shifted = Some(s.clone());
    }
    let series = load_data(&mut cfg)?;
    let shifted = cfg.shifted.as_deref().map(ingest_csv).transpose()?;
    let dir = cfg.output_dir.clone();
    cfg.write_resolved(&dir)?;
    let rows = sweep_components(&series, shifted.as_ref(), &cfg.experiment, &ks, cfg.adaptation_fraction)?;
    let csv = sweep_csv(&rows);
    write_text(&dir.join("sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn export(a: &ExportArgs) -> Result<()> {
    let model = Forecaster::load(&a.model)?;
    let data = a.data.as_deref().map(ingest_csv).transpose()?;
    let table = match (&a.proj, &data) {
        (Some(p), Some(d)) => pca_embedding(d, 0..d.total_steps(), model.normalizer(), &load_projection(p)?)?,
        (Some(_), None) => return Err(Error::Config("--proj needs --data".into())),
        (None, _) => model.embedding_table(),
    };
    let ids: Vec<String> = match &data {
        Some(d) if d.num_nodes() == table.num_nodes() => d.node_ids().to_vec(),
        Some(d) => {
            return Err(Error::Shape(format!(
                "data has {} nodes, embedding has {}",
                d.num_nodes(),
                table.num_nodes()
            )))
        }
        None => (0..table.num_nodes()).map(|i| i.to_string()).collect(),
    };
    write_text(&a.out, &table.to_csv(&ids)?)?;
    if let Some(g) = &a.graph {
        write_text(g, &build_adaptive_graph(&table)?.to_csv(&ids, a.min_weight)?)?;
    }
    Ok(())
}

fn parse_report_file(path: &Path) -> Result<Vec<ComparisonEntry>> {
    let text = read_to_string(path)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Parse { line: e.line(), msg: e.to_string() })?;
    match value {
        serde_json::Value::Array(items) => items
            .iter()
            .map(|item| {
                let report = HorizonReport::from_json(&item["report"].to_string())?;
                let strategy = item["strategy"].as_str().unwrap_or(&report.meta.strategy).to_string();
                Ok(ComparisonEntry { strategy, report })
            })
            .collect(),
        _ => {
            let report = HorizonReport::from_json(&text)?;
            Ok(vec![ComparisonEntry {
                strategy: report.meta.strategy.clone(),
                report,
            }])
        }
    }
}

fn report(a: &ReportArgs) -> Result<()> {
    let mut entries = Vec::new();
    for p in &a.inputs {
        entries.extend(parse_report_file(p)?);
    }
    match a.format {
        ReportFormat::Csv => print!("{}", comparison_csv(&entries)),
        ReportFormat::Text => {
            for e in &entries {
                print!("{}", e.report.to_text());
            }
        }
    }
    Ok(())
}
