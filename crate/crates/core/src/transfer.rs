//! Evaluation under spatial shift: the same sensors in a later period
//! (cross-year) or a different sensor set (cross-city), with four ways of
//! filling the embedding slot before evaluating.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::{fit_normalizer, make_windows, next_day_start, Normalizer, StepRange, TrafficSeries};
use crate::error::{Error, Result};
use crate::experiment::{evaluate_range, fit_range_projection, pca_embedding, windows_for};
use crate::metrics::{HorizonReport, MetricAccumulator, ReportMeta, DEFAULT_HORIZONS};
use crate::model::Forecaster;
use crate::pca::{ComponentSpec, EmbeddingTable, PcaProjection};
use crate::train::{fit, TrainConfig, TrainScope};

pub const DEFAULT_ADAPTATION_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferStrategy {
    /// The source embedding, unchanged.
    Vanilla,
    /// Embedding slot set to zero.
    Zero,
    /// Embedding recomputed from target data through a projection.
    Pca,
    /// Embedding fine-tuned on the adaptation subset, all else frozen.
    Finetune,
}

impl TransferStrategy {
    pub const ALL: [TransferStrategy; 4] = [
        TransferStrategy::Vanilla,
        TransferStrategy::Zero,
        TransferStrategy::Pca,
        TransferStrategy::Finetune,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransferStrategy::Vanilla => "vanilla",
            TransferStrategy::Zero => "zero",
            TransferStrategy::Pca => "pca",
            TransferStrategy::Finetune => "finetune",
        }
    }
}

impl fmt::Display for TransferStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TransferStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TransferStrategy::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown transfer strategy {s:?} (vanilla, zero, pca, finetune)")))
    }
}

/// Same sensors later in time, or a different sensor set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShiftKind {
    CrossYear,
    CrossCity,
}

impl fmt::Display for ShiftKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShiftKind::CrossYear => "cross-year",
            ShiftKind::CrossCity => "cross-city",
        })
    }
}

/// Leading adaptation days and the evaluation steps after them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdaptationSplit {
    pub adaptation: StepRange,
    pub evaluation: StepRange,
}

impl AdaptationSplit {
    /// Errors unless every adaptation step strictly precedes every
    /// evaluation step.
    pub fn check_disjoint(&self) -> Result<()> {
        if self.adaptation.is_empty() || self.evaluation.is_empty() || self.adaptation.end > self.evaluation.start {
            return Err(Error::Invalid(format!(
                "adaptation {:?} must strictly precede evaluation {:?}",
                self.adaptation, self.evaluation
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferPlan {
    pub source: String,
    pub target: String,
    pub adaptation_fraction: f64,
    pub strategy: TransferStrategy,
    /// Fit a fresh projection on the adaptation days instead of reusing the
    /// source projection.
    pub refit_projection: bool,
    /// Optimizer settings for the fine-tune strategy.
    pub finetune: TrainConfig,
    /// Explicit adaptation/evaluation ranges, overriding the fraction.
    pub ranges: Option<AdaptationSplit>,
}

impl Default for TransferPlan {
    fn default() -> Self {
        TransferPlan {
            source: String::new(),
            target: String::new(),
            adaptation_fraction: DEFAULT_ADAPTATION_FRACTION,
            strategy: TransferStrategy::Pca,
            refit_projection: false,
            finetune: TrainConfig {
                max_epochs: 50,
                patience: 10,
                scope: TrainScope::EmbeddingOnly,
                ..TrainConfig::default()
            },
            ranges: None,
        }
    }
}

impl TransferPlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.adaptation_fraction > 0.0 && self.adaptation_fraction <= 0.5) {
            return Err(Error::Config(format!(
                "adaptation fraction {} outside (0, 0.5]",
                self.adaptation_fraction
            )));
        }
        self.finetune.validate()
    }

    pub fn with_strategy(&self, strategy: TransferStrategy) -> Self {
        TransferPlan {
            strategy,
            ..self.clone()
        }
    }
}

/// The first whole days covering `fraction` of the steps (at least one day,
/// starting at the first midnight), and everything after them.
pub fn adaptation_split(series: &TrafficSeries, fraction: f64) -> Result<AdaptationSplit> {
    let t = series.steps_per_day();
    let total = series.total_steps();
    let start = next_day_start(series, 0);
    let days = ((fraction * total as f64 / t as f64 + 1e-9).floor() as usize).max(1);
    let end = start + days * t;
    if end > total {
        return Err(Error::NoCompleteDay { start, end: total });
    }
    let split = AdaptationSplit {
        adaptation: start..end,
        evaluation: end..total,
    };
    split.check_disjoint()?;
    Ok(split)
}

/// Models and projection the strategies draw from. The pca strategy uses
/// `pca_model` when given, otherwise `base`.
#[derive(Debug, Clone, Copy)]
pub struct SourceModels<'a> {
    pub base: &'a Forecaster,
    pub pca_model: Option<&'a Forecaster>,
    pub projection: Option<&'a PcaProjection>,
}

impl<'a> SourceModels<'a> {
    pub fn single(model: &'a Forecaster, projection: Option<&'a PcaProjection>) -> Self {
        SourceModels {
            base: model,
            pca_model: None,
            projection,
        }
    }
}

fn normalizer_text(n: &Normalizer) -> String {
    format!("mean={} std={}", n.mean, n.std)
}

fn range_text(r: &StepRange) -> String {
    format!("{}..{}", r.start, r.end)
}

/// Applies the plan's strategy and returns the ready-to-evaluate model plus
/// metadata describing what was done.
pub fn prepare_model(
    sources: SourceModels,
    target: &TrafficSeries,
    plan: &TransferPlan,
    kind: ShiftKind,
    split: &AdaptationSplit,
) -> Result<(Forecaster, IndexMap<String, String>)> {
    split.check_disjoint()?;
    let source = match plan.strategy {
        TransferStrategy::Pca => sources.pca_model.unwrap_or(sources.base),
        _ => sources.base,
    };
    let cfg = source.config();
    if target.steps_per_day() != cfg.steps_per_day {
        return Err(Error::Shape(format!(
            "target has T = {} steps per day, model was trained with T = {}",
            target.steps_per_day(),
            cfg.steps_per_day
        )));
    }
    let same_nodes = target.num_nodes() == source.num_nodes();
    if matches!(plan.strategy, TransferStrategy::Vanilla | TransferStrategy::Finetune) && !same_nodes {
        return Err(Error::Shape(format!(
            "{} strategy needs the source node set ({} nodes), target has {}",
            plan.strategy,
            source.num_nodes(),
            target.num_nodes()
        )));
    }
    let mut meta = IndexMap::new();
    meta.insert("source".into(), plan.source.clone());
    meta.insert("shift".into(), kind.to_string());
    meta.insert("nodes".into(), target.num_nodes().to_string());
    meta.insert("adaptation_steps".into(), range_text(&split.adaptation));
    meta.insert("evaluation_steps".into(), range_text(&split.evaluation));
    meta.insert("source_normalizer".into(), normalizer_text(source.normalizer()));

    let mut model = source.clone();
    match plan.strategy {
        TransferStrategy::Vanilla => {}
        TransferStrategy::Zero => {
            model.set_embedding(&EmbeddingTable::zeros(target.num_nodes(), cfg.embed_dim)?)?;
        }
        TransferStrategy::Pca => {
            // Same sensors keep the training units; a new city is described in
            // its own units.
            let emb_nz = match kind {
                ShiftKind::CrossYear => *source.normalizer(),
                ShiftKind::CrossCity => fit_normalizer(target, split.adaptation.clone(), true)?,
            };
            let proj = if plan.refit_projection {
                let centered = sources.projection.is_none_or(|p| p.mean().iter().any(|v| *v != 0.0));
                fit_range_projection(
                    target,
                    split.adaptation.clone(),
                    &emb_nz,
                    ComponentSpec::Count(cfg.embed_dim),
                    centered,
                )?
            } else {
                sources
                    .projection
                    .ok_or_else(|| Error::Invalid("pca strategy needs the source projection".into()))?
                    .clone()
            };
            let table = pca_embedding(target, split.adaptation.clone(), &emb_nz, &proj)?;
            model.set_embedding(&table)?;
            meta.insert("embedding_normalizer".into(), normalizer_text(&emb_nz));
            meta.insert("refit_projection".into(), plan.refit_projection.to_string());
            meta.insert("projection".into(), proj.id());
        }
        TransferStrategy::Finetune => {
            let ws = windows_for(&model, target, split.adaptation.clone())?;
            let cfg = TrainConfig {
                scope: TrainScope::EmbeddingOnly,
                ..plan.finetune
            };
            let report = fit(&mut model, &ws, &ws, &cfg)?;
            meta.insert("finetune_epochs".into(), report.epochs.len().to_string());
            meta.insert("finetune_best_epoch".into(), report.best_epoch.to_string());
        }
    }
    Ok((model, meta))
}

fn run(sources: SourceModels, target: &TrafficSeries, plan: &TransferPlan, kind: ShiftKind) -> Result<HorizonReport> {
    plan.validate()?;
    let split = match &plan.ranges {
        Some(r) => r.clone(),
        None => adaptation_split(target, plan.adaptation_fraction)?,
    };
    let (model, extra) = prepare_model(sources, target, plan, kind, &split)?;
    let meta = ReportMeta {
        dataset: plan.target.clone(),
        strategy: plan.strategy.to_string(),
        seed: plan.finetune.seed,
        model_id: model.id(),
        extra,
    };
    evaluate_range(&model, target, split.evaluation, meta)
}

/// Same sensors, later period. Node count and steps per day must match.
pub fn cross_year_eval(sources: SourceModels, target: &TrafficSeries, plan: &TransferPlan) -> Result<HorizonReport> {
    if target.num_nodes() != sources.base.num_nodes() {
        return Err(Error::Shape(format!(
            "cross-year target has {} nodes, source has {}",
            target.num_nodes(),
            sources.base.num_nodes()
        )));
    }
    run(sources, target, plan, ShiftKind::CrossYear)
}

/// Different sensor set. Only the embedding slot is recomputed; every other
/// tensor is used as trained.
pub fn zero_shot_transfer(sources: SourceModels, target: &TrafficSeries, plan: &TransferPlan) -> Result<HorizonReport> {
    run(sources, target, plan, ShiftKind::CrossCity)
}

/// Cross-year when the node counts agree, cross-city otherwise.
pub fn infer_shift(sources: &SourceModels, target: &TrafficSeries) -> ShiftKind {
    if target.num_nodes() == sources.base.num_nodes() {
        ShiftKind::CrossYear
    } else {
        ShiftKind::CrossCity
    }
}

/// Per-node, per-slot mean over the adaptation days, zeros excluded.
pub fn slot_means(series: &TrafficSeries, adaptation: StepRange) -> Result<Array2<f64>> {
    let t = series.steps_per_day();
    let n = series.num_nodes();
    if adaptation.is_empty() || adaptation.end > series.total_steps() {
        return Err(Error::Invalid(format!("empty or out-of-range adaptation steps {adaptation:?}")));
    }
    let mut sum = Array2::<f64>::zeros((t, n));
    let mut count = Array2::<f64>::zeros((t, n));
    for s in adaptation {
        let slot = series.slot_of(s);
        for node in 0..n {
            let v = series.values()[[s, node]];
            if v != 0.0 {
                sum[[slot, node]] += v;
                count[[slot, node]] += 1.0;
            }
        }
    }
    Ok(ndarray::Zip::from(&sum)
        .and(&count)
        .map_collect(|s, c| if *c > 0.0 { s / c } else { 0.0 }))
}

/// Predicts each target cell with the node's adaptation-period mean at the
/// same time of day, over the same windows a model would be scored on.
pub fn historical_average_baseline(
    series: &TrafficSeries,
    split: &AdaptationSplit,
    l1: usize,
    l2: usize,
) -> Result<HorizonReport> {
    split.check_disjoint()?;
    let means = slot_means(series, split.adaptation.clone())?;
    let ws = make_windows(series, split.evaluation.clone(), l1, l2, None)?;
    let mut steps = vec![MetricAccumulator::default(); l2];
    for i in 0..ws.len() {
        let w = ws.get(i);
        for (k, step) in ws.target_steps(i).enumerate() {
            let slot = series.slot_of(step);
            for node in 0..series.num_nodes() {
                steps[k].push(means[[slot, node]], w.target[[node, k]]);
            }
        }
    }
    let mut total = MetricAccumulator::default();
    for acc in &steps {
        total.merge(acc);
    }
    let horizons = DEFAULT_HORIZONS
        .iter()
        .filter(|h| **h <= l2)
        .map(|h| Ok((*h, steps[h - 1].finish()?)))
        .collect::<Result<_>>()?;
    Ok(HorizonReport {
        horizons,
        average: total.finish()?,
        meta: ReportMeta {
            strategy: "historical_average".into(),
            ..ReportMeta::default()
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonEntry {
    pub strategy: String,
    pub report: HorizonReport,
}

/// Runs each strategy in order against the same target.
pub fn run_comparison(
    sources: SourceModels,
    target: &TrafficSeries,
    plan: &TransferPlan,
    strategies: &[TransferStrategy],
    kind: ShiftKind,
) -> Result<Vec<ComparisonEntry>> {
    strategies
        .iter()
        .map(|s| {
            let report = run(sources, target, &plan.with_strategy(*s), kind)?;
            Ok(ComparisonEntry {
                strategy: s.to_string(),
                report,
            })
        })
        .collect()
}

/// JSON array of `{strategy, report}` objects.
pub fn comparison_json(entries: &[ComparisonEntry]) -> String {
    let arr: Vec<serde_json::Value> = entries
        .iter()
        .map(|e| serde_json::json!({ "strategy": e.strategy, "report": e.report.to_json_value() }))
        .collect();
    serde_json::to_string_pretty(&arr).expect("plain data serializes")
}

/// One `strategy,horizon,mae,rmse,mape` row per strategy and horizon.
pub fn comparison_csv(entries: &[ComparisonEntry]) -> String {
    let mut out = String::from("strategy,horizon,mae,rmse,mape\n");
    for e in entries {
        let rows = e
            .report
            .horizons
            .iter()
            .map(|(h, m)| (h.to_string(), m))
            .chain(std::iter::once(("avg".to_string(), &e.report.average)));
        for (h, m) in rows {
            out.push_str(&format!("{},{h},{},{},{}\n", e.strategy, m.mae, m.rmse, m.mape));
        }
    }
    out
}

/// `strategy: MAE & RMSE & MAPE%` lines on the all-step average.
pub fn comparison_table(entries: &[ComparisonEntry]) -> String {
    entries
        .iter()
        .map(|e| format!("{:<9} {}\n", e.strategy, e.report.average.table_row()))
        .collect()
}
