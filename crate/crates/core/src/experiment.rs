//! The in-distribution pipeline: split, normalize, embed, train, evaluate.

use crate::dataset::{
    fit_normalizer, make_windows, split_chronological, to_day_tensor, Normalizer, Splits,
    StepRange, TrafficSeries, WindowSet,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, HorizonReport, ReportMeta, DEFAULT_HORIZONS};
use crate::model::{Forecaster, ModelConfig};
use crate::pca::{
    fit_projection, refresh_embedding, ComponentSpec, EmbeddingStrategy, EmbeddingTable,
    PcaProjection,
};
use crate::train::{fit, TrainConfig, TrainReport};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub split: [f64; 3],
    /// Whether zero readings count towards the normalizer statistics.
    pub normalize_zeros: bool,
    /// `embed_dim` is overridden by the fitted component count under pca.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub strategy: EmbeddingStrategy,
    pub components: ComponentSpec,
    /// Subtract the profile mean before projecting.
    pub centered: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            split: [0.6, 0.2, 0.2],
            normalize_zeros: true,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            strategy: EmbeddingStrategy::Adaptive,
            components: ComponentSpec::default(),
            centered: true,
        }
    }
}

/// Everything a training run produces.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub model: Forecaster,
    pub projection: Option<PcaProjection>,
    pub splits: Splits,
    pub report: TrainReport,
}

impl TrainedRun {
    pub fn normalizer(&self) -> &Normalizer {
        self.model.normalizer()
    }
}

/// Windows over `range` in the model's input units.
pub fn windows_for(model: &Forecaster, series: &TrafficSeries, range: StepRange) -> Result<WindowSet> {
    let c = model.config();
    make_windows(series, range, c.l1, c.l2, Some(model.normalizer()))
}

/// PCA embedding of the complete days in `range`, normalized with
/// `normalizer` and projected through `proj`.
pub fn pca_embedding(
    series: &TrafficSeries,
    range: StepRange,
    normalizer: &Normalizer,
    proj: &PcaProjection,
) -> Result<EmbeddingTable> {
    let z = to_day_tensor(series, range)?.normalized(normalizer);
    refresh_embedding(&z, proj)
}

/// Fits a projection on the complete days in `range`.
pub fn fit_range_projection(
    series: &TrafficSeries,
    range: StepRange,
    normalizer: &Normalizer,
    components: ComponentSpec,
    centered: bool,
) -> Result<PcaProjection> {
    let z = to_day_tensor(series, range)?.normalized(normalizer);
    let proj = fit_projection(&z, components)?;
    Ok(if centered { proj } else { proj.uncentered() })
}

/// Builds the untrained model for `cfg`, including the frozen PCA slot when
/// the strategy asks for one.
pub fn build_model(
    series: &TrafficSeries,
    cfg: &ExperimentConfig,
) -> Result<(Forecaster, Option<PcaProjection>, Splits)> {
    if series.steps_per_day() != cfg.model.steps_per_day {
        return Err(Error::Config(format!(
            "data has {} steps per day, model.steps_per_day is {}",
            series.steps_per_day(),
            cfg.model.steps_per_day
        )));
    }
    let splits = split_chronological(series.total_steps(), cfg.split)?;
    let nz = fit_normalizer(series, splits.train.clone(), cfg.normalize_zeros)?;
    let mut model_cfg = cfg.model;
    let mut projection = None;
    let mut table = None;
    if cfg.strategy == EmbeddingStrategy::Pca {
        let proj = fit_range_projection(series, splits.train.clone(), &nz, cfg.components, cfg.centered)?;
        model_cfg.embed_dim = proj.num_components();
        table = Some(pca_embedding(series, splits.train.clone(), &nz, &proj)?);
        projection = Some(proj);
    }
    let mut model = Forecaster::new(model_cfg, series.num_nodes(), cfg.strategy, nz, cfg.train.seed)?;
    if let Some(t) = table {
        model.set_embedding(&t)?;
    }
    Ok((model, projection, splits))
}

/// Trains on the train split with early stopping on the validation split.
pub fn train_on_series(series: &TrafficSeries, cfg: &ExperimentConfig) -> Result<TrainedRun> {
    let (mut model, projection, splits) = build_model(series, cfg)?;
    let train = windows_for(&model, series, splits.train.clone())?;
    let val = windows_for(&model, series, splits.val.clone())?;
    let report = fit(&mut model, &train, &val, &cfg.train)?;
    Ok(TrainedRun {
        model,
        projection,
        splits,
        report,
    })
}

/// Horizon report over every window inside `range`.
pub fn evaluate_range(
    model: &Forecaster,
    series: &TrafficSeries,
    range: StepRange,
    meta: ReportMeta,
) -> Result<HorizonReport> {
    let ws = windows_for(model, series, range)?;
    let horizons: Vec<usize> = DEFAULT_HORIZONS
        .iter()
        .copied()
        .filter(|h| *h <= model.config().l2)
        .collect();
    Ok(evaluate(model, &ws.all(), &horizons)?.with_meta(meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthSpec};

    fn small_cfg(strategy: EmbeddingStrategy) -> ExperimentConfig {
        ExperimentConfig {
            model: ModelConfig {
                hidden_dim: 8,
                embed_dim: 4,
                tod_dim: 4,
                dow_dim: 2,
                num_blocks: 1,
                steps_per_day: 24,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                max_epochs: 2,
                patience: 2,
                lr: 1e-2,
                ..TrainConfig::default()
            },
            strategy,
            components: ComponentSpec::Count(3),
            ..ExperimentConfig::default()
        }
    }

    fn data() -> TrafficSeries {
        generate(&SynthSpec {
            n_nodes: 6,
            n_roles: 2,
            days: 6,
            steps_per_day: 24,
            ..SynthSpec::default()
        })
        .unwrap()
        .train
    }

    #[test]
    fn pca_run_installs_projected_embedding() {
        let s = data();
        let run = train_on_series(&s, &small_cfg(EmbeddingStrategy::Pca)).unwrap();
        let proj = run.projection.as_ref().unwrap();
        assert_eq!(run.model.config().embed_dim, 3);
        let expect = pca_embedding(&s, run.splits.train.clone(), run.normalizer(), proj).unwrap();
        assert_eq!(&run.model.params().embedding, expect.values());
        let rep = evaluate_range(&run.model, &s, run.splits.test.clone(), ReportMeta::default()).unwrap();
        assert_eq!(rep.horizons.len(), 3);
        assert!(rep.average.mae.is_finite());
    }

    #[test]
    fn mismatched_steps_per_day_is_a_config_error() {
        let mut cfg = small_cfg(EmbeddingStrategy::Adaptive);
        cfg.model.steps_per_day = 48;
        assert!(matches!(train_on_series(&data(), &cfg), Err(Error::Config(_))));
    }
}
