//! Accuracy as a function of the number of principal components, against the
//! adaptive-embedding baseline.

use crate::dataset::{to_day_tensor, TrafficSeries};
use crate::error::{Error, Result};
use crate::experiment::{evaluate_range, train_on_series, ExperimentConfig, TrainedRun};
use crate::metrics::ReportMeta;
use crate::pca::{day_profiles, ComponentSpec, EmbeddingStrategy};
use crate::transfer::{cross_year_eval, infer_shift, zero_shot_transfer, ShiftKind, SourceModels, TransferPlan, TransferStrategy};

pub const BASELINE_LABEL: &str = "adaptive";

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    /// The component count, or [`BASELINE_LABEL`].
    pub label: String,
    pub val_mae: f64,
    pub test_mae: f64,
    pub shifted_mae: Option<f64>,
}

fn shifted_mae(run: &TrainedRun, shifted: &TrafficSeries, strategy: TransferStrategy, fraction: f64, seed: u64) -> Result<f64> {
    let sources = SourceModels::single(&run.model, run.projection.as_ref());
    let mut plan = TransferPlan {
        adaptation_fraction: fraction,
        strategy,
        ..TransferPlan::default()
    };
    plan.finetune.seed = seed;
    let report = match infer_shift(&sources, shifted) {
        ShiftKind::CrossYear => cross_year_eval(sources, shifted, &plan)?,
        ShiftKind::CrossCity => {
            if strategy == TransferStrategy::Vanilla {
                plan.strategy = TransferStrategy::Zero;
            }
            zero_shot_transfer(sources, shifted, &plan)?
        }
    };
    Ok(report.average.mae)
}

fn row(label: String, run: &TrainedRun, series: &TrafficSeries, shifted: Option<f64>) -> Result<SweepRow> {
    let mae = |range| evaluate_range(&run.model, series, range, ReportMeta::default()).map(|r| r.average.mae);
    Ok(SweepRow {
        label,
        val_mae: mae(run.splits.val.clone())?,
        test_mae: mae(run.splits.test.clone())?,
        shifted_mae: shifted,
    })
}

/// Trains one pca model per `k` and one adaptive model, scoring each on the
/// validation and test splits and, when given, on a shifted series. On the
/// shifted series pca rows recompute the embedding; the adaptive row keeps
/// its learned table when the node sets match and uses zeros otherwise.
pub fn sweep_components(
    series: &TrafficSeries,
    shifted: Option<&TrafficSeries>,
    cfg: &ExperimentConfig,
    ks: &[usize],
    adaptation_fraction: f64,
) -> Result<Vec<SweepRow>> {
    sweep_components_with(series, shifted, cfg, ks, adaptation_fraction, |_, _| Ok(()))
}

/// [`sweep_components`] that also hands each row and its trained run to
/// `inspect` as soon as the row is scored.
pub fn sweep_components_with<F>(
    series: &TrafficSeries,
    shifted: Option<&TrafficSeries>,
    cfg: &ExperimentConfig,
    ks: &[usize],
    adaptation_fraction: f64,
    mut inspect: F,
) -> Result<Vec<SweepRow>>
where
    F: FnMut(&SweepRow, &TrainedRun) -> Result<()>,
{
    let seed = cfg.train.seed;
    let mut rows = Vec::with_capacity(ks.len() + 1);
    for &k in ks {
        let run = train_on_series(
            series,
            &ExperimentConfig {
                strategy: EmbeddingStrategy::Pca,
                components: ComponentSpec::Count(k),
                ..cfg.clone()
            },
        )?;
        let proj = run.projection.as_ref().expect("pca run has a projection");
        let samples = day_profiles(&to_day_tensor(series, run.splits.train.clone())?.normalized(run.normalizer()));
        let violations = proj.invariant_violations(samples.view());
        if !violations.is_empty() {
            return Err(Error::Invalid(format!("projection with k = {k}: {}", violations.join("; "))));
        }
        let s = shifted
            .map(|t| shifted_mae(&run, t, TransferStrategy::Pca, adaptation_fraction, seed))
            .transpose()?;
        let r = row(k.to_string(), &run, series, s)?;
        inspect(&r, &run)?;
        rows.push(r);
    }
    let run = train_on_series(
        series,
        &ExperimentConfig {
            strategy: EmbeddingStrategy::Adaptive,
            ..cfg.clone()
        },
    )?;
    let s = shifted
        .map(|t| shifted_mae(&run, t, TransferStrategy::Vanilla, adaptation_fraction, seed))
        .transpose()?;
    let r = row(BASELINE_LABEL.into(), &run, series, s)?;
    inspect(&r, &run)?;
    rows.push(r);
    Ok(rows)
}

/// `k,val_mae,test_mae,shifted_mae` lines; the shifted cell is empty when no
/// shifted series was given.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("k,val_mae,test_mae,shifted_mae\n");
    for r in rows {
        let s = r.shifted_mae.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{s}\n", r.label, r.val_mae, r.test_mae));
    }
    out
}

/// Parses `a..b` (inclusive), `a-b` or a comma-separated list.
pub fn parse_k_range(text: &str) -> Result<Vec<usize>> {
    let bad = || Error::Config(format!("bad component range {text:?}, expected e.g. 1..8 or 2,4,8"));
    let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
    let ks: Vec<usize> = if let Some((a, b)) = text.split_once("..").or_else(|| text.split_once('-')) {
        let (a, b) = (num(a)?, num(b.trim_start_matches('=')).map_err(|_| bad())?);
        if a > b {
            return Err(bad());
        }
        (a..=b).collect()
    } else {
        text.split(',').map(num).collect::<Result<_>>()?
    };
    if ks.is_empty() || ks.contains(&0) {
        return Err(bad());
    }
    Ok(ks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::{generate, SynthSpec};
    use crate::train::TrainConfig;

    #[test]
    fn k_ranges() {
        assert_eq!(parse_k_range("1..8").unwrap(), (1..=8).collect::<Vec<_>>());
        assert_eq!(parse_k_range("2-4").unwrap(), vec![2, 3, 4]);
        assert_eq!(parse_k_range("1..=3").unwrap(), vec![1, 2, 3]);
        assert_eq!(parse_k_range("2, 4,48").unwrap(), vec![2, 4, 48]);
        for bad in ["", "0..3", "5..2", "a", "1,,2"] {
            assert!(parse_k_range(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn one_row_per_k_plus_baseline() {
        let out = generate(&SynthSpec {
            n_nodes: 6,
            n_roles: 2,
            days: 8,
            steps_per_day: 24,
            ..SynthSpec::default()
        })
        .unwrap();
        let cfg = ExperimentConfig {
            model: ModelConfig {
                hidden_dim: 8,
                embed_dim: 4,
                tod_dim: 4,
                dow_dim: 2,
                num_blocks: 1,
                l1: 4,
                l2: 4,
                steps_per_day: 24,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                max_epochs: 2,
                patience: 2,
                ..TrainConfig::default()
            },
            ..ExperimentConfig::default()
        };
        let rows = sweep_components(&out.train, Some(&out.shifted), &cfg, &[1, 2, 3], 0.2).unwrap();
        let csv = sweep_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], "k,val_mae,test_mae,shifted_mae");
        assert!(lines[1].starts_with("1,"));
        assert!(lines[4].starts_with("adaptive,"));
        assert!(rows.iter().all(|r| r.shifted_mae.is_some_and(f64::is_finite)));
        let plain = sweep_components(&out.train, None, &cfg, &[2], 0.2).unwrap();
        assert!(sweep_csv(&plain).lines().nth(1).unwrap().ends_with(','));
    }
}
