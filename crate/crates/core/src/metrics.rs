//! Masked MAE / RMSE / MAPE with zero targets excluded, aggregated by
//! micro-averaging over every valid cell, and horizon-resolved reports.

use indexmap::IndexMap;
use ndarray::{s, Array3, ArrayView, Axis, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::dataset::Window;
use crate::error::{Error, Result};
use crate::model::Forecaster;

/// Windows per forward call during evaluation.
pub const EVAL_BATCH: usize = 64;

/// Horizons reported alongside the all-step average.
pub const DEFAULT_HORIZONS: [usize; 3] = [3, 6, 12];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub mae: f64,
    pub rmse: f64,
    /// Fraction, not percent.
    pub mape: f64,
}

impl MetricSet {
    /// Table cell `MAE & RMSE & MAPE%`.
    pub fn table_row(&self) -> String {
        format!("{:.2} & {:.2} & {:.2}%", self.mae, self.rmse, self.mape * 100.0)
    }
}

/// Running sums over masked cells. Merging two accumulators gives the same
/// result as accumulating the concatenated data.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricAccumulator {
    count: usize,
    abs: f64,
    sq: f64,
    pct: f64,
}

impl MetricAccumulator {
    pub fn push(&mut self, pred: f64, target: f64) {
        if target != 0.0 {
            let d = pred - target;
            self.count += 1;
            self.abs += d.abs();
            self.sq += d * d;
            self.pct += d.abs() / target.abs();
        }
    }

    pub fn push_arrays<D: Dimension>(
        &mut self,
        pred: ArrayView<f64, D>,
        target: ArrayView<f64, D>,
    ) -> Result<()> {
        if pred.shape() != target.shape() {
            return Err(Error::Shape(format!(
                "prediction {:?} vs target {:?}",
                pred.shape(),
                target.shape()
            )));
        }
        Zip::from(&pred).and(&target).for_each(|p, t| self.push(*p, *t));
        Ok(())
    }

    pub fn merge(&mut self, other: &MetricAccumulator) {
        self.count += other.count;
        self.abs += other.abs;
        self.sq += other.sq;
        self.pct += other.pct;
    }

    /// Number of valid (non-zero target) cells seen.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(&self) -> Result<MetricSet> {
        if self.count == 0 {
            return Err(Error::NoValidTargets);
        }
        let n = self.count as f64;
        Ok(MetricSet {
            mae: self.abs / n,
            rmse: (self.sq / n).sqrt(),
            mape: self.pct / n,
        })
    }
}

/// Metrics over cells whose target is non-zero. Both arrays are in original
/// units.
pub fn masked_metrics<D: Dimension>(
    pred: ArrayView<f64, D>,
    target: ArrayView<f64, D>,
) -> Result<MetricSet> {
    let mut acc = MetricAccumulator::default();
    acc.push_arrays(pred, target)?;
    acc.finish()
}

/// Targets of a batch stacked as `[B × N × l2]`.
pub fn stack_targets(batch: &[Window]) -> Array3<f64> {
    let (n, l2) = batch.first().map_or((0, 0), |w| w.target.dim());
    let mut out = Array3::zeros((batch.len(), n, l2));
    for (b, w) in batch.iter().enumerate() {
        out.index_axis_mut(Axis(0), b).assign(&w.target);
    }
    out
}

/// Identifies the run a report belongs to.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub dataset: String,
    pub strategy: String,
    pub seed: u64,
    pub model_id: String,
    /// Free-form run details such as normalizers and evaluation ranges.
    pub extra: IndexMap<String, String>,
}

/// Per-horizon metrics plus the micro-average over every forecast step.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonReport {
    pub horizons: Vec<(usize, MetricSet)>,
    pub average: MetricSet,
    pub meta: ReportMeta,
}

#[derive(Serialize, Deserialize)]
struct ReportJson {
    dataset: String,
    strategy: String,
    seed: u64,
    model_id: String,
    horizons: IndexMap<String, MetricSet>,
    #[serde(default, skip_serializing_if = "IndexMap::is_empty")]
    metadata: IndexMap<String, String>,
}

impl HorizonReport {
    pub fn horizon(&self, h: usize) -> Option<&MetricSet> {
        self.horizons.iter().find(|(k, _)| *k == h).map(|(_, m)| m)
    }

    pub fn with_meta(mut self, meta: ReportMeta) -> Self {
        self.meta = meta;
        self
    }

    fn json_value(&self) -> ReportJson {
        let mut horizons: IndexMap<String, MetricSet> =
            self.horizons.iter().map(|(h, m)| (h.to_string(), *m)).collect();
        horizons.insert("avg".into(), self.average);
        ReportJson {
            dataset: self.meta.dataset.clone(),
            strategy: self.meta.strategy.clone(),
            seed: self.meta.seed,
            model_id: self.meta.model_id.clone(),
            horizons,
            metadata: self.meta.extra.clone(),
        }
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(self.json_value()).expect("plain data serializes")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.json_value()).expect("plain data serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: ReportJson =
            serde_json::from_str(text).map_err(|e| Error::Parse { line: 0, msg: e.to_string() })?;
        let mut horizons = Vec::new();
        let mut average = None;
        for (k, m) in raw.horizons {
            if k == "avg" {
                average = Some(m);
            } else {
                let h = k.parse().map_err(|_| Error::Parse {
                    line: 0,
                    msg: format!("bad horizon key {k:?}"),
                })?;
                horizons.push((h, m));
            }
        }
        Ok(HorizonReport {
            horizons,
            average: average.ok_or_else(|| Error::Parse {
                line: 0,
                msg: "report has no avg entry".into(),
            })?,
            meta: ReportMeta {
                dataset: raw.dataset,
                strategy: raw.strategy,
                seed: raw.seed,
                model_id: raw.model_id,
                extra: raw.metadata,
            },
        })
    }

    /// One line per horizon in table-cell format.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} / {}\n", self.meta.dataset, self.meta.strategy);
        for (h, m) in &self.horizons {
            out.push_str(&format!("horizon {h:>2}: {}\n", m.table_row()));
        }
        out.push_str(&format!("average   : {}\n", self.average.table_row()));
        out
    }
}

/// Per-step accumulators over de-normalized predictions, one per horizon
/// step `1..=l2`.
pub fn accumulate_steps(model: &Forecaster, windows: &[Window]) -> Result<Vec<MetricAccumulator>> {
    let l2 = model.config().l2;
    let mut steps = vec![MetricAccumulator::default(); l2];
    for chunk in windows.chunks(EVAL_BATCH) {
        let pred = model.predict(chunk)?;
        let target = stack_targets(chunk);
        for (k, acc) in steps.iter_mut().enumerate() {
            acc.push_arrays(pred.slice(s![.., .., k]), target.slice(s![.., .., k]))?;
        }
    }
    Ok(steps)
}

/// Masked MAE over every step of every window.
pub fn masked_mae(model: &Forecaster, windows: &[Window]) -> Result<f64> {
    let mut total = MetricAccumulator::default();
    for acc in accumulate_steps(model, windows)? {
        total.merge(&acc);
    }
    Ok(total.finish()?.mae)
}

/// Horizon-resolved evaluation. Horizons are 1-based steps; the average
/// pools every masked cell of every step.
pub fn evaluate(model: &Forecaster, windows: &[Window], horizons: &[usize]) -> Result<HorizonReport> {
    if windows.is_empty() {
        return Err(Error::EmptySplit("no windows to evaluate".into()));
    }
    let l2 = model.config().l2;
    if let Some(h) = horizons.iter().find(|h| **h == 0 || **h > l2) {
        return Err(Error::Invalid(format!("horizon {h} outside 1..={l2}")));
    }
    let steps = accumulate_steps(model, windows)?;
    let mut total = MetricAccumulator::default();
    for acc in &steps {
        total.merge(acc);
    }
    let horizons = horizons
        .iter()
        .map(|h| Ok((*h, steps[h - 1].finish()?)))
        .collect::<Result<_>>()?;
    Ok(HorizonReport {
        horizons,
        average: total.finish()?,
        meta: ReportMeta::default(),
    })
}
