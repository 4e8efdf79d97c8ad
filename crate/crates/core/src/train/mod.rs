//! Masked-MAE training with Adam, global-norm clipping and early stopping
//! on validation MAE.

mod gradcheck;
mod loss;
mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use gradcheck::{check_gradients, GradCheckReport, GRADCHECK_FLOOR};
pub use loss::{masked_mae_loss, LossValue};
pub use optim::{clip_global_norm, Adam, EarlyStopping, StopReason};

use crate::dataset::WindowSet;
use crate::error::{Error, Result};
use crate::metrics::{masked_mae, stack_targets};
use crate::model::{Forecaster, EMBEDDING_TENSOR};

/// Which tensors the optimizer updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainScope {
    /// Everything; the embedding only if the model's strategy trains it.
    Full,
    /// Only the embedding slot, whatever the strategy.
    EmbeddingOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub scope: TrainScope,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            max_epochs: 200,
            patience: 20,
            batch_size: 32,
            grad_clip_norm: 5.0,
            seed: 0,
            scope: TrainScope::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.grad_clip_norm.is_finite() && self.grad_clip_norm > 0.0) {
            return Err(Error::Config(format!(
                "grad_clip_norm must be positive, got {}",
                self.grad_clip_norm
            )));
        }
        if self.max_epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::Config(
                "max_epochs, batch_size and patience must be at least 1".into(),
            ));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub stop_reason: StopReason,
    pub skipped_batches: usize,
}

impl TrainReport {
    /// `epoch,train_loss,val_mae` lines.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_mae\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.val_mae));
        }
        out
    }
}

/// Which tensors receive updates for `scope` on this model.
fn active_tensors(model: &Forecaster, scope: TrainScope) -> Vec<bool> {
    model
        .params()
        .names()
        .iter()
        .map(|n| match scope {
            TrainScope::EmbeddingOnly => n == EMBEDDING_TENSOR,
            TrainScope::Full => n != EMBEDDING_TENSOR || model.embedding_trainable(),
        })
        .collect()
}

/// Trains `model` in place and leaves it holding the parameters of the
/// epoch with the lowest validation MAE.
pub fn fit(model: &mut Forecaster, train: &WindowSet, val: &WindowSet, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptySplit("no training windows".into()));
    }
    if val.is_empty() {
        return Err(Error::EmptySplit("no validation windows".into()));
    }
    let active = active_tensors(model, cfg.scope);
    let embedding_grad = active
        .iter()
        .zip(model.params().names())
        .any(|(on, n)| *on && n == EMBEDDING_TENSOR);
    let normalizer = *model.normalizer();
    let val_windows = val.all();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.params(), cfg.lr);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.params().clone();
    let mut epochs = Vec::new();
    let mut skipped = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut cells = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let batch = train.windows(idx);
            let pass = model.forward_batch(&batch).map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged { epoch },
                other => other,
            })?;
            let target = stack_targets(&batch);
            let lv = match masked_mae_loss(pass.predictions.view(), target.view(), &normalizer) {
                Ok(lv) => lv,
                Err(Error::NoValidTargets) => {
                    log::warn!("epoch {epoch}: skipping a batch with no valid targets");
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            if !lv.loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            let mut grads = model.backward_with(&pass, &lv.grad, embedding_grad)?;
            clip_global_norm(&mut grads, cfg.grad_clip_norm);
            adam.step(model.params_mut(), &grads, &active);
            loss_sum += lv.loss * lv.count as f64;
            cells += lv.count;
        }
        let train_loss = if cells > 0 { loss_sum / cells as f64 } else { f64::NAN };
        let val_mae = masked_mae(model, &val_windows).map_err(|e| match e {
            Error::NonFinite(_) => Error::Diverged { epoch },
            other => other,
        })?;
        if !val_mae.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        log::debug!("epoch {epoch}: train {train_loss:.4} val {val_mae:.4}");
        epochs.push(EpochLog {
            epoch,
            train_loss,
            val_mae,
        });
        if stopper.observe(epoch, val_mae) {
            best = model.params().clone();
        }
        if stopper.should_stop() {
            stop_reason = StopReason::Patience;
            break;
        }
    }
    *model.params_mut() = best;
    Ok(TrainReport {
        epochs,
        best_epoch: stopper.best_epoch(),
        best_val_mae: stopper.best(),
        stop_reason,
        skipped_batches: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_windows, Normalizer, TrafficSeries};
    use crate::model::ModelConfig;
    use crate::pca::EmbeddingStrategy;
    use chrono::NaiveDate;
    use ndarray::Array2;

    fn series(nodes: usize, days: usize) -> TrafficSeries {
        let t = 12;
        let values = Array2::from_shape_fn((days * t, nodes), |(s, n)| {
            let phase = (s % t) as f64 / t as f64 * std::f64::consts::TAU;
            30.0 + 10.0 * (phase + n as f64).sin() + (s * 7 % 5) as f64
        });
        let start = NaiveDate::from_ymd_opt(2018, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
        TrafficSeries::new(values, 120, start, (0..nodes).map(|i| i.to_string()).collect()).unwrap()
    }

    fn toy(strategy: EmbeddingStrategy, use_graph: bool) -> (Forecaster, WindowSet, WindowSet) {
        let s = series(5, 6);
        let nz = Normalizer::fit_values(s.values().iter()).unwrap();
        let cfg = ModelConfig {
            l1: 4,
            l2: 4,
            embed_dim: 4,
            tod_dim: 4,
            dow_dim: 2,
            hidden_dim: 8,
            num_blocks: 1,
            use_graph,
            steps_per_day: 12,
        };
        let model = Forecaster::new(cfg, 5, strategy, nz, 11).unwrap();
        let train = make_windows(&s, 0..48, 4, 4, Some(&nz)).unwrap();
        let val = make_windows(&s, 48..72, 4, 4, Some(&nz)).unwrap();
        (model, train, val)
    }

    fn quick(max_epochs: usize, patience: usize) -> TrainConfig {
        TrainConfig {
            lr: 1e-2,
            max_epochs,
            patience,
            batch_size: 8,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for use_graph in [false, true] {
            let (mut model, train, _) = toy(EmbeddingStrategy::Adaptive, use_graph);
            model.params_mut().embedding.mapv_inplace(|v| v * 50.0);
            let batch = train.windows(&[0, 5, 9]);
            let report = check_gradients(&model, &batch, 1e-5, 1).unwrap();
            assert_eq!(report.checked, model.params().num_scalars());
            assert!(report.max_rel_error() < 1e-4, "graph={use_graph}: {:?}", report.worst());
        }
    }

    #[test]
    fn one_epoch_bound_and_log() {
        let (mut model, train, val) = toy(EmbeddingStrategy::Adaptive, false);
        let report = fit(&mut model, &train, &val, &quick(1, 1)).unwrap();
        assert_eq!(report.epochs.len(), 1);
        assert_eq!(report.best_epoch, 1);
        let csv = report.to_csv();
        assert!(csv.starts_with("epoch,train_loss,val_mae\n1,"));
    }

    #[test]
    fn same_seed_same_report() {
        let (mut a, train, val) = toy(EmbeddingStrategy::Adaptive, true);
        let mut b = a.clone();
        let ra = fit(&mut a, &train, &val, &quick(4, 4)).unwrap();
        let rb = fit(&mut b, &train, &val, &quick(4, 4)).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a, b);
    }

    #[test]
    fn best_snapshot_is_kept() {
        let (mut model, train, val) = toy(EmbeddingStrategy::Adaptive, false);
        let report = fit(&mut model, &train, &val, &quick(8, 8)).unwrap();
        let min = report.epochs.iter().map(|e| e.val_mae).fold(f64::INFINITY, f64::min);
        assert_eq!(report.best_val_mae, min);
        let again = masked_mae(&model, &val.all()).unwrap();
        assert_eq!(again, min);
    }

    #[test]
    fn frozen_embedding_is_bitwise_unchanged() {
        for strategy in [EmbeddingStrategy::Pca, EmbeddingStrategy::Zero] {
            let (mut model, train, val) = toy(strategy, true);
            let before = model.params().embedding.clone();
            let w_before = model.params().w_o.clone();
            fit(&mut model, &train, &val, &quick(3, 3)).unwrap();
            assert_eq!(
                model.params().embedding.mapv(f64::to_bits),
                before.mapv(f64::to_bits)
            );
            assert_ne!(model.params().w_o, w_before);
        }
    }

    #[test]
    fn embedding_only_scope() {
        let (mut model, train, val) = toy(EmbeddingStrategy::Pca, false);
        let before = model.clone();
        let cfg = TrainConfig {
            scope: TrainScope::EmbeddingOnly,
            ..quick(3, 3)
        };
        fit(&mut model, &train, &val, &cfg).unwrap();
        assert_ne!(model.params().embedding, before.params().embedding);
        assert_eq!(model.params().w_x, before.params().w_x);
        assert_eq!(model.params().blocks, before.params().blocks);
    }

    #[test]
    fn repeated_batch_loss_does_not_increase() {
        let (mut model, train, _) = toy(EmbeddingStrategy::Adaptive, false);
        let batch = train.windows(&[0, 1, 2, 3, 4, 5, 6, 7]);
        let target = stack_targets(&batch);
        let nz = *model.normalizer();
        let active = vec![true; model.params().names().len()];
        let mut adam = Adam::new(model.params(), 1e-3);
        let mut prev = f64::INFINITY;
        for step in 0..50 {
            let pass = model.forward_batch(&batch).unwrap();
            let lv = masked_mae_loss(pass.predictions.view(), target.view(), &nz).unwrap();
            assert!(lv.loss <= prev, "step {step}: {} > {prev}", lv.loss);
            prev = lv.loss;
            let mut g = model.backward(&pass, &lv.grad).unwrap();
            clip_global_norm(&mut g, 5.0);
            adam.step(model.params_mut(), &g, &active);
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let (mut model, train, val) = toy(EmbeddingStrategy::Adaptive, false);
        let bad = TrainConfig {
            patience: 5,
            max_epochs: 2,
            ..TrainConfig::default()
        };
        assert!(fit(&mut model, &train, &val, &bad).is_err());
        let zero_lr = TrainConfig { lr: 0.0, ..quick(1, 1) };
        assert!(fit(&mut model, &train, &val, &zero_lr).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let (mut model, train, val) = toy(EmbeddingStrategy::Adaptive, false);
        model.params_mut().w_o.fill(f64::MAX);
        assert!(matches!(
            fit(&mut model, &train, &val, &quick(2, 2)),
            Err(Error::Diverged { epoch: 1 })
        ));
    }
}
