use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::Window;
use crate::error::Result;
use crate::model::{Forecaster, EMBEDDING_TENSOR};

/// Gradients below this magnitude are compared absolutely.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// Worst analytic-vs-numeric disagreement found for each tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub per_tensor: Vec<(String, f64)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_tensor.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&(String, f64)> {
        self.per_tensor.iter().max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

fn objective(model: &Forecaster, batch: &[Window], probe: &Array3<f64>) -> Result<f64> {
    Ok((model.forward(batch)? * probe).sum())
}

/// Compares the backward pass against central differences of the smooth
/// objective `Σ probe ⊙ forward(batch)` for every scalar of every trainable
/// tensor. The probe is a fixed random tensor drawn from `seed`.
pub fn check_gradients(model: &Forecaster, batch: &[Window], h: f64, seed: u64) -> Result<GradCheckReport> {
    let pass = model.forward_batch(batch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = Array3::from_shape_fn(pass.predictions.dim(), |_| rng.random_range(-1.0..1.0));
    let analytic = model.backward(&pass, &probe)?;
    let names = analytic.names();
    let mut work = model.clone();
    let mut per_tensor = Vec::new();
    let mut checked = 0;
    for (t, name) in names.iter().enumerate() {
        if name == EMBEDDING_TENSOR && !model.embedding_trainable() {
            continue;
        }
        let len = analytic.slices()[t].len();
        let mut worst = 0.0f64;
        for i in 0..len {
            let orig = work.params().slices()[t][i];
            work.params_mut().slices_mut()[t][i] = orig + h;
            let up = objective(&work, batch, &probe)?;
            work.params_mut().slices_mut()[t][i] = orig - h;
            let down = objective(&work, batch, &probe)?;
            work.params_mut().slices_mut()[t][i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.slices()[t][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
            worst = worst.max(rel);
            checked += 1;
        }
        per_tensor.push((name.clone(), worst));
    }
    Ok(GradCheckReport { per_tensor, checked })
}
