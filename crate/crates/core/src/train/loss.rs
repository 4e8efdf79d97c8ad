use ndarray::{Array3, ArrayView3, Zip};

use crate::dataset::Normalizer;
use crate::error::{Error, Result};

/// Masked MAE and its subgradient w.r.t. the normalized predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    pub grad: Array3<f64>,
    /// Number of cells with a non-zero target.
    pub count: usize,
}

/// `Σ m·|denorm(pred) − target| / Σ m` with `m = [target ≠ 0]`.
///
/// `pred` is in normalized units, `target` in original units. The gradient
/// is `sign(diff)·std/Σm` on valid cells and zero elsewhere, including ties.
pub fn masked_mae_loss(
    pred: ArrayView3<f64>,
    target: ArrayView3<f64>,
    normalizer: &Normalizer,
) -> Result<LossValue> {
    if pred.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let count = target.iter().filter(|t| **t != 0.0).count();
    if count == 0 {
        return Err(Error::NoValidTargets);
    }
    let scale = normalizer.std / count as f64;
    let mut grad = Array3::zeros(pred.dim());
    let mut sum = 0.0;
    Zip::from(&mut grad)
        .and(&pred)
        .and(&target)
        .for_each(|g, p, t| {
            if *t != 0.0 {
                let diff = normalizer.invert(*p) - t;
                sum += diff.abs();
                *g = if diff > 0.0 {
                    scale
                } else if diff < 0.0 {
                    -scale
                } else {
                    0.0
                };
            }
        });
    Ok(LossValue {
        loss: sum / count as f64,
        grad,
        count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3, Axis};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn as3(v: ndarray::Array1<f64>) -> Array3<f64> {
        let n = v.len();
        v.into_shape_with_order((1, 1, n)).unwrap()
    }

    #[test]
    fn hand_computed_example() {
        let nz = Normalizer::new(0.0, 1.0).unwrap();
        let out = masked_mae_loss(
            as3(array![5.0, 8.0]).view(),
            as3(array![0.0, 10.0]).view(),
            &nz,
        )
        .unwrap();
        assert_eq!(out.loss, 2.0);
        assert_eq!(out.count, 1);
        assert_eq!(out.grad.as_slice().unwrap(), &[0.0, -1.0]);
    }

    #[test]
    fn perfect_prediction() {
        let nz = Normalizer::new(10.0, 4.0).unwrap();
        let target = as3(array![14.0, 6.0, 0.0]);
        let pred = target.mapv(|t| nz.apply(t));
        let out = masked_mae_loss(pred.view(), target.view(), &nz).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn empty_mask_is_reported() {
        let nz = Normalizer::new(0.0, 1.0).unwrap();
        let z = Array3::zeros((1, 2, 2));
        assert!(matches!(masked_mae_loss(z.view(), z.view(), &nz), Err(Error::NoValidTargets)));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let nz = Normalizer::new(20.0, 7.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pred = Array3::from_shape_fn((2, 3, 4), |_| rng.random_range(-2.0..2.0));
        let target = Array3::from_shape_fn((2, 3, 4), |_| {
            if rng.random_bool(0.2) {
                0.0
            } else {
                rng.random_range(1.0..40.0)
            }
        });
        let base = masked_mae_loss(pred.view(), target.view(), &nz).unwrap();
        let h = 1e-6;
        for (idx, g) in base.grad.indexed_iter() {
            let mut p = pred.clone();
            p[idx] += h;
            let up = masked_mae_loss(p.view(), target.view(), &nz).unwrap().loss;
            p[idx] -= 2.0 * h;
            let down = masked_mae_loss(p.view(), target.view(), &nz).unwrap().loss;
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - g).abs() / g.abs().max(1e-12);
            assert!(rel < 1e-6 || (fd - g).abs() < 1e-9, "{idx:?}: {fd} vs {g}");
        }
    }

    #[test]
    fn invariant_under_node_permutation() {
        let nz = Normalizer::new(1.0, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pred = Array3::from_shape_fn((2, 5, 3), |_| rng.random_range(-2.0..2.0));
        let target = Array3::from_shape_fn((2, 5, 3), |_| rng.random_range(0.0..9.0));
        let perm = [4, 2, 0, 1, 3];
        let a = masked_mae_loss(pred.view(), target.view(), &nz).unwrap();
        let b = masked_mae_loss(
            pred.select(Axis(1), &perm).view(),
            target.select(Axis(1), &perm).view(),
            &nz,
        )
        .unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12);
    }
}
