//! Adaptive adjacency `SoftMax(ReLU(E Eᵀ))` built from any node embedding,
//! and the single graph propagation step used by the graph forecaster.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::pca::EmbeddingTable;

/// Row-stochastic `[N × N]` adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveGraph {
    weights: Array2<f64>,
}

impl AdaptiveGraph {
    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn num_nodes(&self) -> usize {
        self.weights.nrows()
    }

    /// Dense `src,dst,weight` edge list of every entry `>= min_weight`.
    pub fn to_csv(&self, node_ids: &[String], min_weight: f64) -> Result<String> {
        if node_ids.len() != self.num_nodes() {
            return Err(Error::Shape(format!(
                "{} node ids for a {}-node graph",
                node_ids.len(),
                self.num_nodes()
            )));
        }
        let mut out = String::from("src,dst,weight\n");
        for ((i, j), w) in self.weights.indexed_iter() {
            if *w >= min_weight {
                out.push_str(&format!("{},{},{w:.16e}\n", node_ids[i], node_ids[j]));
            }
        }
        Ok(out)
    }
}

/// `E Eᵀ` with a fixed accumulation order per entry.
fn similarity(embedding: ArrayView2<f64>) -> Array2<f64> {
    let n = embedding.nrows();
    Array2::from_shape_fn((n, n), |(i, j)| {
        embedding
            .row(i)
            .iter()
            .zip(embedding.row(j).iter())
            .fold(0.0, |acc, (a, b)| acc + a * b)
    })
}

/// Row-wise softmax of `ReLU(E Eᵀ)`, with per-row max subtraction.
///
/// Row normalizers are summed in ascending order so that relabelling the
/// nodes permutes the result exactly, bit for bit.
pub fn adaptive_weights(embedding: ArrayView2<f64>) -> Result<Array2<f64>> {
    if embedding.nrows() == 0 {
        return Err(Error::Shape("embedding has no rows".into()));
    }
    if embedding.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("embedding fed to the adaptive graph".into()));
    }
    let mut logits = similarity(embedding);
    logits.mapv_inplace(|v| v.max(0.0));
    let mut scratch = Vec::with_capacity(logits.ncols());
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        row.mapv_inplace(|v| (v - max).exp());
        scratch.clear();
        scratch.extend(row.iter().copied());
        scratch.sort_by(f64::total_cmp);
        let sum: f64 = scratch.iter().sum();
        row.mapv_inplace(|v| v / sum);
    }
    Ok(logits)
}

pub fn build_adaptive_graph(e: &EmbeddingTable) -> Result<AdaptiveGraph> {
    Ok(AdaptiveGraph {
        weights: adaptive_weights(e.values().view())?,
    })
}

/// One propagation step: `G · H`.
pub fn graph_mix(g: &AdaptiveGraph, h: ArrayView2<f64>) -> Result<Array2<f64>> {
    if h.nrows() != g.num_nodes() {
        return Err(Error::Shape(format!(
            "graph has {} nodes, features have {} rows",
            g.num_nodes(),
            h.nrows()
        )));
    }
    Ok(g.weights.dot(&h))
}

/// Gradient w.r.t. the embedding given the gradient w.r.t. the graph
/// weights `G = softmax_row(ReLU(E Eᵀ))`.
pub(crate) fn adaptive_weights_backward(
    embedding: ArrayView2<f64>,
    weights: &Array2<f64>,
    d_weights: &Array2<f64>,
) -> Array2<f64> {
    let logits = similarity(embedding);
    let n = weights.nrows();
    let mut d_logits = Array2::zeros((n, n));
    for i in 0..n {
        let g = weights.row(i);
        let dg = d_weights.row(i);
        let inner: f64 = g.iter().zip(dg.iter()).map(|(a, b)| a * b).sum();
        for j in 0..n {
            if logits[[i, j]] > 0.0 {
                d_logits[[i, j]] = g[j] * (dg[j] - inner);
            }
        }
    }
    let sym = &d_logits + &d_logits.t();
    sym.dot(&embedding)
}

/// Sum of every row, for invariant checks.
pub fn row_sums(g: &AdaptiveGraph) -> Vec<f64> {
    g.weights.rows().into_iter().map(|r| r.sum()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pca::{EmbeddingSource, EmbeddingStrategy};
    use ndarray::{array, Axis};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn all_close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) -> bool {
        a.dim() == b.dim() && ndarray::Zip::from(a).and(b).all(|x, y| (x - y).abs() <= tol)
    }

    fn table(values: Array2<f64>) -> EmbeddingTable {
        EmbeddingTable::new(values, EmbeddingStrategy::Adaptive, EmbeddingSource::default()).unwrap()
    }

    fn random(n: usize, c: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, c), |_| rng.random_range(-1.5..1.5))
    }

    /// Direct formula: clamp, exponentiate, normalize, no max shift.
    fn oracle(e: &Array2<f64>) -> Array2<f64> {
        let n = e.nrows();
        let mut out = Array2::zeros((n, n));
        for i in 0..n {
            let mut row = vec![0.0; n];
            for j in 0..n {
                let dot: f64 = (0..e.ncols()).map(|k| e[[i, k]] * e[[j, k]]).sum();
                row[j] = dot.max(0.0).exp();
            }
            let s: f64 = row.iter().sum();
            for j in 0..n {
                out[[i, j]] = row[j] / s;
            }
        }
        out
    }

    #[test]
    fn identity_embedding() {
        let g = build_adaptive_graph(&table(Array2::eye(2))).unwrap();
        let e = std::f64::consts::E;
        let hi = e / (e + 1.0);
        assert!(all_close(g.weights(), &array![[hi, 1.0 - hi], [1.0 - hi, hi]], 1e-15));
        assert!((hi - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn zero_embedding_is_uniform() {
        let g = build_adaptive_graph(&table(Array2::zeros((3, 4)))).unwrap();
        assert!(g.weights().iter().all(|w| (*w - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn matches_formula_oracle() {
        let e = random(4, 3, 11);
        let g = build_adaptive_graph(&table(e.clone())).unwrap();
        assert!(all_close(g.weights(), &oracle(&e), 1e-12));
    }

    #[test]
    fn scaling_keeps_row_argmax() {
        let e = random(6, 3, 12);
        let argmax = |g: &AdaptiveGraph| -> Vec<usize> {
            g.weights()
                .rows()
                .into_iter()
                .map(|r| r.iter().enumerate().fold((0, f64::MIN), |b, (j, v)| if *v > b.1 { (j, *v) } else { b }).0)
                .collect()
        };
        let g1 = build_adaptive_graph(&table(e.clone())).unwrap();
        let g2 = build_adaptive_graph(&table(&e * 3.0)).unwrap();
        assert_eq!(argmax(&g1), argmax(&g2));
    }

    #[test]
    fn mix_examples() {
        let g = build_adaptive_graph(&table(Array2::zeros((2, 1)))).unwrap();
        assert_eq!(graph_mix(&g, array![[0.0], [2.0]].view()).unwrap(), array![[1.0], [1.0]]);
        let sharp = build_adaptive_graph(&table(Array2::eye(3) * 8.0)).unwrap();
        let h = random(3, 2, 3);
        assert!(all_close(&graph_mix(&sharp, h.view()).unwrap(), &h, 1e-12));
        assert!(graph_mix(&g, random(3, 2, 4).view()).is_err());
    }

    #[test]
    fn mix_matches_matmul_oracle() {
        let g = build_adaptive_graph(&table(random(5, 2, 5))).unwrap();
        let h = random(5, 3, 6);
        let out = graph_mix(&g, h.view()).unwrap();
        for i in 0..5 {
            for f in 0..3 {
                let expect: f64 = (0..5).map(|j| g.weights()[[i, j]] * h[[j, f]]).sum();
                assert!((out[[i, f]] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn rejects_non_finite() {
        assert!(adaptive_weights(array![[f64::NAN]].view()).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let e = random(4, 3, 21);
        let probe = random(4, 4, 22);
        let objective = |e: &Array2<f64>| -> f64 {
            (adaptive_weights(e.view()).unwrap() * &probe).sum()
        };
        let w = adaptive_weights(e.view()).unwrap();
        let grad = adaptive_weights_backward(e.view(), &w, &probe);
        let h = 1e-6;
        for i in 0..4 {
            for k in 0..3 {
                let mut ep = e.clone();
                ep[[i, k]] += h;
                let mut em = e.clone();
                em[[i, k]] -= h;
                let fd = (objective(&ep) - objective(&em)) / (2.0 * h);
                assert!((fd - grad[[i, k]]).abs() < 1e-7, "{fd} vs {}", grad[[i, k]]);
            }
        }
    }

    #[test]
    fn csv_export_threshold() {
        let g = build_adaptive_graph(&table(Array2::eye(2))).unwrap();
        let ids = vec!["a".to_string(), "b".to_string()];
        assert_eq!(g.to_csv(&ids, 0.0).unwrap().lines().count(), 5);
        assert_eq!(g.to_csv(&ids, 0.5).unwrap().lines().count(), 3);
    }

    proptest! {
        #[test]
        fn row_stochastic(seed in 0u64..10_000, n in 1usize..8, c in 1usize..5) {
            let g = build_adaptive_graph(&table(random(n, c, seed) * 4.0)).unwrap();
            prop_assert!(g.weights().iter().all(|w| *w >= 0.0));
            for s in row_sums(&g) {
                prop_assert!((s - 1.0).abs() <= 1e-9);
            }
        }

        #[test]
        fn permutation_equivariant(seed in 0u64..10_000) {
            let e = random(5, 3, seed);
            let perm = [2usize, 4, 0, 1, 3];
            let g = adaptive_weights(e.view()).unwrap();
            let gp = adaptive_weights(e.select(Axis(0), &perm).view()).unwrap();
            let expected = g.select(Axis(0), &perm).select(Axis(1), &perm);
            prop_assert_eq!(gp, expected);
        }

        #[test]
        fn mixing_preserves_constants(seed in 0u64..10_000, c in -10.0f64..10.0) {
            let g = build_adaptive_graph(&table(random(6, 2, seed))).unwrap();
            let out = graph_mix(&g, Array2::from_elem((6, 1), c).view()).unwrap();
            prop_assert!(out.iter().all(|v| (v - c).abs() <= 1e-12 * (1.0 + c.abs())));
        }
    }
}
