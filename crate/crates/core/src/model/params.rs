use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the node-shared forecaster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// History length.
    pub l1: usize,
    /// Forecast horizon.
    pub l2: usize,
    pub embed_dim: usize,
    pub tod_dim: usize,
    pub dow_dim: usize,
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub use_graph: bool,
    pub steps_per_day: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            l1: 12,
            l2: 12,
            embed_dim: 8,
            tod_dim: 8,
            dow_dim: 4,
            hidden_dim: 32,
            num_blocks: 2,
            use_graph: false,
            steps_per_day: 288,
        }
    }
}

impl ModelConfig {
    /// Width of the concatenated hidden state.
    pub fn mixed_dim(&self) -> usize {
        self.hidden_dim + self.embed_dim + self.tod_dim + self.dow_dim
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("l1", self.l1),
            ("l2", self.l2),
            ("embed_dim", self.embed_dim),
            ("tod_dim", self.tod_dim),
            ("dow_dim", self.dow_dim),
            ("hidden_dim", self.hidden_dim),
            ("num_blocks", self.num_blocks),
            ("steps_per_day", self.steps_per_day),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Invalid(format!("model {name} must be at least 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Every tensor of the forecaster. The same struct doubles as the gradient
/// and optimizer-moment container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `[C_h × l1]`
    pub w_x: Array2<f64>,
    pub b_x: Array1<f64>,
    /// Node embedding slot `[N × C_e]`, the only node-dependent tensor.
    pub embedding: Array2<f64>,
    /// `[T × C_t]`
    pub tod: Array2<f64>,
    /// `[7 × C_d]`
    pub dow: Array2<f64>,
    pub blocks: Vec<ResidualBlock>,
    /// `[l2 × C_m]`
    pub w_o: Array2<f64>,
    pub b_o: Array1<f64>,
}

pub const EMBEDDING_TENSOR: &str = "embedding";

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new(-a, a).expect("valid bounds");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

/// Xavier-uniform weights, zero biases, `N(0, 0.01²)` embedding.
/// Deterministic in `seed`.
pub fn init_params(config: &ModelConfig, nodes: usize, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    if nodes == 0 {
        return Err(Error::Invalid("model needs at least one node".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cm = config.mixed_dim();
    let w_x = xavier(&mut rng, config.hidden_dim, config.l1);
    let normal = Normal::new(0.0, 0.01).expect("valid std");
    let embedding = Array2::from_shape_fn((nodes, config.embed_dim), |_| normal.sample(&mut rng));
    let tod = xavier(&mut rng, config.steps_per_day, config.tod_dim);
    let dow = xavier(&mut rng, 7, config.dow_dim);
    let blocks = (0..config.num_blocks)
        .map(|_| ResidualBlock {
            w1: xavier(&mut rng, cm, cm),
            b1: Array1::zeros(cm),
            w2: xavier(&mut rng, cm, cm),
            b2: Array1::zeros(cm),
        })
        .collect();
    let w_o = xavier(&mut rng, config.l2, cm);
    Ok(ModelParams {
        w_x,
        b_x: Array1::zeros(config.hidden_dim),
        embedding,
        tod,
        dow,
        blocks,
        w_o,
        b_o: Array1::zeros(config.l2),
    })
}

impl ModelParams {
    pub fn zeros_like(&self) -> ModelParams {
        let z2 = |a: &Array2<f64>| Array2::zeros(a.dim());
        let z1 = |a: &Array1<f64>| Array1::zeros(a.len());
        ModelParams {
            w_x: z2(&self.w_x),
            b_x: z1(&self.b_x),
            embedding: z2(&self.embedding),
            tod: z2(&self.tod),
            dow: z2(&self.dow),
            blocks: self
                .blocks
                .iter()
                .map(|b| ResidualBlock {
                    w1: z2(&b.w1),
                    b1: z1(&b.b1),
                    w2: z2(&b.w2),
                    b2: z1(&b.b2),
                })
                .collect(),
            w_o: z2(&self.w_o),
            b_o: z1(&self.b_o),
        }
    }

    /// Tensor names and shapes in canonical (checkpoint) order.
    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d2 = |a: &Array2<f64>| vec![a.nrows(), a.ncols()];
        let d1 = |a: &Array1<f64>| vec![a.len()];
        let mut out = vec![
            ("w_x".to_string(), d2(&self.w_x)),
            ("b_x".to_string(), d1(&self.b_x)),
            (EMBEDDING_TENSOR.to_string(), d2(&self.embedding)),
            ("tod".to_string(), d2(&self.tod)),
            ("dow".to_string(), d2(&self.dow)),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.w1"), d2(&b.w1)));
            out.push((format!("blocks.{i}.b1"), d1(&b.b1)));
            out.push((format!("blocks.{i}.w2"), d2(&b.w2)));
            out.push((format!("blocks.{i}.b2"), d1(&b.b2)));
        }
        out.push(("w_o".to_string(), d2(&self.w_o)));
        out.push(("b_o".to_string(), d1(&self.b_o)));
        out
    }

    /// Tensor data in canonical order, row-major.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![
            self.w_x.as_slice().unwrap(),
            self.b_x.as_slice().unwrap(),
            self.embedding.as_slice().unwrap(),
            self.tod.as_slice().unwrap(),
            self.dow.as_slice().unwrap(),
        ];
        for b in &self.blocks {
            out.push(b.w1.as_slice().unwrap());
            out.push(b.b1.as_slice().unwrap());
            out.push(b.w2.as_slice().unwrap());
            out.push(b.b2.as_slice().unwrap());
        }
        out.push(self.w_o.as_slice().unwrap());
        out.push(self.b_o.as_slice().unwrap());
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let ModelParams {
            w_x,
            b_x,
            embedding,
            tod,
            dow,
            blocks,
            w_o,
            b_o,
        } = self;
        let mut out: Vec<&mut [f64]> = vec![
            w_x.as_slice_mut().unwrap(),
            b_x.as_slice_mut().unwrap(),
            embedding.as_slice_mut().unwrap(),
            tod.as_slice_mut().unwrap(),
            dow.as_slice_mut().unwrap(),
        ];
        for b in blocks.iter_mut() {
            out.push(b.w1.as_slice_mut().unwrap());
            out.push(b.b1.as_slice_mut().unwrap());
            out.push(b.w2.as_slice_mut().unwrap());
            out.push(b.b2.as_slice_mut().unwrap());
        }
        out.push(w_o.as_slice_mut().unwrap());
        out.push(b_o.as_slice_mut().unwrap());
        out
    }

    pub fn names(&self) -> Vec<String> {
        self.shapes().into_iter().map(|(n, _)| n).collect()
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &ModelParams) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for a in self.slices_mut() {
            for x in a.iter_mut() {
                *x *= factor;
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// First non-finite tensor, by name.
    pub fn first_non_finite(&self) -> Option<String> {
        self.names()
            .into_iter()
            .zip(self.slices())
            .find(|(_, s)| s.iter().any(|v| !v.is_finite()))
            .map(|(n, _)| n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            l1: 4,
            l2: 3,
            embed_dim: 2,
            tod_dim: 2,
            dow_dim: 2,
            hidden_dim: 3,
            num_blocks: 2,
            use_graph: false,
            steps_per_day: 6,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_params(&small(), 5, 42).unwrap();
        let b = init_params(&small(), 5, 42).unwrap();
        for (x, y) in a.slices().iter().zip(b.slices()) {
            assert_eq!(
                x.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                y.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
        let c = init_params(&small(), 5, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn biases_start_at_zero_and_weights_are_bounded() {
        let cfg = small();
        let p = init_params(&cfg, 5, 1).unwrap();
        assert!(p.b_x.iter().chain(p.b_o.iter()).all(|v| *v == 0.0));
        for b in &p.blocks {
            assert!(b.b1.iter().chain(b.b2.iter()).all(|v| *v == 0.0));
            let a = (6.0 / (2 * cfg.mixed_dim()) as f64).sqrt();
            assert!(b.w1.iter().all(|v| v.abs() <= a));
        }
        assert!(p.embedding.iter().all(|v| v.abs() < 0.1));
        assert_eq!(p.shapes()[0].1, vec![3, 4]);
        assert_eq!(p.w_o.dim(), (3, cfg.mixed_dim()));
    }

    #[test]
    fn invalid_config() {
        let mut cfg = small();
        cfg.num_blocks = 0;
        assert!(init_params(&cfg, 2, 0).is_err());
        assert!(init_params(&small(), 0, 0).is_err());
    }

    #[test]
    fn arithmetic_helpers() {
        let p = init_params(&small(), 2, 3).unwrap();
        let mut q = p.zeros_like();
        q.add_assign(&p);
        q.add_assign(&p);
        q.scale(0.5);
        assert_eq!(q, p);
        assert_eq!(p.names().len(), 5 + 4 * 2 + 2);
        assert!(p.first_non_finite().is_none());
    }
}
