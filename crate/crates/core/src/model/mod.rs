//! Node-shared residual MLP forecaster with a pluggable node-embedding slot
//! and an optional adaptive-graph mixing step.
//!
//! Every node runs through the same weights; the embedding table is the only
//! tensor whose shape depends on the node count, so swapping it retargets a
//! trained model to a different sensor set.

mod checkpoint;
mod params;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};

pub use checkpoint::{MODEL_FORMAT_VERSION, MODEL_MAGIC};
pub use params::{init_params, ModelConfig, ModelParams, ResidualBlock, EMBEDDING_TENSOR};

use crate::dataset::{Normalizer, Window};
use crate::error::{Error, Result};
use crate::graph::{adaptive_weights, adaptive_weights_backward};
use crate::par;
use crate::pca::{EmbeddingSource, EmbeddingStrategy, EmbeddingTable};

/// Windows per independent forward/backward unit. Fixed so that the
/// gradient reduction order never depends on the thread count.
pub const GRAD_CHUNK: usize = 8;

/// A trained or trainable forecaster: architecture, tensors, the strategy
/// that filled the embedding slot, and the normalizer that defines its input
/// units.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecaster {
    config: ModelConfig,
    params: ModelParams,
    strategy: EmbeddingStrategy,
    normalizer: Normalizer,
}

/// Activations of one chunk, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    windows: usize,
    nodes: usize,
    x: Array2<f64>,
    tods: Vec<usize>,
    dows: Vec<usize>,
    block_inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
    activations: Vec<Array2<f64>>,
    pre_mix: Option<Array2<f64>>,
    last_hidden: Array2<f64>,
}

/// Forward results for a whole batch.
#[derive(Debug, Clone)]
pub struct BatchPass {
    /// `[B × N × l2]` in normalized units.
    pub predictions: Array3<f64>,
    caches: Vec<ForwardCache>,
    graph: Option<Array2<f64>>,
}

impl BatchPass {
    /// The row-stochastic graph used for mixing, when the model has one.
    pub fn graph(&self) -> Option<&Array2<f64>> {
        self.graph.as_ref()
    }
}

fn add_row(m: &mut Array2<f64>, b: &Array1<f64>) {
    *m += &b.view().insert_axis(Axis(0));
}

fn check_finite(m: &Array2<f64>, what: impl FnOnce() -> String) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what()));
    }
    Ok(())
}

impl Forecaster {
    /// Fresh parameters. Under the zero strategy the slot is zeroed; under
    /// pca it holds random values until [`Forecaster::set_embedding`].
    pub fn new(
        config: ModelConfig,
        nodes: usize,
        strategy: EmbeddingStrategy,
        normalizer: Normalizer,
        seed: u64,
    ) -> Result<Self> {
        let mut params = init_params(&config, nodes, seed)?;
        if strategy == EmbeddingStrategy::Zero {
            params.embedding.fill(0.0);
        }
        Ok(Forecaster {
            config,
            params,
            strategy,
            normalizer,
        })
    }

    pub fn from_parts(
        config: ModelConfig,
        params: ModelParams,
        strategy: EmbeddingStrategy,
        normalizer: Normalizer,
    ) -> Result<Self> {
        config.validate()?;
        let fresh = init_params(&config, params.embedding.nrows().max(1), 0)?;
        let expected = fresh.shapes();
        let actual = params.shapes();
        if expected.len() != actual.len() {
            return Err(Error::Shape(format!(
                "{} tensors for a {}-block model",
                actual.len(),
                config.num_blocks
            )));
        }
        for ((name, want), (_, got)) in expected.iter().zip(&actual) {
            if want != got {
                return Err(Error::Shape(format!("tensor {name}: expected {want:?}, got {got:?}")));
            }
        }
        if let Some(name) = params.first_non_finite() {
            return Err(Error::NonFinite(format!("tensor {name}")));
        }
        Ok(Forecaster {
            config,
            params,
            strategy,
            normalizer,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn strategy(&self) -> EmbeddingStrategy {
        self.strategy
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    pub fn num_nodes(&self) -> usize {
        self.params.embedding.nrows()
    }

    /// Whether the optimizer may touch the embedding slot.
    pub fn embedding_trainable(&self) -> bool {
        self.strategy.is_trainable()
    }

    /// The current slot contents as a table.
    pub fn embedding_table(&self) -> EmbeddingTable {
        EmbeddingTable::new(
            self.params.embedding.clone(),
            self.strategy,
            EmbeddingSource::default(),
        )
        .expect("slot is always finite and non-empty")
    }

    /// Replaces the embedding slot. The node count may change; the width must
    /// match. A zero-strategy table always installs an all-zero slot.
    pub fn set_embedding(&mut self, table: &EmbeddingTable) -> Result<()> {
        if table.dim() != self.config.embed_dim {
            return Err(Error::Shape(format!(
                "embedding width {} does not match model embed_dim {}",
                table.dim(),
                self.config.embed_dim
            )));
        }
        self.params.embedding = match table.strategy() {
            EmbeddingStrategy::Zero => Array2::zeros(table.values().dim()),
            _ => table.values().clone(),
        };
        self.strategy = table.strategy();
        Ok(())
    }

    /// Convenience for the zero-embedding evaluation strategy.
    pub fn zero_embedding(&mut self) {
        self.params.embedding.fill(0.0);
        self.strategy = EmbeddingStrategy::Zero;
    }

    fn graph_weights(&self) -> Result<Option<Array2<f64>>> {
        if self.config.use_graph {
            Ok(Some(adaptive_weights(self.params.embedding.view())?))
        } else {
            Ok(None)
        }
    }

    fn check_batch(&self, batch: &[Window]) -> Result<()> {
        let n = self.num_nodes();
        for (i, w) in batch.iter().enumerate() {
            if w.history.dim() != (n, self.config.l1) {
                return Err(Error::Shape(format!(
                    "window {i}: history is {:?}, model expects ({n}, {})",
                    w.history.dim(),
                    self.config.l1
                )));
            }
            if w.tod >= self.config.steps_per_day || w.dow >= 7 {
                return Err(Error::Shape(format!(
                    "window {i}: calendar index (tod {}, dow {}) outside model tables (T = {})",
                    w.tod, w.dow, self.config.steps_per_day
                )));
            }
        }
        Ok(())
    }

    fn forward_chunk(
        &self,
        batch: &[Window],
        graph: Option<&Array2<f64>>,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        let cfg = &self.config;
        let p = &self.params;
        let n = self.num_nodes();
        let rows = batch.len() * n;
        let (ch, ce, ct) = (cfg.hidden_dim, cfg.embed_dim, cfg.tod_dim);

        let mut x = Array2::zeros((rows, cfg.l1));
        for (b, w) in batch.iter().enumerate() {
            x.slice_mut(s![b * n..(b + 1) * n, ..]).assign(&w.history);
        }
        let mut u = x.dot(&p.w_x.t());
        add_row(&mut u, &p.b_x);

        let mut h = Array2::zeros((rows, cfg.mixed_dim()));
        h.slice_mut(s![.., ..ch]).assign(&u);
        for (b, w) in batch.iter().enumerate() {
            let r = b * n..(b + 1) * n;
            h.slice_mut(s![r.clone(), ch..ch + ce]).assign(&p.embedding);
            h.slice_mut(s![r.clone(), ch + ce..ch + ce + ct])
                .assign(&p.tod.row(w.tod).insert_axis(Axis(0)));
            h.slice_mut(s![r, ch + ce + ct..])
                .assign(&p.dow.row(w.dow).insert_axis(Axis(0)));
        }
        check_finite(&h, || "input features".to_string())?;

        let mut block_inputs = Vec::with_capacity(cfg.num_blocks);
        let mut pre_activations = Vec::with_capacity(cfg.num_blocks);
        let mut activations = Vec::with_capacity(cfg.num_blocks);
        let mut pre_mix = None;
        for (i, blk) in p.blocks.iter().enumerate() {
            let mut a = h.dot(&blk.w1.t());
            add_row(&mut a, &blk.b1);
            let z = a.mapv(|v| v.max(0.0));
            let mut next = &h + &z.dot(&blk.w2.t());
            add_row(&mut next, &blk.b2);
            if let (0, Some(g)) = (i, graph) {
                let mut mixed = Array2::zeros(next.dim());
                for b in 0..batch.len() {
                    let r = b * n..(b + 1) * n;
                    mixed
                        .slice_mut(s![r.clone(), ..])
                        .assign(&g.dot(&next.slice(s![r, ..])));
                }
                pre_mix = Some(next);
                next = mixed;
            }
            check_finite(&next, || format!("block {i} output"))?;
            block_inputs.push(h);
            pre_activations.push(a);
            activations.push(z);
            h = next;
        }
        let mut y = h.dot(&p.w_o.t());
        add_row(&mut y, &p.b_o);
        check_finite(&y, || "output head".to_string())?;
        Ok((
            y,
            ForwardCache {
                windows: batch.len(),
                nodes: n,
                x,
                tods: batch.iter().map(|w| w.tod).collect(),
                dows: batch.iter().map(|w| w.dow).collect(),
                block_inputs,
                pre_activations,
                activations,
                pre_mix,
                last_hidden: h,
            },
        ))
    }

    /// Forward pass keeping the activations needed by [`Forecaster::backward`].
    pub fn forward_batch(&self, batch: &[Window]) -> Result<BatchPass> {
        self.check_batch(batch)?;
        let graph = self.graph_weights()?;
        let chunks: Vec<&[Window]> = batch.chunks(GRAD_CHUNK).collect();
        let results = par::map_ordered(&chunks, |c| self.forward_chunk(c, graph.as_ref()));
        let n = self.num_nodes();
        let l2 = self.config.l2;
        let mut predictions = Array3::zeros((batch.len(), n, l2));
        let mut caches = Vec::with_capacity(results.len());
        let mut offset = 0;
        for r in results {
            let (y, cache) = r?;
            let w = cache.windows;
            let y3 = y.into_shape_with_order((w, n, l2)).expect("row-major chunk output");
            predictions.slice_mut(s![offset..offset + w, .., ..]).assign(&y3);
            offset += w;
            caches.push(cache);
        }
        Ok(BatchPass {
            predictions,
            caches,
            graph,
        })
    }

    /// Predictions `[B × N × l2]` in normalized units.
    pub fn forward(&self, batch: &[Window]) -> Result<Array3<f64>> {
        Ok(self.forward_batch(batch)?.predictions)
    }

    /// Forward pass returning de-normalized predictions.
    pub fn predict(&self, batch: &[Window]) -> Result<Array3<f64>> {
        let nz = self.normalizer;
        Ok(self.forward(batch)?.mapv(|v| nz.invert(v)))
    }

    fn backward_chunk(
        &self,
        cache: &ForwardCache,
        d_y: ArrayView2<f64>,
        graph: Option<&Array2<f64>>,
        embedding_grad: bool,
    ) -> (ModelParams, Option<Array2<f64>>) {
        let cfg = &self.config;
        let p = &self.params;
        let mut g = p.zeros_like();
        let n = cache.nodes;
        let (ch, ce, ct) = (cfg.hidden_dim, cfg.embed_dim, cfg.tod_dim);

        g.w_o = d_y.t().dot(&cache.last_hidden);
        g.b_o = d_y.sum_axis(Axis(0));
        let mut d_h = d_y.dot(&p.w_o);
        let mut d_graph = None;

        for i in (0..cfg.num_blocks).rev() {
            if let (0, Some(gw), Some(pre)) = (i, graph, cache.pre_mix.as_ref()) {
                let mut dg = Array2::zeros((n, n));
                let mut d_pre = Array2::zeros(d_h.dim());
                for b in 0..cache.windows {
                    let r = b * n..(b + 1) * n;
                    let dh_b = d_h.slice(s![r.clone(), ..]);
                    if embedding_grad {
                        dg += &dh_b.dot(&pre.slice(s![r.clone(), ..]).t());
                    }
                    d_pre.slice_mut(s![r, ..]).assign(&gw.t().dot(&dh_b));
                }
                if embedding_grad {
                    d_graph = Some(dg);
                }
                d_h = d_pre;
            }
            let blk = &p.blocks[i];
            let gb = &mut g.blocks[i];
            gb.w2 = d_h.t().dot(&cache.activations[i]);
            gb.b2 = d_h.sum_axis(Axis(0));
            let mut d_a = d_h.dot(&blk.w2);
            ndarray::Zip::from(&mut d_a)
                .and(&cache.pre_activations[i])
                .for_each(|d, a| {
                    if *a <= 0.0 {
                        *d = 0.0;
                    }
                });
            gb.w1 = d_a.t().dot(&cache.block_inputs[i]);
            gb.b1 = d_a.sum_axis(Axis(0));
            d_h = d_h + d_a.dot(&blk.w1);
        }

        let d_u = d_h.slice(s![.., ..ch]);
        g.w_x = d_u.t().dot(&cache.x);
        g.b_x = d_u.sum_axis(Axis(0));
        for b in 0..cache.windows {
            let r = b * n..(b + 1) * n;
            if embedding_grad {
                g.embedding += &d_h.slice(s![r.clone(), ch..ch + ce]);
            }
            let mut tod_row = g.tod.row_mut(cache.tods[b]);
            tod_row += &d_h.slice(s![r.clone(), ch + ce..ch + ce + ct]).sum_axis(Axis(0));
            let mut dow_row = g.dow.row_mut(cache.dows[b]);
            dow_row += &d_h.slice(s![r, ch + ce + ct..]).sum_axis(Axis(0));
        }
        (g, d_graph)
    }

    /// Exact gradients of `Σ d_pred ⊙ predictions` w.r.t. every tensor. The
    /// embedding gradient is left at zero when the slot is frozen.
    pub fn backward(&self, pass: &BatchPass, d_pred: &Array3<f64>) -> Result<ModelParams> {
        self.backward_with(pass, d_pred, self.embedding_trainable())
    }

    /// As [`Forecaster::backward`], choosing explicitly whether the embedding
    /// gradient is computed. Fine-tuning uses this on a frozen strategy.
    pub fn backward_with(
        &self,
        pass: &BatchPass,
        d_pred: &Array3<f64>,
        embedding_grad: bool,
    ) -> Result<ModelParams> {
        if d_pred.dim() != pass.predictions.dim() {
            return Err(Error::Shape(format!(
                "loss gradient is {:?}, predictions are {:?}",
                d_pred.dim(),
                pass.predictions.dim()
            )));
        }
        let n = self.num_nodes();
        let l2 = self.config.l2;
        let mut jobs = Vec::with_capacity(pass.caches.len());
        let mut offset = 0;
        for cache in &pass.caches {
            let w = cache.windows;
            let d = d_pred
                .slice(s![offset..offset + w, .., ..])
                .to_owned()
                .into_shape_with_order((w * n, l2))
                .expect("contiguous slice");
            jobs.push((cache, d));
            offset += w;
        }
        let partials = par::map_ordered(&jobs, |(cache, d)| {
            self.backward_chunk(cache, d.view(), pass.graph.as_ref(), embedding_grad)
        });
        let mut total = self.params.zeros_like();
        let mut d_graph: Option<Array2<f64>> = None;
        for (g, dg) in partials {
            total.add_assign(&g);
            if let Some(dg) = dg {
                match d_graph.as_mut() {
                    Some(acc) => *acc += &dg,
                    None => d_graph = Some(dg),
                }
            }
        }
        if let (Some(gw), Some(dg)) = (pass.graph.as_ref(), d_graph) {
            total.embedding += &adaptive_weights_backward(self.params.embedding.view(), gw, &dg);
        }
        if let Some(name) = total.first_non_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        Ok(total)
    }
}
