use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::DayTensor;
use crate::error::{Error, Result};

use super::projection::PcaProjection;

/// Where a node embedding comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingStrategy {
    /// Trainable table learned jointly with the model.
    Adaptive,
    /// Frozen table projected from day profiles.
    Pca,
    /// Frozen all-zero table.
    Zero,
}

impl EmbeddingStrategy {
    pub fn tag(self) -> u8 {
        match self {
            EmbeddingStrategy::Adaptive => 0,
            EmbeddingStrategy::Pca => 1,
            EmbeddingStrategy::Zero => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(EmbeddingStrategy::Adaptive),
            1 => Ok(EmbeddingStrategy::Pca),
            2 => Ok(EmbeddingStrategy::Zero),
            t => Err(Error::Checkpoint(format!("unknown embedding strategy tag {t}"))),
        }
    }

    pub fn is_trainable(self) -> bool {
        self == EmbeddingStrategy::Adaptive
    }
}

impl fmt::Display for EmbeddingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbeddingStrategy::Adaptive => "adaptive",
            EmbeddingStrategy::Pca => "pca",
            EmbeddingStrategy::Zero => "zero",
        })
    }
}

impl FromStr for EmbeddingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(EmbeddingStrategy::Adaptive),
            "pca" => Ok(EmbeddingStrategy::Pca),
            "zero" => Ok(EmbeddingStrategy::Zero),
            other => Err(Error::Invalid(format!(
                "unknown embedding strategy {other:?} (adaptive, pca, zero)"
            ))),
        }
    }
}

/// Provenance of an embedding table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSource {
    pub dataset: String,
    pub steps: Option<Range<usize>>,
    pub projection: Option<String>,
}

/// Per-node embedding `[N × C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    values: Array2<f64>,
    strategy: EmbeddingStrategy,
    source: EmbeddingSource,
}

impl EmbeddingTable {
    pub fn new(
        values: Array2<f64>,
        strategy: EmbeddingStrategy,
        source: EmbeddingSource,
    ) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::Shape(format!("empty embedding table {:?}", values.dim())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding table".into()));
        }
        Ok(EmbeddingTable {
            values,
            strategy,
            source,
        })
    }

    pub fn zeros(nodes: usize, dim: usize) -> Result<Self> {
        Self::new(
            Array2::zeros((nodes, dim)),
            EmbeddingStrategy::Zero,
            EmbeddingSource::default(),
        )
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn strategy(&self) -> EmbeddingStrategy {
        self.strategy
    }

    pub fn source(&self) -> &EmbeddingSource {
        &self.source
    }

    pub fn num_nodes(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn with_source(mut self, source: EmbeddingSource) -> Self {
        self.source = source;
        self
    }

    /// Rows reordered so that row `i` is the old row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> EmbeddingTable {
        EmbeddingTable {
            values: self.values.select(Axis(0), perm),
            ..self.clone()
        }
    }

    /// `node_id,c0,...,c{C-1}` with 17 significant digits.
    pub fn to_csv(&self, node_ids: &[String]) -> Result<String> {
        if node_ids.len() != self.num_nodes() {
            return Err(Error::Shape(format!(
                "{} node ids for {} embedding rows",
                node_ids.len(),
                self.num_nodes()
            )));
        }
        let mut out = String::from("node_id");
        for c in 0..self.dim() {
            out.push_str(&format!(",c{c}"));
        }
        out.push('\n');
        for (id, row) in node_ids.iter().zip(self.values.rows()) {
            out.push_str(id);
            for v in row {
                out.push_str(&format!(",{v:.16e}"));
            }
            out.push('\n');
        }
        Ok(out)
    }
}

/// Per-day embeddings `E^d = (Z^d − 1μᵀ)·P`, each `[N × C]`.
pub fn embed_days(z: &DayTensor, proj: &PcaProjection) -> Result<Vec<Array2<f64>>> {
    if z.slots() != proj.slots() {
        return Err(Error::Shape(format!(
            "day tensor has T = {}, projection expects T = {}",
            z.slots(),
            proj.slots()
        )));
    }
    let mean = proj.mean().view().insert_axis(Axis(0));
    Ok((0..z.num_days())
        .map(|d| {
            let day = z.data().slice(s![d, .., ..]);
            (&day - &mean).dot(proj.components())
        })
        .collect())
}

/// Element-wise mean over days.
pub fn average_embeddings(per_day: &[Array2<f64>]) -> Result<EmbeddingTable> {
    let first = per_day
        .first()
        .ok_or_else(|| Error::Invalid("no per-day embeddings to average".into()))?;
    let mut sum = Array2::<f64>::zeros(first.dim());
    for (d, e) in per_day.iter().enumerate() {
        if e.dim() != first.dim() {
            return Err(Error::Shape(format!(
                "day {d} embedding is {:?}, expected {:?}",
                e.dim(),
                first.dim()
            )));
        }
        sum += e;
    }
    let mean = sum / per_day.len() as f64;
    EmbeddingTable::new(mean, EmbeddingStrategy::Pca, EmbeddingSource::default())
}

/// Projects `target` through an existing projection and averages over its
/// days. The node count of `target` is free; only `T` must match.
pub fn refresh_embedding(target: &DayTensor, proj: &PcaProjection) -> Result<EmbeddingTable> {
    let table = average_embeddings(&embed_days(target, proj)?)?;
    Ok(table.with_source(EmbeddingSource {
        dataset: String::new(),
        steps: Some(target.step_range()),
        projection: Some(proj.id()),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pca::projection::{fit_projection, ComponentSpec};
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array1, Array3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(d: usize, n: usize, t: usize, seed: u64) -> DayTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array3::from_shape_fn((d, n, t), |_| rng.random_range(-2.0..2.0));
        DayTensor::from_array(data, 0).unwrap()
    }

    #[test]
    fn single_node_projection() {
        let z = DayTensor::from_array(Array3::from_shape_vec((1, 1, 2), vec![3.0, 4.0]).unwrap(), 0)
            .unwrap();
        let p = PcaProjection::from_parts(array![1.0, 2.0], array![[1.0], [0.0]], array![1.0, 0.0])
            .unwrap();
        let e = embed_days(&z, &p).unwrap();
        assert_eq!(e, vec![array![[2.0]]]);
    }

    #[test]
    fn identity_projection_is_passthrough() {
        let z = random_tensor(3, 4, 5, 1);
        let p = PcaProjection::from_parts(Array1::zeros(5), Array2::eye(5), Array1::ones(5)).unwrap();
        let e = embed_days(&z, &p).unwrap();
        for (d, day) in e.iter().enumerate() {
            assert_eq!(day, z.data().slice(s![d, .., ..]));
        }
    }

    #[test]
    fn mean_rows_embed_to_zero() {
        let p = fit_projection(&random_tensor(4, 5, 6, 2), ComponentSpec::Count(3)).unwrap();
        let data = Array3::from_shape_fn((2, 3, 6), |(_, _, t)| p.mean()[t]);
        let z = DayTensor::from_array(data, 0).unwrap();
        for e in embed_days(&z, &p).unwrap() {
            assert!(e.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn slot_mismatch_rejected() {
        let p = fit_projection(&random_tensor(4, 5, 6, 2), ComponentSpec::Count(2)).unwrap();
        assert!(embed_days(&random_tensor(1, 2, 5, 3), &p).is_err());
        assert!(refresh_embedding(&random_tensor(1, 2, 5, 3), &p).is_err());
    }

    #[test]
    fn averaging_examples() {
        let t = average_embeddings(&[array![[1.0, 2.0]], array![[3.0, 4.0]]]).unwrap();
        assert_eq!(t.values(), &array![[2.0, 3.0]]);
        assert_eq!(t.strategy(), EmbeddingStrategy::Pca);
        let one = array![[1.5, -2.0], [0.1, 7.0]];
        assert_eq!(average_embeddings(std::slice::from_ref(&one)).unwrap().values(), &one);
        let many = vec![one.clone(); 5];
        assert_abs_diff_eq!(average_embeddings(&many).unwrap().values(), &one, epsilon = 1e-15);
        assert!(average_embeddings(&[]).is_err());
        assert!(average_embeddings(&[one, array![[1.0]]]).is_err());
    }

    #[test]
    fn refresh_on_training_tensor_matches_training_table() {
        let z = random_tensor(6, 8, 10, 4);
        let p = fit_projection(&z, ComponentSpec::Count(4)).unwrap();
        let train = average_embeddings(&embed_days(&z, &p).unwrap()).unwrap();
        let refreshed = refresh_embedding(&z, &p).unwrap();
        assert_eq!(refreshed.values(), train.values());
        assert_eq!(refreshed.source().projection.as_deref(), Some(p.id().as_str()));
    }

    #[test]
    fn refresh_accepts_other_node_counts() {
        let p = fit_projection(&random_tensor(3, 40, 12, 5), ComponentSpec::Count(8)).unwrap();
        let t = refresh_embedding(&random_tensor(2, 25, 12, 6), &p).unwrap();
        assert_eq!(t.values().dim(), (25, 8));
        let one_day = random_tensor(1, 25, 12, 7);
        let t1 = refresh_embedding(&one_day, &p).unwrap();
        assert_eq!(t1.values(), &embed_days(&one_day, &p).unwrap()[0]);
    }

    #[test]
    fn csv_export_has_full_precision() {
        let t = EmbeddingTable::new(array![[0.1, -1.0 / 3.0]], EmbeddingStrategy::Pca, Default::default())
            .unwrap();
        let csv = t.to_csv(&["n0".to_string()]).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("node_id,c0,c1"));
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row[0], "n0");
        assert_eq!(row[2].parse::<f64>().unwrap(), -1.0 / 3.0);
        assert_eq!(row[2], "-3.3333333333333331e-1");
        assert!(t.to_csv(&[]).is_err());
    }

    #[test]
    fn strategy_tags_round_trip() {
        for s in [EmbeddingStrategy::Adaptive, EmbeddingStrategy::Pca, EmbeddingStrategy::Zero] {
            assert_eq!(EmbeddingStrategy::from_tag(s.tag()).unwrap(), s);
            assert_eq!(s.to_string().parse::<EmbeddingStrategy>().unwrap(), s);
        }
        assert!(EmbeddingStrategy::from_tag(9).is_err());
    }

    proptest! {
        #[test]
        fn embedding_is_affine_linear(alpha in 0.0f64..1.0, seed in 0u64..1000) {
            let p = fit_projection(&random_tensor(3, 6, 7, 99), ComponentSpec::Count(3)).unwrap();
            let z1 = random_tensor(2, 6, 7, seed);
            let z2 = random_tensor(2, 6, 7, seed + 1);
            let mix = DayTensor::from_array(
                z1.data() * alpha + z2.data() * (1.0 - alpha), 0).unwrap();
            let e1 = embed_days(&z1, &p).unwrap();
            let e2 = embed_days(&z2, &p).unwrap();
            let em = embed_days(&mix, &p).unwrap();
            for d in 0..2 {
                let expect = &e1[d] * alpha + &e2[d] * (1.0 - alpha);
                for (a, b) in em[d].iter().zip(expect.iter()) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn refresh_commutes_with_node_permutation(seed in 0u64..1000) {
            let p = fit_projection(&random_tensor(3, 6, 7, 98), ComponentSpec::Count(3)).unwrap();
            let z = random_tensor(2, 5, 7, seed);
            let perm = [3usize, 0, 4, 1, 2];
            let zp = DayTensor::from_array(z.data().select(Axis(1), &perm), 0).unwrap();
            let a = refresh_embedding(&z, &p).unwrap().permuted(&perm);
            let b = refresh_embedding(&zp, &p).unwrap();
            prop_assert_eq!(a.values(), b.values());
        }
    }
}
