use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use sha2::{Digest, Sha256};

use crate::dataset::DayTensor;
use crate::error::{Error, Result};
use crate::io::{put_f64s, put_u32, LeReader};
use crate::par;

use super::eigen::sym_eig;

pub const PROJECTION_MAGIC: &[u8; 5] = b"STPJ1";
pub const DEFAULT_THETA: f64 = 0.9;

/// Sample rows per partial covariance. Fixed so the reduction order does not
/// depend on the thread count.
const COVARIANCE_CHUNK: usize = 256;

/// How many principal axes to keep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ComponentSpec {
    Count(usize),
    /// Smallest `k` whose cumulative explained-variance ratio reaches θ.
    VarianceThreshold(f64),
}

impl Default for ComponentSpec {
    fn default() -> Self {
        ComponentSpec::VarianceThreshold(DEFAULT_THETA)
    }
}

/// A fitted PCA over day profiles. `components` is `[T × C]` with columns in
/// descending eigenvalue order; the full spectrum is kept for selection.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    mean: Array1<f64>,
    components: Array2<f64>,
    eigenvalues: Array1<f64>,
}

/// The `m = D·N` day profiles of a tensor as the rows of an `[m × T]` matrix.
pub fn day_profiles(z: &DayTensor) -> Array2<f64> {
    let (d, n, t) = z.data().dim();
    z.data()
        .to_owned()
        .into_shape_with_order((d * n, t))
        .expect("day tensor is contiguous")
}

fn sample_mean(x: &ArrayView2<f64>) -> Array1<f64> {
    let mut mean = Array1::zeros(x.ncols());
    for row in x.rows() {
        mean += &row;
    }
    mean / x.nrows() as f64
}

/// `Σ (x−μ)(x−μ)ᵀ / (m−1)` accumulated over fixed-size row chunks.
fn covariance(x: &ArrayView2<f64>, mean: &Array1<f64>) -> Array2<f64> {
    let m = x.nrows();
    let t = x.ncols();
    let chunks = m.div_ceil(COVARIANCE_CHUNK);
    let partials = par::map_range(chunks, |c| {
        let lo = c * COVARIANCE_CHUNK;
        let hi = (lo + COVARIANCE_CHUNK).min(m);
        let centered = &x.slice(s![lo..hi, ..]) - &mean.view().insert_axis(Axis(0));
        centered.t().dot(&centered)
    });
    let mut cov = Array2::zeros((t, t));
    for p in partials {
        cov += &p;
    }
    cov / (m as f64 - 1.0)
}

/// Smallest `k` with `Σ_{i≤k} λ_i / Σ_i λ_i ≥ θ`.
pub fn select_component_count(eigenvalues: &[f64], theta: f64) -> Result<usize> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::Invalid(format!("variance threshold {theta} outside (0, 1]")));
    }
    let total: f64 = eigenvalues.iter().sum();
    if total.is_nan() || total <= 0.0 {
        return Err(Error::ZeroVariance);
    }
    let mut cum = 0.0;
    for (i, l) in eigenvalues.iter().enumerate() {
        cum += l;
        if cum / total >= theta - 1e-12 {
            return Ok(i + 1);
        }
    }
    Ok(eigenvalues.len())
}

/// Fits the projection on the D·N day profiles of `z` (each a length-T
/// sample), which should already be z-score normalized with the training
/// normalizer.
pub fn fit_projection(z: &DayTensor, spec: ComponentSpec) -> Result<PcaProjection> {
    fit_projection_on_samples(day_profiles(z).view(), spec)
}

pub fn fit_projection_on_samples(x: ArrayView2<f64>, spec: ComponentSpec) -> Result<PcaProjection> {
    let (m, t) = x.dim();
    if m < 2 {
        return Err(Error::Invalid(format!("PCA needs at least 2 samples, got {m}")));
    }
    if let Some(v) = x.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("PCA sample value {v}")));
    }
    let max_c = t.min(m - 1);
    if let ComponentSpec::Count(c) = spec {
        if c == 0 || c > max_c {
            return Err(Error::Invalid(format!(
                "requested {c} components, allowed 1..={max_c} (T = {t}, samples = {m})"
            )));
        }
    }
    let mean = sample_mean(&x);
    let cov = covariance(&x, &mean);
    let eig = sym_eig(&cov)?;
    let eigenvalues = eig.values.mapv(|l| l.max(0.0));
    let c = match spec {
        ComponentSpec::Count(c) => c,
        ComponentSpec::VarianceThreshold(theta) => {
            select_component_count(eigenvalues.as_slice().unwrap(), theta)?.min(max_c)
        }
    };
    let components = eig.vectors.slice(s![.., ..c]).to_owned();
    Ok(PcaProjection {
        mean,
        components,
        eigenvalues,
    })
}

impl PcaProjection {
    pub fn from_parts(
        mean: Array1<f64>,
        components: Array2<f64>,
        eigenvalues: Array1<f64>,
    ) -> Result<Self> {
        let t = mean.len();
        if t == 0 || components.nrows() != t || eigenvalues.len() != t || components.ncols() == 0 {
            return Err(Error::Shape(format!(
                "projection parts: mean {t}, components {:?}, eigenvalues {}",
                components.dim(),
                eigenvalues.len()
            )));
        }
        if components.ncols() > t {
            return Err(Error::Shape("more components than slots".into()));
        }
        let all_finite = mean
            .iter()
            .chain(components.iter())
            .chain(eigenvalues.iter())
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::NonFinite("projection parameters".into()));
        }
        Ok(PcaProjection {
            mean,
            components,
            eigenvalues,
        })
    }

    pub fn mean(&self) -> &Array1<f64> {
        &self.mean
    }

    /// `[T × C]`.
    pub fn components(&self) -> &Array2<f64> {
        &self.components
    }

    pub fn eigenvalues(&self) -> &Array1<f64> {
        &self.eigenvalues
    }

    pub fn slots(&self) -> usize {
        self.mean.len()
    }

    pub fn num_components(&self) -> usize {
        self.components.ncols()
    }

    /// The same axes without centering: embeddings become plain `Z·P`.
    pub fn uncentered(&self) -> PcaProjection {
        PcaProjection {
            mean: Array1::zeros(self.slots()),
            ..self.clone()
        }
    }

    /// Keeps the leading `c` axes.
    pub fn truncated(&self, c: usize) -> Result<PcaProjection> {
        if c == 0 || c > self.num_components() {
            return Err(Error::Invalid(format!(
                "cannot truncate {} components to {c}",
                self.num_components()
            )));
        }
        Ok(PcaProjection {
            components: self.components.slice(s![.., ..c]).to_owned(),
            ..self.clone()
        })
    }

    /// Cumulative explained-variance ratio for `k = 1..=T`.
    pub fn cumulative_explained_variance(&self) -> Vec<f64> {
        let total: f64 = self.eigenvalues.sum();
        let mut cum = 0.0;
        self.eigenvalues
            .iter()
            .map(|l| {
                cum += l;
                if total > 0.0 {
                    cum / total
                } else {
                    1.0
                }
            })
            .collect()
    }

    /// `‖X_c − X_c P_k P_kᵀ‖_F` over the rows of `samples` using the first
    /// `k` axes.
    pub fn reconstruction_error(&self, samples: ArrayView2<f64>, k: usize) -> f64 {
        let centered = &samples - &self.mean.view().insert_axis(Axis(0));
        let p = self.components.slice(s![.., ..k]);
        let recon = centered.dot(&p).dot(&p.t());
        (&centered - &recon).iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Checks orthonormal axes, a non-negative non-increasing spectrum,
    /// non-decreasing explained variance and non-increasing reconstruction
    /// error in `k`. Returns a description of every violation.
    pub fn invariant_violations(&self, samples: ArrayView2<f64>) -> Vec<String> {
        let mut out = Vec::new();
        let c = self.num_components();
        let gram = self.components.t().dot(&self.components);
        let err = (&gram - &Array2::<f64>::eye(c))
            .iter()
            .fold(0.0f64, |m, x| m.max(x.abs()));
        if err >= 1e-8 {
            out.push(format!("PᵀP deviates from I by {err:e}"));
        }
        if self.eigenvalues.iter().any(|l| *l < 0.0) {
            out.push("negative eigenvalue".into());
        }
        if self.eigenvalues.windows(2).into_iter().any(|w| w[1] > w[0]) {
            out.push("eigenvalues increase".into());
        }
        let cum = self.cumulative_explained_variance();
        if cum.windows(2).any(|w| w[1] < w[0] - 1e-15) {
            out.push("explained variance decreases in k".into());
        }
        let errs: Vec<f64> = (1..=c).map(|k| self.reconstruction_error(samples, k)).collect();
        let scale = errs.first().copied().unwrap_or(0.0).max(1.0);
        if errs.windows(2).any(|w| w[1] > w[0] + 1e-10 * scale) {
            out.push(format!("reconstruction error increases in k: {errs:?}"));
        }
        out
    }

    /// Little-endian `STPJ1` layout: u32 T, u32 C, f64 mean[T],
    /// f64 components[T×C] row-major, f64 eigenvalues[T].
    pub fn to_bytes(&self) -> Vec<u8> {
        let (t, c) = self.components.dim();
        let mut out = Vec::with_capacity(13 + 8 * (2 * t + t * c));
        out.extend_from_slice(PROJECTION_MAGIC);
        put_u32(&mut out, t as u32);
        put_u32(&mut out, c as u32);
        put_f64s(&mut out, self.mean.as_slice().unwrap());
        for row in self.components.rows() {
            put_f64s(&mut out, &row.to_vec());
        }
        put_f64s(&mut out, self.eigenvalues.as_slice().unwrap());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = LeReader::new(bytes);
        if r.take(5)? != PROJECTION_MAGIC {
            return Err(Error::Checkpoint("not a projection checkpoint (bad magic)".into()));
        }
        let t = r.u32()? as usize;
        let c = r.u32()? as usize;
        let mean = Array1::from(r.f64_vec(t)?);
        let components = Array2::from_shape_vec((t, c), r.f64_vec(t * c)?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let eigenvalues = Array1::from(r.f64_vec(t)?);
        r.finish()?;
        PcaProjection::from_parts(mean, components, eigenvalues)
    }

    /// Short content hash, used as the projection id in provenance records.
    pub fn id(&self) -> String {
        let digest = Sha256::digest(self.to_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
