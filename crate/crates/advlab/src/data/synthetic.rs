//! Seeded Gaussian-blob classification tasks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::array::DenseArray;
use crate::error::{Error, Result};
use crate::nn::LabeledBatch;
use crate::rng::stream_rng;

/// Description of a synthetic blob dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub dims: usize,
    /// One center per class, each of length `dims`.
    pub means: Vec<Vec<f64>>,
    /// Isotropic standard deviation.
    pub sigma: f64,
    pub n_per_class: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.dims == 0 {
            return Err(Error::config("n_classes and dims must be positive".into()));
        }
        if self.means.len() != self.n_classes {
            return Err(Error::config(format!(
                "{} means for {} classes",
                self.means.len(),
                self.n_classes
            )));
        }
        if let Some(m) = self.means.iter().find(|m| m.len() != self.dims) {
            return Err(Error::config(format!(
                "mean vector of length {} does not match dims {}",
                m.len(),
                self.dims
            )));
        }
        if !self.sigma.is_finite() || self.sigma < 0.0 {
            return Err(Error::config(format!("sigma {} must be >= 0", self.sigma)));
        }
        if self.means.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::config("non-finite class mean".into()));
        }
        Ok(())
    }
}

/// Standard normal via Box-Muller; both uniforms come from `rng`.
fn normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Draws `n_per_class` points around each class mean, then squashes the
/// whole batch into `[0, 1]^dims` with one global affine map.
///
/// The map is the identity whenever every raw feature already lies in
/// `[0, 1]`; otherwise it rescales by the batch extremes, so separability
/// is preserved. Samples are in class-major order, labels exact per
/// class, everything determined by `spec.seed`.
pub fn gen_gaussian_blobs(spec: &SyntheticSpec) -> Result<LabeledBatch> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, "blobs", 0);
    let n = spec.n_classes * spec.n_per_class;
    let mut data = Vec::with_capacity(n * spec.dims);
    let mut labels = Vec::with_capacity(n);
    for (class, mean) in spec.means.iter().enumerate() {
        for _ in 0..spec.n_per_class {
            for &m in mean {
                data.push(m + spec.sigma * normal(&mut rng));
            }
            labels.push(class);
        }
    }

    if !data.is_empty() {
        let mut lo = 0.0f64;
        let mut hi = 1.0f64;
        for &v in &data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if lo < 0.0 || hi > 1.0 {
            let span = hi - lo;
            for v in &mut data {
                *v = (*v - lo) / span;
            }
        }
    }

    LabeledBatch::new(DenseArray::new(vec![n, spec.dims], data)?, labels)
}
