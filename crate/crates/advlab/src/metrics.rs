//! Diagnostics: boundary distortion, loss nonlinearity, robust accuracy.
//!
//! Distortion asks, per example, whether some interior point of the
//! signed-gradient segment `x + k * epsilon * sgn(grad)`, `k in (0, 1)`,
//! is misclassified although both endpoints are classified correctly.
//! The reported ratio is over the endpoint-correct examples only. Gamma
//! quantifies how far the loss is from its first-order expansion along
//! the same direction: `gamma = (loss(x + delta) - loss(x)) -
//! epsilon * l1_norm(grad)`, which is 0 for an affine loss and negative
//! where the surface curves down.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::array::{sgn, DenseArray};
use crate::attack::{run_attack, AttackSpec};
use crate::error::{Error, Result};
use crate::nn::{per_example_losses, predictions, Classifier, LabeledBatch};

/// Distortion measurement over a dataset.
///
/// `d` is `None` when no example qualified for the denominator (nothing
/// was correctly classified at both segment endpoints); it is never a
/// division by zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistortionEstimate {
    pub d: Option<f64>,
    /// Examples correct at both `x` and `x + delta`.
    pub n_s_n: usize,
    /// Of those, examples with a misclassified interior probe.
    pub n_s_d_and_s_n: usize,
    pub samples_per_example: usize,
}

/// Estimates boundary distortion with `n_samples` interior probes.
///
/// The direction is the plain signed gradient `delta = epsilon *
/// sgn(grad)` per example; probes sit on the uniform grid
/// `j / (n_samples + 1)`, `j = 1..n_samples`, strictly inside `(0, 1)`.
/// Doubling the grid by the schedule `n -> 2n + 1` keeps every old probe,
/// so refined estimates are monotone. Probes are evaluated as-is, without
/// pixel clamping.
pub fn estimate_distortion<C: Classifier + ?Sized>(
    model: &C,
    dataset: &LabeledBatch,
    epsilon: f64,
    n_samples: usize,
) -> Result<DistortionEstimate> {
    if n_samples == 0 {
        return Err(Error::config("distortion needs n_samples >= 1".into()));
    }
    if epsilon < 0.0 || !epsilon.is_finite() {
        return Err(Error::config(format!("epsilon {epsilon} must be >= 0")));
    }
    if dataset.is_empty() {
        return Ok(DistortionEstimate {
            d: None,
            n_s_n: 0,
            n_s_d_and_s_n: 0,
            samples_per_example: n_samples,
        });
    }
    let x = dataset.images();
    let labels = dataset.labels();
    let n = dataset.len();

    let lg = model.loss_and_input_grad(x, labels)?;
    let delta = lg.input_grad.map(|g| epsilon * sgn(g))?;
    let clean_ok: Vec<bool> = predictions(&lg.logits)
        .iter()
        .zip(labels)
        .map(|(p, y)| p == y)
        .collect();
    let endpoint = x.zip_with(&delta, |p, d| p + d)?;
    let end_ok: Vec<bool> = predictions(&model.forward(&endpoint)?)
        .iter()
        .zip(labels)
        .map(|(p, y)| p == y)
        .collect();

    let mut interior_wrong = vec![false; n];
    for j in 1..=n_samples {
        let t = j as f64 / (n_samples + 1) as f64;
        let probe = x.zip_with(&delta, |p, d| p + t * d)?;
        for (i, p) in predictions(&model.forward(&probe)?).iter().enumerate() {
            if *p != labels[i] {
                interior_wrong[i] = true;
            }
        }
    }

    let mut n_s_n = 0;
    let mut n_both = 0;
    for i in 0..n {
        if clean_ok[i] && end_ok[i] {
            n_s_n += 1;
            if interior_wrong[i] {
                n_both += 1;
            }
        }
    }
    Ok(DistortionEstimate {
        d: (n_s_n > 0).then(|| n_both as f64 / n_s_n as f64),
        n_s_n,
        n_s_d_and_s_n: n_both,
        samples_per_example: n_samples,
    })
}

/// Per-example loss nonlinearity along the signed-gradient direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GammaStats {
    pub per_example: Vec<f64>,
    pub mean: f64,
    pub fraction_negative: f64,
}

/// `gamma_i = (loss(x_i + delta_i) - loss(x_i)) - epsilon *
/// l1_norm(grad_i)` with `delta_i = epsilon * sgn(grad_i)`.
///
/// Losses are per example, not batch means, so each example's value is
/// independent of its batch. Zero epsilon gives exactly zero.
pub fn gamma<C: Classifier + ?Sized>(
    model: &C,
    batch: &LabeledBatch,
    epsilon: f64,
) -> Result<GammaStats> {
    if epsilon < 0.0 || !epsilon.is_finite() {
        return Err(Error::config(format!("epsilon {epsilon} must be >= 0")));
    }
    let x = batch.images();
    let labels = batch.labels();
    let lg = model.loss_and_input_grad(x, labels)?;
    if epsilon == 0.0 {
        let zeros = vec![0.0; batch.len()];
        return Ok(GammaStats { per_example: zeros, mean: 0.0, fraction_negative: 0.0 });
    }
    let delta = lg.input_grad.map(|g| epsilon * sgn(g))?;
    let probe = x.zip_with(&delta, |p, d| p + d)?;
    let shifted = per_example_losses(&model.forward(&probe)?, labels)?;

    let n = batch.len();
    let mut per_example = Vec::with_capacity(n);
    for i in 0..n {
        let l1: f64 = lg.input_grad.row(i).iter().map(|g| g.abs()).sum();
        per_example.push((shifted[i] - lg.per_example_loss[i]) - epsilon * l1);
    }
    let mean = per_example.iter().sum::<f64>() / n as f64;
    let fraction_negative =
        per_example.iter().filter(|&&g| g < 0.0).count() as f64 / n as f64;
    Ok(GammaStats { per_example, mean, fraction_negative })
}

/// Counts behind a robust-accuracy figure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustAccuracy {
    pub n_total: usize,
    /// Examples that count: all of them, or only the clean-correct ones.
    pub n_denominator: usize,
    pub n_correct_after_attack: usize,
}

impl RobustAccuracy {
    /// `None` when the denominator is empty.
    pub fn ratio(&self) -> Option<f64> {
        (self.n_denominator > 0)
            .then(|| self.n_correct_after_attack as f64 / self.n_denominator as f64)
    }
}

/// Fraction of examples still classified correctly after the attack.
///
/// With `restrict_to_correct`, only examples the model classifies
/// correctly on clean inputs enter the denominator. The attack itself
/// runs on the full dataset either way; per-example independence makes
/// the restriction a pure post-filter.
pub fn robust_accuracy<C: Classifier + ?Sized>(
    model: &C,
    dataset: &LabeledBatch,
    attack: &AttackSpec,
    restrict_to_correct: bool,
    rng: &mut impl Rng,
) -> Result<RobustAccuracy> {
    let labels = dataset.labels();
    let outcome = run_attack(model, dataset, attack, rng)?;
    let adv_ok: Vec<bool> = predictions(&model.forward(&outcome.adv_images)?)
        .iter()
        .zip(labels)
        .map(|(p, y)| p == y)
        .collect();
    let counted: Vec<bool> = if restrict_to_correct {
        predictions(&model.forward(dataset.images())?)
            .iter()
            .zip(labels)
            .map(|(p, y)| p == y)
            .collect()
    } else {
        vec![true; dataset.len()]
    };
    let n_denominator = counted.iter().filter(|&&c| c).count();
    let n_correct_after_attack = counted
        .iter()
        .zip(&adv_ok)
        .filter(|(&c, &ok)| c && ok)
        .count();
    Ok(RobustAccuracy { n_total: dataset.len(), n_denominator, n_correct_after_attack })
}

/// Mean absolute value over all elements of a perturbation batch.
pub fn perturbation_l1_mean(delta: &DenseArray) -> f64 {
    if delta.is_empty() {
        return 0.0;
    }
    delta.data().iter().map(|v| v.abs()).sum::<f64>() / delta.len() as f64
}

/// Batch statistics of per-example input-gradient L2 norms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputGradNorms {
    /// Mean of `l2_norm(grad_i)`.
    pub mean_l2: f64,
    /// Mean of `l2_norm(grad_i)^2`, logged separately.
    pub mean_l2_sq: f64,
}

/// Per-example gradient norms of each example's own loss.
pub fn input_grad_norms<C: Classifier + ?Sized>(
    model: &C,
    batch: &LabeledBatch,
) -> Result<InputGradNorms> {
    let lg = model.loss_and_input_grad(batch.images(), batch.labels())?;
    let n = batch.len();
    let mut sum_l2 = 0.0;
    let mut sum_sq = 0.0;
    for i in 0..n {
        let sq: f64 = lg.input_grad.row(i).iter().map(|g| g * g).sum();
        sum_l2 += sq.sqrt();
        sum_sq += sq;
    }
    Ok(InputGradNorms { mean_l2: sum_l2 / n as f64, mean_l2_sq: sum_sq / n as f64 })
}
