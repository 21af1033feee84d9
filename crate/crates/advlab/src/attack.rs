//! L-infinity perturbation generators.
//!
//! Four attacks share one outcome type:
//!
//! - [`fgsm`]: one signed-gradient step of size epsilon from the clean
//!   image.
//! - [`fast_single_step`]: uniform random start in the epsilon-ball, one
//!   signed-gradient step of size alpha, then a clip back to the ball.
//! - [`pgd`]: iterated signed-gradient steps with projection, optional
//!   random start and restarts; keeps the best iterate per example.
//! - [`checkpointed_single_step`]: the fast step followed by forward
//!   probes at `x + (j/c) * delta`; trains on the smallest misclassified
//!   scale `k* = min{j : probe j wrong}/c`, falling back to the full step
//!   when every probe is correct and to the clean image when the initial
//!   point is already wrong.
//!
//! All attacks clamp produced pixels to `[0, 1]` and report exactly how
//! many forward and input-backward passes they spent. Counter contract:
//! fgsm (1, 1); fast (1, 1); pgd (restarts * steps, restarts * steps);
//! checkpointed (c + 1, 1).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::array::{sgn, DenseArray};
use crate::error::{Error, Result};
use crate::nn::{predictions, Classifier, LabeledBatch};

/// Which attack to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    Fast,
    Pgd,
    Checkpointed,
}

/// Where the checkpointed attack evaluates its index-0 prediction.
///
/// The single-step attack already runs one forward at `x + eta`, so using
/// that prediction is free (`NoisyInit`, the default). `CleanImage`
/// re-evaluates the clean `x` instead, at the cost of one extra forward
/// pass. Either way, a wrong index-0 prediction selects `k* = 0`, i.e.
/// the clean image is trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroCheckpoint {
    #[default]
    NoisyInit,
    CleanImage,
}

/// Attack configuration as it appears in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// L-infinity radius in pixel units.
    pub epsilon: f64,
    /// Step size; unused by `Fgsm`.
    #[serde(default)]
    pub alpha: Option<f64>,
    /// Iterations (PGD only).
    #[serde(default = "default_one")]
    pub steps: usize,
    /// Random restarts (PGD only).
    #[serde(default = "default_one")]
    pub restarts: usize,
    /// Checkpoint count (checkpointed only).
    #[serde(default = "default_one")]
    pub c: usize,
    /// Start PGD from a random point in the ball (default) or from `x`.
    #[serde(default = "default_true")]
    pub random_start: bool,
    #[serde(default)]
    pub zero_checkpoint: ZeroCheckpoint,
}

fn default_one() -> usize {
    1
}

fn default_true() -> bool {
    true
}

impl AttackSpec {
    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            kind: AttackKind::Fgsm,
            epsilon,
            alpha: None,
            steps: 1,
            restarts: 1,
            c: 1,
            random_start: true,
            zero_checkpoint: ZeroCheckpoint::default(),
        }
    }

    pub fn pgd(epsilon: f64, alpha: f64, steps: usize, restarts: usize) -> Self {
        Self {
            kind: AttackKind::Pgd,
            epsilon,
            alpha: Some(alpha),
            steps,
            restarts,
            c: 1,
            random_start: true,
            zero_checkpoint: ZeroCheckpoint::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 || !self.epsilon.is_finite() {
            return Err(Error::config(format!("epsilon {} must be >= 0", self.epsilon)));
        }
        let needs_alpha = !matches!(self.kind, AttackKind::Fgsm);
        match self.alpha {
            Some(a) if a > 0.0 && a.is_finite() => {}
            Some(a) => return Err(Error::config(format!("alpha {a} must be > 0"))),
            None if needs_alpha => {
                return Err(Error::config(format!("{:?} attack needs an alpha", self.kind)))
            }
            None => {}
        }
        if self.kind == AttackKind::Pgd && self.steps == 0 {
            return Err(Error::config("pgd needs steps >= 1".into()));
        }
        if self.kind == AttackKind::Checkpointed && self.c == 0 {
            return Err(Error::config("checkpointed attack needs c >= 1".into()));
        }
        Ok(())
    }
}

/// Adversarial batch plus bookkeeping.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    /// Perturbed images, every pixel in `[0, 1]`.
    pub adv_images: DenseArray,
    /// `adv_images - clean`, with `max_i |delta_i| <= epsilon`.
    pub delta: DenseArray,
    /// Per-example chosen scale; `j/c` for the checkpointed attack, 1.0
    /// for every other kind.
    pub selected_k: Vec<f64>,
    /// Exact number of forward passes this attack executed.
    pub forward_count: u64,
    /// Exact number of input-backward passes this attack executed.
    pub backward_count: u64,
}

impl AttackOutcome {
    fn assemble(
        clean: &DenseArray,
        adv_images: DenseArray,
        selected_k: Vec<f64>,
        epsilon: f64,
        forward_count: u64,
        backward_count: u64,
    ) -> Result<Self> {
        let delta = adv_images.zip_with(clean, |a, c| a - c)?;
        debug_assert!(
            delta.data().iter().all(|&d| d.abs() <= epsilon + 1e-9),
            "delta escaped the epsilon ball"
        );
        debug_assert!(
            adv_images.data().iter().all(|&p| (0.0..=1.0).contains(&p)),
            "adversarial pixel escaped [0, 1]"
        );
        Ok(Self { adv_images, delta, selected_k, forward_count, backward_count })
    }

    /// Largest |delta| per example.
    pub fn per_example_linf(&self) -> Vec<f64> {
        (0..self.delta.rows())
            .map(|i| self.delta.row(i).iter().fold(0.0f64, |m, &v| m.max(v.abs())))
            .collect()
    }
}

/// Elementwise clip of a perturbation to `[-epsilon, epsilon]`; idempotent.
pub fn project_linf(delta: &DenseArray, epsilon: f64) -> Result<DenseArray> {
    if epsilon < 0.0 || !epsilon.is_finite() {
        return Err(Error::config(format!("epsilon {epsilon} must be >= 0")));
    }
    delta.map(|v| v.clamp(-epsilon, epsilon))
}

/// Elementwise clip of an image to pixel range `[0, 1]`; idempotent.
pub fn clamp_pixels(x: &DenseArray) -> Result<DenseArray> {
    x.map(|v| v.clamp(0.0, 1.0))
}

/// Uniform per-pixel noise in `[-epsilon, epsilon]`, drawn row-major.
fn uniform_noise(shape: &[usize], epsilon: f64, rng: &mut impl Rng) -> Result<DenseArray> {
    let n: usize = shape.iter().product();
    let data = if epsilon == 0.0 {
        vec![0.0; n]
    } else {
        (0..n).map(|_| rng.gen_range(-epsilon..=epsilon)).collect()
    };
    DenseArray::new(shape.to_vec(), data)
}

/// One signed-gradient step of size `epsilon` from the clean image.
pub fn fgsm<C: Classifier + ?Sized>(
    model: &C,
    batch: &LabeledBatch,
    epsilon: f64,
) -> Result<AttackOutcome> {
    if epsilon < 0.0 || !epsilon.is_finite() {
        return Err(Error::config(format!("epsilon {epsilon} must be >= 0")));
    }
    let x = batch.images();
    let lg = model.loss_and_input_grad(x, batch.labels())?;
    let stepped = x.zip_with(&lg.input_grad, |p, g| p + epsilon * sgn(g))?;
    let adv = clamp_pixels(&stepped)?;
    AttackOutcome::assemble(x, adv, vec![1.0; batch.len()], epsilon, 1, 1)
}

/// Random start in the ball, one signed step of size `alpha`, clip back.
///
/// The gradient is taken at `x + eta` exactly as drawn; the produced
/// perturbation is clipped to the ball and the image to `[0, 1]`.
pub fn fast_single_step<C: Classifier + ?Sized>(
    model: &C,
    batch: &LabeledBatch,
    epsilon: f64,
    alpha: f64,
    rng: &mut impl Rng,
) -> Result<AttackOutcome> {
    let (adv, _, _) = fast_step_parts(model, batch, epsilon, alpha, rng)?;
    AttackOutcome::assemble(batch.images(), adv, vec![1.0; batch.len()], epsilon, 1, 1)
}

/// Shared core of `fast_single_step` and the checkpointed attack:
/// returns `(clamped adversarial image, ball-clipped delta, logits at
/// x + eta)`. Costs exactly one forward and one backward pass.
fn fast_step_parts<C: Classifier + ?Sized>(
    model: &C,
    batch: &LabeledBatch,
    epsilon: f64,
    alpha: f64,
    rng: &mut impl Rng,
) -> Result<(DenseArray, DenseArray, DenseArray)> {
    if epsilon < 0.0 || !epsilon.is_finite() {
        return Err(Error::config(format!("epsilon {epsilon} must be >= 0")));
    }
    if alpha < 0.0 || !alpha.is_finite() {
        return Err(Error::config(format!("alpha {alpha} must be >= 0")));
    }
    let x = batch.images();
    let eta = uniform_noise(x.shape(), epsilon, rng)?;
    let init = x.zip_with(&eta, |p, e| p + e)?;
    let lg = model.loss_and_input_grad(&init, batch.labels())?;
    let raw = eta.zip_with(&lg.input_grad, |e, g| e + alpha * sgn(g))?;
    let delta = project_linf(&raw, epsilon)?;
    let adv = clamp_pixels(&x.zip_with(&delta, |p, d| p + d)?)?;
    Ok((adv, delta, lg.logits))
}

/// Iterated projected signed-gradient attack.
///
/// Each iteration evaluates the loss and gradient at the current iterate
/// and moves it one projected step. The moved iterate becomes a candidate
/// scored by that just-evaluated loss, and the running best candidate per
/// example is returned; with one step and no random start this is exactly
/// an FGSM step of size `alpha` followed by projection. Ties across
/// restarts keep the earliest restart. `restarts = 0` returns the clean
/// batch with zero cost.
pub fn pgd<C: Classifier + ?Sized>(
    model: &C,
    batch: &LabeledBatch,
    epsilon: f64,
    alpha: f64,
    steps: usize,
    restarts: usize,
    random_start: bool,
    rng: &mut impl Rng,
) -> Result<AttackOutcome> {
    if epsilon < 0.0 || !epsilon.is_finite() {
        return Err(Error::config(format!("epsilon {epsilon} must be >= 0")));
    }
    if alpha < 0.0 || !alpha.is_finite() {
        return Err(Error::config(format!("alpha {alpha} must be >= 0")));
    }
    if steps == 0 {
        return Err(Error::config("pgd needs steps >= 1".into()));
    }
    let x = batch.images();
    let n = batch.len();
    let width = x.row_len();

    let mut best_score = vec![f64::NEG_INFINITY; n];
    let mut best = x.clone();
    for _ in 0..restarts {
        let mut cur = if random_start {
            let eta = uniform_noise(x.shape(), epsilon, rng)?;
            clamp_pixels(&x.zip_with(&eta, |p, e| p + e)?)?
        } else {
            x.clone()
        };
        for _ in 0..steps {
            let lg = model.loss_and_input_grad(&cur, batch.labels())?;
            let stepped = cur.zip_with(&lg.input_grad, |p, g| p + alpha * sgn(g))?;
            // Project into the ball around x, then into pixel range.
            let xd = x.data();
            let mut next = stepped.into_data();
            for (i, v) in next.iter_mut().enumerate() {
                *v = (xd[i] + (*v - xd[i]).clamp(-epsilon, epsilon)).clamp(0.0, 1.0);
            }
            let next = DenseArray::new(x.shape().to_vec(), next)?;
            for i in 0..n {
                if lg.per_example_loss[i] > best_score[i] {
                    best_score[i] = lg.per_example_loss[i];
                    best.row_mut(i).copy_from_slice(&next.data()[i * width..(i + 1) * width]);
                }
            }
            cur = next;
        }
    }
    let passes = (restarts * steps) as u64;
    AttackOutcome::assemble(x, best, vec![1.0; n], epsilon, passes, passes)
}

/// The fast single-step attack followed by `c` interior forward probes.
///
/// Probe `j` evaluates the prediction at `x + (j/c) * delta`. The chosen
/// scale is `k* = min{j : prediction j wrong}/c` with index 0 being the
/// attack's own initial point (see [`ZeroCheckpoint`]); if every probe is
/// correct, `k* = 1` and the full step is trained.
pub fn checkpointed_single_step<C: Classifier + ?Sized>(
    model: &C,
    batch: &LabeledBatch,
    epsilon: f64,
    alpha: f64,
    c: usize,
    zero_checkpoint: ZeroCheckpoint,
    rng: &mut impl Rng,
) -> Result<AttackOutcome> {
    if c == 0 {
        return Err(Error::config("checkpointed attack needs c >= 1".into()));
    }
    let x = batch.images();
    let n = batch.len();
    let (_, delta, init_logits) = fast_step_parts(model, batch, epsilon, alpha, rng)?;

    let mut forwards = 1u64;
    let preds0 = match zero_checkpoint {
        ZeroCheckpoint::NoisyInit => predictions(&init_logits),
        ZeroCheckpoint::CleanImage => {
            forwards += 1;
            predictions(&model.forward(x)?)
        }
    };

    // Smallest misclassified checkpoint index per example, if any.
    let mut min_wrong: Vec<Option<usize>> = preds0
        .iter()
        .zip(batch.labels())
        .map(|(p, y)| (p != y).then_some(0))
        .collect();
    for j in 1..=c {
        let scale = j as f64 / c as f64;
        let probe = x.zip_with(&delta, |p, d| p + scale * d)?;
        let preds = predictions(&model.forward(&probe)?);
        forwards += 1;
        for i in 0..n {
            if min_wrong[i].is_none() && preds[i] != batch.labels()[i] {
                min_wrong[i] = Some(j);
            }
        }
    }

    let selected_k: Vec<f64> = min_wrong
        .iter()
        .map(|m| match m {
            Some(j) => *j as f64 / c as f64,
            None => 1.0,
        })
        .collect();
    let mut adv = x.clone();
    for i in 0..n {
        let k = selected_k[i];
        let d = delta.row(i).to_vec();
        for (p, dv) in adv.row_mut(i).iter_mut().zip(d) {
            *p = (*p + k * dv).clamp(0.0, 1.0);
        }
    }
    AttackOutcome::assemble(x, adv, selected_k, epsilon, forwards, 1)
}

/// Dispatch on an [`AttackSpec`].
pub fn run_attack<C: Classifier + ?Sized>(
    model: &C,
    batch: &LabeledBatch,
    spec: &AttackSpec,
    rng: &mut impl Rng,
) -> Result<AttackOutcome> {
    spec.validate()?;
    match spec.kind {
        AttackKind::Fgsm => fgsm(model, batch, spec.epsilon),
        AttackKind::Fast => {
            fast_single_step(model, batch, spec.epsilon, spec.alpha.unwrap(), rng)
        }
        AttackKind::Pgd => pgd(
            model,
            batch,
            spec.epsilon,
            spec.alpha.unwrap(),
            spec.steps,
            spec.restarts,
            spec.random_start,
            rng,
        ),
        AttackKind::Checkpointed => checkpointed_single_step(
            model,
            batch,
            spec.epsilon,
            spec.alpha.unwrap(),
            spec.c,
            spec.zero_checkpoint,
            rng,
        ),
    }
}
