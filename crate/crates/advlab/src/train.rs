//! Training loops, schedules, per-batch logging, collapse monitoring.
//!
//! One [`train`] call runs a full seeded experiment: per batch it builds
//! training inputs according to the configured method, takes one SGD
//! step, and appends a [`BatchRecord`]. Heavy diagnostics (robust
//! accuracies, distortion, gamma, gradient norms) run either on every
//! batch or only on the last batch of each epoch, depending on
//! [`MetricCadence`]. A run is bit-reproducible from its config and seed:
//! the seed fans out into `init`, `shuffle`, `attack` and `eval` streams,
//! keyed by epoch or global batch number.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attack::{checkpointed_single_step, fast_single_step, fgsm, pgd, ZeroCheckpoint};
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::metrics::{estimate_distortion, gamma, input_grad_norms, perturbation_l1_mean};
use crate::nn::{accuracy, predictions, Classifier, LabeledBatch, Model, ModelSpec};
use crate::rng::stream_rng;

/// Training method: what the model sees each batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Clean images only.
    Standard,
    /// FGSM at the full budget.
    FgsmAt,
    /// Random-init single-step attack.
    FastAt,
    /// PGD with the given number of steps (one restart).
    PgdAt { steps: usize },
    /// Checkpoint-scaled single-step attack with `c` interior probes.
    Proposed { c: usize },
    /// Fast training whose per-epoch epsilon comes from a schedule,
    /// typically another run's logged mean perturbation size.
    FastAtEpsSchedule { schedule: Vec<f64> },
}

/// How the attack step size derives from epsilon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaRule {
    Fixed(f64),
    TimesEpsilon(f64),
    /// `max(2/255, epsilon / steps)`, the usual PGD step size.
    PgdRule,
}

/// Resolves a step size; `steps` is required only by [`AlphaRule::PgdRule`].
pub fn resolve_alpha(rule: &AlphaRule, epsilon: f64, steps: Option<usize>) -> Result<f64> {
    let alpha = match *rule {
        AlphaRule::Fixed(a) => a,
        AlphaRule::TimesEpsilon(f) => f * epsilon,
        AlphaRule::PgdRule => {
            let steps = steps
                .ok_or_else(|| Error::config("pgd_rule alpha needs a step count".into()))?;
            if steps == 0 {
                return Err(Error::config("pgd_rule alpha needs steps >= 1".into()));
            }
            (2.0 / 255.0f64).max(epsilon / steps as f64)
        }
    };
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::config(format!("resolved alpha {alpha} must be >= 0")));
    }
    Ok(alpha)
}

/// Per-epoch learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// The base learning rate throughout.
    Constant,
    /// Multiply by `factor` at each milestone epoch.
    StepDecay { factor: f64, milestones: Vec<usize> },
    /// Piecewise linear: 0 at epoch 0, `max_lr` at `peak_epoch`, back to 0
    /// at `total`; the base learning rate is ignored.
    Cyclic { max_lr: f64, peak_epoch: usize, total: usize },
}

/// Learning rate for `epoch` (0-based).
pub fn lr_at(schedule: &LrSchedule, base_lr: f64, epoch: usize) -> f64 {
    match schedule {
        LrSchedule::Constant => base_lr,
        LrSchedule::StepDecay { factor, milestones } => {
            let hits = milestones.iter().filter(|&&m| m <= epoch).count() as i32;
            base_lr * factor.powi(hits)
        }
        LrSchedule::Cyclic { max_lr, peak_epoch, total } => {
            if epoch >= *total {
                0.0
            } else if epoch <= *peak_epoch {
                max_lr * epoch as f64 / *peak_epoch as f64
            } else {
                max_lr * (*total - epoch) as f64 / (*total - *peak_epoch) as f64
            }
        }
    }
}

/// When to run the expensive per-batch diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricCadence {
    /// Trace mode: every batch, the per-batch view of a collapse.
    EveryBatch,
    /// Only the last batch of each epoch.
    EpochEnd,
}

/// Evaluation attacks used inside the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub pgd_steps: usize,
    pub pgd_alpha: AlphaRule,
    pub pgd_restarts: usize,
    pub distortion_samples: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        // PGD-7 at alpha = epsilon/4 (the 2/255-for-8/255 ratio).
        Self {
            pgd_steps: 7,
            pgd_alpha: AlphaRule::TimesEpsilon(0.25),
            pgd_restarts: 1,
            distortion_samples: 100,
        }
    }
}

/// Full description of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    /// Maximum perturbation, pixel units.
    pub epsilon: f64,
    pub alpha_rule: AlphaRule,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    #[serde(default = "default_cadence")]
    pub metric_cadence: MetricCadence,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default)]
    pub zero_checkpoint: ZeroCheckpoint,
}

fn default_cadence() -> MetricCadence {
    MetricCadence::EpochEnd
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1".into()));
        }
        if self.epsilon < 0.0 || !self.epsilon.is_finite() {
            return Err(Error::config(format!("epsilon {} must be >= 0", self.epsilon)));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("{name} {v} must be finite and >= 0")));
            }
        }
        match &self.lr_schedule {
            LrSchedule::StepDecay { milestones, .. } => {
                if milestones.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::config(
                        "step_decay milestones must be strictly increasing".into(),
                    ));
                }
            }
            LrSchedule::Cyclic { peak_epoch, total, .. } => {
                if *peak_epoch == 0 || peak_epoch >= total {
                    return Err(Error::config(
                        "cyclic schedule needs 0 < peak_epoch < total".into(),
                    ));
                }
            }
            LrSchedule::Constant => {}
        }
        match &self.method {
            Method::PgdAt { steps } if *steps == 0 => {
                Err(Error::config("pgd_at needs steps >= 1".into()))
            }
            Method::Proposed { c } if *c == 0 => {
                Err(Error::config("proposed needs c >= 1".into()))
            }
            Method::FastAtEpsSchedule { schedule } => {
                if schedule.len() < self.epochs {
                    return Err(Error::config(format!(
                        "epsilon schedule covers {} epochs, run wants {}",
                        schedule.len(),
                        self.epochs
                    )));
                }
                if schedule.iter().any(|e| !e.is_finite() || *e < 0.0) {
                    return Err(Error::config("epsilon schedule entries must be >= 0".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// One line of the run log.
///
/// Cheap fields are always present; diagnostics are `None` on batches the
/// cadence skipped. `distortion_d` is additionally `None` (with
/// `distortion_s_n == Some(0)`) when no example qualified for the
/// denominator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch_index: usize,
    pub lr_used: f64,
    pub epsilon_used: f64,
    pub alpha_used: Option<f64>,
    /// Forward passes spent by the training path of this batch
    /// (attack plus update; diagnostics excluded).
    pub train_forward_count: u64,
    pub train_backward_count: u64,
    /// Mean per-example max-abs of the trained perturbation.
    pub mean_delta_linf: f64,
    pub mean_selected_k: Option<f64>,
    /// Fraction of the batch trained at `k* = 0` (clean image).
    pub frac_k_zero: Option<f64>,
    pub clean_acc: Option<f64>,
    pub fgsm_acc: Option<f64>,
    pub pgd_acc: Option<f64>,
    pub distortion_d: Option<f64>,
    pub distortion_s_n: Option<u64>,
    pub distortion_s_d_and_s_n: Option<u64>,
    /// Mean |delta| per pixel of the evaluation PGD attack.
    pub mean_abs_pgd_perturbation: Option<f64>,
    pub input_grad_l2: Option<f64>,
    pub input_grad_l2_sq: Option<f64>,
    pub mean_gamma: Option<f64>,
}

impl BatchRecord {
    /// Range checks for values that have hard bounds.
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: Option<f64>| -> Result<()> {
            match v {
                Some(x) if !(0.0..=1.0).contains(&x) => {
                    Err(Error::input(format!("{name} {x} outside [0, 1]")))
                }
                _ => Ok(()),
            }
        };
        unit("clean_acc", self.clean_acc)?;
        unit("fgsm_acc", self.fgsm_acc)?;
        unit("pgd_acc", self.pgd_acc)?;
        unit("distortion_d", self.distortion_d)?;
        unit("frac_k_zero", self.frac_k_zero)?;
        for (name, v) in [
            ("mean_delta_linf", Some(self.mean_delta_linf)),
            ("mean_abs_pgd_perturbation", self.mean_abs_pgd_perturbation),
            ("input_grad_l2", self.input_grad_l2),
            ("input_grad_l2_sq", self.input_grad_l2_sq),
        ] {
            if let Some(x) = v {
                if !(x >= 0.0) || !x.is_finite() {
                    return Err(Error::input(format!("{name} {x} must be >= 0")));
                }
            }
        }
        Ok(())
    }
}

/// Schema version of the run-log format.
pub const RUN_LOG_VERSION: u32 = 1;

/// First line of a run log: everything needed to reproduce the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunHeader {
    pub schema_version: u32,
    pub train: TrainConfig,
    pub model: ModelSpec,
    pub dataset: Option<DatasetSpec>,
}

/// A header plus one record per trained batch.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub header: RunHeader,
    pub records: Vec<BatchRecord>,
}

/// Final model state plus the log of how it got there.
pub struct TrainOutput {
    pub model: Model,
    pub log: RunLog,
}

/// Runs a full training experiment.
///
/// The model is initialized from the run seed; `dataset_spec`, when
/// given, is recorded in the log header so the run can be reproduced from
/// the header alone.
pub fn train(
    config: &TrainConfig,
    dataset: &LabeledBatch,
    model_spec: &ModelSpec,
    dataset_spec: Option<DatasetSpec>,
) -> Result<TrainOutput> {
    config.validate()?;
    model_spec.validate()?;
    if dataset.is_empty() {
        return Err(Error::input("cannot train on an empty dataset".into()));
    }
    if config.batch_size > dataset.len() {
        return Err(Error::config(format!(
            "batch_size {} exceeds dataset size {}",
            config.batch_size,
            dataset.len()
        )));
    }
    if dataset.labels().iter().any(|&y| y >= model_spec.n_classes) {
        return Err(Error::input("dataset label out of model class range".into()));
    }

    let seed = config.seed;
    let mut model = Model::init(model_spec.clone(), &mut stream_rng(seed, "init", 0))?;
    let n = dataset.len();
    let n_batches = n.div_ceil(config.batch_size);
    let mut records = Vec::with_capacity(config.epochs * n_batches);
    let mut global_batch: u64 = 0;

    for epoch in 0..config.epochs {
        let lr = lr_at(&config.lr_schedule, config.lr, epoch);
        let epsilon_used = match &config.method {
            Method::FastAtEpsSchedule { schedule } => schedule[epoch],
            _ => config.epsilon,
        };
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(seed, "shuffle", epoch as u64));

        for batch_index in 0..n_batches {
            let lo = batch_index * config.batch_size;
            let hi = (lo + config.batch_size).min(n);
            let batch = dataset.select(&order[lo..hi])?;
            let mut attack_rng = stream_rng(seed, "attack", global_batch);

            let alpha_used = match &config.method {
                Method::Standard | Method::FgsmAt => None,
                Method::PgdAt { steps } => {
                    Some(resolve_alpha(&config.alpha_rule, epsilon_used, Some(*steps))?)
                }
                _ => Some(resolve_alpha(&config.alpha_rule, epsilon_used, None)?),
            };

            // Build the training inputs for this method.
            let (train_batch, outcome) = match &config.method {
                Method::Standard => (batch.clone(), None),
                Method::FgsmAt => {
                    let out = fgsm(&model, &batch, epsilon_used)?;
                    (LabeledBatch::new(out.adv_images.clone(), batch.labels().to_vec())?, Some(out))
                }
                Method::FastAt | Method::FastAtEpsSchedule { .. } => {
                    let out = fast_single_step(
                        &model,
                        &batch,
                        epsilon_used,
                        alpha_used.unwrap(),
                        &mut attack_rng,
                    )?;
                    (LabeledBatch::new(out.adv_images.clone(), batch.labels().to_vec())?, Some(out))
                }
                Method::PgdAt { steps } => {
                    let out = pgd(
                        &model,
                        &batch,
                        epsilon_used,
                        alpha_used.unwrap(),
                        *steps,
                        1,
                        true,
                        &mut attack_rng,
                    )?;
                    (LabeledBatch::new(out.adv_images.clone(), batch.labels().to_vec())?, Some(out))
                }
                Method::Proposed { c } => {
                    let out = checkpointed_single_step(
                        &model,
                        &batch,
                        epsilon_used,
                        alpha_used.unwrap(),
                        *c,
                        config.zero_checkpoint,
                        &mut attack_rng,
                    )?;
                    (LabeledBatch::new(out.adv_images.clone(), batch.labels().to_vec())?, Some(out))
                }
            };

            // One optimization step: one forward + one backward.
            let grads = model.param_gradients(&train_batch)?;
            model.sgd_step(&grads, lr, config.momentum, config.weight_decay)?;

            let (attack_fwd, attack_bwd) = outcome
                .as_ref()
                .map(|o| (o.forward_count, o.backward_count))
                .unwrap_or((0, 0));
            let mean_delta_linf = outcome
                .as_ref()
                .map(|o| {
                    let linf = o.per_example_linf();
                    linf.iter().sum::<f64>() / linf.len() as f64
                })
                .unwrap_or(0.0);
            let (mean_selected_k, frac_k_zero) = match (&config.method, &outcome) {
                (Method::Proposed { .. }, Some(o)) => {
                    let ks = &o.selected_k;
                    let mean = ks.iter().sum::<f64>() / ks.len() as f64;
                    let zero = ks.iter().filter(|&&k| k == 0.0).count() as f64 / ks.len() as f64;
                    (Some(mean), Some(zero))
                }
                _ => (None, None),
            };

            let mut record = BatchRecord {
                epoch,
                batch_index,
                lr_used: lr,
                epsilon_used,
                alpha_used,
                train_forward_count: attack_fwd + 1,
                train_backward_count: attack_bwd + 1,
                mean_delta_linf,
                mean_selected_k,
                frac_k_zero,
                clean_acc: None,
                fgsm_acc: None,
                pgd_acc: None,
                distortion_d: None,
                distortion_s_n: None,
                distortion_s_d_and_s_n: None,
                mean_abs_pgd_perturbation: None,
                input_grad_l2: None,
                input_grad_l2_sq: None,
                mean_gamma: None,
            };

            let measure = config.metric_cadence == MetricCadence::EveryBatch
                || batch_index == n_batches - 1;
            if measure {
                let mut eval_rng = stream_rng(seed, "eval", global_batch);
                evaluate_batch(&model, &batch, config, &mut eval_rng, &mut record)?;
            }
            record.validate()?;
            records.push(record);
            global_batch += 1;
        }
    }

    let header = RunHeader {
        schema_version: RUN_LOG_VERSION,
        train: config.clone(),
        model: model_spec.clone(),
        dataset: dataset_spec,
    };
    Ok(TrainOutput { model, log: RunLog { header, records } })
}

/// Fills the diagnostic fields of `record` from the post-update model.
fn evaluate_batch(
    model: &Model,
    batch: &LabeledBatch,
    config: &TrainConfig,
    eval_rng: &mut rand_chacha::ChaCha8Rng,
    record: &mut BatchRecord,
) -> Result<()> {
    let eps = config.epsilon;
    let labels = batch.labels();

    let clean_logits = model.forward(batch.images())?;
    record.clean_acc = Some(accuracy(&clean_logits, labels));

    let fgsm_out = fgsm(model, batch, eps)?;
    let fgsm_preds = predictions(&model.forward(&fgsm_out.adv_images)?);
    record.fgsm_acc = Some(
        fgsm_preds.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64,
    );

    let pgd_alpha = resolve_alpha(&config.eval.pgd_alpha, eps, Some(config.eval.pgd_steps))?;
    let pgd_out = pgd(
        model,
        batch,
        eps,
        pgd_alpha,
        config.eval.pgd_steps,
        config.eval.pgd_restarts,
        true,
        eval_rng,
    )?;
    let pgd_preds = predictions(&model.forward(&pgd_out.adv_images)?);
    record.pgd_acc = Some(
        pgd_preds.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64,
    );
    record.mean_abs_pgd_perturbation = Some(perturbation_l1_mean(&pgd_out.delta));

    let distortion = estimate_distortion(model, batch, eps, config.eval.distortion_samples)?;
    record.distortion_d = distortion.d;
    record.distortion_s_n = Some(distortion.n_s_n as u64);
    record.distortion_s_d_and_s_n = Some(distortion.n_s_d_and_s_n as u64);

    let gamma_stats = gamma(model, batch, eps)?;
    record.mean_gamma = Some(gamma_stats.mean);

    let norms = input_grad_norms(model, batch)?;
    record.input_grad_l2 = Some(norms.mean_l2);
    record.input_grad_l2_sq = Some(norms.mean_l2_sq);
    Ok(())
}

/// Extracts a per-epoch epsilon schedule from a source run's log: entry
/// `t` is the mean of `mean_delta_linf` over epoch `t`'s records, summed
/// in record order.
pub fn eps_schedule_from_log(log: &RunLog) -> Result<Vec<f64>> {
    let epochs = log.header.train.epochs;
    let mut sums = vec![0.0f64; epochs];
    let mut counts = vec![0usize; epochs];
    for r in &log.records {
        if r.epoch >= epochs {
            return Err(Error::input(format!(
                "record epoch {} outside header epochs {epochs}",
                r.epoch
            )));
        }
        sums[r.epoch] += r.mean_delta_linf;
        counts[r.epoch] += 1;
    }
    sums.iter()
        .zip(&counts)
        .enumerate()
        .map(|(t, (s, &c))| {
            if c == 0 {
                Err(Error::input(format!("log has no records for epoch {t}")))
            } else {
                Ok(s / c as f64)
            }
        })
        .collect()
}

/// A detected robustness collapse.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CollapseEvent {
    pub epoch: usize,
    pub batch_index: usize,
    /// Index into the record slice passed to the monitor.
    pub record_position: usize,
}

/// Finds the first record where the windowed mean of `pgd_acc` drops
/// below `pgd_floor` while the windowed mean of `fgsm_acc` stays above
/// `fgsm_ceiling`.
///
/// Only records carrying both accuracies participate; the window slides
/// over those, and shorter prefixes average what exists. Returns `None`
/// when the condition never holds.
pub fn collapse_monitor(
    records: &[BatchRecord],
    window: usize,
    pgd_floor: f64,
    fgsm_ceiling: f64,
) -> Option<CollapseEvent> {
    assert!(window >= 1, "window must be >= 1");
    let mut recent: std::collections::VecDeque<(f64, f64)> = Default::default();
    for (pos, r) in records.iter().enumerate() {
        let (Some(fgsm_acc), Some(pgd_acc)) = (r.fgsm_acc, r.pgd_acc) else {
            continue;
        };
        recent.push_back((fgsm_acc, pgd_acc));
        if recent.len() > window {
            recent.pop_front();
        }
        let len = recent.len() as f64;
        let fgsm_mean = recent.iter().map(|p| p.0).sum::<f64>() / len;
        let pgd_mean = recent.iter().map(|p| p.1).sum::<f64>() / len;
        if pgd_mean < pgd_floor && fgsm_mean > fgsm_ceiling {
            return Some(CollapseEvent { epoch: r.epoch, batch_index: r.batch_index, record_position: pos });
        }
    }
    None
}
