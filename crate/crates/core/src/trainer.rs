//! Distillation-aware quantization training loop.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::distill::{loss_total, LossBreakdown, LossMode};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::lsq::SiteKind;
use crate::scale_init::{initialize_scales, CalibrationRecord, InitMethod};
use crate::transformer::{
    forward, predict, teacher_trace, BitConfig, ForwardOptions, Mode, ModelConfig, ModelState,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_weights: f64,
    pub lr_scale_w: f64,
    pub lr_scale_a: f64,
    pub loss_mode: LossMode,
    pub seed: u64,
    pub init: InitMethod,
    pub dropout: f64,
    pub bits: BitConfig,
    /// Evaluate every this many steps; 0 evaluates only after the last step.
    pub eval_every: usize,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 16,
            lr_weights: 1e-3,
            lr_scale_w: 1e-3,
            lr_scale_a: 2e-2,
            loss_mode: LossMode::KdGt,
            seed: 0,
            init: InitMethod::default(),
            dropout: 0.1,
            bits: BitConfig::new(8, 8, 8),
            eval_every: 0,
            eval_batch_size: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch sizes must be positive".into(),
            ));
        }
        for (name, lr) in [
            ("lr_weights", self.lr_weights),
            ("lr_scale_w", self.lr_scale_w),
            ("lr_scale_a", self.lr_scale_a),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if let InitMethod::Truncation { gamma } = self.init {
            if !(0.0..0.5).contains(&gamma) {
                return Err(Error::InvalidGamma(gamma));
            }
        }
        self.bits.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupKind {
    ModelWeights,
    WeightScales,
    ActivationScales,
}

/// One set of trainable values sharing a learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub kind: GroupKind,
    pub members: Vec<String>,
    pub lr0: f64,
    pub lr: f64,
}

/// Splits the student's trainable values into the three groups.
pub fn param_groups(state: &ModelState, cfg: &TrainConfig) -> Vec<ParamGroup> {
    let group = |kind, members: Vec<String>, lr0| ParamGroup {
        kind,
        members,
        lr0,
        lr: lr0,
    };
    let scales_of = |k: SiteKind| {
        state
            .scales
            .values()
            .filter(|s| s.kind == k)
            .map(|s| s.site.clone())
            .collect()
    };
    vec![
        group(
            GroupKind::ModelWeights,
            state.params.keys().cloned().collect(),
            cfg.lr_weights,
        ),
        group(GroupKind::WeightScales, scales_of(SiteKind::Weight), cfg.lr_scale_w),
        group(
            GroupKind::ActivationScales,
            scales_of(SiteKind::Activation),
            cfg.lr_scale_a,
        ),
    ]
}

/// Linear decay from `lr0` at step 0 to zero at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::ScheduleOverrun {
            step,
            total: total_steps,
        });
    }
    if total_steps == 0 {
        return Ok(lr0);
    }
    Ok(lr0 * (1.0 - step as f64 / total_steps as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments of one value, plus its update count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamMoments {
    pub fn update(&mut self, values: &mut [f64], grad: &[f64], lr: f64, cfg: &AdamConfig) {
        if self.m.len() != values.len() {
            self.m = vec![0.0; values.len()];
            self.v = vec![0.0; values.len()];
        }
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powf(self.t as f64);
        let bc2 = 1.0 - cfg.beta2.powf(self.t as f64);
        for i in 0..values.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            values[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
}

/// Gradients gathered from one backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    pub params: BTreeMap<String, Vec<f64>>,
    pub scales: BTreeMap<String, f64>,
}

/// Adam over the three parameter groups.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub groups: Vec<ParamGroup>,
    pub adam: AdamConfig,
    moments: BTreeMap<(GroupKind, String), AdamMoments>,
}

impl Optimizer {
    pub fn new(groups: Vec<ParamGroup>) -> Self {
        Self {
            groups,
            adam: AdamConfig::default(),
            moments: BTreeMap::new(),
        }
    }

    /// Sets each group's lr from its schedule.
    pub fn schedule(&mut self, step: usize, total_steps: usize) -> Result<()> {
        for g in &mut self.groups {
            g.lr = lr_schedule(step, total_steps, g.lr0)?;
        }
        Ok(())
    }

    pub fn lr(&self, kind: GroupKind) -> f64 {
        self.groups
            .iter()
            .find(|g| g.kind == kind)
            .map_or(0.0, |g| g.lr)
    }

    /// Applies one update to every group member, then floors the scales.
    pub fn step(&mut self, state: &mut ModelState, grads: &Gradients) -> Result<()> {
        for group in &self.groups {
            for name in &group.members {
                let key = (group.kind, name.clone());
                let moments = self.moments.entry(key).or_default();
                match group.kind {
                    GroupKind::ModelWeights => {
                        let g = grads
                            .params
                            .get(name)
                            .ok_or_else(|| Error::MissingGradient(name.clone()))?;
                        let t = state
                            .params
                            .get_mut(name)
                            .ok_or_else(|| Error::MissingGradient(name.clone()))?;
                        moments.update(t.data_mut(), g, group.lr, &self.adam);
                    }
                    GroupKind::WeightScales | GroupKind::ActivationScales => {
                        let g = *grads
                            .scales
                            .get(name)
                            .ok_or_else(|| Error::MissingGradient(name.clone()))?;
                        let sf = state
                            .scales
                            .get_mut(name)
                            .ok_or_else(|| Error::MissingGradient(name.clone()))?;
                        let mut v = [sf.value];
                        moments.update(&mut v, &[g], group.lr, &self.adam);
                        sf.value = v[0];
                        sf.apply_floor();
                    }
                }
            }
        }
        Ok(())
    }
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub lr_weights: f64,
    pub lr_scale_w: f64,
    pub lr_scale_a: f64,
    pub loss: LossBreakdown,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub student: ModelState,
    pub metrics: Vec<StepMetrics>,
    pub calibration: Vec<CalibrationRecord>,
    /// Accuracy on the evaluation set after the last step, if one was given.
    pub final_accuracy: Option<f64>,
}

/// Fraction of `data` classified correctly.
pub fn accuracy(state: &ModelState, data: &Dataset, mode: Mode, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("empty evaluation set".into()));
    }
    let mut correct = 0usize;
    for batch in data.batches(batch_size) {
        let batch = batch?;
        let pred = predict(state, &batch, mode)?;
        correct += pred.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Quantization-aware training of a student initialized from `teacher`.
///
/// The student copies the teacher's weights, gets scale-factors from the
/// configured init method (activation statistics come from the first batch
/// of the seeded shuffle), and is then trained on `cfg.loss_mode` with
/// per-group learning rates decaying linearly to zero.
pub fn train(
    teacher: &ModelState,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let mut student = teacher.requantized(cfg.bits)?;

    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(1);

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    order.shuffle(&mut order_rng);
    let calib_len = cfg.batch_size.min(order.len());
    let calib = train_set.batch(&order[..calib_len])?;
    let calibration = initialize_scales(&mut student, &calib, cfg.init)?;

    let per_epoch = steps_per_epoch(train_set.len(), cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut opt = Optimizer::new(param_groups(&student, cfg));
    let mut metrics = Vec::with_capacity(total);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        if epoch > 0 {
            order.shuffle(&mut order_rng);
        }
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train_set.batch(chunk)?;
            opt.schedule(step, total)?;

            let teacher_values = if cfg.loss_mode.uses_teacher() {
                Some(teacher_trace(teacher, &batch)?)
            } else {
                None
            };
            let mut g = Graph::new();
            let t_trace = teacher_values.as_ref().map(|t| t.constants(&mut g));
            let opts = ForwardOptions::student()
                .trainable()
                .with_dropout(cfg.dropout, &mut dropout_rng);
            let (s_trace, bindings) = forward(&mut g, &student, &batch, opts)?;
            let (loss, total_var) =
                loss_total(&mut g, &s_trace, t_trace.as_ref(), &batch.labels, cfg.loss_mode)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    detail: format!("{loss:?}"),
                });
            }
            g.backward(total_var)?;

            let mut grads = Gradients::default();
            for (name, &v) in &bindings.params {
                let grad = g.grad(v).ok_or_else(|| Error::MissingGradient(name.clone()))?;
                grads.params.insert(name.clone(), grad.data().to_vec());
            }
            for (site, &v) in &bindings.scales {
                let grad = g.grad(v).ok_or_else(|| Error::MissingGradient(site.clone()))?;
                grads.scales.insert(site.clone(), grad.item());
            }
            opt.step(&mut student, &grads)?;

            step += 1;
            let eval_now = cfg.eval_every > 0 && step % cfg.eval_every == 0 && step < total;
            let eval_accuracy = match eval_set {
                Some(data) if eval_now => {
                    Some(accuracy(&student, data, Mode::Student, cfg.eval_batch_size)?)
                }
                _ => None,
            };
            metrics.push(StepMetrics {
                step,
                epoch,
                lr_weights: opt.lr(GroupKind::ModelWeights),
                lr_scale_w: opt.lr(GroupKind::WeightScales),
                lr_scale_a: opt.lr(GroupKind::ActivationScales),
                loss,
                eval_accuracy,
            });
        }
    }

    let final_accuracy = match eval_set {
        Some(data) => Some(accuracy(&student, data, Mode::Student, cfg.eval_batch_size)?),
        None => None,
    };
    if let (Some(acc), Some(last)) = (final_accuracy, metrics.last_mut()) {
        last.eval_accuracy = Some(acc);
    }
    Ok(TrainOutcome {
        student,
        metrics,
        calibration,
        final_accuracy,
    })
}

/// Trains a full-precision model from random initialization with the
/// ground-truth loss only; the result serves as the teacher.
pub fn train_teacher(
    model: &ModelConfig,
    init_std: f64,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let cfg = TrainConfig {
        bits: BitConfig::FULL_PRECISION,
        loss_mode: LossMode::GtOnly,
        ..cfg.clone()
    };
    let init = ModelState::init(model.clone().with_bits(BitConfig::FULL_PRECISION), cfg.seed, init_std)?;
    train(&init, train_set, eval_set, &cfg)
}
