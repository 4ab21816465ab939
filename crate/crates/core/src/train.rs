//! Optimizers, learning-rate schedules, the synthetic transfer task, and the
//! fine-tuning loop.
//!
//! The loss is softmax cross-entropy evaluated *outside* the tape: backward
//! is seeded with the analytic `softmax(logits) - onehot(label)`, so logits
//! never need an extra retained buffer. Batches record one tape per sample;
//! gradients accumulate in index order and are averaged, keeping every run
//! bitwise reproducible for a fixed seed.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::policy::TrainScheme;
use crate::tape::{GradientTable, ParamId, ParamSet, TapeMode};
use crate::tensor::Tensor;
use crate::vit::{vit_forward, ViTModel};
use crate::{Error, Result};

// ── Loss ──

/// Numerically stable softmax cross-entropy.
///
/// Returns `(loss, dloss/dlogits)`; the gradient is `softmax(logits) - e_label`.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::Dimension(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::Numeric(String::from("non-finite logits in cross-entropy")));
    }
    let sum: f64 = logits.iter().map(|&x| libm::exp(x - m)).sum();
    let lse = m + libm::log(sum);
    let loss = lse - logits[label];
    let mut grad: Vec<f64> = logits.iter().map(|&x| libm::exp(x - lse)).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Index of the largest logit; ties resolve to the lower index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

// ── Optimizers ──

/// Update rule selection.
#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    AdamW { beta1: f64, beta2: f64, eps: f64, weight_decay: f64 },
}

impl OptimizerKind {
    /// SGD with momentum 0.9.
    pub fn sgd() -> OptimizerKind {
        OptimizerKind::SgdMomentum { momentum: 0.9 }
    }

    /// AdamW with the usual constants and decoupled weight decay 0.01.
    pub fn adamw() -> OptimizerKind {
        OptimizerKind::AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }

    pub fn label(&self) -> &'static str {
        match self {
            OptimizerKind::SgdMomentum { .. } => "sgd",
            OptimizerKind::AdamW { .. } => "adamw",
        }
    }
}

#[derive(Debug, Clone, Default)]
struct OptSlot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Stateful optimizer over a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    state: BTreeMap<ParamId, OptSlot>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Optimizer {
        Optimizer { kind, state: BTreeMap::new(), steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. Every gradient entry must belong to a trainable
    /// parameter, and the resulting values must stay finite.
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradientTable, lr: f64) -> Result<()> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::Numeric(format!("learning rate {lr} is not usable")));
        }
        self.steps += 1;
        for (id, grad) in grads.params() {
            if !params.is_trainable(id) {
                return Err(Error::FrozenGradient(format!(
                    "update for frozen parameter {}",
                    params.name(id)
                )));
            }
            let g = grad.data();
            let slot = self.state.entry(id).or_insert_with(|| OptSlot {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            let data = params.data_mut(id);
            if data.len() != g.len() {
                return Err(Error::Dimension(format!(
                    "gradient length {} does not match parameter length {}",
                    g.len(),
                    data.len()
                )));
            }
            match self.kind {
                OptimizerKind::SgdMomentum { momentum } => {
                    for i in 0..g.len() {
                        slot.m[i] = momentum * slot.m[i] + g[i];
                        data[i] -= lr * slot.m[i];
                    }
                }
                OptimizerKind::AdamW { beta1, beta2, eps, weight_decay } => {
                    let t = self.steps as f64;
                    let c1 = 1.0 - libm::pow(beta1, t);
                    let c2 = 1.0 - libm::pow(beta2, t);
                    for i in 0..g.len() {
                        slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * g[i];
                        slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * g[i] * g[i];
                        let mhat = slot.m[i] / c1;
                        let vhat = slot.v[i] / c2;
                        data[i] -= lr * (mhat / (libm::sqrt(vhat) + eps) + weight_decay * data[i]);
                    }
                }
            }
            if data.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "parameter {} became non-finite during the update",
                    params.name(id)
                )));
            }
        }
        Ok(())
    }
}

// ── Learning-rate schedule ──

/// Per-step learning rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant(f64),
    /// Cosine decay from `base` at step 0 to zero at `total_steps`.
    Cosine { base: f64, total_steps: usize },
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        match *self {
            LrSchedule::Constant(lr) => lr,
            LrSchedule::Cosine { base, total_steps } => {
                if total_steps == 0 {
                    return base;
                }
                let p = (step.min(total_steps) as f64) / (total_steps as f64);
                base * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * p))
            }
        }
    }
}

// ── Synthetic task ──

/// Generator settings for the cell-grid classification task.
///
/// Each class owns a primary and a secondary grid cell. At `shift = 0` the
/// class signal sits entirely in the primary cell (the pre-training
/// distribution); at `shift = 1` it has moved entirely to the secondary cell.
/// `nuisance` adds distractor cells of random amplitude and `noise` is
/// i.i.d. Gaussian pixel noise.
///
/// In `conjunctive` mode both cells are painted with a random shared sign and
/// the class is carried by the *relative* sign of the pair (classes in the
/// lower half agree, upper half disagree), so per-cell brightness alone no
/// longer identifies the class; `shift` scales the secondary amplitude.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Cells per side; the image divides into `grid * grid` cells.
    pub grid: usize,
    pub noise: f64,
    pub shift: f64,
    pub nuisance: f64,
    pub conjunctive: bool,
}

impl SynthSpec {
    /// Smallest grid with at least one cell per class that divides the image.
    pub fn grid_for(classes: usize, image_size: usize) -> usize {
        let mut g = 2;
        while g < image_size && (g * g < classes || image_size % g != 0) {
            g += 1;
        }
        g
    }

    /// Pre-training distribution for the toy model: signal in primary cells,
    /// no distractors.
    pub fn toy_pretrain(classes: usize) -> SynthSpec {
        SynthSpec {
            classes,
            image_size: 16,
            channels: 3,
            grid: SynthSpec::grid_for(classes, 16),
            noise: 0.05,
            shift: 0.0,
            nuisance: 0.0,
            conjunctive: false,
        }
    }

    /// Transfer distribution: the class is re-coded as the relative sign of
    /// the primary/secondary cell pair, with distractors on.
    pub fn toy_transfer(classes: usize) -> SynthSpec {
        SynthSpec {
            shift: 1.0,
            nuisance: 0.3,
            noise: 0.05,
            conjunctive: true,
            ..SynthSpec::toy_pretrain(classes)
        }
    }

    fn cells(&self) -> usize {
        self.grid * self.grid
    }

    /// Primary cell of a class.
    pub fn primary_cell(&self, class: usize) -> usize {
        class % self.cells()
    }

    /// Secondary cell of a class; always distinct from the primary.
    pub fn secondary_cell(&self, class: usize) -> usize {
        let cells = self.cells();
        let candidate = (class * 5 + cells / 2) % cells;
        if candidate == self.primary_cell(class) {
            (candidate + 1) % cells
        } else {
            candidate
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Plan(String::from("need at least two classes")));
        }
        if self.grid < 2 || self.image_size % self.grid != 0 {
            return Err(Error::Plan(format!(
                "grid {} must be >= 2 and divide the image size {}",
                self.grid, self.image_size
            )));
        }
        if self.classes > self.cells() {
            return Err(Error::Plan(format!(
                "{} classes need distinct primary cells but the grid has only {}",
                self.classes,
                self.cells()
            )));
        }
        if !(0.0..=1.0).contains(&self.shift) {
            return Err(Error::Plan(format!("shift {} outside [0, 1]", self.shift)));
        }
        if self.noise < 0.0 || self.nuisance < 0.0 {
            return Err(Error::Plan(String::from("noise and nuisance must be non-negative")));
        }
        Ok(())
    }
}

/// Per-channel standardization applied to a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStat {
    pub mean: f64,
    pub std: f64,
}

/// A labelled image set, standardized per channel.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    /// The (mean, std) removed from each channel during generation.
    pub channel_stats: Vec<ChannelStat>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

fn paint_cell(image: &mut [f64], spec: &SynthSpec, cell: usize, amplitude: f64) {
    let s = spec.image_size;
    let side = s / spec.grid;
    let (cr, cc) = (cell / spec.grid, cell % spec.grid);
    for ch in 0..spec.channels {
        // Alternate sign per channel so cells are visible after any
        // channel-mixing projection.
        let a = if ch % 2 == 0 { amplitude } else { -amplitude };
        for r in cr * side..(cr + 1) * side {
            for c in cc * side..(cc + 1) * side {
                image[(ch * s + r) * s + c] += a;
            }
        }
    }
}

/// Generates `n` samples with round-robin labels, deterministically in
/// `seed`, then standardizes each channel to zero mean and unit variance
/// over the whole set.
pub fn make_synthetic(spec: &SynthSpec, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Plan(String::from("cannot generate an empty dataset")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).map_err(|_| Error::Numeric(String::from("bad sigma")))?;
    let s = spec.image_size;
    let numel = spec.channels * s * s;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % spec.classes;
        let mut pixels = vec![0.0_f64; numel];
        if spec.noise > 0.0 {
            for p in pixels.iter_mut() {
                let z: f64 = normal.sample(&mut rng);
                *p = spec.noise * z;
            }
        }
        if spec.conjunctive {
            let sigma = if rng.random_range(0..2) == 0 { 1.0 } else { -1.0 };
            let rel = if 2 * class < spec.classes { 1.0 } else { -1.0 };
            paint_cell(&mut pixels, spec, spec.primary_cell(class), sigma);
            paint_cell(&mut pixels, spec, spec.secondary_cell(class), sigma * rel * spec.shift);
        } else {
            paint_cell(&mut pixels, spec, spec.primary_cell(class), 1.0 - spec.shift);
            paint_cell(&mut pixels, spec, spec.secondary_cell(class), spec.shift);
        }
        if spec.nuisance > 0.0 {
            for _ in 0..3 {
                let cell = rng.random_range(0..spec.cells());
                let unit: f64 = normal.sample(&mut rng);
                paint_cell(&mut pixels, spec, cell, spec.nuisance * libm::tanh(unit));
            }
        }
        images.push(Tensor::new(&[spec.channels, s, s], pixels)?);
        labels.push(class);
    }

    let plane = s * s;
    let count = (n * plane) as f64;
    let mut channel_stats = Vec::with_capacity(spec.channels);
    for ch in 0..spec.channels {
        let mut sum = 0.0;
        let mut sq = 0.0;
        for img in &images {
            for &p in &img.data()[ch * plane..(ch + 1) * plane] {
                sum += p;
                sq += p * p;
            }
        }
        let mean = sum / count;
        let var = (sq / count - mean * mean).max(0.0);
        let std = libm::sqrt(var).max(1e-9);
        channel_stats.push(ChannelStat { mean, std });
    }
    for img in images.iter_mut() {
        for ch in 0..spec.channels {
            let ChannelStat { mean, std } = channel_stats[ch];
            for p in &mut img.data_mut()[ch * plane..(ch + 1) * plane] {
                *p = (*p - mean) / std;
            }
        }
    }
    Ok(Dataset { images, labels, channel_stats })
}

// ── Batch gradients, evaluation, fine-tuning ──

/// Averaged gradients and metrics of one mini-batch.
#[derive(Debug)]
pub struct BatchResult {
    pub loss: f64,
    pub correct: usize,
    pub grads: GradientTable,
    /// Retained activation bytes summed over the batch's tapes.
    pub tape_bytes: u64,
}

/// Runs one tape per sample, seeds backward with the cross-entropy gradient,
/// and averages over the batch in index order.
pub fn batch_gradients(
    model: &ViTModel,
    scheme: &TrainScheme,
    images: &[Tensor],
    labels: &[usize],
) -> Result<BatchResult> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "batch of {} images with {} labels",
            images.len(),
            labels.len()
        )));
    }
    let mut total_loss = 0.0;
    let mut correct = 0;
    let mut grads: Option<GradientTable> = None;
    let mut tape_bytes = 0_u64;
    for (image, &label) in images.iter().zip(labels) {
        let pass = vit_forward(model, scheme, image, TapeMode::Training)?;
        let (loss, dlogits) = softmax_cross_entropy(pass.logits.data(), label)?;
        total_loss += loss;
        if argmax(pass.logits.data()) == label {
            correct += 1;
        }
        tape_bytes += pass.tape.retained_bytes();
        let seed = Tensor::new(&[model.config.num_classes], dlogits)?;
        let sample = pass.tape.backward(&model.params, pass.logits_id, &seed, &[])?;
        match grads.as_mut() {
            Some(acc) => acc.merge(&sample),
            None => grads = Some(sample),
        }
    }
    let mut grads = grads.expect("non-empty batch");
    let inv = 1.0 / images.len() as f64;
    grads.scale(inv);
    Ok(BatchResult { loss: total_loss * inv, correct, grads, tape_bytes })
}

/// Loss and accuracy over a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    pub accuracy: f64,
}

/// Scores `dataset` under inference tapes (nothing retained, no gradients).
pub fn evaluate(model: &ViTModel, scheme: &TrainScheme, dataset: &Dataset) -> Result<EvalResult> {
    if dataset.is_empty() {
        return Err(Error::Dimension(String::from("cannot evaluate an empty dataset")));
    }
    let mut total_loss = 0.0;
    let mut correct = 0;
    for (image, &label) in dataset.images.iter().zip(&dataset.labels) {
        let pass = vit_forward(model, scheme, image, TapeMode::Inference)?;
        debug_assert_eq!(pass.tape.retained_bytes(), 0);
        let (loss, _) = softmax_cross_entropy(pass.logits.data(), label)?;
        total_loss += loss;
        if argmax(pass.logits.data()) == label {
            correct += 1;
        }
    }
    let n = dataset.len() as f64;
    Ok(EvalResult { loss: total_loss / n, accuracy: correct as f64 / n })
}

/// Hyperparameters of one fine-tuning run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
    /// Seed for per-epoch shuffling.
    pub seed: u64,
}

/// Which split a metrics row describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub step: u64,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
    /// Per-sample retained tape bytes (zero for evaluation rows).
    pub tape_bytes: u64,
}

/// Fine-tunes `model` under `scheme`: one optimizer step per mini-batch, an
/// evaluation row after every epoch. Aborts on any non-finite loss.
pub fn finetune(
    model: &mut ViTModel,
    scheme: &TrainScheme,
    train: &Dataset,
    test: &Dataset,
    config: &TrainConfig,
) -> Result<Vec<MetricsRow>> {
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(Error::Plan(String::from("epochs and batch size must be positive")));
    }
    if train.is_empty() {
        return Err(Error::Dimension(String::from("empty training set")));
    }
    model.apply_scheme(scheme)?;
    let mut optimizer = Optimizer::new(config.optimizer.clone());
    let mut rows = Vec::new();
    let mut step = 0_u64;
    for epoch in 0..config.epochs {
        #[cfg(debug_assertions)]
        if !matches!(scheme, TrainScheme::Residual(_)) {
            let pass = vit_forward(model, scheme, &train.images[0], TapeMode::Training)?;
            let audit = crate::memory::tape_audit(&pass.tape, &model.config, scheme)?;
            debug_assert!(
                audit.is_consistent(),
                "epoch {epoch}: tape disagrees with the exact memory model: {:?}",
                audit.mismatches
            );
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (epoch as u64).wrapping_mul(0x9e37));
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let images: Vec<Tensor> =
                chunk.iter().map(|&i| train.images[i].clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let batch = batch_gradients(model, scheme, &images, &labels)?;
            if !batch.loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "training loss became {} at step {step}",
                    batch.loss
                )));
            }
            let lr = config.schedule.at(step as usize);
            optimizer.step(&mut model.params, &batch.grads, lr)?;
            rows.push(MetricsRow {
                step,
                split: Split::Train,
                loss: batch.loss,
                accuracy: batch.correct as f64 / images.len() as f64,
                lr,
                tape_bytes: batch.tape_bytes,
            });
            step += 1;
        }
        if !test.is_empty() {
            let eval = evaluate(model, scheme, test)?;
            rows.push(MetricsRow {
                step,
                split: Split::Test,
                loss: eval.loss,
                accuracy: eval.accuracy,
                lr: config.schedule.at(step as usize),
                tape_bytes: 0,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::BsrPlan;
    use crate::tape::Stage;
    use crate::vit::ViTConfig;

    #[test]
    fn cross_entropy_matches_hand_computation() {
        let (loss, grad) = softmax_cross_entropy(&[1.0, 2.0, 3.0], 2).unwrap();
        let z: f64 = (1.0_f64).exp() + (2.0_f64).exp() + (3.0_f64).exp();
        assert!((loss - (z.ln() - 3.0)).abs() < 1e-12);
        let sum: f64 = grad.iter().sum();
        assert!(sum.abs() < 1e-12);
        assert!((grad[2] - ((3.0_f64).exp() / z - 1.0)).abs() < 1e-12);
        assert!(softmax_cross_entropy(&[0.0, 1.0], 2).is_err());
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits = [0.3, -1.2, 0.8, 0.1];
        let (_, grad) = softmax_cross_entropy(&logits, 1).unwrap();
        let h = 1e-6;
        for i in 0..logits.len() {
            let mut plus = logits;
            plus[i] += h;
            let mut minus = logits;
            minus[i] -= h;
            let fd = (softmax_cross_entropy(&plus, 1).unwrap().0
                - softmax_cross_entropy(&minus, 1).unwrap().0)
                / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn cross_entropy_survives_large_logits() {
        let (loss, grad) = softmax_cross_entropy(&[1000.0, 0.0], 0).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn cosine_schedule_hits_its_endpoints() {
        let sched = LrSchedule::Cosine { base: 0.4, total_steps: 100 };
        assert!((sched.at(0) - 0.4).abs() < 1e-15);
        assert!((sched.at(50) - 0.2).abs() < 1e-12);
        assert!(sched.at(100).abs() < 1e-15);
        assert!(sched.at(250).abs() < 1e-15);
        for t in 0..100 {
            assert!(sched.at(t) > sched.at(t + 1));
        }
    }

    fn one_param_set(values: Vec<f64>) -> (ParamSet, ParamId) {
        let mut params = ParamSet::new();
        let n = values.len();
        let id = params.add("w", &[n], values, Stage::Head).unwrap();
        params.set_trainable(id, true);
        (params, id)
    }

    #[test]
    fn sgd_momentum_matches_two_hand_steps() {
        let (mut params, id) = one_param_set(vec![1.0]);
        let mut opt = Optimizer::new(OptimizerKind::SgdMomentum { momentum: 0.9 });
        let mut grads = GradientTable::default();
        grads.insert_param(id, Tensor::new(&[1], vec![2.0]).unwrap());
        opt.step(&mut params, &grads, 0.1).unwrap();
        // v = 2, p = 1 - 0.2 = 0.8
        assert!((params.data_mut(id)[0] - 0.8).abs() < 1e-15);
        opt.step(&mut params, &grads, 0.1).unwrap();
        // v = 0.9*2 + 2 = 3.8, p = 0.8 - 0.38 = 0.42
        assert!((params.data_mut(id)[0] - 0.42).abs() < 1e-15);
    }

    #[test]
    fn adamw_first_step_matches_closed_form() {
        let (mut params, id) = one_param_set(vec![0.5]);
        let mut opt = Optimizer::new(OptimizerKind::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        });
        let mut grads = GradientTable::default();
        grads.insert_param(id, Tensor::new(&[1], vec![3.0]).unwrap());
        opt.step(&mut params, &grads, 0.1).unwrap();
        // mhat = g, vhat = g^2: update = lr * (g/(|g|+eps) + wd * p)
        let expected = 0.5 - 0.1 * (3.0 / (3.0 + 1e-8) + 0.01 * 0.5);
        assert!((params.data_mut(id)[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn optimizer_rejects_frozen_and_nonfinite() {
        let (mut params, id) = one_param_set(vec![1.0]);
        params.set_trainable(id, false);
        let mut grads = GradientTable::default();
        grads.insert_param(id, Tensor::new(&[1], vec![1.0]).unwrap());
        let mut opt = Optimizer::new(OptimizerKind::sgd());
        assert!(matches!(
            opt.step(&mut params, &grads, 0.1),
            Err(Error::FrozenGradient(_))
        ));

        let (mut params, id) = one_param_set(vec![1.0]);
        let mut grads = GradientTable::default();
        grads.insert_param(id, Tensor::new(&[1], vec![f64::INFINITY]).unwrap());
        assert!(matches!(opt.step(&mut params, &grads, 0.1), Err(Error::Numeric(_))));
    }

    #[test]
    fn synthetic_data_is_deterministic_and_balanced() {
        let spec = SynthSpec::toy_pretrain(4);
        let a = make_synthetic(&spec, 20, 7).unwrap();
        let b = make_synthetic(&spec, 20, 7).unwrap();
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x.data(), y.data());
        }
        let c = make_synthetic(&spec, 20, 8).unwrap();
        assert!(a.images[0].data() != c.images[0].data());
        for class in 0..4 {
            assert_eq!(a.labels.iter().filter(|&&l| l == class).count(), 5);
        }
    }

    #[test]
    fn shift_moves_the_class_signal_between_cells() {
        let mut spec = SynthSpec { grid: 4, ..SynthSpec::toy_pretrain(4) };
        spec.noise = 0.0;
        let grid = spec.grid;
        let size = spec.image_size;
        let cell_mean = move |img: &Tensor, cell: usize| {
            let side = size / grid;
            let (cr, cc) = (cell / grid, cell % grid);
            let mut sum = 0.0;
            for r in cr * side..(cr + 1) * side {
                for c in cc * side..(cc + 1) * side {
                    sum += img.data()[r * size + c];
                }
            }
            sum / (side * side) as f64
        };
        let at0 = make_synthetic(&spec, 4, 1).unwrap();
        spec.shift = 1.0;
        let at1 = make_synthetic(&spec, 4, 1).unwrap();
        // Cell 5 is no class's primary or secondary: a background reference.
        let bg = 5;
        for class in 0..4 {
            let (p, s) = (spec.primary_cell(class), spec.secondary_cell(class));
            assert_ne!(p, s);
            assert_ne!(p, bg);
            assert_ne!(s, bg);
            // Standardization is affine per channel, so order and equality
            // of cell means survive it.
            let (img0, img1) = (&at0.images[class], &at1.images[class]);
            assert!(cell_mean(img0, p) > cell_mean(img0, s));
            assert!((cell_mean(img0, s) - cell_mean(img0, bg)).abs() < 1e-9);
            assert!(cell_mean(img1, s) > cell_mean(img1, p));
            assert!((cell_mean(img1, p) - cell_mean(img1, bg)).abs() < 1e-9);
        }
    }

    #[test]
    fn conjunctive_classes_differ_only_by_relative_sign() {
        let mut spec = SynthSpec::toy_transfer(4);
        spec.noise = 0.0;
        spec.nuisance = 0.0;
        let grid = spec.grid;
        let size = spec.image_size;
        let cell_mean = move |img: &Tensor, cell: usize| {
            let side = size / grid;
            let (cr, cc) = (cell / grid, cell % grid);
            let mut sum = 0.0;
            for r in cr * side..(cr + 1) * side {
                for c in cc * side..(cc + 1) * side {
                    sum += img.data()[r * size + c];
                }
            }
            sum / (side * side) as f64
        };
        // Classes c and c + 2 paint the same unordered quadrant pair, so the
        // only systematic difference is whether the pair's signs agree.
        let data = make_synthetic(&spec, 400, 9).unwrap();
        for (img, &label) in data.images.iter().zip(&data.labels) {
            let p = cell_mean(img, spec.primary_cell(label));
            let s = cell_mean(img, spec.secondary_cell(label));
            let agree = (p - s).abs() < (p + s).abs();
            assert_eq!(agree, 2 * label < spec.classes, "label {label}");
        }
        for pair in [(0usize, 2usize), (1, 3)] {
            let cells_a =
                (spec.primary_cell(pair.0).min(spec.secondary_cell(pair.0)),
                 spec.primary_cell(pair.0).max(spec.secondary_cell(pair.0)));
            let cells_b =
                (spec.primary_cell(pair.1).min(spec.secondary_cell(pair.1)),
                 spec.primary_cell(pair.1).max(spec.secondary_cell(pair.1)));
            assert_eq!(cells_a, cells_b);
        }
        // Per-cell mean brightness carries no class signal: the shared sign
        // is a fair coin, so class-conditional cell means vanish.
        for label in 0..4usize {
            let idx: Vec<usize> =
                (0..data.len()).filter(|&i| data.labels[i] == label).collect();
            let m: f64 = idx
                .iter()
                .map(|&i| cell_mean(&data.images[i], spec.primary_cell(label)))
                .sum::<f64>()
                / idx.len() as f64;
            assert!(m.abs() < 0.25, "class {label} leaks mean {m}");
        }
    }

    #[test]
    fn channels_are_standardized_over_the_set() {
        let spec = SynthSpec::toy_transfer(4);
        let data = make_synthetic(&spec, 40, 3).unwrap();
        assert_eq!(data.channel_stats.len(), spec.channels);
        let plane = spec.image_size * spec.image_size;
        for ch in 0..spec.channels {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for img in &data.images {
                for &p in &img.data()[ch * plane..(ch + 1) * plane] {
                    sum += p;
                    sq += p * p;
                }
            }
            let n = (data.len() * plane) as f64;
            let mean = sum / n;
            let var = sq / n - mean * mean;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
            assert!(data.channel_stats[ch].std > 0.0);
        }
    }

    #[test]
    fn secondary_cells_are_distinct_per_class() {
        let spec = SynthSpec::toy_pretrain(8);
        let mut seen = alloc::collections::BTreeSet::new();
        for class in 0..8 {
            assert_ne!(spec.primary_cell(class), spec.secondary_cell(class));
            seen.insert((spec.primary_cell(class), spec.secondary_cell(class)));
        }
        assert_eq!(seen.len(), 8);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = SynthSpec::toy_pretrain(4);
        spec.shift = 1.5;
        assert!(spec.validate().is_err());
        let mut spec = SynthSpec::toy_pretrain(4);
        spec.grid = 5;
        assert!(spec.validate().is_err());
        let spec = SynthSpec { classes: 20, ..SynthSpec::toy_pretrain(4) };
        assert!(spec.validate().is_err());
    }

    fn toy_setup(seed: u64) -> (ViTModel, TrainScheme, Dataset, Dataset) {
        let config = ViTConfig::toy(4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = ViTModel::new(&config, &mut rng).unwrap();
        let scheme = TrainScheme::Bsr(BsrPlan::new(&[1, 3], &[], 0.5, false).unwrap());
        let spec = SynthSpec::toy_pretrain(4);
        let train = make_synthetic(&spec, 24, seed + 1).unwrap();
        let test = make_synthetic(&spec, 12, seed + 2).unwrap();
        (model, scheme, train, test)
    }

    #[test]
    fn finetune_reduces_training_loss() {
        let (mut model, scheme, train, test) = toy_setup(11);
        let config = TrainConfig {
            epochs: 8,
            batch_size: 8,
            optimizer: OptimizerKind::adamw(),
            schedule: LrSchedule::Constant(5e-3),
            seed: 5,
        };
        let rows = finetune(&mut model, &scheme, &train, &test, &config).unwrap();
        let train_rows: Vec<&MetricsRow> =
            rows.iter().filter(|r| r.split == Split::Train).collect();
        assert_eq!(train_rows.len(), 24);
        let epoch_mean = |rows: &[&MetricsRow]| -> f64 {
            rows.iter().map(|r| r.loss).sum::<f64>() / rows.len() as f64
        };
        assert!(epoch_mean(&train_rows[21..]) < epoch_mean(&train_rows[..3]));
        // Every train row reports the same per-sample tape footprint.
        assert!(train_rows.iter().all(|r| r.tape_bytes == train_rows[0].tape_bytes));
        assert!(train_rows[0].tape_bytes > 0);
        let test_rows: Vec<&MetricsRow> = rows.iter().filter(|r| r.split == Split::Test).collect();
        assert_eq!(test_rows.len(), 8);
        assert!(test_rows.iter().all(|r| r.tape_bytes == 0));
        assert!(test_rows.last().unwrap().loss < test_rows[0].loss);
    }

    #[test]
    fn finetune_is_bitwise_reproducible() {
        let run = || {
            let (mut model, scheme, train, test) = toy_setup(13);
            let config = TrainConfig {
                epochs: 2,
                batch_size: 6,
                optimizer: OptimizerKind::adamw(),
                schedule: LrSchedule::Cosine { base: 3e-3, total_steps: 8 },
                seed: 3,
            };
            let rows = finetune(&mut model, &scheme, &train, &test, &config).unwrap();
            let bits: Vec<u64> = rows.iter().map(|r| r.loss.to_bits()).collect();
            let eval = evaluate(&model, &scheme, &test).unwrap();
            (bits, eval.loss.to_bits(), eval.accuracy.to_bits())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn evaluate_under_inference_tapes_retains_nothing() {
        let (model, scheme, _, test) = toy_setup(17);
        let pass =
            vit_forward(&model, &scheme, &test.images[0], TapeMode::Inference).unwrap();
        assert_eq!(pass.tape.retained_bytes(), 0);
        let eval = evaluate(&model, &scheme, &test).unwrap();
        assert!(eval.loss.is_finite());
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bitwise_intact() {
        let (mut model, scheme, train, test) = toy_setup(23);
        model.apply_scheme(&scheme).unwrap();
        let before: Vec<Vec<u64>> = model
            .params
            .iter()
            .map(|(_, e)| e.data.iter().map(|x| x.to_bits()).collect())
            .collect();
        let config = TrainConfig {
            epochs: 2,
            batch_size: 8,
            optimizer: OptimizerKind::adamw(),
            schedule: LrSchedule::Constant(0.0),
            seed: 9,
        };
        finetune(&mut model, &scheme, &train, &test, &config).unwrap();
        let after: Vec<Vec<u64>> = model
            .params
            .iter()
            .map(|(_, e)| e.data.iter().map(|x| x.to_bits()).collect())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn untrained_model_scores_at_chance_level() {
        let config = ViTConfig::toy(4);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let model = ViTModel::new(&config, &mut rng).unwrap();
        let spec = SynthSpec::toy_pretrain(4);
        let data = make_synthetic(&spec, 1000, 6).unwrap();
        let eval = evaluate(&model, &TrainScheme::HeadOnly, &data).unwrap();
        assert!((eval.accuracy - 0.25).abs() <= 0.05, "accuracy {}", eval.accuracy);
    }

    #[test]
    fn noiseless_two_class_set_is_linearly_separable_by_patch_means() {
        let spec = SynthSpec {
            classes: 2,
            noise: 0.0,
            ..SynthSpec::toy_pretrain(2)
        };
        let data = make_synthetic(&spec, 12, 4).unwrap();
        let config = ViTConfig::toy(2);
        // Features: per-patch pixel means plus a bias term.
        let n = data.len();
        let feat_dim = config.num_patches() + 1;
        let mut x = vec![0.0_f64; n * feat_dim];
        for (i, img) in data.images.iter().enumerate() {
            let patches = crate::vit::extract_patches(img, &config).unwrap();
            for p in 0..config.num_patches() {
                let row = &patches.data()[p * config.patch_dim()..(p + 1) * config.patch_dim()];
                x[i * feat_dim + p] = row.iter().sum::<f64>() / config.patch_dim() as f64;
            }
            x[i * feat_dim + config.num_patches()] = 1.0;
        }
        // Ridge least squares onto one-hot targets.
        let d = feat_dim;
        let mut ata = vec![0.0_f64; d * d];
        let mut aty = vec![0.0_f64; d * 2];
        for i in 0..n {
            for a in 0..d {
                for b in 0..d {
                    ata[a * d + b] += x[i * d + a] * x[i * d + b];
                }
                aty[a * 2 + data.labels[i]] += x[i * d + a];
            }
        }
        for a in 0..d {
            ata[a * d + a] += 1e-8;
        }
        // Gaussian elimination with partial pivoting.
        let mut w = aty;
        for col in 0..d {
            let pivot = (col..d)
                .max_by(|&a, &b| ata[a * d + col].abs().partial_cmp(&ata[b * d + col].abs()).unwrap())
                .unwrap();
            for j in 0..d {
                ata.swap(col * d + j, pivot * d + j);
            }
            for j in 0..2 {
                w.swap(col * 2 + j, pivot * 2 + j);
            }
            let diag = ata[col * d + col];
            assert!(diag.abs() > 0.0);
            for r in 0..d {
                if r == col {
                    continue;
                }
                let f = ata[r * d + col] / diag;
                for j in col..d {
                    ata[r * d + j] -= f * ata[col * d + j];
                }
                for j in 0..2 {
                    w[r * 2 + j] -= f * w[col * 2 + j];
                }
            }
        }
        for a in 0..d {
            let diag = ata[a * d + a];
            w[a * 2] /= diag;
            w[a * 2 + 1] /= diag;
        }
        let mut correct = 0;
        for i in 0..n {
            let mut scores = [0.0_f64; 2];
            for a in 0..d {
                scores[0] += x[i * d + a] * w[a * 2];
                scores[1] += x[i * d + a] * w[a * 2 + 1];
            }
            if argmax(&scores) == data.labels[i] {
                correct += 1;
            }
        }
        assert_eq!(correct, n);
    }

    #[test]
    fn frozen_parameters_do_not_move_during_finetune() {
        let (mut model, scheme, train, test) = toy_setup(19);
        model.apply_scheme(&scheme).unwrap();
        let frozen_before: Vec<(String, Vec<f64>)> = model
            .params
            .iter()
            .filter(|(_, e)| !e.trainable)
            .map(|(_, e)| (e.name.clone(), e.data.clone()))
            .collect();
        let config = TrainConfig {
            epochs: 1,
            batch_size: 8,
            optimizer: OptimizerKind::sgd(),
            schedule: LrSchedule::Constant(0.05),
            seed: 2,
        };
        finetune(&mut model, &scheme, &train, &test, &config).unwrap();
        for (name, before) in frozen_before {
            let id = model.params.find(&name).unwrap();
            assert_eq!(model.params.data_mut(id), &before[..], "{name} moved");
        }
    }
}
