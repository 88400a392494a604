//! Weighted cross-entropy loss and the fine-tuning loop.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::dataset::QualityClass;
use crate::imageops::Crop;
use crate::seeds;

use super::desk::{DeskCnn, Gradients, NUM_CLASSES};
use super::BackboneError;

/// Fine-tuning hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub new_head_init_std: f64,
    /// Number of leading parameter groups kept frozen: 0 none, 1 conv1,
    /// 2 conv1+conv2, 3 everything but the head.
    pub freeze_depth: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            new_head_init_std: 0.01,
            freeze_depth: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), BackboneError> {
        if self.iterations == 0 {
            return Err(BackboneError::InvalidTrainConfig("iterations must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(BackboneError::InvalidTrainConfig("batch_size must be > 0".into()));
        }
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(BackboneError::InvalidTrainConfig("learning_rate must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(BackboneError::InvalidTrainConfig("momentum must be in [0, 1)".into()));
        }
        if self.new_head_init_std <= 0.0 {
            return Err(BackboneError::InvalidTrainConfig("new_head_init_std must be > 0".into()));
        }
        if self.freeze_depth > 3 {
            return Err(BackboneError::InvalidTrainConfig("freeze_depth must be <= 3".into()));
        }
        Ok(())
    }
}

/// One training example: a mean-subtracted crop and its quality class.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub crop: Crop,
    pub class: QualityClass,
}

/// Trained network plus the per-iteration loss log and final-pass accuracy.
#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub net: DeskCnn,
    pub loss_curve: Vec<f64>,
    /// Classification accuracy over the full training set at the end.
    pub train_accuracy: f64,
}

/// Weighted softmax cross-entropy over a batch of logits.
///
/// `loss = (1/B) * sum_i w_i * (-log softmax(logits_i)[label_i])`, and the
/// matching logit gradients. Weights must be positive and logits finite.
pub fn weighted_softmax_xent(
    logits: &[[f64; NUM_CLASSES]],
    labels: &[QualityClass],
    weights: &[f64],
) -> Result<(f64, Vec<[f64; NUM_CLASSES]>), BackboneError> {
    assert_eq!(logits.len(), labels.len(), "logits/labels length mismatch");
    assert_eq!(logits.len(), weights.len(), "logits/weights length mismatch");
    let batch = logits.len() as f64;
    let mut loss = 0.0f64;
    let mut grads = Vec::with_capacity(logits.len());
    for ((row, &label), &w) in logits.iter().zip(labels).zip(weights) {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(BackboneError::NonFiniteLoss { iteration: 0, lr: 0.0 });
        }
        assert!(w > 0.0, "sample weights must be positive");
        // Stable log-softmax.
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        let target = label.index();
        loss += w * (log_z - row[target]);
        let mut grad = [0.0; NUM_CLASSES];
        for (c, g) in grad.iter_mut().enumerate() {
            let p = (row[c] - log_z).exp();
            *g = w / batch * (p - if c == target { 1.0 } else { 0.0 });
        }
        grads.push(grad);
    }
    Ok((loss / batch, grads))
}

/// Fine-tune a network on labelled crops.
///
/// The classifier head is re-initialized (Gaussian of the configured std,
/// zero bias), then all non-frozen layers are updated by SGD with momentum
/// over `iterations` mini-batches drawn with a seeded shuffle. Per-sample
/// loss weights come from the class-weight map; classes absent from the map
/// default to weight 1.
pub fn finetune(
    net: &DeskCnn,
    samples: &[TrainSample],
    class_weights: &BTreeMap<QualityClass, f64>,
    cfg: &TrainConfig,
) -> Result<FinetuneOutcome, BackboneError> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(BackboneError::EmptyTrainingSet);
    }
    let mut net = net.clone();
    net.reinit_head(cfg.new_head_init_std, seeds::derive_seed(cfg.seed, "head-init", 0));

    let weight_of =
        |class: QualityClass| -> f64 { class_weights.get(&class).copied().unwrap_or(1.0) };

    // Frozen groups: weight+bias pairs of the leading layers.
    let frozen_groups = cfg.freeze_depth * 2;

    let mut velocity: Vec<Vec<f64>> =
        net.param_groups().iter().map(|g| vec![0.0; g.len()]).collect();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut shuffle_rng = seeds::rng_from_seed(seeds::derive_seed(cfg.seed, "shuffle", 0));
    order.shuffle(&mut shuffle_rng);
    let mut cursor = 0usize;
    let mut loss_curve = Vec::with_capacity(cfg.iterations);

    for iteration in 0..cfg.iterations {
        // Epoch-style draw: reshuffle whenever the pool is exhausted.
        let mut batch_idx = Vec::with_capacity(cfg.batch_size.min(samples.len()));
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut shuffle_rng);
                cursor = 0;
            }
            batch_idx.push(order[cursor]);
            cursor += 1;
        }
        let crops: Vec<Crop> = batch_idx.iter().map(|&i| samples[i].crop.clone()).collect();
        let labels: Vec<QualityClass> = batch_idx.iter().map(|&i| samples[i].class).collect();
        let weights: Vec<f64> = labels.iter().map(|&c| weight_of(c)).collect();

        let (logits, caches) = net.forward_batch(&crops)?;
        let (loss, grad_logits) = weighted_softmax_xent(&logits, &labels, &weights)?;
        if !loss.is_finite() {
            return Err(BackboneError::NonFiniteLoss { iteration, lr: cfg.learning_rate });
        }
        loss_curve.push(loss);
        let grads = net.backward_batch(&caches, &grad_logits)?;

        apply_sgd_momentum(&mut net, &grads, &mut velocity, cfg, frozen_groups);
    }

    let train_accuracy = classification_accuracy(&net, samples)?;
    Ok(FinetuneOutcome { net, loss_curve, train_accuracy })
}

fn apply_sgd_momentum(
    net: &mut DeskCnn,
    grads: &Gradients,
    velocity: &mut [Vec<f64>],
    cfg: &TrainConfig,
    frozen_groups: usize,
) {
    let grad_groups = grads.groups();
    for (g, (params, vel)) in net.param_groups_mut().into_iter().zip(velocity.iter_mut()).enumerate()
    {
        if g < frozen_groups {
            continue;
        }
        let grad = grad_groups[g];
        for ((p, v), &dg) in params.iter_mut().zip(vel.iter_mut()).zip(grad) {
            *v = cfg.momentum * *v - cfg.learning_rate * dg;
            *p = (*p as f64 + *v) as f32;
        }
    }
}

/// Fraction of samples whose argmax logit matches the label.
pub fn classification_accuracy(
    net: &DeskCnn,
    samples: &[TrainSample],
) -> Result<f64, BackboneError> {
    if samples.is_empty() {
        return Err(BackboneError::EmptyTrainingSet);
    }
    let mut correct = 0usize;
    for chunk in samples.chunks(64) {
        let crops: Vec<Crop> = chunk.iter().map(|s| s.crop.clone()).collect();
        let (logits, _) = net.forward_batch(&crops)?;
        for (row, sample) in logits.iter().zip(chunk) {
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            if argmax == sample.class.index() {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}
