//! Multi-label classifier training on image-level labels.

mod dataset;
mod optim;

pub use dataset::{synth_dataset, Sample, ShapeKind, SynthConfig, BACKGROUND, SHAPES};
pub use optim::{optimizer_step, AdamState, AdamWHyper};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};
use crate::vit::{ForwardPass, ViTModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Epochs of linear learning-rate warmup before the cosine decay.
    pub warmup_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            learning_rate: 1e-3,
            weight_decay: 0.05,
            warmup_epochs: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "learning_rate and weight_decay must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Mean sigmoid cross-entropy of `1×c` logits against multi-hot targets.
pub fn bce_multilabel_loss(g: &mut Graph, logits: Var, targets: &[f64]) -> Result<Var> {
    let shape = g.shape(logits);
    if shape != [1, targets.len()] {
        return Err(Error::shape("bce_multilabel_loss", shape, &[1, targets.len()]));
    }
    g.bce_with_logits(logits, targets)
}

/// Macro-averaged per-class accuracy of sigmoid(logit) ≥ 0.5 predictions.
pub fn macro_accuracy(logits: &[Vec<f64>], targets: &[Vec<f64>]) -> f64 {
    let c = targets.first().map_or(0, |t| t.len());
    if c == 0 {
        return 0.0;
    }
    let per_class: f64 = (0..c)
        .map(|k| {
            let correct = logits
                .iter()
                .zip(targets)
                .filter(|(l, t)| (l[k] >= 0.0) == (t[k] > 0.5))
                .count();
            correct as f64 / targets.len() as f64
        })
        .sum();
    per_class / c as f64
}

/// Loss, logits and parameter gradients for one sample.
pub fn sample_gradients(model: &ViTModel, sample: &Sample) -> Result<(f64, Vec<f64>, Vec<Tensor>)> {
    let mut pass = ForwardPass::run(model, &sample.image, false, true)?;
    let loss = bce_multilabel_loss(&mut pass.graph, pass.logits, &sample.labels)?;
    pass.graph.backward(loss)?;
    let grads = pass
        .params
        .iter()
        .map(|&p| pass.graph.grad(p).cloned().expect("trainable params carry grads"))
        .collect();
    Ok((
        pass.graph.value(loss).item(),
        pass.logits().data().to_vec(),
        grads,
    ))
}

fn decay_flags(model: &ViTModel) -> Vec<bool> {
    ViTModel::param_layout(&model.config)
        .iter()
        .map(|(name, shape)| name.ends_with(".weight") && shape.len() == 2)
        .collect()
}

/// Trains with AdamW on shuffled mini-batches. Per-sample gradients are
/// computed in parallel and summed in sample order, so results do not
/// depend on the thread count.
pub fn train(
    mut model: ViTModel,
    dataset: &[Sample],
    config: &TrainConfig,
) -> Result<(ViTModel, Vec<EpochStats>)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Usage("cannot train on an empty dataset".into()));
    }
    let shapes: Vec<Vec<usize>> = model.params().iter().map(|t| t.shape().to_vec()).collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    let mut state = AdamState::new(&shape_refs, decay_flags(&model));
    let mut hyper = AdamWHyper {
        lr: config.learning_rate,
        weight_decay: config.weight_decay,
        ..AdamWHyper::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let steps_per_epoch = dataset.len().div_ceil(config.batch_size);
    let mut step = 0;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut all_logits = Vec::with_capacity(dataset.len());
        let mut all_targets = Vec::with_capacity(dataset.len());
        for batch in order.chunks(config.batch_size) {
            let results: Vec<_> = batch
                .par_iter()
                .map(|&i| sample_gradients(&model, &dataset[i]))
                .collect::<Result<_>>()
                .map_err(|e| match e {
                    Error::NonFinite(_) => Error::Diverged { epoch },
                    e => e,
                })?;
            let inv = 1.0 / batch.len() as f64;
            let mut total: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
            for ((loss, logits, grads), &i) in results.into_iter().zip(batch) {
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch });
                }
                loss_sum += loss;
                all_logits.push(logits);
                all_targets.push(dataset[i].labels.clone());
                for (acc, g) in total.iter_mut().zip(grads) {
                    for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += v * inv;
                    }
                }
            }
            hyper.lr = scheduled_lr(config, step, steps_per_epoch);
            step += 1;
            let mut params = model.params_mut();
            optimizer_step(&mut params, &total, &mut state, &hyper)?;
        }
        let stats = EpochStats {
            epoch,
            loss: loss_sum / dataset.len() as f64,
            accuracy: macro_accuracy(&all_logits, &all_targets),
        };
        if !stats.loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        history.push(stats);
    }
    Ok((model, history))
}

/// Linear warmup to the base rate, then cosine decay towards zero over the
/// remaining steps.
pub fn scheduled_lr(config: &TrainConfig, step: usize, steps_per_epoch: usize) -> f64 {
    let warmup = config.warmup_epochs * steps_per_epoch;
    let total = config.epochs * steps_per_epoch;
    if step < warmup {
        return config.learning_rate * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = (step - warmup) as f64 / span;
    config.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Inference-only macro accuracy of `model` on `dataset`.
pub fn evaluate_accuracy(model: &ViTModel, dataset: &[Sample]) -> Result<f64> {
    let logits: Vec<Vec<f64>> = dataset
        .par_iter()
        .map(|s| Ok(crate::vit::forward(model, &s.image, false)?.0.into_data()))
        .collect::<Result<_>>()?;
    let targets: Vec<Vec<f64>> = dataset.iter().map(|s| s.labels.clone()).collect();
    Ok(macro_accuracy(&logits, &targets))
}
