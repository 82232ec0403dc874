//! Mini-batch gradient descent with a fixed learning rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::DetRng;
use crate::tensor::Tensor;

use super::backward::{backward_from_seed, cross_entropy};
use super::{forward, ModelConfig, ModelParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            epochs: 50,
            batch_size: 32,
            learning_rate: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Mean cross-entropy per batch, in step order.
    pub losses: Vec<f64>,
}

/// Epoch shuffles draw from substreams 1000, 1001, ... of the training seed.
const EPOCH_STREAM_OFFSET: u64 = 1000;

pub fn train(
    images: &[Tensor],
    labels: &[usize],
    config: &ModelConfig,
    hyper: &TrainHyper,
) -> Result<TrainOutcome> {
    if images.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    if images.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= config.num_classes) {
        return Err(Error::Index(format!(
            "label {bad} out of range for {} classes",
            config.num_classes
        )));
    }
    if hyper.batch_size == 0 {
        return Err(Error::Parameter("batch_size must be positive".into()));
    }
    if !hyper.learning_rate.is_finite() || hyper.learning_rate < 0.0 {
        return Err(Error::Parameter(format!(
            "learning_rate must be finite and non-negative, got {}",
            hyper.learning_rate
        )));
    }

    let mut params = ModelParams::init(config)?;
    let mut losses = Vec::new();
    let mut step = 0usize;
    for epoch in 0..hyper.epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        let mut rng = DetRng::from_seed_stream(hyper.seed, EPOCH_STREAM_OFFSET + epoch as u64);
        rng.shuffle(&mut order);
        for batch in order.chunks(hyper.batch_size) {
            step += 1;
            let mut grads = params.zeros_like();
            let mut batch_loss = 0.0;
            for &i in batch {
                let (logits, cache) = forward(&images[i], &params, config)?;
                let (loss, dlogits) = cross_entropy(&logits, labels[i]);
                batch_loss += loss;
                let out = backward_from_seed(&params, config, &cache, &dlogits)?;
                for ((_, g), (_, s)) in grads.tensors_mut().into_iter().zip(out.grads.named_tensors()) {
                    for (gv, sv) in g.data_mut().iter_mut().zip(s.data()) {
                        *gv += sv;
                    }
                }
            }
            batch_loss /= batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("batch loss {batch_loss} at epoch {epoch}"),
                });
            }
            losses.push(batch_loss);
            if hyper.learning_rate > 0.0 {
                let scale = hyper.learning_rate / batch.len() as f64;
                for ((_, p), (_, g)) in params.tensors_mut().into_iter().zip(grads.named_tensors())
                {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= scale * gv;
                    }
                }
            }
        }
    }
    for (name, t) in params.named_tensors() {
        if !t.data().iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence {
                step,
                detail: format!("{name} left non-finite after the final step"),
            });
        }
    }
    Ok(TrainOutcome { params, losses })
}

/// Fraction of samples whose argmax logit matches the label.
pub fn accuracy(
    images: &[Tensor],
    labels: &[usize],
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Input("empty evaluation set".into()));
    }
    let mut correct = 0usize;
    for (image, &label) in images.iter().zip(labels) {
        let (logits, _) = forward(image, params, config)?;
        let pred = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        correct += usize::from(pred == label);
    }
    Ok(correct as f64 / images.len() as f64)
}

/// Moving average over a fixed window; shorter prefixes average what exists.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    if values.is_empty() || window == 0 {
        return Vec::new();
    }
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(window - 1);
            let slice = &values[lo..=i];
            slice.iter().sum::<f64>() / slice.len() as f64
        })
        .collect()
}
