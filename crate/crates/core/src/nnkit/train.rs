//! Supervised training loops for the encoder classifier and the masked LM.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::classifier::EncoderClassifier;
use super::mlm::MaskedLm;
use super::optim::{Adam, AdamConfig};
use super::params::Graph;
use super::tokenizer::MASK;
use super::{argmax, NnError};
use crate::pretrain::mask_for_infilling;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub weight_decay: f64,
    /// Stop after this many optimizer steps, if set.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lr: 1e-4, batch_size: 64, epochs: 10, seed: 0, patience: 0, weight_decay: 0.0, max_steps: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub epochs_run: usize,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    /// Validation accuracy of the kept parameters (`None` without a validation set).
    pub val_accuracy: Option<f64>,
}

/// Fraction of `(ids, label)` examples the classifier gets right.
pub fn accuracy(model: &EncoderClassifier, data: &[(Vec<usize>, usize)]) -> Result<f64, NnError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for (ids, y) in data {
        correct += usize::from(argmax(&model.predict(ids)?.probs) == *y);
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Cross-entropy training with optional early stopping on validation accuracy.
///
/// The parameters with the best validation accuracy are kept, the latest among ties.
pub fn train_classifier(
    model: &mut EncoderClassifier,
    train: &[(Vec<usize>, usize)],
    val: &[(Vec<usize>, usize)],
    cfg: &TrainConfig,
) -> Result<TrainReport, NnError> {
    if train.is_empty() {
        return Err(NnError::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(AdamConfig { weight_decay: cfg.weight_decay, ..AdamConfig::new(cfg.lr) }, &model.params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut stale = 0;
    let mut steps = 0;
    let mut epoch_losses = Vec::new();
    'epochs: for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break 'epochs;
            }
            let grads = {
                let mut g = Graph::new();
                let mut terms = Vec::with_capacity(batch.len());
                for &i in batch {
                    let (ids, y) = &train[i];
                    let (logits, _) = model.forward_ids(&mut g, ids)?;
                    let lp = g.log_softmax(logits);
                    terms.push(g.pick(lp, &[*y]));
                }
                let all = g.concat_rows(&terms);
                let s = g.sum(all);
                let loss = g.scale(s, -1.0 / batch.len() as f64);
                let value = g.scalar(loss);
                if !value.is_finite() {
                    return Err(NnError::NonFiniteLoss(steps));
                }
                total += value * batch.len() as f64;
                let grads = g.backward(loss);
                g.param_grads(&grads, &model.params)
            };
            adam.step(&mut model.params, &grads);
            steps += 1;
        }
        epoch_losses.push(total / train.len() as f64);
        if !val.is_empty() {
            let acc = accuracy(model, val)?;
            // Ties keep the later, longer-trained parameters.
            let improved = best.as_ref().is_none_or(|(b, _)| acc > *b);
            if best.as_ref().is_none_or(|(b, _)| acc >= *b) {
                best = Some((acc, model.params.flatten()));
            }
            if improved {
                stale = 0;
            } else {
                stale += 1;
                if cfg.patience > 0 && stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    let epochs_run = epoch_losses.len();
    let val_accuracy = match best {
        Some((acc, flat)) => {
            model.params.load_flat(&flat).expect("same architecture");
            Some(acc)
        }
        None => None,
    };
    Ok(TrainReport { steps, epochs_run, epoch_losses, train_accuracy: accuracy(model, train)?, val_accuracy })
}

/// Masked-token prediction training; loss is the mean over masked positions.
pub fn train_mlm(
    model: &mut MaskedLm,
    sentences: &[Vec<usize>],
    mask_ratio: f64,
    cfg: &TrainConfig,
) -> Result<TrainReport, NnError> {
    if sentences.is_empty() {
        return Err(NnError::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(AdamConfig { weight_decay: cfg.weight_decay, ..AdamConfig::new(cfg.lr) }, &model.params);
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    let mut steps = 0;
    let mut epoch_losses = Vec::new();
    'epochs: for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break 'epochs;
            }
            let grads = {
                let mut g = Graph::new();
                let mut terms = Vec::new();
                for &i in batch {
                    let ids = &sentences[i];
                    let masked = mask_for_infilling(ids, mask_ratio, rng.random());
                    let positions: Vec<usize> = (0..ids.len()).filter(|&t| masked[t] == MASK).collect();
                    let lp = model.log_probs(&mut g, &masked)?;
                    let rows = g.gather_rows(lp, &positions);
                    let targets: Vec<usize> = positions.iter().map(|&t| ids[t]).collect();
                    terms.push(g.pick(rows, &targets));
                }
                let all = g.concat_rows(&terms);
                let n = g.value(all).nrows();
                let s = g.sum(all);
                let loss = g.scale(s, -1.0 / n as f64);
                let value = g.scalar(loss);
                if !value.is_finite() {
                    return Err(NnError::NonFiniteLoss(steps));
                }
                total += value;
                count += 1;
                let grads = g.backward(loss);
                g.param_grads(&grads, &model.params)
            };
            adam.step(&mut model.params, &grads);
            steps += 1;
        }
        epoch_losses.push(total / count.max(1) as f64);
    }
    Ok(TrainReport { steps, epochs_run: epoch_losses.len(), epoch_losses, train_accuracy: 0.0, val_accuracy: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::TransformerConfig;

    /// Two classes decided by which of two marker tokens appears.
    fn separable(n: usize, seed: u64) -> Vec<(Vec<usize>, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let y = i % 2;
                let mut ids: Vec<usize> = (0..5).map(|_| rng.random_range(8..14)).collect();
                let at = rng.random_range(0..5);
                ids[at] = 6 + y;
                (ids, y)
            })
            .collect()
    }

    #[test]
    fn separable_data_is_learned() {
        let data = separable(64, 1);
        let mut model = EncoderClassifier::new(TransformerConfig::tiny(14).with_dims(16, 2, 32), 2, 1);
        let cfg = TrainConfig { lr: 3e-3, batch_size: 16, epochs: 100, max_steps: Some(200), ..TrainConfig::default() };
        let report = train_classifier(&mut model, &data, &[], &cfg).unwrap();
        assert_eq!(report.steps, 200);
        assert!(report.train_accuracy >= 0.95, "{report:?}");
    }

    #[test]
    fn constant_labels_predict_the_constant() {
        let data: Vec<_> = separable(32, 2).into_iter().map(|(ids, _)| (ids, 1)).collect();
        let mut model = EncoderClassifier::new(TransformerConfig::tiny(14), 2, 2);
        let cfg = TrainConfig { lr: 3e-3, batch_size: 16, epochs: 5, ..TrainConfig::default() };
        let report = train_classifier(&mut model, &data, &data, &cfg).unwrap();
        assert_eq!(report.val_accuracy, Some(1.0));
    }
}
