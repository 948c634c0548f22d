//! Weighted cross-entropy fine-tuning with balanced batches, time-ordered
//! splits, and a TF-IDF logistic regression baseline.

mod batch;
mod data;
mod split;
mod tfidf;

pub use batch::{balanced_batches, shuffled_batches};
pub use data::{batch_input, prepare_example, prepare_examples, score_examples, Example, PrepareOptions};
pub use split::{split_by_time, SplitSpec, Splits};
pub use tfidf::{words, LrConfig, TfidfLr};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::roc_auc;
use crate::model::{save_checkpoint, set_trainable, CatBertModel, FreezeMask};
use crate::scalar::Scalar;
use crate::tensor::ops::weighted_bce;
use crate::tensor::{AdamConfig, AdamState, ParamStore, Tape};

/// Mean over samples of `w * -[y ln p + (1 - y) ln(1 - p)]`, with `p`
/// clamped away from 0 and 1.
pub fn bce_loss(probs: &[f64], labels: &[u8], weights: &[f64]) -> Result<f64> {
    let labels: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
    weighted_bce(probs, &labels, weights)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub balanced: bool,
    pub learning_rate: f64,
    pub seed: u64,
    pub bec_weight: f32,
    /// Freeze preset name, e.g. `partial-finetune`.
    pub freeze: Option<String>,
    /// Keep the embeddings trainable under a freeze preset.
    pub train_embeddings: bool,
    pub eval_batch_size: usize,
    /// Restore the weights of the epoch with the best validation AUC, the
    /// later epoch winning ties.
    pub keep_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 128,
            balanced: true,
            learning_rate: 5e-5,
            seed: 0,
            bec_weight: 100.0,
            freeze: None,
            train_embeddings: false,
            eval_batch_size: 64,
            keep_best: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 || (self.balanced && !self.batch_size.is_multiple_of(2)) {
            return Err(Error::Config(format!(
                "batch size {} must be positive and even when balanced",
                self.batch_size
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} is invalid", self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub batches: usize,
    pub val_auc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_auc: Option<f64>,
    pub frozen: Vec<String>,
}

/// Fine-tunes `model` in place. When `checkpoint_dir` is given, the best
/// validation epoch is saved there as it is found.
pub fn train<T: Scalar>(
    model: &mut CatBertModel<T>,
    train_set: &[Example],
    validation: &[Example],
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainingHistory> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let mask = match &config.freeze {
        Some(name) => {
            let mask = FreezeMask::preset(name, model.config())?;
            if config.train_embeddings {
                mask.without("embeddings")
            } else {
                mask
            }
        }
        None => FreezeMask::default(),
    };
    let frozen = set_trainable(model, &mask)?;
    let context_dim = model.config().context_dim;
    let arch = model.architecture().clone();
    let mut adam = AdamState::new(
        AdamConfig {
            lr: config.learning_rate,
            ..AdamConfig::default()
        },
        model.params(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let labels: Vec<u8> = train_set.iter().map(|e| e.label).collect();
    let can_validate = validation.iter().any(|e| e.label == 1) && validation.iter().any(|e| e.label == 0);
    let mut history = TrainingHistory {
        frozen,
        ..Default::default()
    };
    let mut best: Option<ParamStore<T>> = None;

    for epoch in 1..=config.epochs {
        let batches = if config.balanced {
            balanced_batches(&labels, config.batch_size, &mut rng)?
        } else {
            shuffled_batches(train_set.len(), config.batch_size, &mut rng)
        };
        let mut total = 0.0;
        for (b, indices) in batches.iter().enumerate() {
            let examples: Vec<&Example> = indices.iter().map(|&i| &train_set[i]).collect();
            let input = batch_input(&examples, context_dim)?;
            let y: Vec<T> = examples.iter().map(|e| T::lit(f64::from(e.label))).collect();
            let w: Vec<T> = examples.iter().map(|e| T::lit(f64::from(e.weight))).collect();
            let (loss, grads) = {
                let mut tape = Tape::new();
                let out = arch.forward(&mut tape, model.params(), &input)?;
                let loss = tape.bce(out.probs, &y, &w)?;
                let value = tape.value(loss).data()[0].as_f64();
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss {value} at epoch {epoch}, batch {b}: samples {indices:?}, labels {:?}",
                        examples.iter().map(|e| e.label).collect::<Vec<_>>()
                    )));
                }
                (value, tape.backward(loss)?)
            };
            model.params_mut().set_grads(&grads);
            adam.step(model.params_mut())?;
            total += loss;
        }
        model.params_mut().clear_grads();
        let val_auc = if can_validate {
            let scores = score_examples(model, validation, config.eval_batch_size)?;
            let val_labels: Vec<u8> = validation.iter().map(|e| e.label).collect();
            Some(roc_auc(&scores, &val_labels)?)
        } else {
            None
        };
        let mean_loss = total / batches.len() as f64;
        log::info!(
            "epoch {epoch}: loss {mean_loss:.6}, val auc {}",
            val_auc.map_or("n/a".into(), |a| format!("{a:.4}"))
        );
        if let Some(auc) = val_auc {
            if history.best_val_auc.is_none_or(|b| auc >= b) {
                history.best_val_auc = Some(auc);
                history.best_epoch = Some(epoch);
                if config.keep_best {
                    best = Some(model.params().clone());
                }
                if let Some(dir) = checkpoint_dir {
                    save_checkpoint(model, dir)?;
                }
            }
        }
        history.epochs.push(EpochRecord {
            epoch,
            mean_loss,
            batches: batches.len(),
            val_auc,
        });
    }
    if let Some(params) = best {
        *model.params_mut() = params;
    } else if let Some(dir) = checkpoint_dir {
        save_checkpoint(model, dir)?;
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, PARTIAL_FINETUNE};
    use crate::tokenizer::TokenSequence;

    #[test]
    fn bce_examples() {
        assert!(bce_loss(&[1.0 - 1e-9], &[1], &[1.0]).unwrap() < 1e-6);
        assert!((bce_loss(&[0.5], &[1], &[1.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce_loss(&[0.5], &[0], &[100.0]).unwrap() - 100.0 * std::f64::consts::LN_2).abs() < 1e-9);
        assert!(bce_loss(&[0.5, 0.5], &[1], &[1.0]).is_err());
    }

    fn toy_examples(n: usize) -> Vec<Example> {
        (0..n)
            .map(|i| {
                let label = u8::from(i % 4 == 0);
                let token = if label == 1 { 5 } else { 6 + i % 3 };
                Example {
                    id: None,
                    sequence: TokenSequence {
                        ids: vec![2, token, 4 + i % 2, 3, 0],
                        attention_mask: vec![1, 1, 1, 1, 0],
                        original_len: 2,
                    },
                    context: [1.0, 0.0, 0.5, 0.0],
                    label,
                    weight: 1.0,
                    group: None,
                }
            })
            .collect()
    }

    fn tiny() -> ModelConfig {
        ModelConfig::tiny(10)
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut m = CatBertModel::<f32>::init_random(&tiny(), 0).unwrap();
        let before = m.clone();
        let data = toy_examples(16);
        let config = TrainConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 0.0,
            ..Default::default()
        };
        let h = train(&mut m, &data, &data, &config, None).unwrap();
        assert_eq!(m.params().iter().map(|p| &p.value).collect::<Vec<_>>(), before.params().iter().map(|p| &p.value).collect::<Vec<_>>());
        assert_eq!(h.epochs.len(), 2);
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let data = toy_examples(32);
        let config = TrainConfig {
            epochs: 6,
            batch_size: 8,
            learning_rate: 1e-2,
            ..Default::default()
        };
        let run = || {
            let mut m = CatBertModel::<f32>::init_random(&tiny(), 1).unwrap();
            let h = train(&mut m, &data, &data, &config, None).unwrap();
            (m, h)
        };
        let (m1, h1) = run();
        let (m2, h2) = run();
        assert_eq!(h1, h2);
        assert_eq!(m1, m2);
        assert!(h1.best_val_auc.unwrap() > 0.95, "{h1:?}");
    }

    #[test]
    fn frozen_parameters_stay_bit_identical() {
        let config_m = ModelConfig {
            plan: crate::model::parse_plan("T,A,T,A,T,A").unwrap(),
            ..tiny()
        };
        let mut m = CatBertModel::<f32>::init_random(&config_m, 2).unwrap();
        let before = m.clone();
        let data = toy_examples(16);
        let config = TrainConfig {
            epochs: 3,
            batch_size: 4,
            learning_rate: 1e-2,
            freeze: Some(PARTIAL_FINETUNE.into()),
            ..Default::default()
        };
        let h = train(&mut m, &data, &data, &config, None).unwrap();
        assert!(!h.frozen.is_empty());
        for (a, b) in m.params().iter().zip(before.params().iter()) {
            if h.frozen.contains(&a.name) {
                assert_eq!(a.value, b.value, "{}", a.name);
            }
        }
        assert_ne!(
            m.param("adapter.0.dense1.weight").unwrap(),
            before.param("adapter.0.dense1.weight").unwrap()
        );
    }

    #[test]
    fn invalid_configs() {
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 7, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 7, balanced: false, ..Default::default() }.validate().is_ok());
    }
}
