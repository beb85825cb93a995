use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{evaluate_f1, DEFAULT_THRESHOLD};
use super::optim::{Optimizer, OptimizerKind};
use crate::autodiff::{Graph, NodeId};
use crate::data::{make_batches, BatchingConfig, EncodedExample};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::{QuestionDetector, Regularizer};
use crate::scalar::Scalar;

/// Stream of the training RNG reserved for dropout masks.
const DROPOUT_STREAM: u64 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NonFinitePolicy {
    /// Stop training with the offending parameter's name.
    #[default]
    Abort,
    /// Log a warning and skip the update for that batch.
    SkipStep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation-F1 improvement before stopping.
    pub patience: usize,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Batch examples of similar length together.
    pub length_sorted: bool,
    /// Stop as soon as validation F1 reaches this value.
    pub target_valid_f1: Option<f64>,
    pub non_finite: NonFinitePolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            clip_norm: Some(5.0),
            seed: 0,
            length_sorted: true,
            target_valid_f1: None,
            non_finite: NonFinitePolicy::Abort,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.patience == 0 {
            return fail("patience must be at least 1".into());
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return fail("batch size and max epochs must be at least 1".into());
        }
        if matches!(self.clip_norm, Some(c) if c.is_nan() || c <= 0.0) {
            return fail("clip norm must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_f1: f64,
    pub wall_secs: f64,
    pub improved: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose weights were restored; 0 before any epoch ran.
    pub best_epoch: usize,
    pub best_valid_f1: f64,
    pub stopped_early: bool,
    pub model_path: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum LogLine {
    Epoch(EpochRecord),
    Summary {
        best_epoch: usize,
        best_valid_f1: f64,
        stopped_early: bool,
        model_path: Option<String>,
    },
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    pub fn valid_f1s(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.valid_f1).collect()
    }

    /// One JSON object per epoch, then a summary line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(&LogLine::Epoch(e.clone()))?);
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&LogLine::Summary {
            best_epoch: self.best_epoch,
            best_valid_f1: self.best_valid_f1,
            stopped_early: self.stopped_early,
            model_path: self.model_path.clone(),
        })?);
        out.push('\n');
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut log = TrainLog::default();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let parsed: LogLine = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                detail: e.to_string(),
            })?;
            match parsed {
                LogLine::Epoch(e) => log.epochs.push(e),
                LogLine::Summary {
                    best_epoch,
                    best_valid_f1,
                    stopped_early,
                    model_path,
                } => {
                    log.best_epoch = best_epoch;
                    log.best_valid_f1 = best_valid_f1;
                    log.stopped_early = stopped_early;
                    log.model_path = model_path;
                }
            }
        }
        Ok(log)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }
}

/// Patience-based stopping on a score where higher is better. Only a strict
/// improvement resets the counter, so ties keep the earliest best epoch.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    epochs: usize,
    since_best: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            best_epoch: 0,
            epochs: 0,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, score: f64) -> StopDecision {
        self.epochs += 1;
        let improved = self.best.is_none_or(|b| score > b);
        if improved {
            self.best = Some(score);
            self.best_epoch = self.epochs;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        StopDecision {
            improved,
            stop: self.since_best >= self.patience,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Mean binary cross-entropy of probabilities `scores` against 0/1 labels.
pub fn bce_loss<T: Scalar>(g: &mut Graph<T>, scores: NodeId, labels: &[T]) -> Result<NodeId> {
    g.bce_prob(scores, labels)
}

/// The same loss taken directly from logits, stable for saturated scores.
pub fn bce_logits_loss<T: Scalar>(g: &mut Graph<T>, logits: NodeId, labels: &[T]) -> Result<NodeId> {
    g.bce_with_logits(logits, labels)
}

/// Trains `model` in place and leaves it holding the weights of the epoch
/// with the best validation F1.
pub fn fit<T: Scalar>(
    model: &mut QuestionDetector<T>,
    train: &[EncodedExample],
    valid: &[EncodedExample],
    config: &TrainConfig,
) -> Result<TrainLog> {
    config.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Contract("training and validation sets must be non-empty".into()));
    }
    let bn = model.config.regularizer == Regularizer::BatchNorm;
    let mut optimizer = Optimizer::<T>::new(config.optimizer, config.learning_rate, config.clip_norm)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(DROPOUT_STREAM);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = model.clone();
    let mut log = TrainLog::default();

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        let batches = make_batches(
            train,
            &BatchingConfig {
                batch_size: config.batch_size,
                shuffle_seed: Some(config.seed.wrapping_add(epoch as u64)),
                length_sorted: config.length_sorted,
            },
        )?;
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (index, batch) in batches.iter().enumerate() {
            // Batch statistics over a single example are degenerate.
            if bn && batch.len() < 2 {
                continue;
            }
            let diverged = |detail: String| Error::Diverged {
                epoch,
                batch: index + 1,
                detail,
            };
            let labels: Vec<T> = batch.labels.iter().map(|&y| T::of(y)).collect();
            let mut g = Graph::new();
            let out = model.forward(&mut g, batch, Mode::Train, &mut rng)?;
            let loss = bce_logits_loss(&mut g, out.logits, &labels)?;
            let value = g.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(diverged(format!("loss is {value}")));
            }
            g.backward(loss)?;
            model.store.zero_grads();
            g.accumulate_param_grads(&mut model.store);
            match optimizer.step(&mut model.store) {
                Ok(_) => {}
                Err(Error::NonFinite(what)) if config.non_finite == NonFinitePolicy::SkipStep => {
                    log::warn!("epoch {epoch} batch {}: skipped update, non-finite {what}", index + 1);
                    continue;
                }
                Err(Error::NonFinite(what)) => return Err(diverged(format!("non-finite {what}"))),
                Err(e) => return Err(e),
            }
            model.apply_bn_updates(&out.bn_updates);
            loss_sum += value * batch.len() as f64;
            seen += batch.len();
        }
        let valid_f1 = evaluate_f1(model, valid, DEFAULT_THRESHOLD)?.f1();
        let decision = stopper.observe(valid_f1);
        if decision.improved {
            best = model.clone();
        }
        let record = EpochRecord {
            epoch,
            train_loss: if seen == 0 { f64::NAN } else { loss_sum / seen as f64 },
            valid_f1,
            wall_secs: started.elapsed().as_secs_f64(),
            improved: decision.improved,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} valid F1 {:.4}{}",
            record.train_loss,
            valid_f1,
            if decision.improved { " *" } else { "" }
        );
        log.epochs.push(record);
        if config.target_valid_f1.is_some_and(|t| valid_f1 >= t) {
            break;
        }
        if decision.stop {
            log.stopped_early = epoch < config.max_epochs;
            break;
        }
    }
    *model = best;
    log.best_epoch = stopper.best_epoch();
    log.best_valid_f1 = stopper.best().unwrap_or(0.0);
    Ok(log)
}
