//! Loss, optimizers, the training loop with early stopping, and F1 metrics.

mod fit;
mod metrics;
mod optim;

pub use fit::{
    bce_logits_loss, bce_loss, fit, EarlyStopping, EpochRecord, NonFinitePolicy, StopDecision, TrainConfig,
    TrainLog,
};
pub use metrics::{
    evaluate_f1, evaluate_scores, score_examples, Confusion, EvalReport, Metrics, ScoredExample,
    DEFAULT_THRESHOLD, EVAL_BATCH,
};
pub use optim::{first_non_finite, Optimizer, OptimizerKind, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, MOMENTUM};
