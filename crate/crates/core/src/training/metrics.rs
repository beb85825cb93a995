use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{make_batches, BatchingConfig, EncodedExample, LengthBucket};
use crate::error::{Error, Result};
use crate::model::QuestionDetector;
use crate::scalar::Scalar;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const EVAL_BATCH: usize = 64;

/// Binary confusion counts with question (label 1) as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_predictions(labels: &[u8], predictions: &[u8]) -> Self {
        let mut c = Confusion::default();
        for (&y, &p) in labels.iter().zip(predictions) {
            c.add(y, p);
        }
        c
    }

    pub fn add(&mut self, label: u8, prediction: u8) {
        match (label, prediction) {
            (1, 1) => self.tp += 1,
            (0, 1) => self.fp += 1,
            (1, _) => self.fn_ += 1,
            _ => self.tn += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// 0 when nothing was predicted positive.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// 0 when there are no positives.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// 0 when precision and recall are both 0.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn metrics(&self) -> Metrics {
        Metrics {
            count: self.total(),
            confusion: *self,
            precision: self.precision(),
            recall: self.recall(),
            f1: self.f1(),
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub count: usize,
    pub confusion: Confusion,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Model output for one example, kept with what evaluation groups by.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredExample {
    pub id: String,
    pub label: u8,
    pub score: f64,
    pub words: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
}

impl ScoredExample {
    pub fn prediction(&self, threshold: f64) -> u8 {
        u8::from(self.score >= threshold)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub overall: Metrics,
    /// Only buckets that contain at least one example.
    pub buckets: BTreeMap<LengthBucket, Metrics>,
}

impl EvalReport {
    pub fn f1(&self) -> f64 {
        self.overall.f1
    }

    /// Plain-text report; `buckets` adds one line per length bucket.
    pub fn render(&self, buckets: bool) -> String {
        let mut out = String::new();
        let line = |name: &str, m: &Metrics| {
            format!(
                "{name:<13} n={:<6} P={:.4} R={:.4} F1={:.4}  (tp={} fp={} fn={} tn={})\n",
                m.count, m.precision, m.recall, m.f1, m.confusion.tp, m.confusion.fp, m.confusion.fn_, m.confusion.tn
            )
        };
        out.push_str(&line("all", &self.overall));
        if buckets {
            for (b, m) in &self.buckets {
                out.push_str(&line(b.label(), m));
            }
        }
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render(true))
    }
}

/// Metrics over already-scored examples, overall and per length bucket.
pub fn evaluate_scores(items: &[ScoredExample], threshold: f64) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty example list".into()));
    }
    let mut overall = Confusion::default();
    let mut per_bucket: BTreeMap<LengthBucket, Confusion> = BTreeMap::new();
    for it in items {
        let p = it.prediction(threshold);
        overall.add(it.label, p);
        per_bucket.entry(LengthBucket::of(it.words)).or_default().add(it.label, p);
    }
    Ok(EvalReport {
        threshold,
        overall: overall.metrics(),
        buckets: per_bucket.into_iter().map(|(b, c)| (b, c.metrics())).collect(),
    })
}

/// Infer-mode scores, returned in the order of `examples`.
pub fn score_examples<T: Scalar>(
    model: &QuestionDetector<T>,
    examples: &[EncodedExample],
) -> Result<Vec<ScoredExample>> {
    let batches = make_batches(
        examples,
        &BatchingConfig {
            batch_size: EVAL_BATCH,
            shuffle_seed: None,
            length_sorted: false,
        },
    )?;
    let mut scores = Vec::with_capacity(examples.len());
    for b in &batches {
        scores.extend(model.scores(b)?.into_iter().map(|s| s.as_f64()));
    }
    Ok(examples
        .iter()
        .zip(scores)
        .map(|(e, score)| ScoredExample {
            id: e.id.clone(),
            label: e.label,
            score,
            words: e.words,
            kind: e.kind.clone(),
        })
        .collect())
}

pub fn evaluate_f1<T: Scalar>(
    model: &QuestionDetector<T>,
    examples: &[EncodedExample],
    threshold: f64,
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty example list".into()));
    }
    evaluate_scores(&score_examples(model, examples)?, threshold)
}
