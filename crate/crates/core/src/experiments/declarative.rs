use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{EncodedExample, QuestionType};
use crate::error::{Error, Result};
use crate::model::{ModelRow, QuestionDetector};
use crate::scalar::Scalar;
use crate::training::{score_examples, ScoredExample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeclarativeRow {
    pub id: String,
    pub text: Option<String>,
    pub label: u8,
    pub kind: Option<String>,
    /// One score per family; `None` where that family has no score.
    pub scores: Vec<Option<f64>>,
}

/// Per-example question scores of several model families side by side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeclarativeTable {
    pub families: Vec<ModelRow>,
    pub rows: Vec<DeclarativeRow>,
    /// Mean over the rows each family scored.
    pub means: Vec<Option<f64>>,
}

impl DeclarativeTable {
    /// Fills in row text from an id → text map.
    pub fn with_texts(mut self, texts: &BTreeMap<String, String>) -> Self {
        for r in &mut self.rows {
            if let Some(t) = texts.get(&r.id) {
                r.text = Some(t.clone());
            }
        }
        self
    }
}

pub fn is_declarative(kind: Option<&str>) -> bool {
    kind == Some(QuestionType::DeclarativeQuestion.tag())
}

/// Lines up each family's scores by example id. Rows follow first
/// appearance across families. Fails unless at least one example is tagged
/// as a declarative question.
pub fn declarative_from_scores(families: &[(ModelRow, Vec<ScoredExample>)]) -> Result<DeclarativeTable> {
    let mut order: Vec<&ScoredExample> = Vec::new();
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for (_, scores) in families {
        for s in scores {
            if !index.contains_key(s.id.as_str()) {
                index.insert(&s.id, order.len());
                order.push(s);
            }
        }
    }
    if !order.iter().any(|s| is_declarative(s.kind.as_deref())) {
        return Err(Error::Contract("no examples tagged as declarative questions".into()));
    }
    let mut rows: Vec<DeclarativeRow> = order
        .iter()
        .map(|s| DeclarativeRow {
            id: s.id.clone(),
            text: None,
            label: s.label,
            kind: s.kind.clone(),
            scores: vec![None; families.len()],
        })
        .collect();
    for (f, (_, scores)) in families.iter().enumerate() {
        for s in scores {
            rows[index[s.id.as_str()]].scores[f] = Some(s.score);
        }
    }
    let means = (0..families.len())
        .map(|f| {
            let vals: Vec<f64> = rows.iter().filter_map(|r| r.scores[f]).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect();
    Ok(DeclarativeTable {
        families: families.iter().map(|(r, _)| *r).collect(),
        rows,
        means,
    })
}

/// Scores `examples` with every model and tabulates them per example. Pass
/// only declarative questions to get the per-family mean over them.
pub fn declarative_analysis<T: Scalar>(
    models: &[(ModelRow, &QuestionDetector<T>)],
    examples: &[EncodedExample],
) -> Result<DeclarativeTable> {
    if !examples.iter().any(|e| is_declarative(e.kind.as_deref())) {
        return Err(Error::Contract("no examples tagged as declarative questions".into()));
    }
    let families = models
        .iter()
        .map(|(row, m)| Ok((*row, score_examples(*m, examples)?)))
        .collect::<Result<Vec<_>>>()?;
    declarative_from_scores(&families)
}
