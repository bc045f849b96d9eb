//! Exact-match QA scoring.

use std::collections::BTreeMap;

use rayon::prelude::*;
use tempora_core::model::{Example, Vlm};
use tempora_core::tokenizer::Tokenizer;

use crate::tasks::{QaItem, QaKind};
use crate::RecipeError;

pub fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Fraction of items whose predicted answer matches the gold answer after
/// whitespace normalization.
pub fn evaluate_qa(items: &[QaItem], predictions: &[String]) -> Result<f64, RecipeError> {
    if items.is_empty() {
        return Err(RecipeError::Invariant("accuracy of an empty QA set is undefined".into()));
    }
    if items.len() != predictions.len() {
        return Err(RecipeError::Invariant(format!(
            "{} predictions for {} questions",
            predictions.len(),
            items.len()
        )));
    }
    let hits = items
        .iter()
        .zip(predictions)
        .filter(|(q, p)| normalize(&q.answer) == normalize(p))
        .count();
    Ok(hits as f64 / items.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct QaScore {
    pub accuracy: f64,
    pub per_kind: BTreeMap<String, f64>,
    pub caption_token_accuracy: f64,
}

fn kind_name(k: QaKind) -> String {
    serde_json::to_value(k)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// Scores precomputed predictions; `gold_ids`/`pred_ids` feed the token metric.
pub fn score(items: &[QaItem], predictions: &[String], gold_ids: &[Vec<usize>], pred_ids: &[Vec<usize>]) -> Result<QaScore, RecipeError> {
    let accuracy = evaluate_qa(items, predictions)?;
    let mut groups: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (q, p) in items.iter().zip(predictions) {
        let g = groups.entry(kind_name(q.kind)).or_default();
        g.1 += 1;
        if normalize(&q.answer) == normalize(p) {
            g.0 += 1;
        }
    }
    let per_kind = groups
        .into_iter()
        .map(|(k, (hit, n))| (k, hit as f64 / n as f64))
        .collect();
    let (mut hit, mut total) = (0usize, 0usize);
    for ((q, gold), pred) in items.iter().zip(gold_ids).zip(pred_ids) {
        if matches!(q.kind, QaKind::First | QaKind::Last | QaKind::Recall) {
            total += gold.len();
            hit += gold.iter().zip(pred).filter(|(a, b)| a == b).count();
        }
    }
    Ok(QaScore {
        accuracy,
        per_kind,
        caption_token_accuracy: if total == 0 { 0.0 } else { hit as f64 / total as f64 },
    })
}

/// Greedy answers from `model` for every example, in parallel.
pub fn predict(model: &Vlm, examples: &[Example], max_new: usize) -> Result<Vec<Vec<usize>>, RecipeError> {
    examples
        .par_iter()
        .map(|ex| Ok(model.generate(&ex.visual, &ex.prompt, max_new)?))
        .collect()
}

pub fn evaluate_model(
    model: &Vlm,
    tok: &Tokenizer,
    items: &[QaItem],
    examples: &[Example],
    max_new: usize,
) -> Result<QaScore, RecipeError> {
    let pred_ids = predict(model, examples, max_new)?;
    let predictions: Vec<String> = pred_ids.iter().map(|ids| tok.decode(ids)).collect();
    let gold: Vec<Vec<usize>> = examples.iter().map(|e| e.target.clone()).collect();
    score(items, &predictions, &gold, &pred_ids)
}
