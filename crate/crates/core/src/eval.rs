//! Exact-match span scoring.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::{iobes_to_spans, Corpus, Span};
use crate::error::{Error, Result};
use crate::model::NerModel;

/// Precision, recall and F1 in percent.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    /// Scores from counts. Precision is 0 when nothing is predicted but
    /// gold spans exist; with no gold and no predictions every score is 100.
    pub fn from_counts(correct: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |num: usize, den: usize, empty: f64| {
            if den == 0 {
                empty
            } else {
                100.0 * num as f64 / den as f64
            }
        };
        let precision = ratio(correct, predicted, if gold == 0 { 100.0 } else { 0.0 });
        let recall = ratio(correct, gold, if predicted == 0 { 100.0 } else { 0.0 });
        Prf {
            precision,
            recall,
            f1: harmonic(precision, recall),
        }
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TypeScore {
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
    #[serde(flatten)]
    pub prf: Prf,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub micro: Prf,
    /// Unweighted mean of per-type scores over types present in gold.
    pub macro_avg: Prf,
    pub per_type: BTreeMap<String, TypeScore>,
    pub sentences: usize,
    pub tokens: usize,
}

/// Scores predicted tag sequences against gold sequences.
pub fn score_sequences<G: AsRef<str>, P: AsRef<str>>(
    gold: &[Vec<G>],
    predicted: &[Vec<P>],
) -> Result<Metrics> {
    if gold.len() != predicted.len() {
        return Err(Error::Data(format!(
            "{} gold sentences but {} predictions",
            gold.len(),
            predicted.len()
        )));
    }
    let mut counts: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    let mut tokens = 0;
    for (i, (g, p)) in gold.iter().zip(predicted).enumerate() {
        if g.len() != p.len() {
            return Err(Error::Data(format!(
                "sentence {i}: {} gold tags but {} predicted",
                g.len(),
                p.len()
            )));
        }
        tokens += g.len();
        let gs: BTreeSet<Span> = iobes_to_spans(g).into_iter().collect();
        let ps: BTreeSet<Span> = iobes_to_spans(p).into_iter().collect();
        for s in &gs {
            let c = counts.entry(s.entity_type.clone()).or_default();
            c.2 += 1;
            if ps.contains(s) {
                c.0 += 1;
            }
        }
        for s in &ps {
            counts.entry(s.entity_type.clone()).or_default().1 += 1;
        }
    }
    let per_type: BTreeMap<String, TypeScore> = counts
        .into_iter()
        .map(|(ty, (correct, predicted, gold))| {
            let prf = Prf::from_counts(correct, predicted, gold);
            (
                ty,
                TypeScore {
                    correct,
                    predicted,
                    gold,
                    prf,
                },
            )
        })
        .collect();
    let total = per_type.values().fold((0, 0, 0), |acc, t| {
        (acc.0 + t.correct, acc.1 + t.predicted, acc.2 + t.gold)
    });
    let in_gold: Vec<&TypeScore> = per_type.values().filter(|t| t.gold > 0).collect();
    let macro_avg = if in_gold.is_empty() {
        Prf::from_counts(0, total.1, 0)
    } else {
        let n = in_gold.len() as f64;
        let mean = |f: fn(&Prf) -> f64| in_gold.iter().map(|t| f(&t.prf)).sum::<f64>() / n;
        Prf {
            precision: mean(|p| p.precision),
            recall: mean(|p| p.recall),
            f1: mean(|p| p.f1),
        }
    };
    Ok(Metrics {
        micro: Prf::from_counts(total.0, total.1, total.2),
        macro_avg,
        per_type,
        sentences: gold.len(),
        tokens,
    })
}

/// Metrics together with the predicted tags of every sentence.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub predictions: Vec<Vec<String>>,
}

/// Greedily decodes every sentence of `corpus` and scores it.
pub fn evaluate(model: &NerModel, corpus: &Corpus) -> Result<Evaluation> {
    let predictions = corpus
        .sentences
        .iter()
        .map(|s| model.greedy_decode(&s.tokens))
        .collect::<Result<Vec<_>>>()?;
    let gold: Vec<&Vec<String>> = corpus.sentences.iter().map(|s| &s.tags).collect();
    let gold: Vec<Vec<&str>> = gold
        .iter()
        .map(|t| t.iter().map(String::as_str).collect())
        .collect();
    let metrics = score_sequences(&gold, &predictions)?;
    Ok(Evaluation {
        metrics,
        predictions,
    })
}
