//! Accuracy, per-class scores and macro-F1.
//!
//! A prediction is correct when it matches any gold relation. For the
//! confusion matrix and the per-class scores every instance has one
//! reference label: the matched gold relation when correct, otherwise its
//! first gold relation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Instances whose reference label is this class.
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Mean F1 over classes that occur as reference or prediction.
    pub macro_f1: f64,
    pub per_class: Vec<ClassScores>,
    /// `confusion[reference][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl EvalReport {
    pub fn compute(num_relations: usize, gold: &[Vec<usize>], predicted: &[usize]) -> Result<Self> {
        if gold.len() != predicted.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gold label sets for {} predictions",
                gold.len(),
                predicted.len()
            )));
        }
        if gold.is_empty() {
            return Err(Error::Data("cannot evaluate zero instances".into()));
        }
        let mut confusion = vec![vec![0usize; num_relations]; num_relations];
        let mut correct = 0;
        for (g, &p) in gold.iter().zip(predicted) {
            let first = *g.first().ok_or_else(|| Error::Data("instance without gold relation".into()))?;
            if p >= num_relations || g.iter().any(|&x| x >= num_relations) {
                return Err(Error::InvalidArgument("relation id out of range".into()));
            }
            let reference = if g.contains(&p) {
                correct += 1;
                p
            } else {
                first
            };
            confusion[reference][p] += 1;
        }
        let mut per_class = Vec::with_capacity(num_relations);
        let mut f1_sum = 0.0;
        let mut active = 0;
        for j in 0..num_relations {
            let tp = confusion[j][j];
            let support: usize = confusion[j].iter().sum();
            let predicted_j: usize = confusion.iter().map(|row| row[j]).sum();
            let precision = ratio(tp, predicted_j);
            let recall = ratio(tp, support);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            if support > 0 || predicted_j > 0 {
                f1_sum += f1;
                active += 1;
            }
            per_class.push(ClassScores {
                precision,
                recall,
                f1,
                support,
            });
        }
        Ok(EvalReport {
            count: gold.len(),
            correct,
            accuracy: ratio(correct, gold.len()),
            macro_f1: if active == 0 { 0.0 } else { f1_sum / active as f64 },
            per_class,
            confusion,
        })
    }
}
