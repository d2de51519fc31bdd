//! Classification metrics over scored example sets.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::argmax;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub key: String,
    /// One score per class; larger means more likely.
    pub scores: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSet {
    classes: usize,
    items: Vec<Scored>,
}

impl ScoredSet {
    pub fn new(classes: usize, items: Vec<Scored>) -> Result<Self> {
        if classes < 2 {
            return Err(Error::TooFewClasses(classes));
        }
        for (i, s) in items.iter().enumerate() {
            if s.scores.len() != classes {
                return Err(Error::DimensionMismatch(format!(
                    "example {} has {} scores for {} classes",
                    s.key,
                    s.scores.len(),
                    classes
                )));
            }
            if s.label >= classes {
                return Err(Error::LabelOutOfRange {
                    label: s.label,
                    classes,
                });
            }
            if s.scores.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { index: i });
            }
        }
        Ok(ScoredSet { classes, items })
    }

    /// Binary set from positive-class probabilities `p`; class scores are
    /// `[1 - p, p]`. Keys are the example positions.
    pub fn from_positive(scores: &[f64], labels: &[bool]) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        let items = scores
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (&p, &y))| Scored {
                key: format!("{i:08}"),
                scores: vec![1.0 - p, p],
                label: y as usize,
            })
            .collect();
        ScoredSet::new(2, items)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn items(&self) -> &[Scored] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn non_empty(&self, metric: &'static str) -> Result<()> {
        if self.items.is_empty() {
            return Err(Error::UndefinedMetric {
                metric,
                reason: "empty set".into(),
            });
        }
        Ok(())
    }

    fn binary(&self, metric: &'static str) -> Result<()> {
        if self.classes != 2 {
            return Err(Error::UndefinedMetric {
                metric,
                reason: format!("binary metric on {} classes", self.classes),
            });
        }
        Ok(())
    }
}

/// `counts[truth][predicted]` at argmax decisions.
pub fn confusion_matrix(set: &ScoredSet) -> Vec<Vec<usize>> {
    let mut counts = vec![vec![0; set.classes]; set.classes];
    for s in &set.items {
        counts[s.label][argmax(&s.scores)] += 1;
    }
    counts
}

pub fn accuracy(set: &ScoredSet) -> Result<f64> {
    set.non_empty("accuracy")?;
    let cm = confusion_matrix(set);
    let correct: usize = (0..set.classes).map(|k| cm[k][k]).sum();
    Ok(correct as f64 / set.len() as f64)
}

/// F1 of class 1 at argmax decisions; 0 when precision + recall is 0.
pub fn f1_binary(set: &ScoredSet) -> Result<f64> {
    set.non_empty("f1")?;
    set.binary("f1")?;
    let cm = confusion_matrix(set);
    let (tp, fp, fun) = (cm[1][1] as f64, cm[0][1] as f64, cm[1][0] as f64);
    if tp == 0.0 {
        return Ok(0.0);
    }
    let precision = tp / (tp + fp);
    let recall = tp / (tp + fun);
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Mann-Whitney AUC of `scores` for the `positive` flags, via midranks.
fn rank_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of positives keeps every midrank integral.
    let mut twice_rank_sum = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_mid = (i + 1 + j + 1) as u64;
        let pos_in_tie = order[i..=j].iter().filter(|&&k| positive[k]).count() as u64;
        twice_rank_sum += twice_mid * pos_in_tie;
        i = j + 1;
    }
    let twice_u = twice_rank_sum - (n_pos * (n_pos + 1)) as u64;
    Some(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

/// Binary AUC using the class-1 score.
pub fn auc_binary(set: &ScoredSet) -> Result<f64> {
    set.binary("auc")?;
    let scores: Vec<f64> = set.items.iter().map(|s| s.scores[1]).collect();
    let positive: Vec<bool> = set.items.iter().map(|s| s.label == 1).collect();
    rank_auc(&scores, &positive).ok_or_else(|| Error::UndefinedMetric {
        metric: "auc",
        reason: "both classes must be present".into(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MulticlassAuc {
    /// Macro average over the classes present.
    pub value: f64,
    /// One-vs-rest AUC per class, `None` where the class is absent.
    pub per_class: Vec<Option<f64>>,
    pub skipped: Vec<usize>,
}

/// Macro one-vs-rest AUC; classes absent from the set are skipped.
pub fn auc_multiclass(set: &ScoredSet) -> Result<MulticlassAuc> {
    let mut per_class = Vec::with_capacity(set.classes);
    let mut skipped = Vec::new();
    for k in 0..set.classes {
        let scores: Vec<f64> = set.items.iter().map(|s| s.scores[k]).collect();
        let positive: Vec<bool> = set.items.iter().map(|s| s.label == k).collect();
        let auc = rank_auc(&scores, &positive);
        if auc.is_none() {
            skipped.push(k);
        }
        per_class.push(auc);
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    // With two or more classes present every present class has a defined AUC.
    if present.is_empty() {
        return Err(Error::UndefinedMetric {
            metric: "auc",
            reason: format!("{} classes present, need >= 2", set.classes - skipped.len()),
        });
    }
    let value = present.iter().sum::<f64>() / present.len() as f64;
    Ok(MulticlassAuc {
        value,
        per_class,
        skipped,
    })
}

/// Average precision of class 1 with step interpolation. Ties are ordered by
/// (score descending, key ascending).
pub fn average_precision(set: &ScoredSet) -> Result<f64> {
    set.binary("ap")?;
    let n_pos = set.items.iter().filter(|s| s.label == 1).count();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric {
            metric: "ap",
            reason: "no positive examples".into(),
        });
    }
    let mut order: Vec<&Scored> = set.items.iter().collect();
    order.sort_by(|a, b| match b.scores[1].total_cmp(&a.scores[1]) {
        Ordering::Equal => a.key.cmp(&b.key),
        o => o,
    });
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, s) in order.iter().enumerate() {
        if s.label == 1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / n_pos as f64)
}
