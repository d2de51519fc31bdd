//! Train/validate/test protocol shared by the experiment drivers.

use std::collections::BTreeMap;

use crate::clinical::{LabeledExample, Split};
use crate::error::{Error, Result};
use crate::eval::{accuracy, auc_binary, auc_multiclass, average_precision, f1_binary, Scored, ScoredSet};
use crate::probe::{predict_proba, train_probe, LinearProbe, ProbeConfig, ProbeLog};

pub struct ProbeOutcome {
    pub probe: LinearProbe,
    pub log: ProbeLog,
    pub test: ScoredSet,
}

fn rows_of<'a>(
    vectors: &'a [Vec<f64>],
    examples: &'a [LabeledExample],
    split: Split,
) -> impl Iterator<Item = (&'a Vec<f64>, &'a LabeledExample)> {
    vectors
        .iter()
        .zip(examples)
        .filter(move |(_, e)| e.split == Some(split))
}

/// Fits on the train split, selects on val, scores the test split.
/// `vectors[i]` is the input for `examples[i]`.
pub fn fit_and_score(
    vectors: &[Vec<f64>],
    examples: &[LabeledExample],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeOutcome> {
    if vectors.len() != examples.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} vectors for {} examples",
            vectors.len(),
            examples.len()
        )));
    }
    if let Some(e) = examples.iter().find(|e| e.split.is_none()) {
        return Err(Error::InvalidConfig(format!("example {} has no split", e.key())));
    }
    let unzip = |split| -> (Vec<Vec<f64>>, Vec<usize>) {
        rows_of(vectors, examples, split)
            .map(|(v, e)| (v.clone(), e.label))
            .unzip()
    };
    let (xt, yt) = unzip(Split::Train);
    let (xv, yv) = unzip(Split::Val);
    let validation = (!xv.is_empty()).then_some((xv.as_slice(), yv.as_slice()));
    let (probe, log) = train_probe(&xt, &yt, classes, validation, cfg)?;
    let mut items = Vec::new();
    for (x, e) in rows_of(vectors, examples, Split::Test) {
        items.push(Scored {
            key: format!("{}:{:?}", e.key(), e.months),
            scores: predict_proba(&probe, x)?,
            label: e.label,
        });
    }
    let test = ScoredSet::new(classes, items)?;
    Ok(ProbeOutcome { probe, log, test })
}

/// Accuracy and AUC for every set; F1 and AP as well for binary sets.
pub fn standard_metrics(set: &ScoredSet) -> Result<BTreeMap<String, f64>> {
    let mut m = BTreeMap::new();
    m.insert("acc".into(), accuracy(set)?);
    if set.classes() == 2 {
        m.insert("auc".into(), auc_binary(set)?);
        m.insert("f1".into(), f1_binary(set)?);
        m.insert("ap".into(), average_precision(set)?);
    } else {
        m.insert("auc".into(), auc_multiclass(set)?.value);
    }
    Ok(m)
}
