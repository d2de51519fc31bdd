use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::records::{ClinicalRecord, KneeKey, Side};
use super::split::Split;
use crate::error::{Error, Result};

pub const PAIN_THRESHOLD: u8 = 5;
pub const JSW_DROP_MM: f64 = 0.5;
pub const MIN_JSW_INTERVAL: u32 = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Klg4,
    Pain2,
    ProgKlg,
    ProgJsw,
    FutureKlg,
    FuturePain,
}

impl Task {
    pub fn arity(self) -> usize {
        match self {
            Task::Klg4 | Task::FutureKlg => 4,
            _ => 2,
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(name.into()))
            .map_err(|_| Error::InvalidConfig(format!("unknown task '{name}'")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Klg4 => "klg4",
            Task::Pain2 => "pain2",
            Task::ProgKlg => "prog_klg",
            Task::ProgJsw => "prog_jsw",
            Task::FutureKlg => "future_klg",
            Task::FuturePain => "future_pain",
        }
    }
}

/// Merges grades 0 and 1.
pub fn klg_class(klg: u8) -> Result<usize> {
    match klg {
        0 | 1 => Ok(0),
        2..=4 => Ok(klg as usize - 1),
        _ => Err(Error::OutOfRange(format!("klg {klg} not in 0..=4"))),
    }
}

pub fn pain_label(womac: u8) -> Result<bool> {
    if womac > 20 {
        return Err(Error::OutOfRange(format!("womac {womac} not in 0..=20")));
    }
    Ok(womac >= PAIN_THRESHOLD)
}

fn check_pair(r1: &ClinicalRecord, r2: &ClinicalRecord) -> Result<()> {
    r1.validate()?;
    r2.validate()?;
    if r1.key() != r2.key() {
        return Err(Error::InvalidPair(format!("{} vs {}", r1.key(), r2.key())));
    }
    if r2.month <= r1.month {
        return Err(Error::InvalidPair(format!(
            "{}: month {} does not follow {}",
            r1.key(),
            r2.month,
            r1.month
        )));
    }
    Ok(())
}

/// Progression as a strict increase in grade.
pub fn prog_klg(r1: &ClinicalRecord, r2: &ClinicalRecord) -> Result<bool> {
    check_pair(r1, r2)?;
    Ok(r2.klg > r1.klg)
}

/// Progression as a joint space loss of at least 0.5 mm over at least 12
/// months; shorter intervals are not labeled.
pub fn prog_jsw(r1: &ClinicalRecord, r2: &ClinicalRecord) -> Result<bool> {
    check_pair(r1, r2)?;
    let dt = r2.month - r1.month;
    if dt < MIN_JSW_INTERVAL {
        return Err(Error::InvalidPair(format!(
            "{}: interval {dt} months < {MIN_JSW_INTERVAL}",
            r1.key()
        )));
    }
    // Rounded to the micrometre so decimal inputs like 4.0 -> 3.5 sit on the
    // threshold rather than a hair below it.
    let drop = ((r1.jsw_mm - r2.jsw_mm) * 1e6).round() / 1e6;
    Ok(drop >= JSW_DROP_MM)
}

fn by_key(records: &[ClinicalRecord]) -> BTreeMap<KneeKey, Vec<&ClinicalRecord>> {
    let mut map: BTreeMap<KneeKey, Vec<&ClinicalRecord>> = BTreeMap::new();
    for r in records {
        map.entry(r.key()).or_default().push(r);
    }
    for v in map.values_mut() {
        v.sort_by_key(|r| r.month);
    }
    map
}

/// All within-knee pairs with t1 < t2, in (key, t1, t2) order. Under
/// `ProgJsw` only pairs at least 12 months apart are kept.
pub fn enumerate_pairs(records: &[ClinicalRecord], task: Task) -> Vec<(&ClinicalRecord, &ClinicalRecord)> {
    let mut pairs = Vec::new();
    for visits in by_key(records).into_values() {
        for (i, a) in visits.iter().enumerate() {
            for b in &visits[i + 1..] {
                if b.month == a.month {
                    continue;
                }
                if task == Task::ProgJsw && b.month - a.month < MIN_JSW_INTERVAL {
                    continue;
                }
                pairs.push((*a, *b));
            }
        }
    }
    pairs
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub patient_id: String,
    pub side: Side,
    /// Timepoints whose images form the input.
    pub months: Vec<u32>,
    pub task: Task,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl LabeledExample {
    pub fn key(&self) -> KneeKey {
        KneeKey {
            patient_id: self.patient_id.clone(),
            side: self.side,
        }
    }
}

fn example(r: &ClinicalRecord, months: Vec<u32>, task: Task, label: usize) -> LabeledExample {
    LabeledExample {
        patient_id: r.patient_id.clone(),
        side: r.side,
        months,
        task,
        label,
        split: None,
    }
}

/// One example per record for the single-image tasks.
pub fn single_examples(records: &[ClinicalRecord], task: Task) -> Result<Vec<LabeledExample>> {
    records
        .iter()
        .map(|r| {
            let label = match task {
                Task::Klg4 => klg_class(r.klg)?,
                Task::Pain2 => pain_label(r.womac)? as usize,
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "{} is not a single-image task",
                        other.name()
                    )))
                }
            };
            Ok(example(r, vec![r.month], task, label))
        })
        .collect()
}

/// One example per enumerated pair for the progression tasks.
pub fn pair_examples(records: &[ClinicalRecord], task: Task) -> Result<Vec<LabeledExample>> {
    enumerate_pairs(records, task)
        .into_iter()
        .map(|(a, b)| {
            let label = match task {
                Task::ProgKlg => prog_klg(a, b)?,
                Task::ProgJsw => prog_jsw(a, b)?,
                other => return Err(Error::InvalidConfig(format!("{} is not a pair task", other.name()))),
            };
            Ok(example(a, vec![a.month, b.month], task, label as usize))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FutureDataset {
    pub klg: Vec<LabeledExample>,
    pub pain: Vec<LabeledExample>,
    /// Knees lacking an input month or the target month.
    pub dropped: Vec<KneeKey>,
}

/// Examples whose inputs are the images at `input_months` and whose labels
/// are the grade and pain status at `target_month`.
pub fn build_future_dataset(
    records: &[ClinicalRecord],
    input_months: &[u32],
    target_month: u32,
) -> Result<FutureDataset> {
    if input_months.is_empty() {
        return Err(Error::EmptyInput("no input months".into()));
    }
    let mut months = input_months.to_vec();
    months.sort_unstable();
    months.dedup();
    if months.last().is_some_and(|&m| m >= target_month) {
        return Err(Error::InvalidConfig(format!(
            "input months {months:?} must precede target month {target_month}"
        )));
    }
    let mut out = FutureDataset {
        klg: Vec::new(),
        pain: Vec::new(),
        dropped: Vec::new(),
    };
    for (key, visits) in by_key(records) {
        let at = |m: u32| visits.iter().find(|r| r.month == m);
        let target = at(target_month);
        match target {
            Some(t) if months.iter().all(|&m| at(m).is_some()) => {
                out.klg
                    .push(example(t, months.clone(), Task::FutureKlg, klg_class(t.klg)?));
                out.pain.push(example(
                    t,
                    months.clone(),
                    Task::FuturePain,
                    pain_label(t.womac)? as usize,
                ));
            }
            _ => out.dropped.push(key),
        }
    }
    Ok(out)
}

/// One JSON object per line.
pub fn write_examples_jsonl(mut w: impl Write, examples: &[LabeledExample]) -> Result<()> {
    for e in examples {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
