use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::labels::LabeledExample;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Sizes for 50% / 12.5% / remainder. Each share is floored, then the
/// leftover patients go to test, val and train in that order.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let mut counts = [n / 2, n / 8, n * 3 / 8];
    let mut left = n - counts.iter().sum::<usize>();
    for slot in [2, 1, 0] {
        if left == 0 {
            break;
        }
        counts[slot] += 1;
        left -= 1;
    }
    (counts[0], counts[1], counts[2])
}

/// Patient-level split of the distinct ids, deterministic per seed.
pub fn split_patients(patient_ids: &[String], seed: u64) -> BTreeMap<String, Split> {
    let mut ids: Vec<&String> = patient_ids.iter().collect::<BTreeSet<_>>().into_iter().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train, val, _) = split_counts(ids.len());
    ids.into_iter()
        .enumerate()
        .map(|(i, id)| {
            let s = if i < train {
                Split::Train
            } else if i < train + val {
                Split::Val
            } else {
                Split::Test
            };
            (id.clone(), s)
        })
        .collect()
}

/// Stamps every example with its patient's split.
pub fn assign_splits(examples: &mut [LabeledExample], splits: &BTreeMap<String, Split>) -> Result<()> {
    for e in examples {
        let s = splits
            .get(&e.patient_id)
            .ok_or_else(|| Error::MissingRecord(format!("no split for patient {}", e.patient_id)))?;
        e.split = Some(*s);
    }
    Ok(())
}
