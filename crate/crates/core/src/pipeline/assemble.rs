use serde::{Deserialize, Serialize};

use super::feature::{FeatureKey, FeatureRecord, RecordSource};
use crate::clinical::{KneeKey, LabeledExample};
use crate::error::{Error, Result};

/// Channel means of a `(channels, spatial...)` tensor.
pub fn gap_pool(rec: &FeatureRecord) -> Result<Vec<f64>> {
    let shape = &rec.meta.shape;
    if shape.len() < 2 {
        return Err(Error::RankTooLow(shape.len()));
    }
    let spatial: usize = shape[1..].iter().product();
    Ok(rec
        .payload
        .chunks(spatial)
        .map(|c| c.iter().map(|&v| v as f64).sum::<f64>() / spatial as f64)
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssembleMode {
    /// Pooled features of one image.
    Single,
    /// Pooled image features minus pooled atlas features.
    AtlasDiff,
    /// Pooled features of two timepoints, concatenated.
    PairConcat,
    /// Taps of a registration network run on a pair, or on (atlas, image)
    /// for single-image tasks.
    RegPair,
    /// Pooled features of every input month, concatenated.
    MultiConcat,
}

impl AssembleMode {
    pub fn parse(name: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(name.into()))
            .map_err(|_| Error::InvalidConfig(format!("unknown assemble mode '{name}'")))
    }

    pub fn name(self) -> &'static str {
        match self {
            AssembleMode::Single => "single",
            AssembleMode::AtlasDiff => "atlas_diff",
            AssembleMode::PairConcat => "pair_concat",
            AssembleMode::RegPair => "reg_pair",
            AssembleMode::MultiConcat => "multi_concat",
        }
    }
}

/// Layer name under which registration taps for a pair are stored. The
/// record's month is the second (fixed) timepoint; `None` marks the
/// (atlas, image) pairing.
pub fn reg_pair_layer(layer: &str, first_month: Option<u32>) -> String {
    match first_month {
        Some(m) => format!("{layer}@pair{m}"),
        None => format!("{layer}@atlas"),
    }
}

#[derive(Clone, Debug)]
pub struct AssembleSpec<'a> {
    pub mode: AssembleMode,
    pub extractor: String,
    pub layer: String,
    pub fingerprint: String,
    pub atlas: Option<&'a FeatureRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssembledExample {
    pub key: KneeKey,
    pub months: Vec<u32>,
    pub mode: AssembleMode,
    pub vector: Vec<f64>,
}

fn key(spec: &AssembleSpec, ex: &LabeledExample, month: u32, layer: String) -> FeatureKey {
    FeatureKey {
        patient_id: ex.patient_id.clone(),
        side: ex.side,
        month,
        extractor: spec.extractor.clone(),
        layer,
        fingerprint: spec.fingerprint.clone(),
    }
}

fn pooled(src: &impl RecordSource, k: &FeatureKey) -> Result<(Vec<f64>, FeatureKey)> {
    let rec = src.get(k)?;
    Ok((gap_pool(&rec)?, k.clone()))
}

/// Builds one probe input vector per example.
pub fn assemble(
    src: &impl RecordSource,
    examples: &[LabeledExample],
    spec: &AssembleSpec,
) -> Result<Vec<AssembledExample>> {
    let mut out: Vec<AssembledExample> = Vec::with_capacity(examples.len());
    let mut first_dim: Option<(usize, String)> = None;
    for ex in examples {
        let month_of = |i: usize| {
            ex.months.get(i).copied().ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "{} needs {} timepoints, example {} has {:?}",
                    spec.mode.name(),
                    i + 1,
                    ex.key(),
                    ex.months
                ))
            })
        };
        let (vector, source) = match spec.mode {
            AssembleMode::Single => pooled(src, &key(spec, ex, month_of(0)?, spec.layer.clone()))?,
            AssembleMode::AtlasDiff => {
                let atlas = spec
                    .atlas
                    .ok_or_else(|| Error::InvalidConfig("atlas_diff needs an atlas record".into()))?;
                let a = gap_pool(atlas)?;
                let (v, k) = pooled(src, &key(spec, ex, month_of(0)?, spec.layer.clone()))?;
                if v.len() != a.len() {
                    return Err(Error::DimensionMismatch(format!(
                        "{k} has {} channels, atlas record has {}",
                        v.len(),
                        a.len()
                    )));
                }
                (v.iter().zip(&a).map(|(x, y)| x - y).collect(), k)
            }
            AssembleMode::PairConcat => {
                let (mut v, k) = pooled(src, &key(spec, ex, month_of(0)?, spec.layer.clone()))?;
                let (w, k2) = pooled(src, &key(spec, ex, month_of(1)?, spec.layer.clone()))?;
                if v.len() != w.len() {
                    return Err(Error::DimensionMismatch(format!(
                        "{k} has dim {}, {k2} has dim {}",
                        v.len(),
                        w.len()
                    )));
                }
                v.extend(w);
                (v, k)
            }
            AssembleMode::RegPair => {
                let k = if ex.months.len() >= 2 {
                    key(spec, ex, month_of(1)?, reg_pair_layer(&spec.layer, Some(month_of(0)?)))
                } else {
                    key(spec, ex, month_of(0)?, reg_pair_layer(&spec.layer, None))
                };
                pooled(src, &k)?
            }
            AssembleMode::MultiConcat => {
                let mut v = Vec::new();
                let mut first: Option<(FeatureKey, usize)> = None;
                for &m in &ex.months {
                    let (w, k) = pooled(src, &key(spec, ex, m, spec.layer.clone()))?;
                    match &first {
                        Some((f, d)) if *d != w.len() => {
                            return Err(Error::DimensionMismatch(format!(
                                "{k} has dim {}, {f} has dim {d}",
                                w.len()
                            )))
                        }
                        Some(_) => {}
                        None => first = Some((k, w.len())),
                    }
                    v.extend(w);
                }
                let (k, _) = first.ok_or_else(|| Error::EmptyInput(format!("no months for {}", ex.key())))?;
                (v, k)
            }
        };
        match &first_dim {
            None => first_dim = Some((vector.len(), source.to_string())),
            Some((d, k)) if *d != vector.len() => {
                return Err(Error::DimensionMismatch(format!(
                    "{source} gives dim {}, {k} gives dim {d}",
                    vector.len()
                )))
            }
            _ => {}
        }
        out.push(AssembledExample {
            key: ex.key(),
            months: ex.months.clone(),
            mode: spec.mode,
            vector,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clinical::{Side, Task};
    use crate::pipeline::feature::FeatureMeta;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    const FP: &str = "f00d";

    fn rec(id: &str, month: u32, layer: &str, shape: Vec<usize>, payload: Vec<f32>) -> FeatureRecord {
        FeatureRecord::new(
            FeatureMeta {
                patient_id: id.into(),
                side: Side::Right,
                timepoint_months: month,
                extractor: "x".into(),
                layer: layer.into(),
                preprocess_fingerprint: FP.into(),
                shape,
                extra: BTreeMap::new(),
            },
            payload,
        )
        .unwrap()
    }

    fn example(months: Vec<u32>) -> LabeledExample {
        LabeledExample {
            patient_id: "p".into(),
            side: Side::Right,
            months,
            task: Task::ProgJsw,
            label: 0,
            split: None,
        }
    }

    fn spec(mode: AssembleMode, atlas: Option<&FeatureRecord>) -> AssembleSpec<'_> {
        AssembleSpec {
            mode,
            extractor: "x".into(),
            layer: "l".into(),
            fingerprint: FP.into(),
            atlas,
        }
    }

    fn store(recs: Vec<FeatureRecord>) -> BTreeMap<FeatureKey, FeatureRecord> {
        recs.into_iter().map(|r| (r.meta.key(), r)).collect()
    }

    #[test]
    fn gap_pool_fixtures() {
        let r = rec("p", 0, "l", vec![8, 2, 2, 2], vec![1.5; 64]);
        assert_eq!(gap_pool(&r).unwrap(), vec![1.5; 8]);
        let r = rec("p", 0, "l", vec![1, 2], vec![1.0, 3.0]);
        assert_eq!(gap_pool(&r).unwrap(), vec![2.0]);
        let r = rec("p", 0, "l", vec![4], vec![1.0; 4]);
        assert!(matches!(gap_pool(&r), Err(Error::RankTooLow(1))));
    }

    #[test]
    fn gap_pool_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let payload: Vec<f32> = (0..8 * 27).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let r = rec("p", 0, "l", vec![8, 3, 3, 3], payload.clone());
        let pooled = gap_pool(&r).unwrap();
        for c in 0..8 {
            let mut s = 0.0f64;
            for i in 0..27 {
                s += payload[c * 27 + i] as f64;
            }
            assert!((pooled[c] - s / 27.0).abs() < 1e-12);
        }
    }

    #[test]
    fn modes_and_dimensions() {
        let a = rec("p", 0, "l", vec![16, 1], (0..16).map(|v| v as f32).collect());
        let b = rec("p", 12, "l", vec![16, 1], vec![1.0; 16]);
        let src = store(vec![a.clone(), b.clone()]);

        let out = assemble(&src, &[example(vec![0, 12])], &spec(AssembleMode::PairConcat, None)).unwrap();
        assert_eq!(out[0].vector.len(), 32);

        let out = assemble(&src, &[example(vec![0])], &spec(AssembleMode::AtlasDiff, Some(&a))).unwrap();
        assert!(out[0].vector.iter().all(|&v| v == 0.0));

        let months = vec![0, 12, 24, 36, 48, 72];
        let recs: Vec<FeatureRecord> = months
            .iter()
            .map(|&m| rec("p", m, "l", vec![16, 1], vec![0.5; 16]))
            .collect();
        let out = assemble(&store(recs), &[example(months)], &spec(AssembleMode::MultiConcat, None)).unwrap();
        assert_eq!(out[0].vector.len(), 96);
    }

    #[test]
    fn reg_pair_lookup() {
        let pair = rec("p", 24, &reg_pair_layer("l", Some(0)), vec![3, 1], vec![1.0, 2.0, 3.0]);
        let single = rec("p", 24, &reg_pair_layer("l", None), vec![3, 1], vec![4.0, 5.0, 6.0]);
        let src = store(vec![pair, single]);
        let out = assemble(
            &src,
            &[example(vec![0, 24]), example(vec![24])],
            &spec(AssembleMode::RegPair, None),
        )
        .unwrap();
        assert_eq!(out[0].vector, vec![1.0, 2.0, 3.0]);
        assert_eq!(out[1].vector, vec![4.0, 5.0, 6.0]);
    }

    #[test]
    fn errors_name_records() {
        let a = rec("p", 0, "l", vec![4, 1], vec![1.0; 4]);
        let b = rec("p", 12, "l", vec![5, 1], vec![1.0; 5]);
        let src = store(vec![a, b]);
        match assemble(&src, &[example(vec![0, 12])], &spec(AssembleMode::PairConcat, None)) {
            Err(Error::DimensionMismatch(m)) => assert!(m.contains("m0") && m.contains("m12")),
            other => panic!("{other:?}"),
        }
        match assemble(
            &src,
            &[example(vec![0]), example(vec![12])],
            &spec(AssembleMode::Single, None),
        ) {
            Err(Error::DimensionMismatch(m)) => assert!(m.contains("m0") && m.contains("m12")),
            other => panic!("{other:?}"),
        }
        match assemble(&src, &[example(vec![36])], &spec(AssembleMode::Single, None)) {
            Err(Error::MissingRecord(k)) => assert!(k.contains("m36")),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn atlas_diff_is_antisymmetric(v in prop::collection::vec(-5.0f32..5.0, 6), w in prop::collection::vec(-5.0f32..5.0, 6)) {
            let img = rec("p", 0, "l", vec![3, 2], v);
            let atl = rec("p", 0, "l", vec![3, 2], w);
            let ab = assemble(&store(vec![img.clone()]), &[example(vec![0])], &spec(AssembleMode::AtlasDiff, Some(&atl))).unwrap();
            let ba = assemble(&store(vec![atl]), &[example(vec![0])], &spec(AssembleMode::AtlasDiff, Some(&img))).unwrap();
            for (x, y) in ab[0].vector.iter().zip(&ba[0].vector) {
                prop_assert_eq!(*x, -*y);
            }
        }

        #[test]
        fn gap_pool_commutes_with_channel_permutation(v in prop::collection::vec(-5.0f32..5.0, 12), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut perm: Vec<usize> = (0..4).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let permuted: Vec<f32> = perm.iter().flat_map(|&c| v[c * 3..c * 3 + 3].to_vec()).collect();
            let a = gap_pool(&rec("p", 0, "l", vec![4, 3], v)).unwrap();
            let b = gap_pool(&rec("p", 0, "l", vec![4, 3], permuted)).unwrap();
            for (i, &c) in perm.iter().enumerate() {
                prop_assert_eq!(b[i], a[c]);
            }
        }
    }
}
