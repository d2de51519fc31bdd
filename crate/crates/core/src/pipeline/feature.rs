//! Feature interchange files (`IPFEA1`) and directory stores.
//!
//! ```text
//! "IPFEA1\n" | u32 metadata length | UTF-8 JSON metadata | f32 payload
//! ```
//!
//! Everything is little-endian. A store is a directory of such files plus an
//! `index.jsonl` with one `{"path": ..., metadata}` object per line.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clinical::Side;
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 7] = b"IPFEA1\n";
pub const INDEX_FILE: &str = "index.jsonl";
pub const FEATURE_EXT: &str = "ipfea";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMeta {
    pub patient_id: String,
    pub side: Side,
    pub timepoint_months: u32,
    pub extractor: String,
    pub layer: String,
    pub preprocess_fingerprint: String,
    pub shape: Vec<usize>,
    /// Fields written by other tools, kept as-is.
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl FeatureMeta {
    pub fn key(&self) -> FeatureKey {
        FeatureKey {
            patient_id: self.patient_id.clone(),
            side: self.side,
            month: self.timepoint_months,
            extractor: self.extractor.clone(),
            layer: self.layer.clone(),
            fingerprint: self.preprocess_fingerprint.clone(),
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("patient_id", &self.patient_id),
            ("extractor", &self.extractor),
            ("layer", &self.layer),
            ("preprocess_fingerprint", &self.preprocess_fingerprint),
        ] {
            if v.is_empty() {
                return Err(Error::InvalidMetadata(format!("empty {name}")));
            }
        }
        if self.shape.is_empty() || self.shape.contains(&0) {
            return Err(Error::InvalidMetadata(format!("shape {:?}", self.shape)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Identifies one record in a store.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FeatureKey {
    pub patient_id: String,
    pub side: Side,
    pub month: u32,
    pub extractor: String,
    pub layer: String,
    pub fingerprint: String,
}

impl std::fmt::Display for FeatureKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}/{}/m{}/{}/{}/{}",
            self.patient_id,
            self.side,
            self.month,
            self.extractor,
            self.layer,
            &self.fingerprint[..self.fingerprint.len().min(12)]
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub meta: FeatureMeta,
    pub payload: Vec<f32>,
}

impl FeatureRecord {
    pub fn new(meta: FeatureMeta, payload: Vec<f32>) -> Result<Self> {
        meta.validate()?;
        if payload.len() != meta.len() {
            return Err(Error::PayloadLength {
                expected: meta.len(),
                found: payload.len(),
            });
        }
        if let Some(index) = payload.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(FeatureRecord { meta, payload })
    }
}

pub fn encode_feature(rec: &FeatureRecord) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&rec.meta)?;
    let mut out = Vec::with_capacity(11 + meta.len() + 4 * rec.payload.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    for v in &rec.payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_feature(bytes: &[u8]) -> Result<FeatureRecord> {
    if bytes.len() < 7 || &bytes[..7] != FEATURE_MAGIC {
        return Err(Error::MalformedMagic("feature file".into()));
    }
    if bytes.len() < 11 {
        return Err(Error::TruncatedPayload {
            expected: 11,
            found: bytes.len(),
        });
    }
    let meta_len = u32::from_le_bytes(bytes[7..11].try_into().expect("4 bytes")) as usize;
    let body = &bytes[11..];
    if body.len() < meta_len {
        return Err(Error::TruncatedPayload {
            expected: 11 + meta_len,
            found: bytes.len(),
        });
    }
    let meta: FeatureMeta = serde_json::from_slice(&body[..meta_len])?;
    meta.validate()?;
    let payload = &body[meta_len..];
    if payload.len() != 4 * meta.len() {
        return Err(Error::PayloadLength {
            expected: meta.len(),
            found: payload.len() / 4,
        });
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    FeatureRecord::new(meta, values)
}

pub fn write_feature(rec: &FeatureRecord, path: &Path) -> Result<()> {
    let bytes = encode_feature(rec)?;
    fs::write(path, bytes).map_err(|e| Error::io_at(path, e))
}

pub fn read_feature(path: &Path) -> Result<FeatureRecord> {
    let bytes = fs::read(path).map_err(|e| Error::io_at(path, e))?;
    decode_feature(&bytes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct IndexLine {
    path: String,
    #[serde(flatten)]
    meta: FeatureMeta,
}

/// Lookup of feature records by key.
pub trait RecordSource {
    fn get(&self, key: &FeatureKey) -> Result<FeatureRecord>;
}

/// A directory of feature files with a JSON-lines index.
#[derive(Debug)]
pub struct FeatureStore {
    root: PathBuf,
    index: BTreeMap<FeatureKey, (String, FeatureMeta)>,
}

impl FeatureStore {
    /// Opens (creating if needed) a store. Without an index file the
    /// directory is scanned and an index written.
    pub fn open(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io_at(root, e))?;
        let mut store = FeatureStore {
            root: root.to_path_buf(),
            index: BTreeMap::new(),
        };
        let index_path = root.join(INDEX_FILE);
        match fs::read_to_string(&index_path) {
            Ok(text) => {
                for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                    let entry: IndexLine = serde_json::from_str(line).map_err(|e| Error::Csv {
                        line: n as u64 + 1,
                        message: format!("{}: {e}", index_path.display()),
                    })?;
                    store.index.insert(entry.meta.key(), (entry.path, entry.meta));
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                let mut names: Vec<String> = fs::read_dir(root)
                    .map_err(|e| Error::io_at(root, e))?
                    .filter_map(|e| e.ok())
                    .map(|e| e.file_name().to_string_lossy().into_owned())
                    .filter(|n| n.ends_with(FEATURE_EXT))
                    .collect();
                names.sort();
                for name in names {
                    let rec = read_feature(&root.join(&name))?;
                    store.index.insert(rec.meta.key(), (name, rec.meta));
                }
                store.write_index()?;
            }
            Err(e) => return Err(Error::io_at(&index_path, e)),
        }
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn metas(&self) -> impl Iterator<Item = &FeatureMeta> {
        self.index.values().map(|(_, m)| m)
    }

    pub fn contains(&self, key: &FeatureKey) -> bool {
        self.index.contains_key(key)
    }

    fn file_name(key: &FeatureKey) -> String {
        let clean = |s: &str| -> String {
            s.chars()
                .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
                .collect()
        };
        format!(
            "{}_{}_m{:03}_{}_{}_{}.{FEATURE_EXT}",
            clean(&key.patient_id),
            key.side,
            key.month,
            clean(&key.extractor),
            clean(&key.layer),
            &key.fingerprint[..key.fingerprint.len().min(12)]
        )
    }

    /// Writes the record file and appends it to the index; an existing record
    /// with the same key is replaced.
    pub fn insert(&mut self, rec: &FeatureRecord) -> Result<PathBuf> {
        let key = rec.meta.key();
        let name = Self::file_name(&key);
        let path = self.root.join(&name);
        write_feature(rec, &path)?;
        let replaced = self.index.insert(key, (name.clone(), rec.meta.clone())).is_some();
        if replaced {
            self.write_index()?;
        } else {
            let index_path = self.root.join(INDEX_FILE);
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&index_path)
                .map_err(|e| Error::io_at(&index_path, e))?;
            let line = serde_json::to_string(&IndexLine {
                path: name,
                meta: rec.meta.clone(),
            })?;
            writeln!(f, "{line}").map_err(|e| Error::io_at(&index_path, e))?;
        }
        Ok(path)
    }

    fn write_index(&self) -> Result<()> {
        let mut text = String::new();
        for (path, meta) in self.index.values() {
            text.push_str(&serde_json::to_string(&IndexLine {
                path: path.clone(),
                meta: meta.clone(),
            })?);
            text.push('\n');
        }
        let index_path = self.root.join(INDEX_FILE);
        fs::write(&index_path, text).map_err(|e| Error::io_at(&index_path, e))
    }
}

impl RecordSource for FeatureStore {
    fn get(&self, key: &FeatureKey) -> Result<FeatureRecord> {
        let (path, meta) = self
            .index
            .get(key)
            .ok_or_else(|| Error::MissingRecord(key.to_string()))?;
        let rec = read_feature(&self.root.join(path))?;
        if &rec.meta != meta {
            return Err(Error::InvalidMetadata(format!("{path} disagrees with the index")));
        }
        Ok(rec)
    }
}

/// In-memory records, for tests and single-process pipelines.
impl RecordSource for BTreeMap<FeatureKey, FeatureRecord> {
    fn get(&self, key: &FeatureKey) -> Result<FeatureRecord> {
        BTreeMap::get(self, key)
            .cloned()
            .ok_or_else(|| Error::MissingRecord(key.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn meta(id: &str, month: u32, shape: Vec<usize>) -> FeatureMeta {
        FeatureMeta {
            patient_id: id.into(),
            side: Side::Left,
            timepoint_months: month,
            extractor: "patch-intensity".into(),
            layer: "patches4".into(),
            preprocess_fingerprint: "ab".repeat(32),
            shape,
            extra: BTreeMap::new(),
        }
    }

    fn random_record(rng: &mut ChaCha8Rng) -> FeatureRecord {
        let shape = vec![rng.random_range(1..5), rng.random_range(1..4), 2];
        let n: usize = shape.iter().product();
        let payload = (0..n).map(|_| rng.random_range(-10.0f32..10.0)).collect();
        FeatureRecord::new(meta("p1", 12, shape), payload).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ipfea");
        for _ in 0..10 {
            let rec = random_record(&mut rng);
            write_feature(&rec, &path).unwrap();
            let bytes = fs::read(&path).unwrap();
            let back = read_feature(&path).unwrap();
            assert_eq!(back, rec);
            assert_eq!(encode_feature(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn foreign_fields_survive() {
        let mut rec = random_record(&mut ChaCha8Rng::seed_from_u64(1));
        rec.meta.extra.insert("activation".into(), "post".into());
        let back = decode_feature(&encode_feature(&rec).unwrap()).unwrap();
        assert_eq!(back.meta.extra["activation"], "post");
    }

    #[test]
    fn validation_errors() {
        let rec = random_record(&mut ChaCha8Rng::seed_from_u64(2));
        let bytes = encode_feature(&rec).unwrap();
        assert!(matches!(
            decode_feature(&bytes[..bytes.len() - 4]),
            Err(Error::PayloadLength { .. })
        ));
        assert!(matches!(decode_feature(b"IPFEA2\n...."), Err(Error::MalformedMagic(_))));
        assert!(matches!(
            decode_feature(&bytes[..20]),
            Err(Error::TruncatedPayload { .. })
        ));

        let mut nan = bytes.clone();
        let at = nan.len() - 8;
        nan[at..at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        let n = rec.payload.len();
        assert!(matches!(decode_feature(&nan), Err(Error::NonFinite { index }) if index == n - 2));

        let mut m = meta("p", 0, vec![2]);
        m.layer.clear();
        assert!(matches!(
            FeatureRecord::new(m, vec![0.0; 2]),
            Err(Error::InvalidMetadata(_))
        ));
    }

    #[test]
    fn store_index_and_rescan() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = FeatureStore::open(dir.path()).unwrap();
        let a = FeatureRecord::new(meta("p1", 0, vec![2, 1]), vec![1.0, 2.0]).unwrap();
        let b = FeatureRecord::new(meta("p1", 12, vec![2, 1]), vec![3.0, 4.0]).unwrap();
        store.insert(&a).unwrap();
        store.insert(&b).unwrap();
        let again = FeatureRecord::new(meta("p1", 12, vec![2, 1]), vec![5.0, 6.0]).unwrap();
        store.insert(&again).unwrap();
        assert_eq!(store.len(), 2);

        let reopened = FeatureStore::open(dir.path()).unwrap();
        assert_eq!(reopened.get(&b.meta.key()).unwrap(), again);
        fs::remove_file(dir.path().join(INDEX_FILE)).unwrap();
        let rescanned = FeatureStore::open(dir.path()).unwrap();
        assert_eq!(rescanned.len(), 2);
        assert_eq!(rescanned.get(&a.meta.key()).unwrap(), a);

        let mut missing = a.meta.key();
        missing.month = 99;
        match rescanned.get(&missing) {
            Err(Error::MissingRecord(k)) => assert!(k.contains("m99")),
            other => panic!("{other:?}"),
        }
    }
}
