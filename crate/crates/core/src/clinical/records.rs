use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Left => "left",
            Side::Right => "right",
        })
    }
}

impl FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "left" | "l" => Ok(Side::Left),
            "right" | "r" => Ok(Side::Right),
            other => Err(Error::OutOfRange(format!("side '{other}'"))),
        }
    }
}

/// One knee.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct KneeKey {
    pub patient_id: String,
    pub side: Side,
}

impl fmt::Display for KneeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.patient_id, self.side)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClinicalRecord {
    pub patient_id: String,
    pub side: Side,
    #[serde(rename = "month")]
    pub month: u32,
    pub klg: u8,
    pub womac: u8,
    /// Minimum medial joint space width.
    #[serde(rename = "jsw")]
    pub jsw_mm: f64,
}

impl ClinicalRecord {
    pub fn key(&self) -> KneeKey {
        KneeKey {
            patient_id: self.patient_id.clone(),
            side: self.side,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patient_id.is_empty() {
            return Err(Error::OutOfRange("empty patient_id".into()));
        }
        if self.klg > 4 {
            return Err(Error::OutOfRange(format!("klg {} not in 0..=4", self.klg)));
        }
        if self.womac > 20 {
            return Err(Error::OutOfRange(format!("womac {} not in 0..=20", self.womac)));
        }
        if !(self.jsw_mm.is_finite() && self.jsw_mm >= 0.0) {
            return Err(Error::OutOfRange(format!(
                "jsw {} must be finite and >= 0",
                self.jsw_mm
            )));
        }
        Ok(())
    }
}

const COLUMNS: [&str; 6] = ["patient_id", "side", "month", "klg", "womac", "jsw"];

/// Parses a clinical table with a header naming (at least) the columns
/// patient_id, side, month, klg, womac, jsw, in any order.
pub fn parse_clinical_csv(input: impl Read) -> Result<Vec<ClinicalRecord>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = reader
        .headers()
        .map_err(|e| Error::Csv {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let mut index = [0usize; 6];
    for (slot, name) in index.iter_mut().zip(COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.into()))?;
    }

    let mut records = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Csv {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let bad = |column: &str, value: &str, why: String| Error::Csv {
            line,
            message: format!("{column}='{value}': {why}"),
        };
        let get = |i: usize| row.get(index[i]).unwrap_or("");
        fn num<T: FromStr>(s: &str) -> std::result::Result<T, String>
        where
            T::Err: fmt::Display,
        {
            s.parse::<T>().map_err(|e| e.to_string())
        }
        let record = ClinicalRecord {
            patient_id: get(0).to_string(),
            side: get(1).parse().map_err(|e: Error| bad("side", get(1), e.to_string()))?,
            month: num(get(2)).map_err(|e| bad("month", get(2), e))?,
            klg: num(get(3)).map_err(|e| bad("klg", get(3), e))?,
            womac: num(get(4)).map_err(|e| bad("womac", get(4), e))?,
            jsw_mm: num(get(5)).map_err(|e| bad("jsw", get(5), e))?,
        };
        record.validate().map_err(|e| Error::Csv {
            line,
            message: e.to_string(),
        })?;
        if !seen.insert((record.key(), record.month)) {
            return Err(Error::DuplicateKey(format!(
                "{} month {} (line {line})",
                record.key(),
                record.month
            )));
        }
        records.push(record);
    }
    Ok(records)
}

pub fn read_clinical_csv(path: &Path) -> Result<Vec<ClinicalRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io_at(path, e))?;
    parse_clinical_csv(std::io::BufReader::new(file))
}

pub fn write_clinical_csv(path: &Path, records: &[ClinicalRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    w.write_record(COLUMNS)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    for r in records {
        w.write_record([
            r.patient_id.clone(),
            r.side.to_string(),
            r.month.to_string(),
            r.klg.to_string(),
            r.womac.to_string(),
            r.jsw_mm.to_string(),
        ])
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io_at(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_valid_fixture() {
        let text = "patient_id,side,month,klg,womac,jsw\n\
                    p1,left,0,1,3,4.2\n\
                    p1,left,12,2,5,3.9\n\
                    p2,R,0,0,0,5.0\n";
        let r = parse_clinical_csv(text.as_bytes()).unwrap();
        assert_eq!(r.len(), 3);
        assert_eq!(r[2].side, Side::Right);
        assert_eq!(r[1].jsw_mm, 3.9);
    }

    #[test]
    fn column_order_is_free() {
        let text = "jsw,klg,womac,month,side,patient_id\n4.0,3,2,24,right,p9\n";
        let r = parse_clinical_csv(text.as_bytes()).unwrap();
        assert_eq!(r[0].klg, 3);
        assert_eq!(r[0].month, 24);
    }

    #[test]
    fn range_error_names_line() {
        let text = "patient_id,side,month,klg,womac,jsw\np1,left,0,1,3,4.2\np1,left,12,1,21,4.0\n";
        match parse_clinical_csv(text.as_bytes()) {
            Err(Error::Csv { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("womac"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_duplicates_and_missing_columns() {
        let text = "patient_id,side,month,klg,womac,jsw\np1,left,0,1,3,4.2\np1,left,0,1,3,4.2\n";
        assert!(matches!(
            parse_clinical_csv(text.as_bytes()),
            Err(Error::DuplicateKey(_))
        ));
        let text = "patient_id,side,month,klg,womac\np1,left,0,1,3\n";
        assert!(matches!(parse_clinical_csv(text.as_bytes()), Err(Error::MissingColumn(c)) if c == "jsw"));
        let text = "patient_id,side,month,klg,womac,jsw\np1,up,0,1,3,4.2\n";
        assert!(matches!(
            parse_clinical_csv(text.as_bytes()),
            Err(Error::Csv { line: 2, .. })
        ));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        let recs = vec![ClinicalRecord {
            patient_id: "p".into(),
            side: Side::Left,
            month: 48,
            klg: 4,
            womac: 20,
            jsw_mm: 0.125,
        }];
        write_clinical_csv(&path, &recs).unwrap();
        assert_eq!(read_clinical_csv(&path).unwrap(), recs);
    }
}
