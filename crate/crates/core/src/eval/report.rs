//! Result rows and their text/CSV rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 7] = ["experiment", "flags", "extractor", "mode", "metric", "value", "n"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    /// Preprocessing flags such as "A+C"; "none" for raw inputs.
    pub flags: String,
    pub extractor: String,
    pub mode: String,
    /// Metric name to value in [0, 1].
    pub metrics: BTreeMap<String, f64>,
    pub n: usize,
    /// Registration-network features are not meaningful after nonparametric
    /// alignment to the atlas, so such cells render as "-".
    #[serde(default)]
    pub registration: bool,
}

impl ResultRow {
    pub fn has_flag(&self, flag: char) -> bool {
        self.flags.split('+').any(|f| f.len() == 1 && f.starts_with(flag))
    }

    fn inapplicable(&self) -> bool {
        self.registration && self.has_flag('D')
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportLayout {
    /// KLG accuracy and AUC.
    Table1,
    /// Pair progression accuracy, AUC and F1.
    Table2,
    /// Future prediction accuracy, AUC and AP.
    Table3,
    /// Per-leaf sweep of accuracy and AUC.
    Fig1Sweep,
}

impl ReportLayout {
    pub fn metrics(self) -> &'static [&'static str] {
        match self {
            ReportLayout::Table1 | ReportLayout::Fig1Sweep => &["acc", "auc"],
            ReportLayout::Table2 => &["acc", "auc", "f1"],
            ReportLayout::Table3 => &["acc", "auc", "ap"],
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "table1" => Ok(ReportLayout::Table1),
            "table2" => Ok(ReportLayout::Table2),
            "table3" => Ok(ReportLayout::Table3),
            "fig1_sweep" | "fig1-sweep" => Ok(ReportLayout::Fig1Sweep),
            other => Err(Error::InvalidConfig(format!("unknown report layout '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub text: String,
    pub csv: String,
}

fn cell(row: &ResultRow, metric: &str) -> String {
    if row.inapplicable() {
        return "-".into();
    }
    match row.metrics.get(metric) {
        Some(v) => format!("{:.1}", 100.0 * v),
        None => "-".into(),
    }
}

/// Renders rows as an aligned text table (percentages, one decimal) and a
/// long-format CSV with one line per metric value.
pub fn render_report(rows: &[ResultRow], layout: ReportLayout) -> Result<Report> {
    let metrics = layout.metrics();
    let mut header: Vec<String> = ["experiment", "flags", "extractor", "mode"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(metrics.iter().map(|m| m.to_uppercase()));
    header.push("n".into());

    let mut table: Vec<Vec<String>> = vec![header];
    for row in rows {
        let mut line = vec![
            row.experiment.clone(),
            row.flags.clone(),
            row.extractor.clone(),
            row.mode.clone(),
        ];
        line.extend(metrics.iter().map(|m| cell(row, m)));
        line.push(row.n.to_string());
        table.push(line);
    }
    let widths: Vec<usize> = (0..table[0].len())
        .map(|c| table.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut text = String::new();
    for (i, line) in table.iter().enumerate() {
        let cells: Vec<String> = line
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (v, w))| if c < 4 { format!("{v:<w$}") } else { format!("{v:>w$}") })
            .collect();
        writeln!(text, "{}", cells.join("  ").trim_end()).expect("write to string");
        if i == 0 {
            let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
            writeln!(text, "{}", "-".repeat(total)).expect("write to string");
        }
    }
    if metrics.contains(&"auc") {
        text.push_str("AUC for more than two classes is the macro one-vs-rest average.\n");
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::InvalidConfig(format!("csv write: {e}"));
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for row in rows.iter().filter(|r| !r.inapplicable()) {
        for (metric, value) in &row.metrics {
            w.write_record([
                row.experiment.as_str(),
                row.flags.as_str(),
                row.extractor.as_str(),
                row.mode.as_str(),
                metric.as_str(),
                &value.to_string(),
                &row.n.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    let csv = String::from_utf8(w.into_inner().map_err(|e| Error::InvalidConfig(e.to_string()))?)
        .expect("csv output is utf-8");
    Ok(Report { text, csv })
}

/// Groups a report CSV back into rows, one per (experiment, flags,
/// extractor, mode), in first-appearance order.
pub fn parse_report_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| Error::Csv {
        line: 1,
        message: e.to_string(),
    })?;
    for name in CSV_HEADER {
        if !headers.iter().any(|h| h == name) {
            return Err(Error::MissingColumn(name.into()));
        }
    }
    let mut rows: Vec<ResultRow> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Csv {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| record.get(i).unwrap_or("").to_string();
        let parse_err = |what: &str| Error::Csv {
            line,
            message: format!("bad {what}"),
        };
        let value: f64 = field(5).parse().map_err(|_| parse_err("value"))?;
        let n: usize = field(6).parse().map_err(|_| parse_err("n"))?;
        let key = (field(0), field(1), field(2), field(3));
        let existing = rows
            .iter_mut()
            .find(|r| (&r.experiment, &r.flags, &r.extractor, &r.mode) == (&key.0, &key.1, &key.2, &key.3));
        let row = match existing {
            Some(r) => r,
            None => {
                rows.push(ResultRow {
                    experiment: key.0,
                    flags: key.1,
                    extractor: key.2,
                    mode: key.3,
                    metrics: BTreeMap::new(),
                    n,
                    registration: false,
                });
                rows.last_mut().expect("just pushed")
            }
        };
        row.metrics.insert(field(4), value);
    }
    Ok(rows)
}
