//! Error analysis helpers: digit-level versus pixel-level coordinate
//! distance, and a ledger of human-labelled failure categories.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Levenshtein distance over characters.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut row = vec![0; b.len() + 1];
    for (i, ca) in a.chars().enumerate() {
        row[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != *cb);
            row[j + 1] = sub.min(prev[j + 1] + 1).min(row[j] + 1);
        }
        std::mem::swap(&mut prev, &mut row);
    }
    prev[b.len()]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoordinateDistance {
    /// Edit distance between the decimal strings.
    pub edit: usize,
    /// Absolute pixel difference.
    pub euclid: u64,
}

/// How far apart two coordinate values are as token strings and as pixels.
pub fn coordinate_distance_pair(gt: u64, cand: u64) -> CoordinateDistance {
    CoordinateDistance {
        edit: levenshtein(&gt.to_string(), &cand.to_string()),
        euclid: gt.abs_diff(cand),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorLabel {
    KnowledgeGap,
    PrecisionBias,
    AmbiguityBias,
    Other,
}

impl ErrorLabel {
    pub const ALL: [ErrorLabel; 4] = [
        ErrorLabel::KnowledgeGap,
        ErrorLabel::PrecisionBias,
        ErrorLabel::AmbiguityBias,
        ErrorLabel::Other,
    ];

    pub fn title(&self) -> &'static str {
        match self {
            ErrorLabel::KnowledgeGap => "Knowledge Gap",
            ErrorLabel::PrecisionBias => "Precision Bias",
            ErrorLabel::AmbiguityBias => "Ambiguity Bias",
            ErrorLabel::Other => "Others",
        }
    }

    pub fn description(&self) -> &'static str {
        match self {
            ErrorLabel::KnowledgeGap => "Model fails to recognize target information.",
            ErrorLabel::PrecisionBias => "Model identifies target but exhibits systematic offset.",
            ErrorLabel::AmbiguityBias => "Model distracted by similar regions or misleading semantics.",
            ErrorLabel::Other => "Unclassified patterns.",
        }
    }
}

impl FromStr for ErrorLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "knowledge_gap" => Ok(Self::KnowledgeGap),
            "precision_bias" => Ok(Self::PrecisionBias),
            "ambiguity_bias" => Ok(Self::AmbiguityBias),
            "other" => Ok(Self::Other),
            _ => Err(format!(
                "unknown error label {s:?} (knowledge_gap|precision_bias|ambiguity_bias|other)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributionRecord {
    pub sample_id: String,
    pub label: ErrorLabel,
    #[serde(default)]
    pub notes: String,
}

/// Append-only list of labelled failures, stored as JSON lines.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AttributionLedger {
    records: Vec<AttributionRecord>,
}

impl AttributionLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[AttributionRecord] {
        &self.records
    }

    pub fn classify_error(&mut self, label: ErrorLabel, sample_id: impl Into<String>, notes: impl Into<String>) -> &AttributionRecord {
        self.records.push(AttributionRecord {
            sample_id: sample_id.into(),
            label,
            notes: notes.into(),
        });
        self.records.last().unwrap()
    }

    pub fn read_jsonl(reader: impl BufRead) -> Result<Self, std::io::Error> {
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(&line).map_err(|e| {
                std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1))
            })?;
            records.push(rec);
        }
        Ok(Self { records })
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Per-label counts and shares. Labels with no records are omitted.
    pub fn report(&self) -> AttributionReport {
        let total = self.records.len();
        let rows = ErrorLabel::ALL
            .iter()
            .filter_map(|&label| {
                let count = self.records.iter().filter(|r| r.label == label).count();
                (count > 0).then(|| AttributionRow {
                    label,
                    count,
                    share: count as f64 / total as f64,
                })
            })
            .collect();
        AttributionReport { total, rows }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionRow {
    pub label: ErrorLabel,
    pub count: usize,
    pub share: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub total: usize,
    pub rows: Vec<AttributionRow>,
}

impl fmt::Display for AttributionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<24} Description", "Error Type")?;
        for r in &self.rows {
            let head = format!("{} ({:.0}%)", r.label.title(), r.share * 100.0);
            writeln!(f, "{head:<24} {} {} samples.", r.label.description(), r.count)?;
        }
        Ok(())
    }
}
