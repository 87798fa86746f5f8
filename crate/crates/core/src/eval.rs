//! Benchmark harness: dataset loading, per-sample evaluation, and
//! group × element-type accuracy reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backend::{Backends, CallContext};
use crate::geometry::{contains, BBox, Point};
use crate::image_ops::load_image;
use crate::pipeline::Locator;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot read dataset {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset {path} is not a JSON array: {message}")]
    NotArray { path: PathBuf, message: String },
    #[error("dataset row {row}: {message}")]
    Schema { row: usize, message: String },
    #[error("report axes differ: {0}")]
    AxisMismatch(String),
    #[error("cannot build worker pool: {0}")]
    Pool(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataType {
    Text,
    Icon,
}

impl DataType {
    pub const ALL: [DataType; 2] = [DataType::Text, DataType::Icon];

    pub fn name(&self) -> &'static str {
        match self {
            DataType::Text => "text",
            DataType::Icon => "icon",
        }
    }
}

impl FromStr for DataType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "text" => Ok(DataType::Text),
            "icon" => Ok(DataType::Icon),
            other => Err(format!("data_type must be \"text\" or \"icon\", got {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSample {
    pub id: String,
    pub image_path: PathBuf,
    pub instruction: String,
    pub gt_box: BBox,
    pub data_type: DataType,
    pub group: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetAdapter {
    Native,
    Screenspot,
}

impl FromStr for DatasetAdapter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "native" => Ok(DatasetAdapter::Native),
            "screenspot" => Ok(DatasetAdapter::Screenspot),
            other => Err(format!("unknown adapter {other:?} (native|screenspot)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<EvalSample>,
    pub adapter: DatasetAdapter,
    /// Field conversions applied while loading.
    pub conversions: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NativeRecord {
    id: String,
    image: String,
    instruction: String,
    bbox: [f64; 4],
    data_type: String,
    group: String,
}

const ID_KEYS: &[&str] = &["id", "sample_id", "uid"];
const IMAGE_KEYS: &[&str] = &["img_filename", "image", "image_path", "img_path"];
const INSTRUCTION_KEYS: &[&str] = &["instruction", "query", "prompt"];
const TYPE_KEYS: &[&str] = &["data_type", "ui_type", "type"];
const GROUP_KEYS: &[&str] = &["group", "data_source", "platform", "application"];

pub const XYWH_CONVERSION: &str = "bbox [x, y, w, h] -> [x, y, x + w, y + h]";

fn corners(row: usize, v: [f64; 4]) -> Result<BBox, EvalError> {
    let schema = |message: String| EvalError::Schema { row, message };
    if v.iter().any(|c| !c.is_finite() || *c < 0.0) {
        return Err(schema(format!("bbox has a negative or non-finite coordinate: {v:?}")));
    }
    if v.iter().any(|c| *c > u32::MAX as f64) {
        return Err(schema(format!("bbox coordinate too large: {v:?}")));
    }
    let [x1, y1, x2, y2] = v.map(|c| c.floor() as u32);
    BBox::new(x1, y1, x2, y2).map_err(|_| schema(format!("bbox is inverted: {v:?}")))
}

fn pick<'a>(obj: &'a serde_json::Map<String, Value>, keys: &'static [&'static str]) -> Option<(&'static str, &'a Value)> {
    keys.iter().find_map(|k| obj.get(*k).map(|v| (*k, v)))
}

fn text_field(row: usize, obj: &serde_json::Map<String, Value>, keys: &'static [&'static str]) -> Result<Option<String>, EvalError> {
    match pick(obj, keys) {
        None => Ok(None),
        Some((_, Value::String(s))) => Ok(Some(s.clone())),
        Some((_, Value::Number(n))) => Ok(Some(n.to_string())),
        Some((k, other)) => Err(EvalError::Schema {
            row,
            message: format!("field {k:?} must be a string, got {other}"),
        }),
    }
}

fn bbox_values(row: usize, v: &Value) -> Result<[f64; 4], EvalError> {
    serde_json::from_value::<[f64; 4]>(v.clone()).map_err(|_| EvalError::Schema {
        row,
        message: format!("bbox must be four numbers, got {v}"),
    })
}

fn screenspot_record(
    row: usize,
    v: &Value,
    base: &Path,
    used: &mut BTreeSet<String>,
) -> Result<EvalSample, EvalError> {
    let schema = |message: String| EvalError::Schema { row, message };
    let obj = v.as_object().ok_or_else(|| schema("record is not an object".into()))?;
    let id = text_field(row, obj, ID_KEYS)?.unwrap_or_else(|| row.to_string());
    let image = text_field(row, obj, IMAGE_KEYS)?
        .ok_or_else(|| schema(format!("missing image field (one of {IMAGE_KEYS:?})")))?;
    let instruction = text_field(row, obj, INSTRUCTION_KEYS)?
        .ok_or_else(|| schema(format!("missing instruction field (one of {INSTRUCTION_KEYS:?})")))?;
    let gt_box = if let Some(b) = obj.get("bbox_xyxy") {
        corners(row, bbox_values(row, b)?)?
    } else if let Some(b) = obj.get("bbox") {
        let [x, y, w, h] = bbox_values(row, b)?;
        if w < 0.0 || h < 0.0 {
            return Err(schema(format!("bbox has negative size: {:?}", [x, y, w, h])));
        }
        used.insert(XYWH_CONVERSION.to_string());
        corners(row, [x, y, x + w, y + h])?
    } else {
        return Err(schema("missing bbox field".into()));
    };
    let data_type = text_field(row, obj, TYPE_KEYS)?
        .ok_or_else(|| schema(format!("missing data type field (one of {TYPE_KEYS:?})")))?
        .parse()
        .map_err(schema)?;
    let group = match text_field(row, obj, GROUP_KEYS)? {
        Some(g) => g,
        None => {
            used.insert("missing group -> \"all\"".to_string());
            "all".to_string()
        }
    };
    Ok(EvalSample {
        id,
        image_path: base.join(image),
        instruction,
        gt_box,
        data_type,
        group,
    })
}

fn native_record(row: usize, v: Value, base: &Path) -> Result<EvalSample, EvalError> {
    let r: NativeRecord = serde_json::from_value(v).map_err(|e| EvalError::Schema {
        row,
        message: e.to_string(),
    })?;
    Ok(EvalSample {
        id: r.id,
        image_path: base.join(r.image),
        instruction: r.instruction,
        gt_box: corners(row, r.bbox)?,
        data_type: r.data_type.parse().map_err(|message| EvalError::Schema { row, message })?,
        group: r.group,
    })
}

/// Read a JSON array of samples. Image paths are resolved against the
/// dataset file's directory.
pub fn load_dataset(path: &Path, adapter: DatasetAdapter) -> Result<Dataset, EvalError> {
    let bytes = std::fs::read(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_dataset(&bytes, path.parent().unwrap_or(Path::new("")), adapter).map_err(|e| match e {
        EvalError::NotArray { message, .. } => EvalError::NotArray {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    })
}

pub fn parse_dataset(bytes: &[u8], base: &Path, adapter: DatasetAdapter) -> Result<Dataset, EvalError> {
    let not_array = |message: String| EvalError::NotArray {
        path: PathBuf::new(),
        message,
    };
    let rows: Vec<Value> = match serde_json::from_slice(bytes).map_err(|e| not_array(e.to_string()))? {
        Value::Array(rows) => rows,
        other => return Err(not_array(format!("top-level value is {}", json_kind(&other)))),
    };
    let mut used = BTreeSet::new();
    let mut samples = Vec::with_capacity(rows.len());
    let mut seen = BTreeSet::new();
    for (row, v) in rows.into_iter().enumerate() {
        let s = match adapter {
            DatasetAdapter::Native => native_record(row, v, base)?,
            DatasetAdapter::Screenspot => screenspot_record(row, &v, base, &mut used)?,
        };
        if !seen.insert(s.id.clone()) {
            return Err(EvalError::Schema {
                row,
                message: format!("duplicate id {:?}", s.id),
            });
        }
        samples.push(s);
    }
    Ok(Dataset {
        samples,
        adapter,
        conversions: used.into_iter().collect(),
    })
}

fn json_kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "an object",
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub sample_id: String,
    pub predicted_point: Option<Point>,
    pub correct: bool,
    pub failure: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_path: Option<String>,
}

impl EvalOutcome {
    fn failed(id: &str, kind: &str, message: String) -> Self {
        Self {
            sample_id: id.to_string(),
            predicted_point: None,
            correct: false,
            failure: Some(kind.to_string()),
            message: Some(message),
            trace_path: None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    /// Worker threads; 0 means one per logical core.
    pub jobs: usize,
    pub run_seed: u64,
    /// Where to write one trace JSON per sample. `trace_path` in each
    /// outcome is recorded relative to this directory's parent.
    pub trace_dir: Option<PathBuf>,
}

fn trace_file_name(index: usize, id: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{index:05}-{safe}.json")
}

fn evaluate_one(
    index: usize,
    s: &EvalSample,
    locator: &dyn Locator,
    backends: &Backends,
    opts: &EvalOptions,
) -> EvalOutcome {
    let img = match load_image(&s.image_path) {
        Ok(img) => img,
        Err(e) => return EvalOutcome::failed(&s.id, "image", e.to_string()),
    };
    if !s.gt_box.fits_in(img.dims()) {
        return EvalOutcome::failed(
            &s.id,
            "gt_out_of_frame",
            format!("ground truth {} lies outside {}", s.gt_box, img.dims()),
        );
    }
    let image_key = s
        .image_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let ctx = CallContext::new(s.id.clone(), image_key, opts.run_seed);
    match locator.locate(backends, &s.instruction, &img, &ctx) {
        Ok(located) => {
            let mut trace_path = None;
            if let (Some(dir), Some(trace)) = (&opts.trace_dir, &located.trace) {
                let name = trace_file_name(index, &s.id);
                let written = serde_json::to_vec_pretty(trace)
                    .map_err(std::io::Error::other)
                    .and_then(|bytes| std::fs::write(dir.join(&name), bytes));
                match written {
                    Ok(()) => {
                        let leaf = dir.file_name().map(|d| d.to_string_lossy().into_owned());
                        trace_path = Some(match leaf {
                            Some(d) => format!("{d}/{name}"),
                            None => name,
                        });
                    }
                    Err(e) => log::warn!("cannot write trace for {}: {e}", s.id),
                }
            }
            EvalOutcome {
                sample_id: s.id.clone(),
                predicted_point: Some(located.point),
                correct: contains(s.gt_box, located.point),
                failure: None,
                message: None,
                trace_path,
            }
        }
        Err(e) => EvalOutcome::failed(&s.id, e.kind(), e.to_string()),
    }
}

/// Run `locator` over every sample. Per-sample failures become incorrect
/// outcomes; the result is in input order regardless of `opts.jobs`.
pub fn evaluate(
    samples: &[EvalSample],
    locator: &dyn Locator,
    backends: &Backends,
    opts: &EvalOptions,
) -> Result<Vec<EvalOutcome>, EvalError> {
    if let Some(dir) = &opts.trace_dir {
        std::fs::create_dir_all(dir).map_err(|source| EvalError::Io {
            path: dir.clone(),
            source,
        })?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| EvalError::Pool(e.to_string()))?;
    Ok(pool.install(|| {
        samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| evaluate_one(i, s, locator, backends, opts))
            .collect()
    }))
}

pub fn write_outcomes_jsonl(outcomes: &[EvalOutcome], mut w: impl Write) -> std::io::Result<()> {
    for o in outcomes {
        serde_json::to_writer(&mut w, o)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub n: usize,
    pub n_correct: usize,
    /// `None` when `n == 0`.
    pub accuracy: Option<f64>,
}

impl Tally {
    fn new(n: usize, n_correct: usize) -> Self {
        Self {
            n,
            n_correct,
            accuracy: (n > 0).then(|| n_correct as f64 / n as f64),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub group: String,
    pub data_type: DataType,
    #[serde(flatten)]
    pub tally: Tally,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    /// Shown as the row label in tables.
    pub label: String,
    pub averaging: String,
    #[serde(default)]
    pub grounding_backend: String,
    #[serde(default)]
    pub correction_backend: Option<String>,
    #[serde(default)]
    pub config_hash: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub timestamp: String,
    #[serde(default)]
    pub dataset: String,
    #[serde(default)]
    pub conversions: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub groups: Vec<String>,
    /// One entry per group × data type, including empty ones.
    pub cells: Vec<Cell>,
    pub overall: Tally,
    pub metadata: ReportMeta,
}

pub const KNOWN_GROUPS: [&str; 6] = ["Development", "Creative", "CAD", "Scientific", "Office", "OS"];

fn group_order(groups: BTreeSet<String>) -> Vec<String> {
    let mut out: Vec<String> = KNOWN_GROUPS
        .iter()
        .filter(|g| groups.contains(**g))
        .map(|g| g.to_string())
        .collect();
    out.extend(groups.into_iter().filter(|g| !KNOWN_GROUPS.contains(&g.as_str())));
    out
}

/// Aggregate outcomes into per-cell and micro-averaged accuracy.
/// `outcomes[i]` must belong to `samples[i]`.
pub fn report(outcomes: &[EvalOutcome], samples: &[EvalSample], mut metadata: ReportMeta) -> EvalReport {
    assert_eq!(outcomes.len(), samples.len(), "outcomes must align with samples");
    let mut counts: BTreeMap<(String, DataType), (usize, usize)> = BTreeMap::new();
    for (o, s) in outcomes.iter().zip(samples) {
        let e = counts.entry((s.group.clone(), s.data_type)).or_default();
        e.0 += 1;
        e.1 += usize::from(o.correct);
    }
    let groups = group_order(samples.iter().map(|s| s.group.clone()).collect());
    let cells = groups
        .iter()
        .flat_map(|g| {
            DataType::ALL.iter().map(|&t| {
                let (n, c) = counts.get(&(g.clone(), t)).copied().unwrap_or((0, 0));
                Cell {
                    group: g.clone(),
                    data_type: t,
                    tally: Tally::new(n, c),
                }
            })
        })
        .collect();
    let total_correct = outcomes.iter().filter(|o| o.correct).count();
    metadata.averaging = "micro".into();
    EvalReport {
        groups,
        cells,
        overall: Tally::new(outcomes.len(), total_correct),
        metadata,
    }
}

fn fmt_acc(t: &Tally) -> String {
    t.accuracy.map_or_else(|| "-".to_string(), |a| format!("{a:.3}"))
}

const COL: usize = 7;

fn header(groups: &[String], label_width: usize) -> String {
    let mut top = format!("{:<label_width$}", "");
    let mut sub = format!("{:<label_width$}", "Model");
    for g in groups {
        let _ = write!(top, " | {:<w$}", g, w = 2 * COL + 1);
        let _ = write!(sub, " | {:<COL$} {:<COL$}", "Text", "Icon");
    }
    let _ = write!(top, " | {:<COL$}", "Avg.");
    let _ = write!(sub, " | {:<COL$}", "");
    format!("{}\n{}\n", top.trim_end(), sub.trim_end())
}

impl EvalReport {
    fn cell(&self, group: &str, t: DataType) -> Option<&Cell> {
        self.cells.iter().find(|c| c.group == group && c.data_type == t)
    }

    fn row(&self, label: &str, label_width: usize) -> String {
        let mut line = format!("{label:<label_width$}");
        for g in &self.groups {
            let acc = |t| self.cell(g, t).map(|c| fmt_acc(&c.tally)).unwrap_or_else(|| "-".into());
            let _ = write!(line, " | {:<COL$} {:<COL$}", acc(DataType::Text), acc(DataType::Icon));
        }
        let _ = write!(line, " | {:<COL$}", fmt_acc(&self.overall));
        line.trim_end().to_string()
    }

    /// Aligned plain-text table: one row, groups × Text/Icon, then Avg.
    pub fn to_table(&self) -> String {
        let label = if self.metadata.label.is_empty() { "model" } else { &self.metadata.label };
        let w = label.len().max(8);
        let mut out = header(&self.groups, w);
        out.push_str(&self.row(label, w));
        out.push('\n');
        let _ = writeln!(out, "n = {} (micro average over samples; '-' marks an empty cell)", self.overall.n);
        out
    }

    fn axes(&self) -> BTreeSet<(String, DataType, bool)> {
        self.cells
            .iter()
            .map(|c| (c.group.clone(), c.data_type, c.tally.n > 0))
            .collect()
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_table())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellDelta {
    pub group: String,
    pub data_type: DataType,
    pub delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub a: EvalReport,
    pub b: EvalReport,
    pub cells: Vec<CellDelta>,
    pub overall_delta: Option<f64>,
}

fn delta(a: &Tally, b: &Tally) -> Option<f64> {
    Some(b.accuracy? - a.accuracy?)
}

/// Accuracy change from `a` to `b`, cell by cell. Both reports must cover
/// the same group × data type cells.
pub fn compare(a: &EvalReport, b: &EvalReport) -> Result<ComparisonReport, EvalError> {
    let (xa, xb) = (a.axes(), b.axes());
    if xa != xb || a.groups != b.groups {
        let only_a: Vec<_> = xa.difference(&xb).map(|(g, t, _)| format!("{g}/{}", t.name())).collect();
        let only_b: Vec<_> = xb.difference(&xa).map(|(g, t, _)| format!("{g}/{}", t.name())).collect();
        return Err(EvalError::AxisMismatch(format!(
            "only in first: [{}]; only in second: [{}]",
            only_a.join(", "),
            only_b.join(", ")
        )));
    }
    let cells = a
        .cells
        .iter()
        .map(|ca| {
            let cb = b.cell(&ca.group, ca.data_type).expect("axes checked");
            CellDelta {
                group: ca.group.clone(),
                data_type: ca.data_type,
                delta: delta(&ca.tally, &cb.tally),
            }
        })
        .collect();
    Ok(ComparisonReport {
        a: a.clone(),
        b: b.clone(),
        cells,
        overall_delta: delta(&a.overall, &b.overall),
    })
}

fn fmt_delta(d: Option<f64>) -> String {
    // Format first so that tiny negative noise does not print as "-0.000".
    d.map_or_else(
        || "-".to_string(),
        |d| {
            let s = format!("{d:+.3}");
            if s == "-0.000" { "+0.000".to_string() } else { s }
        },
    )
}

impl ComparisonReport {
    /// Rows for `a` and `b`, then a row of signed deltas.
    pub fn to_table(&self) -> String {
        let la = if self.a.metadata.label.is_empty() { "A" } else { &self.a.metadata.label };
        let lb = if self.b.metadata.label.is_empty() { "B" } else { &self.b.metadata.label };
        let w = la.len().max(lb.len()).max(8);
        let mut out = header(&self.a.groups, w);
        for (label, r) in [(la, &self.a), (lb, &self.b)] {
            out.push_str(&r.row(label, w));
            out.push('\n');
        }
        let mut line = format!("{:<w$}", "delta");
        for g in &self.a.groups {
            let d = |t| {
                self.cells
                    .iter()
                    .find(|c| &c.group == g && c.data_type == t)
                    .map(|c| fmt_delta(c.delta))
                    .unwrap_or_else(|| "-".into())
            };
            let _ = write!(line, " | {:<COL$} {:<COL$}", d(DataType::Text), d(DataType::Icon));
        }
        let _ = write!(line, " | {:<COL$}", fmt_delta(self.overall_delta));
        out.push_str(line.trim_end());
        out.push('\n');
        out
    }
}

impl fmt::Display for ComparisonReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_table())
    }
}
