//! Text contracts with grounding and correction models: output parsing and
//! prompt construction.

use std::path::Path;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, ImageDims, Point};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("empty model output")]
    EmptyOutput,
    #[error("no parsable coordinates in model output: {raw:?}")]
    NoCoordinates { raw: String },
    #[error("negative coordinate in model output: {raw:?}")]
    NegativeCoordinate { raw: String },
    #[error("coordinate out of range in model output: {raw:?}")]
    CoordinateOverflow { raw: String },
    #[error("no valid <answer>1 or 2</answer> in correction output: {raw:?}")]
    UnparseableAnswer { raw: String },
    #[error("query must not be empty")]
    EmptyQuery,
    #[error("cannot read prompt template {path}: {reason}")]
    Template { path: String, reason: String },
}

/// What the grounding model produced: a box or a click point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Grounding {
    Box {
        #[serde(rename = "box")]
        bbox: BBox,
    },
    Click {
        click: Point,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundingPrediction {
    #[serde(flatten)]
    pub target: Grounding,
    pub raw_text: String,
}

impl GroundingPrediction {
    /// The box this prediction occupies; clicks are expanded by `expand` pixels.
    pub fn region(&self, expand: u32, dims: ImageDims) -> BBox {
        match self.target {
            Grounding::Box { bbox } => bbox.clip(dims).unwrap_or_else(|| clamp_box(bbox, dims)),
            Grounding::Click { click } => click_to_box(clamp_point(click, dims), expand, dims),
        }
    }

    /// The point this prediction designates: a box centre or the click itself.
    pub fn anchor(&self, dims: ImageDims) -> Point {
        match self.target {
            Grounding::Box { bbox } => {
                crate::geometry::center(bbox.clip(dims).unwrap_or_else(|| clamp_box(bbox, dims)))
            }
            Grounding::Click { click } => clamp_point(click, dims),
        }
    }
}

fn clamp_point(p: Point, dims: ImageDims) -> Point {
    Point::new(p.x.min(dims.width - 1), p.y.min(dims.height - 1))
}

// A box lying wholly outside the image collapses onto its nearest edge pixel.
fn clamp_box(b: BBox, dims: ImageDims) -> BBox {
    BBox::from_corners(
        clamp_point(Point::new(b.x1, b.y1), dims),
        clamp_point(Point::new(b.x2, b.y2), dims),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Expect {
    Box,
    Click,
    Either,
}

impl FromStr for Expect {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "box" => Ok(Self::Box),
            "click" => Ok(Self::Click),
            "either" => Ok(Self::Either),
            other => Err(format!("unknown output kind {other:?} (box|click|either)")),
        }
    }
}

static BOX_TOKENS: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?s)<\|box_start\|>(.*?)<\|box_end\|>").unwrap());
static TUPLE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"[\(\[]\s*(-?\d+(?:\.\d+)?(?:\s*,\s*-?\d+(?:\.\d+)?)*)\s*[\)\]]").unwrap()
});
static NUMBER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"-?\d+(?:\.\d+)?").unwrap());

enum Coords {
    Ok(Vec<u32>),
    Negative,
    Overflow,
}

fn numbers(s: &str) -> Coords {
    let mut out = Vec::new();
    for m in NUMBER.find_iter(s) {
        let text = m.as_str();
        if text.starts_with('-') {
            return Coords::Negative;
        }
        let Ok(v) = text.parse::<f64>() else {
            return Coords::Overflow;
        };
        if v > u32::MAX as f64 {
            return Coords::Overflow;
        }
        out.push(v.floor() as u32);
    }
    Coords::Ok(out)
}

fn shape(nums: &[u32], expect: Expect) -> Option<Grounding> {
    match (nums.len(), expect) {
        (4, Expect::Box | Expect::Either) => Some(Grounding::Box {
            bbox: BBox::from_corners(Point::new(nums[0], nums[1]), Point::new(nums[2], nums[3])),
        }),
        (2, Expect::Click | Expect::Either) => Some(Grounding::Click {
            click: Point::new(nums[0], nums[1]),
        }),
        _ => None,
    }
}

/// Extract the first usable coordinate group from a grounding model's reply.
///
/// Sentinel-delimited `<|box_start|>…<|box_end|>` spans are tried first, then
/// bare `(…)` / `[…]` tuples in order of appearance. Decimal coordinates are
/// floored; swapped corners are reordered.
pub fn parse_grounding_output(raw: &str, expect: Expect) -> Result<GroundingPrediction, ProtocolError> {
    if raw.trim().is_empty() {
        return Err(ProtocolError::EmptyOutput);
    }
    let spans = BOX_TOKENS
        .captures_iter(raw)
        .map(|c| c.get(1).unwrap().as_str())
        .chain(TUPLE.captures_iter(raw).map(|c| c.get(1).unwrap().as_str()));
    for span in spans {
        let nums = match numbers(span) {
            Coords::Ok(n) => n,
            Coords::Negative => {
                return Err(ProtocolError::NegativeCoordinate { raw: raw.to_string() })
            }
            Coords::Overflow => {
                return Err(ProtocolError::CoordinateOverflow { raw: raw.to_string() })
            }
        };
        if let Some(target) = shape(&nums, expect) {
            return Ok(GroundingPrediction {
                target,
                raw_text: raw.to_string(),
            });
        }
    }
    Err(ProtocolError::NoCoordinates { raw: raw.to_string() })
}

/// The standard box token format, e.g. `<|box_start|>(1,2,3,4)<|box_end|>`.
pub fn format_box_token(b: BBox) -> String {
    format!("<|box_start|>({},{},{},{})<|box_end|>", b.x1, b.y1, b.x2, b.y2)
}

/// Square of half-width `expand` around `p`, clipped to the image.
pub fn click_to_box(p: Point, expand: u32, dims: ImageDims) -> BBox {
    BBox {
        x1: p.x.saturating_sub(expand),
        y1: p.y.saturating_sub(expand),
        x2: p.x.saturating_add(expand).min(dims.width - 1),
        y2: p.y.saturating_add(expand).min(dims.height - 1),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    Vanilla,
    Cot,
    #[default]
    CotKp,
}

impl PromptStyle {
    pub const ALL: [PromptStyle; 3] = [PromptStyle::Vanilla, PromptStyle::Cot, PromptStyle::CotKp];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Vanilla => "vanilla",
            Self::Cot => "cot",
            Self::CotKp => "cot_kp",
        }
    }
}

impl FromStr for PromptStyle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown prompt style {s:?} (vanilla|cot|cot_kp)"))
    }
}

const QUERY_SLOT: &str = "{user_query}";

const GROUNDING_TEMPLATE: &str = include_str!("../prompts/grounding_box.txt");
const VANILLA_TEMPLATE: &str = include_str!("../prompts/correction_vanilla.txt");
// Identical to the cot_kp template without its KEY PRINCIPLES and COMMON PITFALLS blocks.
const COT_TEMPLATE: &str = include_str!("../prompts/correction_cot.txt");
const COT_KP_TEMPLATE: &str = include_str!("../prompts/correction_cot_kp.txt");

/// Prompt templates with `{user_query}` placeholders. Defaults are embedded;
/// any template can be replaced from a UTF-8 file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptSet {
    grounding: String,
    vanilla: String,
    cot: String,
    cot_kp: String,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            grounding: GROUNDING_TEMPLATE.to_string(),
            vanilla: VANILLA_TEMPLATE.to_string(),
            cot: COT_TEMPLATE.to_string(),
            cot_kp: COT_KP_TEMPLATE.to_string(),
        }
    }
}

fn read_template(path: &Path) -> Result<String, ProtocolError> {
    std::fs::read_to_string(path).map_err(|e| ProtocolError::Template {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

impl PromptSet {
    pub fn with_grounding_file(mut self, path: &Path) -> Result<Self, ProtocolError> {
        self.grounding = read_template(path)?;
        Ok(self)
    }

    pub fn with_correction_file(mut self, style: PromptStyle, path: &Path) -> Result<Self, ProtocolError> {
        let text = read_template(path)?;
        match style {
            PromptStyle::Vanilla => self.vanilla = text,
            PromptStyle::Cot => self.cot = text,
            PromptStyle::CotKp => self.cot_kp = text,
        }
        Ok(self)
    }

    pub fn grounding(&self, query: &str) -> Result<String, ProtocolError> {
        fill(&self.grounding, query)
    }

    pub fn correction(&self, query: &str, style: PromptStyle) -> Result<String, ProtocolError> {
        let template = match style {
            PromptStyle::Vanilla => &self.vanilla,
            PromptStyle::Cot => &self.cot,
            PromptStyle::CotKp => &self.cot_kp,
        };
        fill(template, query)
    }
}

fn fill(template: &str, query: &str) -> Result<String, ProtocolError> {
    if query.trim().is_empty() {
        return Err(ProtocolError::EmptyQuery);
    }
    Ok(template.trim_end().replace(QUERY_SLOT, query))
}

pub fn build_grounding_prompt(query: &str) -> Result<String, ProtocolError> {
    PromptSet::default().grounding(query)
}

pub fn build_correction_prompt(query: &str, style: PromptStyle) -> Result<String, ProtocolError> {
    PromptSet::default().correction(query, style)
}

/// Which of the two annotated images the correction model preferred.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Choice {
    First,
    Second,
}

impl From<Choice> for u8 {
    fn from(c: Choice) -> u8 {
        match c {
            Choice::First => 1,
            Choice::Second => 2,
        }
    }
}

impl TryFrom<u8> for Choice {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            1 => Ok(Choice::First),
            2 => Ok(Choice::Second),
            other => Err(format!("choice must be 1 or 2, got {other}")),
        }
    }
}

impl Choice {
    pub fn flipped(self) -> Self {
        match self {
            Choice::First => Choice::Second,
            Choice::Second => Choice::First,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionAnswer {
    pub choice: Choice,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analysis: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

static ANSWER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?s)<answer>(.*?)</answer>").unwrap());
static ANALYSIS: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?s)<analysis>(.*?)</analysis>").unwrap());
static REASON: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?s)<reason>(.*?)</reason>").unwrap());

pub fn parse_correction_answer(raw: &str) -> Result<CorrectionAnswer, ProtocolError> {
    let unparseable = || ProtocolError::UnparseableAnswer { raw: raw.to_string() };
    let body = ANSWER
        .captures(raw)
        .map(|c| c.get(1).unwrap().as_str().trim())
        .ok_or_else(unparseable)?;
    let choice = body
        .parse::<u8>()
        .ok()
        .and_then(|v| Choice::try_from(v).ok())
        .ok_or_else(unparseable)?;
    let section = |re: &Regex| re.captures(raw).map(|c| c.get(1).unwrap().as_str().trim().to_string());
    Ok(CorrectionAnswer {
        choice,
        analysis: section(&ANALYSIS),
        reason: section(&REASON),
    })
}
