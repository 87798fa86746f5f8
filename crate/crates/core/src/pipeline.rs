//! Coarse-to-fine grounding with masked, mutually exclusive candidates.
//!
//! Each iteration predicts up to `M` candidates on the current frame, masking
//! every earlier candidate before the next prediction, lets a correction
//! backend pick one, then crops around the pick. The final answer is the
//! pick of the last iteration, mapped back to the original screenshot.

use std::borrow::Cow;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    BackendError, Backends, CallContext, CorrectionBackend, CorrectionRequest, GroundingBackend,
    GroundingRequest,
};
use crate::geometry::{crop_window, BBox, CropFrame, GeometryError, Point, TransformStack};
use crate::image_ops::{annotate_box, crop, mask_regions, ImageError, Raster, GREEN, RED};
use crate::protocol::{Choice, GroundingPrediction, PromptStyle};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("grounding failed in iteration {iteration}: {source}")]
    Grounding {
        iteration: usize,
        #[source]
        source: BackendError,
        /// Iterations completed before the failure.
        partial: Vec<IterationRecord>,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

impl PipelineError {
    pub fn backend_error(&self) -> Option<&BackendError> {
        match self {
            PipelineError::Grounding { source, .. } => Some(source),
            _ => None,
        }
    }

    pub fn is_parse(&self) -> bool {
        self.backend_error().is_some_and(BackendError::is_parse)
    }

    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "config",
            PipelineError::Grounding { source, .. } => source.kind(),
            PipelineError::Geometry(_) => "geometry",
            PipelineError::Image(_) => "image",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BamiConfig {
    /// Crop iterations (N).
    pub iterations: u32,
    /// Candidates per iteration (M).
    pub candidates: u32,
    /// Per-iteration crop ratio.
    pub lambda: f64,
    pub prompt_style: PromptStyle,
    /// Half-size of the box a click prediction occupies.
    pub click_expand: u32,
    /// When false, the first candidate is always kept and no correction
    /// calls are made.
    pub candidate_selection: bool,
}

impl Default for BamiConfig {
    fn default() -> Self {
        Self {
            iterations: 2,
            candidates: 2,
            lambda: 0.6,
            prompt_style: PromptStyle::CotKp,
            click_expand: 25,
            candidate_selection: true,
        }
    }
}

impl BamiConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.iterations < 1 {
            return Err(PipelineError::Config("iterations must be >= 1".into()));
        }
        if self.candidates < 1 {
            return Err(PipelineError::Config("candidates must be >= 1".into()));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(PipelineError::Config(format!(
                "lambda must be in (0, 1], got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// One grounding call that produced a candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// Region occupied in current-frame coordinates (clicks are expanded).
    #[serde(rename = "box")]
    pub bbox: BBox,
    /// Point the candidate designates in current-frame coordinates.
    pub anchor: Point,
    pub call_index: u32,
    pub prediction: GroundingPrediction,
}

/// The mutually exclusive candidates of one iteration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub candidates: Vec<Candidate>,
    /// Failed calls after the first, which truncate the set.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<CallFailure>,
    /// Candidates that repeat an earlier box.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub duplicates: Vec<usize>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.candidates.iter().map(|c| c.bbox).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallFailure {
    pub call_index: u32,
    pub kind: String,
    pub message: String,
}

impl CallFailure {
    fn new(call_index: u32, err: &BackendError) -> Self {
        Self {
            call_index,
            kind: err.kind().to_string(),
            message: err.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ComparisonOutcome {
    Answered { choice: Choice },
    /// Reply had no valid answer tag; the incumbent stays.
    Unparseable { message: String },
    /// The call itself failed; the incumbent stays.
    Failed { kind: String, message: String },
    /// No correction backend configured; the incumbent stays.
    NoBackend,
}

/// One pairwise knockout round: incumbent shown as box 1, challenger as box 2.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub incumbent: usize,
    pub challenger: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub call_index: Option<u32>,
    pub outcome: ComparisonOutcome,
    pub winner: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// Footprint of the image this iteration saw, in original coordinates.
    pub frame: CropFrame,
    pub candidates: CandidateSet,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub comparisons: Vec<Comparison>,
    pub selected_index: usize,
    pub selected_box_global: BBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BamiTrace {
    pub sample_id: String,
    pub query: String,
    pub config: BamiConfig,
    pub iterations: Vec<IterationRecord>,
    pub final_point_global: Point,
}

/// Per-run call bookkeeping. Call indices feed simulator seeding and the trace.
pub struct Session<'a> {
    ground: &'a dyn GroundingBackend,
    correct: Option<&'a dyn CorrectionBackend>,
    ctx: &'a CallContext,
    ground_calls: u32,
    correct_calls: u32,
}

impl<'a> Session<'a> {
    pub fn new(
        ground: &'a dyn GroundingBackend,
        correct: Option<&'a dyn CorrectionBackend>,
        ctx: &'a CallContext,
    ) -> Self {
        Self {
            ground,
            correct,
            ctx,
            ground_calls: 0,
            correct_calls: 0,
        }
    }

    pub fn grounding_calls(&self) -> u32 {
        self.ground_calls
    }

    pub fn correction_calls(&self) -> u32 {
        self.correct_calls
    }

    fn ground_once(
        &mut self,
        query: &str,
        img: &Raster,
        frames: &TransformStack,
    ) -> (u32, Result<GroundingPrediction, BackendError>) {
        let call_index = self.ground_calls;
        self.ground_calls += 1;
        let res = self.ground.ground(&GroundingRequest {
            query,
            image: img,
            frames,
            call_index,
            ctx: self.ctx,
        });
        (call_index, res)
    }

    /// Predict up to `m` candidates on `img`, masking all earlier candidates
    /// before each prediction. A failure on the first call is an error; a
    /// later failure truncates the set.
    pub fn generate_candidates(
        &mut self,
        query: &str,
        img: &Raster,
        frames: &TransformStack,
        m: u32,
        click_expand: u32,
    ) -> Result<CandidateSet, BackendError> {
        let dims = img.dims();
        let mut set = CandidateSet::default();
        for i in 0..m as usize {
            let masked;
            let input = if set.is_empty() {
                img
            } else {
                masked = mask_regions(img, &set.boxes());
                &masked
            };
            let (call_index, res) = self.ground_once(query, input, frames);
            let prediction = match res {
                Ok(p) => p,
                Err(e) if i == 0 => return Err(e),
                Err(e) => {
                    warn!(
                        "sample {}: candidate {} failed ({e}); keeping {i} candidate(s)",
                        self.ctx.sample_id,
                        i + 1
                    );
                    set.failures.push(CallFailure::new(call_index, &e));
                    break;
                }
            };
            let bbox = prediction.region(click_expand, dims);
            if set.candidates.iter().any(|c| c.bbox == bbox) {
                warn!("sample {}: candidate {} duplicates an earlier box {bbox}", self.ctx.sample_id, i + 1);
                set.duplicates.push(i);
            }
            set.candidates.push(Candidate {
                bbox,
                anchor: prediction.anchor(dims),
                call_index,
                prediction,
            });
        }
        Ok(set)
    }

    /// Sequential knockout over the candidates. The running winner is always
    /// shown as box 1 and keeps its place unless the corrector answers 2.
    pub fn select_candidate(
        &mut self,
        query: &str,
        img: &Raster,
        frames: &TransformStack,
        cands: &CandidateSet,
        style: PromptStyle,
    ) -> (usize, Vec<Comparison>) {
        let mut winner = 0;
        let mut rounds = Vec::new();
        for challenger in 1..cands.len() {
            let Some(correct) = self.correct else {
                rounds.push(Comparison {
                    incumbent: winner,
                    challenger,
                    call_index: None,
                    outcome: ComparisonOutcome::NoBackend,
                    winner,
                });
                continue;
            };
            let b1 = cands.candidates[winner].bbox;
            let b2 = cands.candidates[challenger].bbox;
            let img1 = annotate_box(img, b1, GREEN, "1");
            let img2 = annotate_box(img, b2, RED, "2");
            let call_index = self.correct_calls;
            self.correct_calls += 1;
            let res = correct.correct(&CorrectionRequest {
                query,
                images: [&img1, &img2],
                boxes: [b1, b2],
                frames,
                style,
                call_index,
                ctx: self.ctx,
            });
            let (outcome, next) = match res {
                Ok(a) => {
                    let next = if a.choice == Choice::Second { challenger } else { winner };
                    (ComparisonOutcome::Answered { choice: a.choice }, next)
                }
                Err(e) if e.is_unparseable_answer() => (
                    ComparisonOutcome::Unparseable {
                        message: e.to_string(),
                    },
                    winner,
                ),
                Err(e) => {
                    warn!("sample {}: correction call failed ({e}); keeping candidate {}", self.ctx.sample_id, winner + 1);
                    (
                        ComparisonOutcome::Failed {
                            kind: e.kind().to_string(),
                            message: e.to_string(),
                        },
                        winner,
                    )
                }
            };
            rounds.push(Comparison {
                incumbent: winner,
                challenger,
                call_index: Some(call_index),
                outcome,
                winner: next,
            });
            winner = next;
        }
        if rounds.iter().any(|r| r.outcome == ComparisonOutcome::NoBackend) {
            warn!("sample {}: no correction backend; using the first candidate", self.ctx.sample_id);
        }
        (winner, rounds)
    }
}

pub fn run_bami(
    ground: &dyn GroundingBackend,
    correct: Option<&dyn CorrectionBackend>,
    cfg: &BamiConfig,
    query: &str,
    img: &Raster,
    ctx: &CallContext,
) -> Result<BamiTrace, PipelineError> {
    cfg.validate()?;
    let mut session = Session::new(ground, correct, ctx);
    let mut frames = TransformStack::new(img.dims());
    let mut current = Cow::Borrowed(img);
    let mut records: Vec<IterationRecord> = Vec::with_capacity(cfg.iterations as usize);
    let mut final_local = Point::new(0, 0);

    for t in 0..cfg.iterations as usize {
        let cands = match session.generate_candidates(query, &current, &frames, cfg.candidates, cfg.click_expand) {
            Ok(c) => c,
            Err(source) => {
                return Err(PipelineError::Grounding {
                    iteration: t,
                    source,
                    partial: records,
                })
            }
        };
        let (selected, comparisons) = if cfg.candidate_selection {
            session.select_candidate(query, &current, &frames, &cands, cfg.prompt_style)
        } else {
            (0, Vec::new())
        };
        let pick = &cands.candidates[selected];
        records.push(IterationRecord {
            frame: frames.global_frame(),
            selected_index: selected,
            selected_box_global: frames.to_global_box(pick.bbox)?,
            candidates: cands.clone(),
            comparisons,
        });
        final_local = pick.anchor;
        if t + 1 < cfg.iterations as usize {
            let window = crop_window(current.dims(), BBox::at(pick.anchor), cfg.lambda);
            current = Cow::Owned(crop(&current, window)?);
            frames.push(window)?;
        }
    }

    Ok(BamiTrace {
        sample_id: ctx.sample_id.clone(),
        query: query.to_string(),
        config: *cfg,
        iterations: records,
        final_point_global: frames.to_global(final_local)?,
    })
}

/// Single grounding call; the answer is the prediction's anchor point.
pub fn run_baseline(
    ground: &dyn GroundingBackend,
    query: &str,
    img: &Raster,
    ctx: &CallContext,
) -> Result<Point, BackendError> {
    let frames = TransformStack::new(img.dims());
    let pred = ground.ground(&GroundingRequest {
        query,
        image: img,
        frames: &frames,
        call_index: 0,
        ctx,
    })?;
    Ok(pred.anchor(img.dims()))
}

/// Result of locating one query on one screenshot.
#[derive(Clone, Debug)]
pub struct Located {
    pub point: Point,
    pub trace: Option<BamiTrace>,
}

/// A grounding strategy selectable by name.
pub trait Locator: Send + Sync {
    fn name(&self) -> &'static str;

    fn locate(
        &self,
        backends: &Backends,
        query: &str,
        img: &Raster,
        ctx: &CallContext,
    ) -> Result<Located, PipelineError>;
}

pub struct Baseline;

impl Locator for Baseline {
    fn name(&self) -> &'static str {
        "baseline"
    }

    fn locate(&self, backends: &Backends, query: &str, img: &Raster, ctx: &CallContext) -> Result<Located, PipelineError> {
        let point = run_baseline(backends.grounding.as_ref(), query, img, ctx).map_err(|source| {
            PipelineError::Grounding {
                iteration: 0,
                source,
                partial: Vec::new(),
            }
        })?;
        Ok(Located { point, trace: None })
    }
}

pub struct Bami(pub BamiConfig);

impl Locator for Bami {
    fn name(&self) -> &'static str {
        "bami"
    }

    fn locate(&self, backends: &Backends, query: &str, img: &Raster, ctx: &CallContext) -> Result<Located, PipelineError> {
        let trace = run_bami(
            backends.grounding.as_ref(),
            backends.correction.as_deref(),
            &self.0,
            query,
            img,
            ctx,
        )?;
        Ok(Located {
            point: trace.final_point_global,
            trace: Some(trace),
        })
    }
}

pub const LOCATORS: [&str; 2] = ["baseline", "bami"];

/// Look up a strategy by name.
pub fn locator(name: &str, cfg: BamiConfig) -> Result<Box<dyn Locator>, PipelineError> {
    match name {
        "baseline" => Ok(Box::new(Baseline)),
        "bami" => {
            cfg.validate()?;
            Ok(Box::new(Bami(cfg)))
        }
        other => Err(PipelineError::Config(format!(
            "unknown mode {other:?}; known: {}",
            LOCATORS.join(", ")
        ))),
    }
}
