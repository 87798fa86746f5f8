//! Grounding and correction backends.
//!
//! Each backend kind implements [`GroundingBackend`] or [`CorrectionBackend`]
//! and is constructed by name through a [`BackendRegistry`]. The built-in
//! kinds are `http` (chat-completion endpoints) and `sim` (seeded bias
//! simulator).

mod http;
mod registry;
mod sim;

use thiserror::Error;

use crate::geometry::{BBox, GeometryError, TransformStack};
use crate::image_ops::{ImageError, Raster};
use crate::protocol::{CorrectionAnswer, GroundingPrediction, PromptStyle, ProtocolError};

pub use http::{http_correct, http_ground, CoordinateSpace, HttpConfig, HttpCorrector, HttpGrounder};
pub use registry::{load_backend_file, BackendFile, BackendRegistry, Backends};
pub use sim::{
    palette_color, render_scene, sim_correct, sim_ground, DrawKey, SceneLibrary, SimCorrectionConfig, SimCorrector, SimElement,
    SimGrounder, SimScene, SIM_BACKGROUND,
};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("endpoint returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed reply: {0}")]
    MalformedReply(String),
    #[error("cannot parse model output: {0}")]
    Parse(#[from] ProtocolError),
    #[error("no visible element for query {query:?}")]
    NoVisibleTarget { query: String },
    #[error("scene has no element for query {query:?}")]
    UnknownQuery { query: String },
    #[error("no scene matches image {0:?}")]
    UnknownScene(String),
    #[error("invalid backend configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

impl BackendError {
    /// True for failures to interpret model text, as opposed to failures to
    /// obtain it.
    pub fn is_parse(&self) -> bool {
        matches!(self, BackendError::Parse(_))
    }

    /// True when a correction reply arrived but carried no usable answer.
    pub fn is_unparseable_answer(&self) -> bool {
        matches!(self, BackendError::Parse(ProtocolError::UnparseableAnswer { .. }))
    }

    /// Short stable label used in outcome logs.
    pub fn kind(&self) -> &'static str {
        match self {
            BackendError::Transport { .. } => "transport",
            BackendError::Status { .. } => "http_status",
            BackendError::MalformedReply(_) => "malformed_reply",
            BackendError::Parse(_) => "parse",
            BackendError::NoVisibleTarget { .. } => "no_visible_target",
            BackendError::UnknownQuery { .. } => "unknown_query",
            BackendError::UnknownScene(_) => "unknown_scene",
            BackendError::Config(_) => "config",
            BackendError::Image(_) => "image",
            BackendError::Geometry(_) => "geometry",
        }
    }
}

/// Identity of one pipeline run: which sample, which image, which seed.
/// Simulators key their randomness on this, never on scheduling order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CallContext {
    pub sample_id: String,
    pub image_key: String,
    pub run_seed: u64,
}

impl CallContext {
    pub fn new(sample_id: impl Into<String>, image_key: impl Into<String>, run_seed: u64) -> Self {
        Self {
            sample_id: sample_id.into(),
            image_key: image_key.into(),
            run_seed,
        }
    }
}

pub struct GroundingRequest<'a> {
    pub query: &'a str,
    pub image: &'a Raster,
    /// Crops applied so far; `image` is the innermost frame.
    pub frames: &'a TransformStack,
    /// Position of this call among the run's grounding calls.
    pub call_index: u32,
    pub ctx: &'a CallContext,
}

pub struct CorrectionRequest<'a> {
    pub query: &'a str,
    /// Image 1 carries box 1 (green), image 2 carries box 2 (red).
    pub images: [&'a Raster; 2],
    /// The two candidate boxes in current-frame coordinates.
    pub boxes: [BBox; 2],
    pub frames: &'a TransformStack,
    pub style: PromptStyle,
    pub call_index: u32,
    pub ctx: &'a CallContext,
}

pub trait GroundingBackend: Send + Sync {
    /// Human-readable identity recorded in reports and manifests.
    fn id(&self) -> String;

    fn ground(&self, req: &GroundingRequest<'_>) -> Result<GroundingPrediction, BackendError>;
}

pub trait CorrectionBackend: Send + Sync {
    fn id(&self) -> String;

    fn correct(&self, req: &CorrectionRequest<'_>) -> Result<CorrectionAnswer, BackendError>;
}
