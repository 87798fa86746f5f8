//! Coarse-to-fine GUI grounding with masked candidates, masked-prediction
//! attribution, pluggable model backends, and a benchmark harness.

pub mod analysis;
pub mod backend;
pub mod eval;
pub mod geometry;
pub mod image_ops;
pub mod mpd;
pub mod pipeline;
pub mod protocol;
pub mod seeding;
pub mod simgen;

mod font;
