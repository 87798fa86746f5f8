//! Seeded stand-ins for grounding and correction models.
//!
//! The grounding simulator reproduces the two failure modes inference-time
//! manipulation targets: a positional error whose spread scales with the size
//! of the image the model sees, and a tendency to lock onto a different
//! element than the one asked for. It "sees" only what is in the raster it is
//! given, so masked elements cannot be predicted again.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{BackendError, CorrectionBackend, CorrectionRequest, GroundingBackend, GroundingRequest};
use crate::seeding::keyed_rng;
use crate::geometry::{center, contains, BBox, ImageDims, TransformStack};
use crate::image_ops::{Raster, Rgb, BLACK};
use crate::protocol::{
    format_box_token, parse_grounding_output, Choice, CorrectionAnswer, Expect, GroundingPrediction,
};

pub const SIM_BACKGROUND: Rgb = [200, 200, 200];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimElement {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub tag: String,
    #[serde(default)]
    pub is_target: bool,
    /// Fill used when rendering; a palette colour is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<Rgb>,
}

fn default_threshold() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimScene {
    pub dims: ImageDims,
    pub elements: Vec<SimElement>,
    /// Noise std as a fraction of the current frame's larger side.
    #[serde(default)]
    pub precision_sigma_rel: f64,
    /// Probability of answering with a distractor instead of the target.
    #[serde(default)]
    pub ambig_prob: f64,
    /// Fraction of black pixels at which an element stops being visible.
    #[serde(default = "default_threshold")]
    pub mask_visibility_threshold: f64,
    #[serde(default)]
    pub seed: u64,
    /// File name of the rendered screenshot this scene describes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    /// Reply shape: boxes, or click points.
    #[serde(default = "default_output")]
    pub output: Expect,
}

fn default_output() -> Expect {
    Expect::Box
}

impl SimScene {
    pub fn new(dims: ImageDims, elements: Vec<SimElement>) -> Self {
        Self {
            dims,
            elements,
            precision_sigma_rel: 0.0,
            ambig_prob: 0.0,
            mask_visibility_threshold: default_threshold(),
            seed: 0,
            image: None,
            output: Expect::Box,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |m: String| Err(BackendError::Config(m));
        if !(self.precision_sigma_rel >= 0.0) {
            return bad(format!("precision_sigma_rel must be >= 0, got {}", self.precision_sigma_rel));
        }
        if !(0.0..=1.0).contains(&self.ambig_prob) {
            return bad(format!("ambig_prob must be in [0, 1], got {}", self.ambig_prob));
        }
        if !(0.0..=1.0).contains(&self.mask_visibility_threshold) {
            return bad(format!(
                "mask_visibility_threshold must be in [0, 1], got {}",
                self.mask_visibility_threshold
            ));
        }
        for (i, e) in self.elements.iter().enumerate() {
            if !e.bbox.fits_in(self.dims) {
                return bad(format!("element {i} ({}) lies outside {}", e.bbox, self.dims));
            }
            if e.is_target
                && self.elements[..i]
                    .iter()
                    .any(|o| o.is_target && o.tag == e.tag)
            {
                return bad(format!("tag {:?} has more than one target", e.tag));
            }
        }
        Ok(())
    }

    pub fn target_index(&self, query: &str) -> Option<usize> {
        self.elements
            .iter()
            .position(|e| e.tag == query && e.is_target)
            .or_else(|| self.elements.iter().position(|e| e.tag == query))
    }

    pub fn target_box(&self, query: &str) -> Option<BBox> {
        self.target_index(query).map(|i| self.elements[i].bbox)
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("cannot read scene {}: {e}", path.display())))?;
        let scene: SimScene = serde_json::from_str(&text)
            .map_err(|e| BackendError::Config(format!("bad scene {}: {e}", path.display())))?;
        scene.validate()?;
        Ok(scene)
    }
}

/// Fixed palette, skipping black and the background grey.
pub fn palette_color(i: usize) -> Rgb {
    const PALETTE: [Rgb; 12] = [
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
        [210, 245, 60],
        [250, 190, 212],
        [0, 128, 128],
        [170, 110, 40],
    ];
    PALETTE[i % PALETTE.len()]
}

/// Flat-colour screenshot of a scene.
pub fn render_scene(scene: &SimScene) -> Raster {
    let mut img = Raster::filled(scene.dims, SIM_BACKGROUND);
    for (i, e) in scene.elements.iter().enumerate() {
        img.fill_box(e.bbox, e.color.unwrap_or_else(|| palette_color(i)));
    }
    img
}

/// Scenes addressable by the image they describe.
#[derive(Clone, Debug, Default)]
pub struct SceneLibrary {
    scenes: Vec<SimScene>,
}

impl SceneLibrary {
    pub fn new(scenes: Vec<SimScene>) -> Result<Self, BackendError> {
        for s in &scenes {
            s.validate()?;
        }
        Ok(Self { scenes })
    }

    pub fn single(scene: SimScene) -> Result<Self, BackendError> {
        Self::new(vec![scene])
    }

    pub fn scenes(&self) -> &[SimScene] {
        &self.scenes
    }

    pub fn scenes_mut(&mut self) -> &mut [SimScene] {
        &mut self.scenes
    }

    /// The scene whose `image` names `image_key`; a lone scene matches anything.
    pub fn lookup(&self, image_key: &str) -> Result<&SimScene, BackendError> {
        if let [only] = self.scenes.as_slice() {
            return Ok(only);
        }
        let name = Path::new(image_key)
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or(image_key);
        self.scenes
            .iter()
            .find(|s| s.image.as_deref().is_some_and(|i| i == image_key || i == name))
            .ok_or_else(|| BackendError::UnknownScene(image_key.to_string()))
    }
}

/// Seed tuple of one simulated call.
#[derive(Clone, Copy, Debug)]
pub struct DrawKey<'a> {
    pub run_seed: u64,
    pub sample_id: &'a str,
    pub depth: usize,
    pub call_index: u32,
}

impl DrawKey<'_> {
    fn rng(&self, domain: &str, backend_seed: u64, query: &str) -> ChaCha8Rng {
        keyed_rng(&[
            domain.as_bytes(),
            &backend_seed.to_le_bytes(),
            &self.run_seed.to_le_bytes(),
            self.sample_id.as_bytes(),
            query.as_bytes(),
            &(self.depth as u64).to_le_bytes(),
            &self.call_index.to_le_bytes(),
        ])
    }
}

fn is_visible(scene: &SimScene, img: &Raster, frames: &TransformStack, e: &SimElement) -> bool {
    let Some(local) = frames.to_local_box_clipped(e.bbox) else {
        return false;
    };
    let total = local.area();
    let black = img.count_color(local, BLACK);
    (black as f64) < scene.mask_visibility_threshold * total as f64
}

fn center_distance_sq(a: BBox, b: BBox) -> u64 {
    let (ca, cb) = (center(a), center(b));
    let dx = ca.x as i64 - cb.x as i64;
    let dy = ca.y as i64 - cb.y as i64;
    (dx * dx + dy * dy) as u64
}

/// One simulated grounding call on `img`, the innermost frame of `frames`.
pub fn sim_ground(
    scene: &SimScene,
    query: &str,
    img: &Raster,
    frames: &TransformStack,
    key: DrawKey<'_>,
) -> Result<GroundingPrediction, BackendError> {
    let target_idx = scene
        .target_index(query)
        .ok_or_else(|| BackendError::UnknownQuery { query: query.to_string() })?;
    let target = &scene.elements[target_idx];
    let visible: Vec<bool> = scene
        .elements
        .iter()
        .map(|e| is_visible(scene, img, frames, e))
        .collect();
    let distractors: Vec<usize> = (0..scene.elements.len())
        .filter(|&i| visible[i] && scene.elements[i].tag != target.tag)
        .collect();

    let mut rng = key.rng("ground", scene.seed, query);
    let distracted = rng.random::<f64>() < scene.ambig_prob;
    let pick = rng.random::<f64>();
    let chosen = if distracted && !distractors.is_empty() {
        distractors[((pick * distractors.len() as f64) as usize).min(distractors.len() - 1)]
    } else if visible[target_idx] {
        target_idx
    } else {
        *distractors
            .iter()
            .min_by_key(|&&i| center_distance_sq(scene.elements[i].bbox, target.bbox))
            .ok_or_else(|| BackendError::NoVisibleTarget { query: query.to_string() })?
    };

    let dims = img.dims();
    let sigma = scene.precision_sigma_rel * dims.max_side() as f64;
    let (nx, ny) = if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
        (normal.sample(&mut rng), normal.sample(&mut rng))
    } else {
        (0.0, 0.0)
    };

    let global = scene.elements[chosen].bbox;
    let offset = frames.global_frame().origin;
    let c = center(global);
    let cx = (c.x as f64 - offset.x as f64 + nx).round().clamp(0.0, (dims.width - 1) as f64) as i64;
    let cy = (c.y as f64 - offset.y as f64 + ny).round().clamp(0.0, (dims.height - 1) as f64) as i64;

    let raw = match scene.output {
        Expect::Click => format!("({cx}, {cy})"),
        Expect::Box | Expect::Either => {
            let span_x = (global.x2 - global.x1) as i64;
            let span_y = (global.y2 - global.y1) as i64;
            let clampx = |v: i64| v.clamp(0, dims.width as i64 - 1) as u32;
            let clampy = |v: i64| v.clamp(0, dims.height as i64 - 1) as u32;
            let x1 = cx - span_x / 2;
            let y1 = cy - span_y / 2;
            format_box_token(BBox {
                x1: clampx(x1),
                y1: clampy(y1),
                x2: clampx(x1 + span_x),
                y2: clampy(y1 + span_y),
            })
        }
    };
    Ok(parse_grounding_output(&raw, scene.output)?)
}

fn default_error_rate() -> f64 {
    0.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimCorrectionConfig {
    #[serde(default = "default_error_rate")]
    pub error_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SimCorrectionConfig {
    pub fn oracle() -> Self {
        Self {
            error_rate: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !(0.0..=1.0).contains(&self.error_rate) {
            return Err(BackendError::Config(format!(
                "error_rate must be in [0, 1], got {}",
                self.error_rate
            )));
        }
        Ok(())
    }
}

/// Ground-truth-aware choice between two candidates, wrong with probability
/// `error_rate`. All boxes share one coordinate system.
pub fn sim_correct(
    cfg: &SimCorrectionConfig,
    gt: BBox,
    cand1: BBox,
    cand2: BBox,
    query: &str,
    key: DrawKey<'_>,
) -> CorrectionAnswer {
    let in1 = contains(gt, center(cand1));
    let in2 = contains(gt, center(cand2));
    let mut choice = match (in1, in2) {
        (true, _) => Choice::First,
        (false, true) => Choice::Second,
        (false, false) => {
            if center_distance_sq(cand2, gt) < center_distance_sq(cand1, gt) {
                Choice::Second
            } else {
                Choice::First
            }
        }
    };
    if cfg.error_rate > 0.0 {
        let mut rng = key.rng("correct", cfg.seed, query);
        if rng.random::<f64>() < cfg.error_rate {
            choice = choice.flipped();
        }
    }
    CorrectionAnswer {
        choice,
        analysis: None,
        reason: Some(format!("simulated: candidate centres in ground truth = ({in1}, {in2})")),
    }
}

pub struct SimGrounder {
    library: Arc<SceneLibrary>,
}

impl SimGrounder {
    pub fn new(library: Arc<SceneLibrary>) -> Self {
        Self { library }
    }

    pub fn from_scene(scene: SimScene) -> Result<Self, BackendError> {
        Ok(Self::new(Arc::new(SceneLibrary::single(scene)?)))
    }

    pub fn library(&self) -> &SceneLibrary {
        &self.library
    }
}

impl GroundingBackend for SimGrounder {
    fn id(&self) -> String {
        let seeds: Vec<String> = self.library.scenes().iter().map(|s| s.seed.to_string()).collect();
        format!("sim:ground(seeds={})", seeds.join(","))
    }

    fn ground(&self, req: &GroundingRequest<'_>) -> Result<GroundingPrediction, BackendError> {
        let scene = self.library.lookup(&req.ctx.image_key)?;
        sim_ground(
            scene,
            req.query,
            req.image,
            req.frames,
            DrawKey {
                run_seed: req.ctx.run_seed,
                sample_id: &req.ctx.sample_id,
                depth: req.frames.depth(),
                call_index: req.call_index,
            },
        )
    }
}

pub struct SimCorrector {
    cfg: SimCorrectionConfig,
    library: Arc<SceneLibrary>,
}

impl SimCorrector {
    pub fn new(cfg: SimCorrectionConfig, library: Arc<SceneLibrary>) -> Result<Self, BackendError> {
        cfg.validate()?;
        Ok(Self { cfg, library })
    }
}

impl CorrectionBackend for SimCorrector {
    fn id(&self) -> String {
        format!("sim:correct(error_rate={},seed={})", self.cfg.error_rate, self.cfg.seed)
    }

    fn correct(&self, req: &CorrectionRequest<'_>) -> Result<CorrectionAnswer, BackendError> {
        let scene = self.library.lookup(&req.ctx.image_key)?;
        let gt = scene
            .target_box(req.query)
            .ok_or_else(|| BackendError::UnknownQuery { query: req.query.to_string() })?;
        let c1 = req.frames.to_global_box(req.boxes[0])?;
        let c2 = req.frames.to_global_box(req.boxes[1])?;
        Ok(sim_correct(
            &self.cfg,
            gt,
            c1,
            c2,
            req.query,
            DrawKey {
                run_seed: req.ctx.run_seed,
                sample_id: &req.ctx.sample_id,
                depth: req.frames.depth(),
                call_index: req.call_index,
            },
        ))
    }
}
