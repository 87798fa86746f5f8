//! Synthetic scenes for the simulator: flat-colour rectangles on a grey
//! background, plus a matching dataset and backend file.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{render_scene, BackendError, SimElement, SimScene};
use crate::eval::{DataType, KNOWN_GROUPS};
use crate::geometry::{BBox, ImageDims};
use crate::image_ops::ImageError;
use crate::protocol::Expect;
use crate::seeding::keyed_rng;

#[derive(Debug, Error)]
pub enum SimgenError {
    #[error("invalid generator settings: {0}")]
    Config(String),
    #[error("could not place element {index} of scene {scene} without overlap after {attempts} attempts")]
    Placement { scene: usize, index: usize, attempts: u32 },
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimgenConfig {
    pub dims: ImageDims,
    /// Target elements per scene; each becomes one dataset sample.
    pub targets: usize,
    pub distractors: usize,
    pub scenes: usize,
    pub seed: u64,
    /// Element side length range in pixels; derived from `dims` when absent.
    pub min_side: Option<u32>,
    pub max_side: Option<u32>,
    /// Empty pixels kept between any two elements.
    pub gap: u32,
    pub precision_sigma_rel: f64,
    pub ambig_prob: f64,
    pub output: Expect,
}

impl SimgenConfig {
    pub fn new(dims: ImageDims, targets: usize, distractors: usize, seed: u64) -> Self {
        Self {
            dims,
            targets,
            distractors,
            scenes: 1,
            seed,
            min_side: None,
            max_side: None,
            gap: 2,
            precision_sigma_rel: 0.0,
            ambig_prob: 0.0,
            output: Expect::Box,
        }
    }

    fn side_range(&self) -> (u32, u32) {
        let short = self.dims.width.min(self.dims.height);
        let lo = self.min_side.unwrap_or((short / 20).max(4)).max(1);
        let hi = self.max_side.unwrap_or((short / 8).max(lo));
        (lo, hi)
    }

    pub fn validate(&self) -> Result<(), SimgenError> {
        let bad = |m: String| Err(SimgenError::Config(m));
        if self.targets == 0 {
            return bad("need at least one target element".into());
        }
        if self.scenes == 0 {
            return bad("need at least one scene".into());
        }
        let (lo, hi) = self.side_range();
        if lo > hi {
            return bad(format!("min side {lo} exceeds max side {hi}"));
        }
        if hi > self.dims.width || hi > self.dims.height {
            return bad(format!("elements up to {hi}px do not fit in {}", self.dims));
        }
        Ok(())
    }

    fn file_names(&self, scene: usize) -> (String, String) {
        if self.scenes == 1 {
            ("scene.json".into(), "screenshot.png".into())
        } else {
            (format!("scene-{scene:03}.json"), format!("screenshot-{scene:03}.png"))
        }
    }
}

const MAX_ATTEMPTS: u32 = 10_000;

fn separated(a: BBox, b: BBox, gap: u32) -> bool {
    a.x2.saturating_add(gap) < b.x1
        || b.x2.saturating_add(gap) < a.x1
        || a.y2.saturating_add(gap) < b.y1
        || b.y2.saturating_add(gap) < a.y1
}

/// Rejection-sample non-overlapping boxes for one scene.
fn place(cfg: &SimgenConfig, scene: usize, count: usize) -> Result<Vec<BBox>, SimgenError> {
    let mut rng = keyed_rng(&[b"simgen", &cfg.seed.to_le_bytes(), &(scene as u64).to_le_bytes()]);
    let (lo, hi) = cfg.side_range();
    let mut boxes: Vec<BBox> = Vec::with_capacity(count);
    for index in 0..count {
        let mut attempts = 0;
        loop {
            if attempts == MAX_ATTEMPTS {
                return Err(SimgenError::Placement {
                    scene,
                    index,
                    attempts,
                });
            }
            attempts += 1;
            let w = rng.random_range(lo..=hi);
            let h = rng.random_range(lo..=hi);
            let x1 = rng.random_range(0..=cfg.dims.width - w);
            let y1 = rng.random_range(0..=cfg.dims.height - h);
            let b = BBox {
                x1,
                y1,
                x2: x1 + w - 1,
                y2: y1 + h - 1,
            };
            if boxes.iter().all(|o| separated(*o, b, cfg.gap)) {
                boxes.push(b);
                break;
            }
        }
    }
    Ok(boxes)
}

pub fn target_tag(i: usize) -> String {
    format!("target-{i}")
}

pub fn distractor_tag(j: usize) -> String {
    format!("distractor-{j}")
}

pub fn generate_scene(cfg: &SimgenConfig, scene: usize) -> Result<SimScene, SimgenError> {
    cfg.validate()?;
    let boxes = place(cfg, scene, cfg.targets + cfg.distractors)?;
    let elements = boxes
        .into_iter()
        .enumerate()
        .map(|(i, bbox)| {
            let target = i < cfg.targets;
            SimElement {
                bbox,
                tag: if target { target_tag(i) } else { distractor_tag(i - cfg.targets) },
                is_target: target,
                color: None,
            }
        })
        .collect();
    let mut s = SimScene::new(cfg.dims, elements);
    s.precision_sigma_rel = cfg.precision_sigma_rel;
    s.ambig_prob = cfg.ambig_prob;
    s.seed = cfg.seed;
    s.output = cfg.output;
    s.image = Some(cfg.file_names(scene).1);
    s.validate()?;
    Ok(s)
}

/// One row of the native dataset format.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NativeRow {
    pub id: String,
    pub image: String,
    pub instruction: String,
    pub bbox: BBox,
    pub data_type: DataType,
    pub group: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bundle {
    pub scenes: Vec<SimScene>,
    pub rows: Vec<NativeRow>,
    pub files: Vec<PathBuf>,
}

fn write(path: PathBuf, bytes: &[u8], files: &mut Vec<PathBuf>) -> Result<(), SimgenError> {
    std::fs::write(&path, bytes).map_err(|source| SimgenError::Io {
        path: path.clone(),
        source,
    })?;
    files.push(path);
    Ok(())
}

/// Write scenes, screenshots, `dataset.json`, and `backends.toml` into
/// `out`. Identical settings give byte-identical files.
pub fn write_bundle(cfg: &SimgenConfig, out: &Path) -> Result<Bundle, SimgenError> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|source| SimgenError::Io {
        path: out.to_path_buf(),
        source,
    })?;
    let mut files = Vec::new();
    let mut scenes = Vec::new();
    let mut rows = Vec::new();
    let mut scene_files = Vec::new();
    for k in 0..cfg.scenes {
        let scene = generate_scene(cfg, k)?;
        let (json_name, png_name) = cfg.file_names(k);
        let json = serde_json::to_vec_pretty(&scene).expect("scene serializes");
        write(out.join(&json_name), &json, &mut files)?;
        write(out.join(&png_name), &render_scene(&scene).encode_png()?, &mut files)?;
        for (i, e) in scene.elements.iter().enumerate().filter(|(_, e)| e.is_target) {
            rows.push(NativeRow {
                id: if cfg.scenes == 1 { e.tag.clone() } else { format!("s{k:03}-{}", e.tag) },
                image: png_name.clone(),
                instruction: e.tag.clone(),
                bbox: e.bbox,
                data_type: if i % 2 == 0 { DataType::Text } else { DataType::Icon },
                group: KNOWN_GROUPS[k % KNOWN_GROUPS.len()].to_string(),
            });
        }
        scene_files.push(json_name);
        scenes.push(scene);
    }
    let mut dataset = serde_json::to_vec_pretty(&rows).expect("rows serialize");
    dataset.push(b'\n');
    write(out.join("dataset.json"), &dataset, &mut files)?;
    write(out.join("backends.toml"), backends_toml(&scene_files).as_bytes(), &mut files)?;
    Ok(Bundle { scenes, rows, files })
}

fn backends_toml(scene_files: &[String]) -> String {
    let scenes = if scene_files.len() == 1 {
        format!("scene = {:?}", scene_files[0])
    } else {
        let list: Vec<String> = scene_files.iter().map(|f| format!("{f:?}")).collect();
        format!("scenes = [{}]", list.join(", "))
    };
    format!("[grounding]\nkind = \"sim\"\n{scenes}\n\n[correction]\nkind = \"sim\"\nerror_rate = 0.0\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou;

    fn dims(w: u32, h: u32) -> ImageDims {
        ImageDims::new(w, h).unwrap()
    }

    #[test]
    fn five_on_200_do_not_overlap() {
        for seed in 0..200 {
            let cfg = SimgenConfig::new(dims(200, 200), 2, 3, seed);
            let s = generate_scene(&cfg, 0).unwrap();
            assert_eq!(s.elements.len(), 5);
            for (i, a) in s.elements.iter().enumerate() {
                assert!(a.bbox.fits_in(s.dims));
                for b in &s.elements[i + 1..] {
                    assert_eq!(iou(a.bbox, b.bbox), 0.0, "seed {seed}");
                }
            }
        }
    }

    #[test]
    fn impossible_placement_errors() {
        let mut cfg = SimgenConfig::new(dims(40, 40), 1, 20, 0);
        cfg.min_side = Some(15);
        cfg.max_side = Some(15);
        assert!(matches!(generate_scene(&cfg, 0), Err(SimgenError::Placement { .. })));
        cfg.max_side = Some(80);
        assert!(matches!(generate_scene(&cfg, 0), Err(SimgenError::Config(_))));
        assert!(matches!(
            generate_scene(&SimgenConfig::new(dims(40, 40), 0, 1, 0), 0),
            Err(SimgenError::Config(_))
        ));
    }

    #[test]
    fn bundle_is_byte_identical_and_loads() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let mut cfg = SimgenConfig::new(dims(160, 120), 2, 2, 9);
        cfg.scenes = 3;
        let bundle = write_bundle(&cfg, a.path()).unwrap();
        write_bundle(&cfg, b.path()).unwrap();
        assert_eq!(bundle.rows.len(), 6);
        for f in &bundle.files {
            let name = f.file_name().unwrap();
            assert_eq!(std::fs::read(f).unwrap(), std::fs::read(b.path().join(name)).unwrap(), "{name:?}");
        }
        let ds = crate::eval::load_dataset(&a.path().join("dataset.json"), crate::eval::DatasetAdapter::Native).unwrap();
        assert_eq!(ds.samples.len(), 6);
        assert_eq!(ds.samples[0].group, "Development");
        let (file, base) = crate::backend::load_backend_file(&a.path().join("backends.toml")).unwrap();
        let backends = crate::backend::BackendRegistry::default().build(&file, &base).unwrap();
        assert!(backends.correction.is_some());
    }

    #[test]
    fn single_target_noiseless_baseline_is_perfect() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SimgenConfig::new(dims(300, 200), 1, 0, 4);
        write_bundle(&cfg, dir.path()).unwrap();
        let ds = crate::eval::load_dataset(&dir.path().join("dataset.json"), crate::eval::DatasetAdapter::Native).unwrap();
        let (file, base) = crate::backend::load_backend_file(&dir.path().join("backends.toml")).unwrap();
        let backends = crate::backend::BackendRegistry::default().build(&file, &base).unwrap();
        let loc = crate::pipeline::locator("baseline", crate::pipeline::BamiConfig::default()).unwrap();
        let out = crate::eval::evaluate(&ds.samples, loc.as_ref(), &backends, &Default::default()).unwrap();
        assert_eq!(out.len(), 1);
        assert!(out[0].correct);
    }
}
