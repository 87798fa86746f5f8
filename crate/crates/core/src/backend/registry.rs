use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::http::{HttpConfig, HttpCorrector, HttpGrounder};
use super::sim::{SceneLibrary, SimCorrectionConfig, SimCorrector, SimGrounder, SimScene};
use super::{BackendError, CorrectionBackend, GroundingBackend};

pub type GroundingFactory =
    Box<dyn Fn(&Value, &Path) -> Result<Arc<dyn GroundingBackend>, BackendError> + Send + Sync>;
pub type CorrectionFactory =
    Box<dyn Fn(&Value, &Path) -> Result<Arc<dyn CorrectionBackend>, BackendError> + Send + Sync>;

/// Backend configuration file: a `[grounding]` table and an optional
/// `[correction]` table, each selecting its implementation with `kind`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendFile {
    pub grounding: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correction: Option<Value>,
}

impl BackendFile {
    pub fn parse(text: &str, json: bool) -> Result<Self, BackendError> {
        if json {
            serde_json::from_str(text).map_err(|e| BackendError::Config(e.to_string()))
        } else {
            toml::from_str(text).map_err(|e| BackendError::Config(e.to_string()))
        }
    }
}

/// Read a TOML (default) or JSON (`.json`) backend file. Returns the file and
/// the directory relative paths inside it resolve against.
pub fn load_backend_file(path: &Path) -> Result<(BackendFile, PathBuf), BackendError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| BackendError::Config(format!("cannot read {}: {e}", path.display())))?;
    let json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let file = BackendFile::parse(&text, json)
        .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((file, base))
}

pub struct Backends {
    pub grounding: Arc<dyn GroundingBackend>,
    pub correction: Option<Arc<dyn CorrectionBackend>>,
}

impl Backends {
    pub fn new(grounding: Arc<dyn GroundingBackend>, correction: Option<Arc<dyn CorrectionBackend>>) -> Self {
        Self { grounding, correction }
    }

    pub fn ids(&self) -> (String, Option<String>) {
        (self.grounding.id(), self.correction.as_ref().map(|c| c.id()))
    }
}

/// Backend constructors keyed by `kind`.
pub struct BackendRegistry {
    grounding: BTreeMap<String, GroundingFactory>,
    correction: BTreeMap<String, CorrectionFactory>,
}

impl Default for BackendRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register_grounding("http", Box::new(http_grounding));
        r.register_grounding("sim", Box::new(sim_grounding));
        r.register_correction("http", Box::new(http_correction));
        r.register_correction("sim", Box::new(sim_correction));
        r
    }
}

impl BackendRegistry {
    pub fn empty() -> Self {
        Self {
            grounding: BTreeMap::new(),
            correction: BTreeMap::new(),
        }
    }

    pub fn register_grounding(&mut self, kind: &str, factory: GroundingFactory) {
        self.grounding.insert(kind.to_string(), factory);
    }

    pub fn register_correction(&mut self, kind: &str, factory: CorrectionFactory) {
        self.correction.insert(kind.to_string(), factory);
    }

    pub fn grounding_kinds(&self) -> Vec<&str> {
        self.grounding.keys().map(String::as_str).collect()
    }

    pub fn correction_kinds(&self) -> Vec<&str> {
        self.correction.keys().map(String::as_str).collect()
    }

    pub fn build_grounding(&self, spec: &Value, base: &Path) -> Result<Arc<dyn GroundingBackend>, BackendError> {
        let (kind, body) = split_kind(spec)?;
        let factory = self.grounding.get(&kind).ok_or_else(|| {
            BackendError::Config(format!(
                "unknown grounding backend kind {kind:?}; known: {}",
                self.grounding_kinds().join(", ")
            ))
        })?;
        factory(&body, base)
    }

    pub fn build_correction(&self, spec: &Value, base: &Path) -> Result<Arc<dyn CorrectionBackend>, BackendError> {
        let (kind, body) = split_kind(spec)?;
        let factory = self.correction.get(&kind).ok_or_else(|| {
            BackendError::Config(format!(
                "unknown correction backend kind {kind:?}; known: {}",
                self.correction_kinds().join(", ")
            ))
        })?;
        factory(&body, base)
    }

    /// Build both backends. A `sim` correction table without scenes reuses
    /// the grounding table's.
    pub fn build(&self, file: &BackendFile, base: &Path) -> Result<Backends, BackendError> {
        let grounding = self.build_grounding(&file.grounding, base)?;
        let correction = match &file.correction {
            None => None,
            Some(spec) => {
                let mut spec = spec.clone();
                if let Some(obj) = spec.as_object_mut() {
                    if !obj.contains_key("scene") && !obj.contains_key("scenes") {
                        for k in ["scene", "scenes"] {
                            if let Some(v) = file.grounding.get(k) {
                                obj.insert(k.to_string(), v.clone());
                            }
                        }
                    }
                }
                Some(self.build_correction(&spec, base)?)
            }
        };
        Ok(Backends { grounding, correction })
    }
}

fn split_kind(spec: &Value) -> Result<(String, Value), BackendError> {
    let mut obj = spec
        .as_object()
        .cloned()
        .ok_or_else(|| BackendError::Config("backend table must be an object".into()))?;
    let kind = match obj.remove("kind") {
        Some(Value::String(k)) => k,
        _ => return Err(BackendError::Config("backend table needs a string `kind`".into())),
    };
    Ok((kind, Value::Object(obj)))
}

fn typed<T: serde::de::DeserializeOwned>(body: &Value) -> Result<T, BackendError> {
    serde_json::from_value(body.clone()).map_err(|e| BackendError::Config(e.to_string()))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn http_config(body: &Value, base: &Path) -> Result<HttpConfig, BackendError> {
    let mut cfg: HttpConfig = typed(body)?;
    if let Some(p) = &cfg.prompt_template {
        cfg.prompt_template = Some(resolve(base, p));
    }
    if let Some(t) = cfg.correction_templates.as_mut() {
        for slot in [&mut t.vanilla, &mut t.cot, &mut t.cot_kp] {
            if let Some(p) = slot.as_ref() {
                *slot = Some(resolve(base, p));
            }
        }
    }
    Ok(cfg)
}

fn http_grounding(body: &Value, base: &Path) -> Result<Arc<dyn GroundingBackend>, BackendError> {
    Ok(Arc::new(HttpGrounder::new(http_config(body, base)?)?))
}

fn http_correction(body: &Value, base: &Path) -> Result<Arc<dyn CorrectionBackend>, BackendError> {
    Ok(Arc::new(HttpCorrector::new(http_config(body, base)?)?))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SimGroundingSpec {
    #[serde(default)]
    scene: Option<PathBuf>,
    #[serde(default)]
    scenes: Vec<PathBuf>,
    #[serde(default)]
    precision_sigma_rel: Option<f64>,
    #[serde(default)]
    ambig_prob: Option<f64>,
    #[serde(default)]
    mask_visibility_threshold: Option<f64>,
    #[serde(default)]
    seed: Option<u64>,
}

fn load_scenes(scene: &Option<PathBuf>, scenes: &[PathBuf], base: &Path) -> Result<Vec<SimScene>, BackendError> {
    let paths: Vec<&PathBuf> = scene.iter().chain(scenes.iter()).collect();
    if paths.is_empty() {
        return Err(BackendError::Config("sim backend needs `scene` or `scenes`".into()));
    }
    paths.into_iter().map(|p| SimScene::load(&resolve(base, p))).collect()
}

fn sim_grounding(body: &Value, base: &Path) -> Result<Arc<dyn GroundingBackend>, BackendError> {
    let spec: SimGroundingSpec = typed(body)?;
    let mut scenes = load_scenes(&spec.scene, &spec.scenes, base)?;
    for s in &mut scenes {
        if let Some(v) = spec.precision_sigma_rel {
            s.precision_sigma_rel = v;
        }
        if let Some(v) = spec.ambig_prob {
            s.ambig_prob = v;
        }
        if let Some(v) = spec.mask_visibility_threshold {
            s.mask_visibility_threshold = v;
        }
        if let Some(v) = spec.seed {
            s.seed = v;
        }
    }
    Ok(Arc::new(SimGrounder::new(Arc::new(SceneLibrary::new(scenes)?))))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SimCorrectionSpec {
    #[serde(default)]
    scene: Option<PathBuf>,
    #[serde(default)]
    scenes: Vec<PathBuf>,
    #[serde(default)]
    error_rate: f64,
    #[serde(default)]
    seed: u64,
}

fn sim_correction(body: &Value, base: &Path) -> Result<Arc<dyn CorrectionBackend>, BackendError> {
    let spec: SimCorrectionSpec = typed(body)?;
    let scenes = load_scenes(&spec.scene, &spec.scenes, base)?;
    let cfg = SimCorrectionConfig {
        error_rate: spec.error_rate,
        seed: spec.seed,
    };
    Ok(Arc::new(SimCorrector::new(cfg, Arc::new(SceneLibrary::new(scenes)?))?))
}
