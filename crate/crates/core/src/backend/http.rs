use std::path::PathBuf;
use std::thread;
use std::time::Duration;

use log::{debug, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BackendError, CorrectionBackend, CorrectionRequest, GroundingBackend, GroundingRequest};
use crate::geometry::{BBox, ImageDims, Point};
use crate::image_ops::{encode_png_base64, Raster};
use crate::protocol::{
    parse_correction_answer, parse_grounding_output, CorrectionAnswer, Expect, Grounding,
    GroundingPrediction, PromptSet, PromptStyle,
};

/// How the model expresses coordinates in its replies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordinateSpace {
    /// Pixels of the image that was sent.
    #[default]
    Absolute,
    /// Integers in [0, 1000) relative to the image size.
    Relative1000,
}

fn default_timeout() -> f64 {
    60.0
}
fn default_retries() -> u32 {
    2
}
fn default_backoff_ms() -> u64 {
    500
}
fn default_output() -> Expect {
    Expect::Box
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpConfig {
    /// Base URL; requests go to `{endpoint}/chat/completions`.
    pub endpoint: String,
    pub model_name: String,
    /// Environment variable holding the bearer token. Keys never live in files.
    #[serde(default)]
    pub api_key_env: Option<String>,
    /// Seconds.
    #[serde(default = "default_timeout")]
    pub timeout: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_backoff_ms")]
    pub retry_backoff_ms: u64,
    #[serde(default = "default_output")]
    pub output: Expect,
    #[serde(default)]
    pub coordinates: CoordinateSpace,
    #[serde(default)]
    pub system_prompt: Option<String>,
    #[serde(default)]
    pub prompt_template: Option<PathBuf>,
    #[serde(default)]
    pub correction_templates: Option<CorrectionTemplates>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrectionTemplates {
    pub vanilla: Option<PathBuf>,
    pub cot: Option<PathBuf>,
    pub cot_kp: Option<PathBuf>,
}

impl HttpConfig {
    pub fn new(endpoint: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model_name: model_name.into(),
            api_key_env: None,
            timeout: default_timeout(),
            max_retries: default_retries(),
            temperature: 0.0,
            retry_backoff_ms: default_backoff_ms(),
            output: default_output(),
            coordinates: CoordinateSpace::Absolute,
            system_prompt: None,
            prompt_template: None,
            correction_templates: None,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !(self.timeout > 0.0) {
            return Err(BackendError::Config(format!("timeout must be > 0, got {}", self.timeout)));
        }
        if !(self.temperature >= 0.0) {
            return Err(BackendError::Config(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if self.endpoint.is_empty() {
            return Err(BackendError::Config("endpoint is empty".into()));
        }
        Ok(())
    }

    fn prompts(&self) -> Result<PromptSet, BackendError> {
        let mut set = PromptSet::default();
        if let Some(p) = &self.prompt_template {
            set = set.with_grounding_file(p)?;
        }
        if let Some(t) = &self.correction_templates {
            for (style, path) in [
                (PromptStyle::Vanilla, &t.vanilla),
                (PromptStyle::Cot, &t.cot),
                (PromptStyle::CotKp, &t.cot_kp),
            ] {
                if let Some(p) = path {
                    set = set.with_correction_file(style, p)?;
                }
            }
        }
        Ok(set)
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    temperature: f64,
    messages: Vec<Message>,
}

#[derive(Serialize)]
struct Message {
    role: &'static str,
    content: Content,
}

#[derive(Serialize)]
#[serde(untagged)]
enum Content {
    Text(String),
    Parts(Vec<Part>),
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Part {
    Text { text: String },
    ImageUrl { image_url: ImageUrl },
}

#[derive(Serialize)]
struct ImageUrl {
    url: String,
}

/// Chat-completion transport shared by the grounding and correction clients.
struct ChatClient {
    cfg: HttpConfig,
    client: reqwest::blocking::Client,
    url: String,
}

impl ChatClient {
    fn new(cfg: HttpConfig) -> Result<Self, BackendError> {
        cfg.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        let url = format!("{}/chat/completions", cfg.endpoint.trim_end_matches('/'));
        Ok(Self { cfg, client, url })
    }

    fn body(&self, prompt: String, images: &[&Raster]) -> Result<String, BackendError> {
        let mut parts = vec![Part::Text { text: prompt }];
        for img in images {
            parts.push(Part::ImageUrl {
                image_url: ImageUrl {
                    url: format!("data:image/png;base64,{}", encode_png_base64(img)?),
                },
            });
        }
        let mut messages = Vec::with_capacity(2);
        if let Some(system) = &self.cfg.system_prompt {
            messages.push(Message {
                role: "system",
                content: Content::Text(system.clone()),
            });
        }
        messages.push(Message {
            role: "user",
            content: Content::Parts(parts),
        });
        let req = ChatRequest {
            model: &self.cfg.model_name,
            temperature: self.cfg.temperature,
            messages,
        };
        serde_json::to_string(&req).map_err(|e| BackendError::Config(e.to_string()))
    }

    fn api_key(&self) -> Option<String> {
        let var = self.cfg.api_key_env.as_deref().filter(|v| !v.is_empty())?;
        match std::env::var(var) {
            Ok(v) => Some(v),
            Err(_) => {
                warn!("environment variable {var} is not set; sending request without credentials");
                None
            }
        }
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let base = self.cfg.retry_backoff_ms as f64 * 2f64.powi(attempt as i32);
        let jitter = rand::rng().random_range(0.0..0.25);
        Duration::from_secs_f64(base * (1.0 + jitter) / 1000.0)
    }

    /// POST the body, retrying transport failures, 429 and 5xx replies.
    fn complete(&self, body: String) -> Result<String, BackendError> {
        let key = self.api_key();
        let mut attempt = 0;
        loop {
            let mut req = self
                .client
                .post(&self.url)
                .header(reqwest::header::CONTENT_TYPE, "application/json")
                .body(body.clone());
            if let Some(k) = &key {
                req = req.bearer_auth(k);
            }
            let retryable = match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    let text = resp.text().map_err(|e| BackendError::Transport {
                        attempts: attempt + 1,
                        message: e.to_string(),
                    });
                    if status.is_success() {
                        return extract_content(&text?);
                    }
                    let err = BackendError::Status {
                        status: status.as_u16(),
                        body: text.unwrap_or_default(),
                    };
                    if !(status.is_server_error() || status.as_u16() == 429) {
                        return Err(err);
                    }
                    err
                }
                Err(e) => BackendError::Transport {
                    attempts: attempt + 1,
                    message: e.to_string(),
                },
            };
            if attempt >= self.cfg.max_retries {
                return Err(retryable);
            }
            let wait = self.backoff(attempt);
            debug!("{} failed ({retryable}); retrying in {wait:?}", self.url);
            thread::sleep(wait);
            attempt += 1;
        }
    }
}

fn extract_content(text: &str) -> Result<String, BackendError> {
    let v: serde_json::Value =
        serde_json::from_str(text).map_err(|e| BackendError::MalformedReply(format!("{e}: {text}")))?;
    let content = &v["choices"][0]["message"]["content"];
    if let Some(s) = content.as_str() {
        return Ok(s.to_string());
    }
    if let Some(parts) = content.as_array() {
        let joined: String = parts
            .iter()
            .filter_map(|p| p["text"].as_str())
            .collect::<Vec<_>>()
            .join("");
        return Ok(joined);
    }
    Err(BackendError::MalformedReply(format!(
        "missing choices[0].message.content: {text}"
    )))
}

fn rescale(pred: GroundingPrediction, space: CoordinateSpace, dims: ImageDims) -> GroundingPrediction {
    let CoordinateSpace::Relative1000 = space else {
        return pred;
    };
    let sx = |v: u32| ((v as u64 * dims.width as u64) / 1000) as u32;
    let sy = |v: u32| ((v as u64 * dims.height as u64) / 1000) as u32;
    let target = match pred.target {
        Grounding::Box { bbox } => Grounding::Box {
            bbox: BBox::from_corners(
                Point::new(sx(bbox.x1), sy(bbox.y1)),
                Point::new(sx(bbox.x2), sy(bbox.y2)),
            ),
        },
        Grounding::Click { click } => Grounding::Click {
            click: Point::new(sx(click.x), sy(click.y)),
        },
    };
    GroundingPrediction {
        target,
        raw_text: pred.raw_text,
    }
}

pub struct HttpGrounder {
    chat: ChatClient,
    prompts: PromptSet,
}

impl HttpGrounder {
    pub fn new(cfg: HttpConfig) -> Result<Self, BackendError> {
        let prompts = cfg.prompts()?;
        Ok(Self {
            chat: ChatClient::new(cfg)?,
            prompts,
        })
    }

    pub fn ground_image(&self, query: &str, img: &Raster) -> Result<GroundingPrediction, BackendError> {
        let body = self.chat.body(self.prompts.grounding(query)?, &[img])?;
        let reply = self.chat.complete(body)?;
        let pred = parse_grounding_output(&reply, self.chat.cfg.output)?;
        Ok(rescale(pred, self.chat.cfg.coordinates, img.dims()))
    }
}

impl GroundingBackend for HttpGrounder {
    fn id(&self) -> String {
        format!("http:{}", self.chat.cfg.model_name)
    }

    fn ground(&self, req: &GroundingRequest<'_>) -> Result<GroundingPrediction, BackendError> {
        self.ground_image(req.query, req.image)
    }
}

pub struct HttpCorrector {
    chat: ChatClient,
    prompts: PromptSet,
}

impl HttpCorrector {
    pub fn new(cfg: HttpConfig) -> Result<Self, BackendError> {
        let prompts = cfg.prompts()?;
        Ok(Self {
            chat: ChatClient::new(cfg)?,
            prompts,
        })
    }

    /// Ask which of two annotated images better serves `query`. An answer
    /// without a valid tag surfaces as [`BackendError::is_unparseable_answer`].
    pub fn compare(
        &self,
        query: &str,
        img1: &Raster,
        img2: &Raster,
        style: PromptStyle,
    ) -> Result<CorrectionAnswer, BackendError> {
        let body = self.chat.body(self.prompts.correction(query, style)?, &[img1, img2])?;
        let reply = self.chat.complete(body)?;
        Ok(parse_correction_answer(&reply)?)
    }
}

impl CorrectionBackend for HttpCorrector {
    fn id(&self) -> String {
        format!("http:{}", self.chat.cfg.model_name)
    }

    fn correct(&self, req: &CorrectionRequest<'_>) -> Result<CorrectionAnswer, BackendError> {
        self.compare(req.query, req.images[0], req.images[1], req.style)
    }
}

pub fn http_ground(cfg: &HttpConfig, query: &str, img: &Raster) -> Result<GroundingPrediction, BackendError> {
    HttpGrounder::new(cfg.clone())?.ground_image(query, img)
}

pub fn http_correct(
    cfg: &HttpConfig,
    query: &str,
    img1: &Raster,
    img2: &Raster,
    style: PromptStyle,
) -> Result<CorrectionAnswer, BackendError> {
    HttpCorrector::new(cfg.clone())?.compare(query, img1, img2, style)
}
