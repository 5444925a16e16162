//! Read-only HTTP service over a loaded model, an optional caption index and
//! an optional split directory.
//!
//! Every request is independent: re-querying with a corrected prompt is just
//! another `POST /retrieve`.

use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use virtue_core::embedder::{EmbedInput, Model, Side, TaskInstruction};
use virtue_core::encoders::{Bbox, Image, VisualPrompt};
use virtue_core::numkernel::ParamStore;
use virtue_core::retrieval::{format_bbox, rank, EmbeddingIndex, ScarSample};
use virtue_scar::Split;

use crate::data::{image_path, read_split};

#[derive(Debug, Clone, Copy)]
pub struct Limits {
    /// Largest accepted request body.
    pub max_body_bytes: usize,
    /// Largest accepted image side after decoding.
    pub max_image_side: usize,
    /// Largest candidate list in one request.
    pub max_candidates: usize,
}

impl Default for Limits {
    fn default() -> Limits {
        Limits {
            max_body_bytes: 8 << 20,
            max_image_side: 2048,
            max_candidates: 1000,
        }
    }
}

pub struct AppState {
    pub model: Model,
    pub params: ParamStore,
    pub fingerprint: String,
    /// Swapped whole on rebuild so readers never see a partial index.
    index: RwLock<Option<Arc<EmbeddingIndex>>>,
    pub data_dir: Option<PathBuf>,
    pub limits: Limits,
}

impl AppState {
    pub fn new(model: Model, params: ParamStore) -> AppState {
        let fingerprint = params.fingerprint();
        AppState {
            model,
            params,
            fingerprint,
            index: RwLock::new(None),
            data_dir: None,
            limits: Limits::default(),
        }
    }

    pub fn with_data_dir(mut self, dir: PathBuf) -> AppState {
        self.data_dir = Some(dir);
        self
    }

    pub fn with_limits(mut self, limits: Limits) -> AppState {
        self.limits = limits;
        self
    }

    pub fn set_index(&self, index: EmbeddingIndex) {
        *self.index.write().unwrap_or_else(|e| e.into_inner()) = Some(Arc::new(index));
    }

    fn index(&self) -> Option<Arc<EmbeddingIndex>> {
        self.index.read().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

#[derive(Debug, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    status: StatusCode,
    error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    field: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, error: impl Into<String>) -> ApiError {
        ApiError {
            status,
            error: error.into(),
            field: None,
        }
    }

    fn field(field: &str, error: impl std::fmt::Display) -> ApiError {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            error: format!("{field}: {error}"),
            field: Some(field.to_string()),
        }
    }

    fn internal(e: impl std::fmt::Display) -> ApiError {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

type ApiResult<T> = std::result::Result<Json<T>, ApiError>;

/// Parses a JSON body, reporting the path of the offending field.
fn parse_body<T: DeserializeOwned>(body: &[u8]) -> std::result::Result<T, ApiError> {
    let mut de = serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        ApiError {
            status: StatusCode::BAD_REQUEST,
            error: if path == "." {
                format!("malformed request: {inner}")
            } else {
                format!("{path}: {inner}")
            },
            field: (path != ".").then_some(path),
        }
    })
}

/// An image sent with a request.
#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ImageRef {
    /// Base64-encoded PNG.
    Png(String),
    /// Raw `h×w×3` values in `[0, 1]`.
    Pixels(Image),
    /// The image of a stored sample.
    Sample { split: String, id: String },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedRequest {
    #[serde(default)]
    pub image: Option<ImageRef>,
    #[serde(default)]
    pub prompt: Option<VisualPrompt>,
    #[serde(default = "default_instruction")]
    pub instruction: String,
    /// Absolute `[x_min, y_min, width, height]`; fills the instruction's bbox
    /// slot. Defaults to the box prompt, else the whole image.
    #[serde(default)]
    pub bbox: Option<[f64; 4]>,
    #[serde(default)]
    pub text: Option<String>,
}

fn default_instruction() -> String {
    "scar".into()
}

fn default_k() -> usize {
    10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRef {
    pub split: String,
    pub id: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRequest {
    #[serde(default)]
    pub image: Option<ImageRef>,
    #[serde(default)]
    pub prompt: Option<VisualPrompt>,
    #[serde(default = "default_instruction")]
    pub instruction: String,
    #[serde(default)]
    pub bbox: Option<[f64; 4]>,
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default = "default_k")]
    pub k: usize,
    /// Captions to rank; otherwise the stored sample's candidates, otherwise
    /// the server index.
    #[serde(default)]
    pub candidates: Option<Vec<String>>,
    /// Stored sample supplying the image, box and candidates not given
    /// explicitly.
    #[serde(default)]
    pub sample: Option<SampleRef>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EmbedResponse {
    pub fingerprint: String,
    pub dim: usize,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RankedResult {
    pub rank: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub text: String,
    pub score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub is_gt: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RetrieveResponse {
    pub fingerprint: String,
    /// Prompt the query was embedded with, in normalised coordinates.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt: Option<VisualPrompt>,
    pub results: Vec<RankedResult>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncodedImage {
    pub width: usize,
    pub height: usize,
    pub png_base64: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleResponse {
    pub sample: ScarSample,
    pub image: EncodedImage,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexStatus {
    pub fingerprint: String,
    pub entries: usize,
    pub fresh: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub fingerprint: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub index: Option<IndexStatus>,
}

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.limits.max_body_bytes;
    Router::new()
        .route("/health", get(health))
        .route("/embed", post(embed))
        .route("/retrieve", post(retrieve))
        .route("/samples/{split}/{id}", get(sample))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

async fn health(State(state): State<Arc<AppState>>) -> Json<HealthResponse> {
    Json(HealthResponse {
        status: "ok".into(),
        fingerprint: state.fingerprint.clone(),
        index: state.index().map(|i| IndexStatus {
            fingerprint: i.fingerprint().to_string(),
            entries: i.len(),
            fresh: i.fingerprint() == state.fingerprint,
        }),
    })
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> std::result::Result<T, ApiError> + Send + 'static,
) -> std::result::Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?
}

async fn embed(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<EmbedResponse> {
    let req: EmbedRequest = parse_body(&body)?;
    blocking(move || {
        let image = match &req.image {
            Some(r) => Some(resolve_image(&state, r)?),
            None => None,
        };
        let (input, _) = build_input(&req.instruction, image, req.prompt, req.bbox, req.text, None)?;
        let z = state.model.embed(&state.params, &input).map_err(|e| ApiError::field("image", e))?;
        Ok(Json(EmbedResponse {
            fingerprint: state.fingerprint.clone(),
            dim: z.dim(),
            vector: z.values().to_vec(),
        }))
    })
    .await
}

async fn retrieve(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<RetrieveResponse> {
    let req: QueryRequest = parse_body(&body)?;
    if req.k == 0 {
        return Err(ApiError::field("k", "must be at least 1"));
    }
    blocking(move || run_retrieve(&state, req).map(Json)).await
}

fn run_retrieve(state: &AppState, req: QueryRequest) -> std::result::Result<RetrieveResponse, ApiError> {
    let stored = match &req.sample {
        Some(r) => Some(load_sample(state, &r.split, &r.id).map_err(|e| match e.status {
            StatusCode::NOT_FOUND => e,
            _ => ApiError::field("sample", e.error),
        })?),
        None => None,
    };
    let image = match (&req.image, &stored) {
        (Some(r), _) => Some(resolve_image(state, r)?),
        (None, Some((_, img))) => Some(Arc::clone(img)),
        (None, None) => None,
    };
    let stored_box = match (&req.image, &stored) {
        (None, Some((s, _))) => Some(s.bbox),
        _ => None,
    };
    let (input, prompt) = build_input(&req.instruction, image, req.prompt, req.bbox, req.text, stored_box)?;
    let q = state.model.embed(&state.params, &input).map_err(|e| ApiError::field("image", e))?;

    let ranked: Vec<(Option<String>, String, f64, Option<bool>)> = if let Some(texts) = &req.candidates {
        if texts.is_empty() || texts.len() > state.limits.max_candidates {
            return Err(ApiError::field(
                "candidates",
                format!("expected 1 to {} captions, got {}", state.limits.max_candidates, texts.len()),
            ));
        }
        let embs = embed_captions(state, texts)?;
        rank(&q, &embs)
            .map_err(ApiError::internal)?
            .into_iter()
            .map(|(i, s)| (None, texts[i].clone(), s, None))
            .collect()
    } else if let Some((sample, _)) = &stored {
        let cands = sample.candidates();
        let texts: Vec<String> = cands.iter().map(|c| c.text.clone()).collect();
        let embs = embed_captions(state, &texts)?;
        rank(&q, &embs)
            .map_err(ApiError::internal)?
            .into_iter()
            .map(|(i, s)| (None, texts[i].clone(), s, Some(cands[i].is_gt)))
            .collect()
    } else {
        let index = state
            .index()
            .ok_or_else(|| ApiError::field("candidates", "no candidates given and the server has no index"))?;
        index
            .search(&q, req.k, &state.fingerprint)
            .map_err(|e| ApiError::new(StatusCode::CONFLICT, e.to_string()))?
            .into_iter()
            .map(|h| {
                let text = h.payload.get("text").and_then(|t| t.as_str()).unwrap_or_default().to_string();
                (Some(h.id), text, h.score, None)
            })
            .collect()
    };
    Ok(RetrieveResponse {
        fingerprint: state.fingerprint.clone(),
        prompt,
        results: ranked
            .into_iter()
            .take(req.k)
            .enumerate()
            .map(|(i, (id, text, score, is_gt))| RankedResult {
                rank: i + 1,
                id,
                text,
                score,
                is_gt,
            })
            .collect(),
    })
}

fn embed_captions(
    state: &AppState,
    texts: &[String],
) -> std::result::Result<Vec<virtue_core::embedder::UnitEmbedding>, ApiError> {
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| {
            state
                .model
                .embed(&state.params, &EmbedInput::caption(t))
                .map_err(|e| ApiError::field(&format!("candidates[{i}]"), e))
        })
        .collect()
}

/// Query input plus the prompt actually used. `stored_box` is the absolute
/// box of a referenced sample, used when no prompt or bbox is given.
fn build_input(
    instruction: &str,
    image: Option<Arc<Image>>,
    prompt: Option<VisualPrompt>,
    bbox: Option<[f64; 4]>,
    text: Option<String>,
    stored_box: Option<[f64; 4]>,
) -> std::result::Result<(EmbedInput, Option<VisualPrompt>), ApiError> {
    let instruction = TaskInstruction::by_id(instruction).map_err(|e| ApiError::field("instruction", e))?;
    if let Some(p) = &prompt {
        p.validate().map_err(|e| ApiError::field("prompt", e))?;
    }
    if image.is_none() && prompt.is_some() {
        return Err(ApiError::field("prompt", "a visual prompt needs an image"));
    }
    let (w, h) = image
        .as_ref()
        .map(|i| (i.width() as f64, i.height() as f64))
        .unwrap_or((0.0, 0.0));
    let prompt = match (prompt, stored_box, &image) {
        (Some(p), _, _) => Some(p),
        (None, Some(b), Some(_)) if bbox.is_none() => {
            let [x, y, bw, bh] = Bbox::from_xywh(b).normalized(w, h);
            Some(VisualPrompt::boxed(x, y, bw, bh))
        }
        _ => None,
    };
    if let (Some(p), Some(img)) = (&prompt, &image) {
        p.validate_for(img.height(), img.width()).map_err(|e| ApiError::field("prompt", e))?;
    }
    let bbox = match (bbox, stored_box, &prompt) {
        (Some(b), _, _) => Some(b),
        (None, Some(b), _) => Some(b),
        (None, None, Some(VisualPrompt::Box { x_min, y_min, width, height })) => {
            Some([x_min * w, y_min * h, width * w, height * h])
        }
        _ if image.is_some() => Some([0.0, 0.0, w, h]),
        _ => None,
    };
    let bbox_text = match bbox {
        Some(b) => {
            let b = Bbox::from_xywh(b);
            if image.is_some() {
                b.validate(w, h).map_err(|e| ApiError::field("bbox", e))?;
            }
            Some(format_bbox(&b).map_err(|e| ApiError::field("bbox", e))?)
        }
        None if instruction.has_bbox_slot() => {
            return Err(ApiError::field("bbox", "this instruction needs a bbox or an image"));
        }
        None => None,
    };
    let input = EmbedInput {
        side: Side::Query,
        image,
        prompt: prompt.clone(),
        instruction,
        bbox_text,
        text,
    };
    Ok((input, prompt))
}

fn resolve_image(state: &AppState, r: &ImageRef) -> std::result::Result<Arc<Image>, ApiError> {
    let img = match r {
        ImageRef::Png(b64) => {
            let bytes = BASE64.decode(b64.trim()).map_err(|e| ApiError::field("image.png", e))?;
            Image::from_png_bytes(&bytes).map_err(|e| ApiError::field("image.png", e))?
        }
        ImageRef::Pixels(img) => img.clone(),
        ImageRef::Sample { split, id } => {
            return load_sample(state, split, id)
                .map(|(_, img)| img)
                .map_err(|e| ApiError::field("image.sample", e.error))
        }
    };
    let side = img.height().max(img.width());
    if side > state.limits.max_image_side {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("image side {side} exceeds {}", state.limits.max_image_side),
        ));
    }
    Ok(Arc::new(img))
}

fn load_sample(state: &AppState, split: &str, id: &str) -> std::result::Result<(ScarSample, Arc<Image>), ApiError> {
    let split: Split = split.parse().map_err(|e| ApiError::field("split", e))?;
    let dir = state
        .data_dir
        .as_ref()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "the server has no sample directory"))?;
    let samples = read_split(&dir.join(split.file_name())).map_err(|e| ApiError::new(StatusCode::NOT_FOUND, e.to_string()))?;
    let sample = samples
        .into_iter()
        .find(|s| s.id == id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no sample {id} in the {split} split")))?;
    let image = Image::load(&image_path(dir, &sample)).map_err(ApiError::internal)?;
    Ok((sample, Arc::new(image)))
}

async fn sample(
    State(state): State<Arc<AppState>>,
    Path((split, id)): Path<(String, String)>,
) -> ApiResult<SampleResponse> {
    blocking(move || {
        let (sample, image) = load_sample(&state, &split, &id)?;
        let png = image.to_png_bytes().map_err(ApiError::internal)?;
        Ok(Json(SampleResponse {
            sample,
            image: EncodedImage {
                width: image.width(),
                height: image.height(),
                png_base64: BASE64.encode(png),
            },
        }))
    })
    .await
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(state: Arc<AppState>, addr: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}
