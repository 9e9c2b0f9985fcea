//! HTTP render service over one immutable scene.
//!
//! `GET /scene/info` describes the loaded scene, `POST /render` takes a
//! [`RenderRequest`] and answers with a PNG. With `?layer=semantic` the PNG shows the
//! argmax class per pixel through [`SEMANTIC_PALETTE`].

use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{header, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::camera::CameraDesc;
use crate::decoder::{Decoder, EmbeddingConfig, EmbeddingOverrides};
use crate::error::Error;
use crate::img::{encode_png, Image};
use crate::scene::SplatScene;
use crate::trainer::render_decoded;

/// Largest `width · height` a request may ask for unless configured otherwise.
pub const DEFAULT_MAX_PIXELS: u64 = 4_000_000;

/// 64 fixed colors for semantic classes. Class `k` uses entry `k % 64`; entry `k` spreads
/// the bits of `k` over the high bits of the three channels so neighbours differ strongly.
pub const SEMANTIC_PALETTE: [[u8; 3]; 64] = build_palette();

const fn build_palette() -> [[u8; 3]; 64] {
    let mut out = [[0u8; 3]; 64];
    let mut i = 0;
    while i < 64 {
        let mut c = i;
        let mut j = 0;
        let mut rgb = [0u8; 3];
        while j < 3 {
            let mut ch = 0;
            while ch < 3 {
                rgb[ch] |= (((c >> ch) & 1) as u8) << (7 - j);
                ch += 1;
            }
            c >>= 3;
            j += 1;
        }
        out[i] = rgb;
        i += 1;
    }
    out
}

pub fn class_color(class: u32) -> [u8; 3] {
    SEMANTIC_PALETTE[class as usize % SEMANTIC_PALETTE.len()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderRequest {
    pub camera: CameraDesc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overrides: Option<EmbeddingOverrides>,
    #[serde(default)]
    pub background: [f64; 3],
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layer {
    #[default]
    Rgb,
    Semantic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingFlags {
    pub pixel: bool,
    pub campos: bool,
    pub camrot: bool,
}

impl From<EmbeddingConfig> for EmbeddingFlags {
    fn from(c: EmbeddingConfig) -> Self {
        EmbeddingFlags {
            pixel: c.use_pixel,
            campos: c.use_campos,
            camrot: c.use_camrot,
        }
    }
}

/// Body of `GET /scene/info`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneInfo {
    pub n_gaussians: usize,
    pub feature_dim: usize,
    pub classes: usize,
    pub embeddings: EmbeddingFlags,
    pub max_pixels: u64,
}

/// Why a render request was refused; each maps to one HTTP status.
#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("image of {0} pixels exceeds the limit of {1}")]
    TooLarge(u64, u64),
    #[error("{0}")]
    Unprocessable(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::TooLarge(..) => StatusCode::PAYLOAD_TOO_LARGE,
            ServiceError::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        (self.status(), self.to_string()).into_response()
    }
}

/// The loaded scene plus service limits. Shared read-only between requests.
#[derive(Debug)]
pub struct SceneService {
    pub scene: SplatScene,
    pub decoder: Decoder,
    pub max_pixels: u64,
    /// Files served under `/`, typically the viewer bundle.
    pub static_dir: Option<PathBuf>,
}

impl SceneService {
    pub fn new(scene: SplatScene, decoder: Decoder) -> Self {
        SceneService {
            scene,
            decoder,
            max_pixels: DEFAULT_MAX_PIXELS,
            static_dir: None,
        }
    }

    pub fn info(&self) -> SceneInfo {
        SceneInfo {
            n_gaussians: self.scene.len(),
            feature_dim: self.scene.feature_dim,
            classes: self.decoder.class_count,
            embeddings: self.decoder.config.into(),
            max_pixels: self.max_pixels,
        }
    }

    /// Parses and renders one request body. Pure in `(self, body, layer)`.
    pub fn render_bytes(&self, body: &[u8], layer: Layer) -> Result<Vec<u8>, ServiceError> {
        let req: RenderRequest =
            serde_json::from_slice(body).map_err(|e| ServiceError::BadRequest(format!("request body: {e}")))?;
        self.render(&req, layer)
    }

    pub fn render(&self, req: &RenderRequest, layer: Layer) -> Result<Vec<u8>, ServiceError> {
        let pixels = req.camera.w as u64 * req.camera.h as u64;
        if pixels > self.max_pixels {
            return Err(ServiceError::TooLarge(pixels, self.max_pixels));
        }
        if req.background.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return Err(ServiceError::BadRequest("background must lie in [0, 1]".into()));
        }
        let overrides = req.overrides.clone().unwrap_or_default();
        overrides
            .check(&self.decoder.config)
            .map_err(|e| ServiceError::Unprocessable(e.to_string()))?;
        let cam = req.camera.to_camera().map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        let decoded = render_decoded(&self.scene, &self.decoder, &cam, &req.background, &overrides)
            .map_err(|e| match e {
                Error::InvalidInput(m) => ServiceError::Unprocessable(m),
                other => ServiceError::Internal(other.to_string()),
            })?;
        let png = match layer {
            Layer::Rgb => Image::new(cam.width, cam.height, 3, decoded.rgb).and_then(|img| img.encode_png()),
            Layer::Semantic => {
                if self.decoder.class_count == 0 {
                    return Err(ServiceError::Unprocessable("scene has no semantic head".into()));
                }
                let rgb: Vec<u8> = decoded.labels().into_iter().flat_map(class_color).collect();
                RgbImage::from_raw(cam.width, cam.height, rgb)
                    .ok_or_else(|| Error::Contract("label buffer size".into()))
                    .and_then(|img| encode_png(&img))
            }
        };
        png.map_err(|e| ServiceError::Internal(e.to_string()))
    }
}

#[derive(Debug, Deserialize)]
struct RenderQuery {
    #[serde(default)]
    layer: Layer,
}

async fn info_handler(State(svc): State<Arc<SceneService>>) -> Json<SceneInfo> {
    Json(svc.info())
}

async fn render_handler(
    State(svc): State<Arc<SceneService>>,
    Query(q): Query<RenderQuery>,
    body: Bytes,
) -> Result<Response, ServiceError> {
    let png = tokio::task::spawn_blocking(move || svc.render_bytes(&body, q.layer))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))??;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js" | "mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("png") => "image/png",
        Some("svg") => "image/svg+xml",
        _ => "application/octet-stream",
    }
}

async fn static_handler(State(svc): State<Arc<SceneService>>, uri: Uri) -> Response {
    let Some(root) = &svc.static_dir else {
        return StatusCode::NOT_FOUND.into_response();
    };
    let rel = Path::new(uri.path().trim_start_matches('/'));
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return StatusCode::NOT_FOUND.into_response();
    }
    let mut path = root.join(rel);
    if rel.as_os_str().is_empty() || path.is_dir() {
        path = path.join("index.html");
    }
    match tokio::task::spawn_blocking(move || std::fs::read(&path).map(|b| (b, path))).await {
        Ok(Ok((bytes, path))) => ([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response(),
        _ => StatusCode::NOT_FOUND.into_response(),
    }
}

pub fn router(svc: Arc<SceneService>) -> Router {
    Router::new()
        .route("/scene/info", get(info_handler))
        .route("/render", post(render_handler))
        .fallback(get(static_handler))
        .with_state(svc)
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(svc: Arc<SceneService>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(svc)).await
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_entries_are_distinct() {
        let mut seen = std::collections::HashSet::new();
        assert!(SEMANTIC_PALETTE.iter().all(|c| seen.insert(*c)));
        assert_eq!(SEMANTIC_PALETTE[1], [128, 0, 0]);
        assert_eq!(SEMANTIC_PALETTE[2], [0, 128, 0]);
        assert_eq!(SEMANTIC_PALETTE[7], [128, 128, 128]);
        assert_eq!(class_color(65), SEMANTIC_PALETTE[1]);
    }

    #[test]
    fn request_without_optional_fields_parses() {
        let body = r#"{"camera":{"w":4,"h":3,"fx":5,"fy":5,"cx":2,"cy":1.5,
            "R":[1,0,0,0,1,0,0,0,1],"t":[0,0,3]}}"#;
        let req: RenderRequest = serde_json::from_str(body).unwrap();
        assert_eq!(req.background, [0.0; 3]);
        assert!(req.overrides.is_none());
        assert!(!serde_json::to_string(&req).unwrap().contains("overrides"));
    }
}
