//! Read-only HTTP API over a saved artifact.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde_json::{json, Value};
use tower_http::services::ServeDir;

use audit_core::artifact::{self, AuditArtifact};
use audit_core::model::NeuronRef;
use audit_core::neuron_clusters::{cluster_of, ClusterMembership};
use audit_core::neurons::{partition, THRESHOLD_MAX, THRESHOLD_MIN};
use audit_core::subgroups::{Subgroup, SubgroupStatus};

pub const CACHE_CONTROL: &str = "public, max-age=31536000, immutable";

pub struct AppState {
    pub artifact: AuditArtifact,
    pub dir: PathBuf,
    layer_order: Vec<String>,
    slider_default: f64,
}

impl AppState {
    pub fn new(artifact: AuditArtifact, dir: PathBuf) -> Self {
        let layer_order = artifact.model.layers.iter().map(|l| l.id.clone()).collect();
        let slider_default = artifact
            .run_config
            .get("slider_default")
            .and_then(Value::as_f64)
            .unwrap_or(THRESHOLD_MIN);
        AppState {
            artifact,
            dir,
            layer_order,
            slider_default,
        }
    }

    /// Loads and validates the artifact at `path` (directory or manifest).
    pub fn load(path: &Path) -> audit_core::Result<Self> {
        let a = artifact::load(path)?;
        let dir = if path.is_dir() {
            path.to_path_buf()
        } else {
            path.parent().map(Path::to_path_buf).unwrap_or_default()
        };
        Ok(AppState::new(a, dir))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn not_found(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::NOT_FOUND,
            code: "not_found",
            message: message.into(),
        }
    }

    fn invalid(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            code: "invalid_parameter",
            message: message.into(),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            code: "internal",
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": { "code": self.code, "message": self.message } });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;
type Shared = State<Arc<AppState>>;
type Params = Query<HashMap<String, String>>;

fn ok(v: Value) -> ApiResult {
    Ok(Json(v).into_response())
}

fn subgroup_summary(s: &Subgroup) -> Value {
    json!({
        "subgroup_id": s.subgroup_id,
        "size": s.size(),
        "correct": s.correct,
        "misclassified": s.size() as u64 - s.correct,
        "accuracy": s.accuracy,
        "status": s.status,
    })
}

fn parse_id(raw: &str, what: &str) -> Result<usize, ApiError> {
    raw.parse()
        .map_err(|_| ApiError::not_found(format!("unknown {what} `{raw}`")))
}

fn find_subgroup<'a>(a: &'a AuditArtifact, raw: &str) -> Result<&'a Subgroup, ApiError> {
    let id = parse_id(raw, "subgroup")?;
    a.subgroup(id)
        .ok_or_else(|| ApiError::not_found(format!("unknown subgroup {id}")))
}

fn neuron_ref(a: &AuditArtifact, layer: &str, channel: &str) -> Result<NeuronRef, ApiError> {
    let channel: usize = channel
        .parse()
        .map_err(|_| ApiError::not_found(format!("unknown neuron {layer}:{channel}")))?;
    let n = NeuronRef::new(layer, channel);
    if a.model.contains(&n) {
        Ok(n)
    } else {
        Err(ApiError::not_found(format!("unknown neuron {n}")))
    }
}

async fn meta(State(s): Shared) -> ApiResult {
    let a = &s.artifact;
    ok(json!({
        "schema_version": a.schema_version,
        "overall_accuracy": a.overall_accuracy,
        "class_names": a.model.class_names,
        "model": a.model,
        "counts": {
            "images": a.images.len(),
            "subgroups": a.subgroups.len(),
            "underperforming": a.subgroups.iter().filter(|s| s.status == SubgroupStatus::Underperforming).count(),
            "pairings": a.pairings.len(),
            "concepts": a.concepts.len(),
            "clusters": a.clusters.len(),
        },
        "threshold": { "min": THRESHOLD_MIN, "max": THRESHOLD_MAX, "default": s.slider_default },
        "saliency": {
            "layer_id": a.saliency.layer_id,
            "colormap": a.saliency.colormap,
            "alpha": a.saliency.alpha,
            "available": !a.saliency.entries.is_empty(),
        },
        "embedder": a.embedder,
        "notices": a.notices,
        "run_config": a.run_config,
    }))
}

async fn subgroups(State(s): Shared, Query(q): Params) -> ApiResult {
    let filter = match q.get("status") {
        None => None,
        Some(raw) => Some(
            raw.parse::<SubgroupStatus>()
                .map_err(|_| ApiError::invalid(format!("unknown status `{raw}`")))?,
        ),
    };
    let mut list: Vec<&Subgroup> = s
        .artifact
        .subgroups
        .iter()
        .filter(|sg| filter.is_none_or(|f| sg.status == f))
        .collect();
    list.sort_by(|a, b| a.accuracy.total_cmp(&b.accuracy).then(a.subgroup_id.cmp(&b.subgroup_id)));
    ok(json!({ "subgroups": list.into_iter().map(subgroup_summary).collect::<Vec<_>>() }))
}

async fn subgroup(State(s): Shared, UrlPath(id): UrlPath<String>) -> ApiResult {
    let a = &s.artifact;
    let sg = find_subgroup(a, &id)?;
    let members: Vec<Value> = sg
        .member_ids
        .iter()
        .filter_map(|m| a.image(m))
        .map(|img| {
            json!({
                "image_id": img.image_id,
                "true_label": img.true_label,
                "predicted_label": img.predicted_label,
                "correct": img.true_label == img.predicted_label,
                "scores": img.scores,
                "attributes": img.attributes,
                "thumbnail": format!("/api/images/{}", img.image_id),
            })
        })
        .collect();
    let mut v = subgroup_summary(sg);
    v["embedding"] = json!(sg.embedding);
    v["confusion"] = json!(sg.confusion);
    v["members"] = json!(members);
    v["pairing"] = json!(a.pairing_for(sg.subgroup_id));
    ok(v)
}

async fn pairing(State(s): Shared, UrlPath(id): UrlPath<String>) -> ApiResult {
    let a = &s.artifact;
    let sg = find_subgroup(a, &id)?;
    let p = a
        .pairing_for(sg.subgroup_id)
        .ok_or_else(|| ApiError::not_found(format!("subgroup {} has no pairing", sg.subgroup_id)))?;
    let well = a
        .subgroup(p.well_id)
        .ok_or_else(|| ApiError::internal("pairing references a missing subgroup"))?;
    ok(json!({
        "under_id": p.under_id,
        "well_id": p.well_id,
        "distance": p.distance,
        "under": subgroup_summary(sg),
        "well": subgroup_summary(well),
        "under_confusion": sg.confusion,
        "well_confusion": well.confusion,
    }))
}

async fn confusion(State(s): Shared, UrlPath(id): UrlPath<String>) -> ApiResult {
    let a = &s.artifact;
    let sg = find_subgroup(a, &id)?;
    ok(json!({
        "subgroup_id": sg.subgroup_id,
        "class_names": a.model.class_names,
        "matrix": sg.confusion,
    }))
}

async fn image(State(s): Shared, UrlPath(id): UrlPath<String>) -> ApiResult {
    let img = s
        .artifact
        .image(&id)
        .ok_or_else(|| ApiError::not_found(format!("unknown image `{id}`")))?;
    let bytes = std::fs::read(s.dir.join(&img.thumbnail))
        .map_err(|e| ApiError::internal(format!("thumbnail unreadable: {e}")))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], Body::from(bytes)).into_response())
}

async fn gradcam(State(s): Shared, UrlPath(id): UrlPath<String>, Query(q): Params) -> ApiResult {
    let a = &s.artifact;
    let img = a
        .image(&id)
        .ok_or_else(|| ApiError::not_found(format!("unknown image `{id}`")))?;
    let class = match q.get("class") {
        None => img.predicted_label,
        Some(raw) => {
            let c: usize = raw
                .parse()
                .map_err(|_| ApiError::invalid(format!("class must be an integer, got `{raw}`")))?;
            if c >= a.model.class_names.len() {
                return Err(ApiError::invalid(format!("class {c} out of range")));
            }
            c
        }
    };
    let entry = a
        .saliency
        .entries
        .iter()
        .find(|e| e.image_id == id && e.target_class == class)
        .ok_or_else(|| ApiError::not_found(format!("no saliency for image `{id}` class {class}")))?;
    ok(json!({
        "image_id": id,
        "target_class": class,
        "predicted": entry.predicted,
        "prediction": { "label": img.predicted_label, "scores": img.scores },
        "true_label": img.true_label,
        "layer_id": a.saliency.layer_id,
        "height": entry.height,
        "width": entry.width,
        "heatmap": entry.heatmap,
        "overlay": format!("/assets/{}", entry.overlay),
        "colormap": a.saliency.colormap,
        "alpha": a.saliency.alpha,
    }))
}

/// Parses a slider value; anything outside `[0.5, 1.0]` is rejected.
pub fn parse_threshold(raw: Option<&String>, default: f64) -> Result<f64, ApiError> {
    let t = match raw {
        None => default,
        Some(r) => r
            .parse::<f64>()
            .map_err(|_| ApiError::invalid(format!("threshold must be a number, got `{r}`")))?,
    };
    if !(THRESHOLD_MIN..=THRESHOLD_MAX).contains(&t) {
        return Err(ApiError::invalid(format!(
            "threshold {t} outside [{THRESHOLD_MIN}, {THRESHOLD_MAX}]"
        )));
    }
    Ok(t)
}

async fn neurons(State(s): Shared, UrlPath(id): UrlPath<String>, Query(q): Params) -> ApiResult {
    let a = &s.artifact;
    let under = parse_id(&id, "pairing")?;
    let threshold = parse_threshold(q.get("threshold"), s.slider_default)?;
    let scores = a
        .scores_for(under)
        .ok_or_else(|| ApiError::not_found(format!("unknown pairing {under}")))?;
    let p = partition(&scores.under, &scores.well, threshold, &s.layer_order)
        .map_err(|e| ApiError::internal(e.to_string()))?;
    ok(json!({
        "under_id": scores.under_id,
        "well_id": scores.well_id,
        "threshold": p.threshold,
        "columns": {
            "under_only": p.under_only,
            "both": p.both,
            "well_only": p.well_only,
        },
    }))
}

async fn concept(State(s): Shared, UrlPath((layer, channel)): UrlPath<(String, String)>) -> ApiResult {
    let a = &s.artifact;
    let n = neuron_ref(a, &layer, &channel)?;
    let c = a
        .concept(&n)
        .ok_or_else(|| ApiError::not_found(format!("no concept for neuron {n}")))?;
    let scores: Vec<Value> = a
        .neuron_scores
        .iter()
        .map(|ps| {
            let find = |v: &[audit_core::neurons::NeuronActivationScore]| {
                v.iter().find(|x| x.neuron == n).map_or(0.0, |x| x.score)
            };
            json!({
                "under_id": ps.under_id,
                "well_id": ps.well_id,
                "under_score": find(&ps.under),
                "well_score": find(&ps.well),
            })
        })
        .collect();
    let patches: Vec<Value> = c
        .patches
        .iter()
        .map(|p| {
            json!({
                "patch_id": p.patch_id,
                "source_image_id": p.source_image_id,
                "top": p.bbox.top,
                "left": p.bbox.left,
                "size": p.bbox.size,
                "activation": p.activation,
                "url": format!("/assets/{}", p.asset),
            })
        })
        .collect();
    ok(json!({ "neuron": n, "patches": patches, "scores": scores }))
}

async fn cluster(State(s): Shared, UrlPath((layer, channel)): UrlPath<(String, String)>) -> ApiResult {
    let a = &s.artifact;
    let n = neuron_ref(a, &layer, &channel)?;
    let v = match cluster_of(&a.clusters, &n) {
        ClusterMembership::Clustered {
            cluster_id,
            co_members,
        } => json!({
            "neuron": n,
            "clustered": true,
            "cluster_id": cluster_id,
            "co_members": co_members,
        }),
        ClusterMembership::NotClustered => json!({
            "neuron": n,
            "clustered": false,
            "cluster_id": null,
            "co_members": [],
        }),
    };
    ok(v)
}

async fn openapi() -> ApiResult {
    ok(openapi_document())
}

async fn fallback() -> ApiError {
    ApiError::not_found("no such endpoint")
}

async fn immutable(mut res: Response) -> Response {
    if res.status().is_success() {
        res.headers_mut()
            .insert(header::CACHE_CONTROL, HeaderValue::from_static(CACHE_CONTROL));
    }
    res
}

/// Builds the router. `ui` optionally points at a directory of static UI
/// files served at `/`.
pub fn router(state: Arc<AppState>, ui: Option<PathBuf>) -> Router {
    let assets = ServeDir::new(&state.dir);
    let mut r = Router::new()
        .route("/api/meta", get(meta))
        .route("/api/subgroups", get(subgroups))
        .route("/api/subgroups/{id}", get(subgroup))
        .route("/api/subgroups/{id}/pairing", get(pairing))
        .route("/api/subgroups/{id}/confusion", get(confusion))
        .route("/api/images/{image_id}", get(image))
        .route("/api/images/{image_id}/gradcam", get(gradcam))
        .route("/api/pairings/{under_id}/neurons", get(neurons))
        .route("/api/neurons/{layer}/{channel}/concept", get(concept))
        .route("/api/neurons/{layer}/{channel}/cluster", get(cluster))
        .route("/api/openapi.json", get(openapi))
        .nest_service("/assets", assets);
    r = match ui {
        Some(dir) => r.fallback_service(ServeDir::new(dir)),
        None => r.fallback(fallback),
    };
    r.layer(axum::middleware::map_response(immutable)).with_state(state)
}

pub fn openapi_document() -> Value {
    let param = |name: &str, location: &str, ty: &str, required: bool| {
        json!({ "name": name, "in": location, "required": required, "schema": { "type": ty } })
    };
    let get_op = |summary: &str, params: Vec<Value>, content: &str| {
        json!({
            "get": {
                "summary": summary,
                "parameters": params,
                "responses": {
                    "200": { "description": "OK", "content": { content: {} } },
                    "404": { "description": "Unknown id", "content": { "application/json": { "schema": { "$ref": "#/components/schemas/Error" } } } },
                    "422": { "description": "Invalid parameter", "content": { "application/json": { "schema": { "$ref": "#/components/schemas/Error" } } } }
                }
            }
        })
    };
    let js = "application/json";
    json!({
        "openapi": "3.0.3",
        "info": { "title": "Audit artifact API", "version": artifact::SCHEMA_VERSION.to_string() },
        "paths": {
            "/api/meta": get_op("Run metadata, model manifest and slider bounds", vec![], js),
            "/api/subgroups": get_op("Subgroups sorted by ascending accuracy", vec![param("status", "query", "string", false)], js),
            "/api/subgroups/{id}": get_op("One subgroup with its members", vec![param("id", "path", "integer", true)], js),
            "/api/subgroups/{id}/pairing": get_op("Paired well-performing subgroup", vec![param("id", "path", "integer", true)], js),
            "/api/subgroups/{id}/confusion": get_op("Confusion matrix, rows true and columns predicted", vec![param("id", "path", "integer", true)], js),
            "/api/images/{image_id}": get_op("Thumbnail PNG", vec![param("image_id", "path", "string", true)], "image/png"),
            "/api/images/{image_id}/gradcam": get_op("Grad-CAM heatmap and overlay", vec![param("image_id", "path", "string", true), param("class", "query", "integer", false)], js),
            "/api/pairings/{under_id}/neurons": get_op("Three-column neuron partition at a threshold in [0.5, 1.0]", vec![param("under_id", "path", "integer", true), param("threshold", "query", "number", false)], js),
            "/api/neurons/{layer}/{channel}/concept": get_op("Concept patches and activation scores of a neuron", vec![param("layer", "path", "string", true), param("channel", "path", "integer", true)], js),
            "/api/neurons/{layer}/{channel}/cluster": get_op("Cluster membership of a neuron", vec![param("layer", "path", "string", true), param("channel", "path", "integer", true)], js)
        },
        "components": {
            "schemas": {
                "Error": {
                    "type": "object",
                    "properties": {
                        "error": {
                            "type": "object",
                            "properties": { "code": { "type": "string" }, "message": { "type": "string" } }
                        }
                    }
                }
            }
        }
    })
}

pub async fn serve(state: AppState, host: &str, port: u16, ui: Option<PathBuf>) -> anyhow::Result<()> {
    let app = router(Arc::new(state), ui);
    let listener = tokio::net::TcpListener::bind((host, port)).await?;
    log::info!("serving on http://{}", listener.local_addr()?);
    axum::serve(listener, app).await?;
    Ok(())
}
