//! Session workbench behind a small JSON-over-HTTP API.
//!
//! A session owns one scene. Clients fetch a frame, submit a prompt for a
//! preview, then execute it; each execution appends to an append-only
//! history that replays to the same scene state. Requests on one session are
//! served in arrival order through a fair lock.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use parking_lot::{FairMutex, RwLock};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::autoprompt::{self, SelectorRequest, SelectorResponse};
use crate::geometry::{self, Camera, CameraIntrinsics, CameraSamplingConfig};
use crate::harness;
use crate::planner::{self, PlanParams, PrimitiveKind, Waypoint};
use crate::predictor::{GeometricPredictor, Observation, PredictedAction, Predictor, SolverConfig};
use crate::prompt::{FieldIssue, PromptRecord};
use crate::sim::{self, ExecParams, ExecutionResult, JointMotion, Scene, SceneDescription, SceneKind};

pub const FINGERPRINT_HEADER: &str = "x-config-fingerprint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub intrinsics: CameraIntrinsics,
    pub camera: CameraSamplingConfig,
    pub solver: SolverConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            intrinsics: CameraIntrinsics::desk_default(),
            camera: CameraSamplingConfig::default(),
            solver: SolverConfig::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown scene kind {0:?}")]
    UnknownKind(String),
    #[error("no session {0}")]
    UnknownSession(u64),
    #[error("prompt failed validation")]
    InvalidPrompt(Vec<FieldIssue>),
    #[error("malformed request: {0}")]
    InvalidRequest(String),
    #[error("primitive {0} is not supported by single-prompt sessions")]
    UnsupportedPrimitive(PrimitiveKind),
    #[error("no previewed action to execute")]
    NoPendingAction,
    #[error("prediction failed: {0}")]
    Prediction(String),
    #[error("execution failed: {0}")]
    Execution(String),
    #[error("selector request rejected: {0}")]
    Selector(String),
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::UnknownKind(_) => "unknown_kind",
            ServiceError::UnknownSession(_) => "unknown_session",
            ServiceError::InvalidPrompt(_) => "invalid_prompt",
            ServiceError::InvalidRequest(_) => "invalid_request",
            ServiceError::UnsupportedPrimitive(_) => "unsupported_primitive",
            ServiceError::NoPendingAction => "no_pending_action",
            ServiceError::Prediction(_) => "prediction_failed",
            ServiceError::Execution(_) => "execution_failed",
            ServiceError::Selector(_) => "invalid_selector_request",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::UnknownSession(_) => StatusCode::NOT_FOUND,
            ServiceError::NoPendingAction => StatusCode::CONFLICT,
            ServiceError::Execution(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        }
    }
}

pub type Result<T> = std::result::Result<T, ServiceError>;

/// Scene and camera a session or CLI run starts from.
pub fn seeded_setup(cfg: &ServiceConfig, kind: SceneKind, seed: u64) -> (Scene, Camera) {
    let scene = Scene::build(kind, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = geometry::sample_camera_pose(&mut rng, &cfg.camera, &scene.focus());
    (scene, Camera::new(cfg.intrinsics, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameView {
    pub keyframe: usize,
    pub width: u32,
    pub height: u32,
    pub camera: Camera,
    pub rgb_png_base64: String,
    /// Depth raster in the crate's binary depth format, base64.
    pub depth_base64: String,
}

impl FrameView {
    pub fn capture(scene: &Scene, camera: &Camera, keyframe: usize) -> Self {
        let (rgb, depth) = sim::render(scene, &camera.intrinsics, &camera.extrinsics);
        Self {
            keyframe,
            width: rgb.width(),
            height: rgb.height(),
            camera: *camera,
            rgb_png_base64: autoprompt::encode_png(&rgb),
            depth_base64: base64::engine::general_purpose::STANDARD.encode(depth.to_bytes()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preview {
    pub prompt: PromptRecord,
    pub primitive: PrimitiveKind,
    pub target: JointMotion,
    pub action: PredictedAction,
    pub waypoints: Vec<Waypoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub prompt: PromptRecord,
    pub primitive: PrimitiveKind,
    pub target: JointMotion,
    pub action: PredictedAction,
    pub result: ExecutionResult,
}

/// Everything needed to rebuild a session's scene state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionHistory {
    pub scene: SceneDescription,
    pub camera: Camera,
    pub entries: Vec<HistoryEntry>,
}

impl SessionHistory {
    /// Re-executes the recorded actions on a fresh scene.
    pub fn replay(&self) -> std::result::Result<Scene, sim::SimError> {
        let mut scene = Scene::from_description(&self.scene)?;
        for entry in &self.entries {
            let params = ExecParams {
                primitive: entry.primitive,
                target: entry.target,
                ..ExecParams::default()
            };
            sim::execute(&mut scene, &entry.action.to_contact_action(), &params)?;
        }
        Ok(scene)
    }
}

pub struct Session {
    pub id: u64,
    pub scene: Scene,
    pub camera: Camera,
    description: SceneDescription,
    pending: Option<Preview>,
    history: Vec<HistoryEntry>,
}

impl Session {
    pub fn keyframe(&self) -> usize {
        self.history.len()
    }

    pub fn frame(&self) -> FrameView {
        FrameView::capture(&self.scene, &self.camera, self.keyframe())
    }

    pub fn history(&self) -> SessionHistory {
        SessionHistory {
            scene: self.description.clone(),
            camera: self.camera,
            entries: self.history.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub kind: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmitPrompt {
    pub prompt: Value,
    pub primitive: String,
    #[serde(default)]
    pub target: Option<JointMotion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Created {
    pub session_id: u64,
    pub frame: FrameView,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Executed {
    pub result: ExecutionResult,
    pub frame: FrameView,
}

/// Shared state of the service: its config and the live sessions.
pub struct Workbench {
    config: ServiceConfig,
    fingerprint: String,
    predictor: GeometricPredictor,
    next_id: AtomicU64,
    sessions: RwLock<HashMap<u64, Arc<FairMutex<Session>>>>,
}

impl Workbench {
    pub fn new(config: ServiceConfig) -> Self {
        Self {
            fingerprint: harness::fingerprint(&config),
            predictor: GeometricPredictor { config: config.solver },
            config,
            next_id: AtomicU64::new(1),
            sessions: RwLock::new(HashMap::new()),
        }
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    fn session(&self, id: u64) -> Result<Arc<FairMutex<Session>>> {
        self.sessions.read().get(&id).cloned().ok_or(ServiceError::UnknownSession(id))
    }

    pub fn create_session(&self, kind: &str, seed: u64) -> Result<Created> {
        let kind: SceneKind = kind.parse().map_err(|_| ServiceError::UnknownKind(kind.to_string()))?;
        let (scene, camera) = seeded_setup(&self.config, kind, seed);
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let session = Session {
            id,
            description: scene.description(),
            scene,
            camera,
            pending: None,
            history: Vec::new(),
        };
        let frame = session.frame();
        self.sessions.write().insert(id, Arc::new(FairMutex::new(session)));
        Ok(Created { session_id: id, frame })
    }

    pub fn frame(&self, id: u64) -> Result<FrameView> {
        Ok(self.session(id)?.lock().frame())
    }

    /// Predicts and plans without touching the scene.
    pub fn submit_prompt(&self, id: u64, request: &SubmitPrompt) -> Result<Preview> {
        let session = self.session(id)?;
        let mut s = session.lock();
        let record: PromptRecord =
            serde_json::from_value(request.prompt.clone()).map_err(|e| ServiceError::InvalidRequest(format!("prompt: {e}")))?;
        let prompt = record.validate().map_err(|e| ServiceError::InvalidPrompt(e.issues))?;
        let primitive: PrimitiveKind = request
            .primitive
            .parse()
            .map_err(|_| ServiceError::InvalidRequest(format!("unknown primitive {:?}", request.primitive)))?;
        if primitive == PrimitiveKind::Rotate {
            return Err(ServiceError::UnsupportedPrimitive(primitive));
        }
        let target = request.target.unwrap_or(if primitive == s.scene.kind.opening_primitive() {
            JointMotion::Open
        } else {
            JointMotion::Close
        });
        let (_, depth) = sim::render(&s.scene, &s.camera.intrinsics, &s.camera.extrinsics);
        let obs = Observation {
            depth: &depth,
            camera: &s.camera,
            scene: Some(&s.scene),
        };
        let action = self.predictor.predict(&prompt, &obs).map_err(|e| ServiceError::Prediction(e.to_string()))?;
        let params = ExecParams::default();
        let plan = PlanParams {
            d_pre: params.d_pre,
            d_move: sim::move_distance(&s.scene, &action.contact_3d, params.move_fraction),
            n_post: params.n_post,
        };
        let waypoints =
            planner::plan_step(&action, primitive, &plan).map_err(|e| ServiceError::Prediction(e.to_string()))?;
        let preview = Preview {
            prompt: record,
            primitive,
            target,
            action,
            waypoints,
        };
        s.pending = Some(preview.clone());
        Ok(preview)
    }

    /// Executes the pending preview. A failed execution still enters the history.
    pub fn execute(&self, id: u64) -> Result<Executed> {
        let session = self.session(id)?;
        let mut s = session.lock();
        let pending = s.pending.take().ok_or(ServiceError::NoPendingAction)?;
        let params = ExecParams {
            primitive: pending.primitive,
            target: pending.target,
            ..ExecParams::default()
        };
        let result = sim::execute(&mut s.scene, &pending.action.to_contact_action(), &params)
            .map_err(|e| ServiceError::Execution(e.to_string()))?;
        s.history.push(HistoryEntry {
            prompt: pending.prompt,
            primitive: pending.primitive,
            target: pending.target,
            action: pending.action,
            result: result.clone(),
        });
        Ok(Executed { result, frame: s.frame() })
    }

    pub fn history(&self, id: u64) -> Result<SessionHistory> {
        Ok(self.session(id)?.lock().history())
    }

    pub fn select(&self, request: &SelectorRequest) -> Result<SelectorResponse> {
        autoprompt::reference_selector_reply(request).map_err(|e| ServiceError::Selector(e.to_string()))
    }
}

#[derive(Serialize)]
struct Envelope<T> {
    config_fingerprint: String,
    #[serde(flatten)]
    body: T,
}

#[derive(Serialize)]
struct ErrorBody {
    code: &'static str,
    message: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    issues: Vec<FieldIssue>,
}

fn with_fingerprint(mut resp: Response, fingerprint: &str) -> Response {
    if let Ok(v) = HeaderValue::from_str(fingerprint) {
        resp.headers_mut().insert(FINGERPRINT_HEADER, v);
    }
    resp
}

fn respond<T: Serialize>(wb: &Workbench, result: Result<T>) -> Response {
    let fingerprint = wb.fingerprint().to_string();
    let resp = match result {
        Ok(body) => Json(Envelope {
            config_fingerprint: fingerprint.clone(),
            body,
        })
        .into_response(),
        Err(e) => error_response(&fingerprint, e),
    };
    with_fingerprint(resp, &fingerprint)
}

fn error_response(fingerprint: &str, e: ServiceError) -> Response {
    let issues = match &e {
        ServiceError::InvalidPrompt(issues) => issues.clone(),
        _ => Vec::new(),
    };
    let body = Envelope {
        config_fingerprint: fingerprint.to_string(),
        body: serde_json::json!({
            "error": ErrorBody { code: e.code(), message: e.to_string(), issues }
        }),
    };
    (e.status(), Json(body)).into_response()
}

fn parse<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T> {
    serde_json::from_slice(body).map_err(|e| ServiceError::InvalidRequest(e.to_string()))
}

async fn blocking<T, F>(wb: Arc<Workbench>, f: F) -> Response
where
    T: Serialize + Send + 'static,
    F: FnOnce(&Workbench) -> Result<T> + Send + 'static,
{
    let task = {
        let wb = wb.clone();
        tokio::task::spawn_blocking(move || f(&wb))
    };
    match task.await {
        Ok(result) => respond(&wb, result),
        Err(e) => respond::<()>(&wb, Err(ServiceError::Execution(e.to_string()))),
    }
}

async fn create_handler(State(wb): State<Arc<Workbench>>, body: Bytes) -> Response {
    blocking(wb, move |wb| {
        let req: CreateSession = parse(&body)?;
        wb.create_session(&req.kind, req.seed)
    })
    .await
}

async fn frame_handler(State(wb): State<Arc<Workbench>>, Path(id): Path<u64>) -> Response {
    blocking(wb, move |wb| wb.frame(id)).await
}

async fn prompt_handler(State(wb): State<Arc<Workbench>>, Path(id): Path<u64>, body: Bytes) -> Response {
    blocking(wb, move |wb| {
        let req: SubmitPrompt = parse(&body)?;
        wb.submit_prompt(id, &req)
    })
    .await
}

async fn execute_handler(State(wb): State<Arc<Workbench>>, Path(id): Path<u64>) -> Response {
    blocking(wb, move |wb| wb.execute(id)).await
}

async fn history_handler(State(wb): State<Arc<Workbench>>, Path(id): Path<u64>) -> Response {
    blocking(wb, move |wb| wb.history(id)).await
}

/// The selector hook answers in the bare selector schema; the fingerprint
/// travels in the response header only.
async fn selector_handler(State(wb): State<Arc<Workbench>>, body: Bytes) -> Response {
    let fingerprint = wb.fingerprint().to_string();
    let result = parse::<SelectorRequest>(&body).and_then(|req| wb.select(&req));
    let resp = match result {
        Ok(reply) => Json(reply).into_response(),
        Err(e) => error_response(&fingerprint, e),
    };
    with_fingerprint(resp, &fingerprint)
}

pub fn router(wb: Arc<Workbench>) -> Router {
    Router::new()
        .route("/session", post(create_handler))
        .route("/session/{id}/frame", get(frame_handler))
        .route("/session/{id}/prompt", post(prompt_handler))
        .route("/session/{id}/execute", post(execute_handler))
        .route("/session/{id}/history", get(history_handler))
        .route("/selector", post(selector_handler))
        .with_state(wb)
}

/// Binds `addr` and serves until the process exits. The bound address is
/// reported through `on_bound` before serving starts.
pub async fn serve(addr: SocketAddr, config: ServiceConfig, on_bound: impl FnOnce(SocketAddr)) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    on_bound(listener.local_addr()?);
    axum::serve(listener, router(Arc::new(Workbench::new(config)))).await
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{self, Pattern};

    /// First seeded session whose view admits a ground-truth prompt.
    fn promptable_session(wb: &Workbench, kind: &str) -> (u64, PromptRecord) {
        for seed in 0..50 {
            let id = wb.create_session(kind, seed).unwrap().session_id;
            let session = wb.session(id).unwrap();
            let s = session.lock();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let (k, e) = (s.camera.intrinsics, s.camera.extrinsics);
            let Ok(gt) = sim::collect_ground_truth(&s.scene, &k, &e, &mut rng, JointMotion::Open) else { continue };
            if let Ok(d) = prompt::derive_2d_prompts(&gt, &k, &e, Pattern::PZYM) {
                return (id, d.prompt.to_record());
            }
        }
        panic!("no promptable {kind} session");
    }

    #[test]
    fn same_seed_same_frame() {
        let wb = Workbench::new(ServiceConfig::default());
        let a = wb.create_session("drawer", 11).unwrap();
        let b = wb.create_session("drawer", 11).unwrap();
        assert_ne!(a.session_id, b.session_id);
        assert_eq!(a.frame.rgb_png_base64, b.frame.rgb_png_base64);
        assert_eq!((a.frame.width, a.frame.height), (336, 336));
        assert_eq!(wb.create_session("teapot", 1).unwrap_err().code(), "unknown_kind");
    }

    #[test]
    fn execute_requires_preview_and_appends_history() {
        let wb = Workbench::new(ServiceConfig::default());
        let (id, record) = promptable_session(&wb, "drawer");
        assert_eq!(wb.execute(id).unwrap_err().code(), "no_pending_action");
        assert!(wb.history(id).unwrap().entries.is_empty());
        let req = SubmitPrompt {
            prompt: serde_json::to_value(&record).unwrap(),
            primitive: "pull".into(),
            target: None,
        };
        let p1 = wb.submit_prompt(id, &req).unwrap();
        let p2 = wb.submit_prompt(id, &req).unwrap();
        assert_eq!(p1, p2);
        let done = wb.execute(id).unwrap();
        assert!(done.result.success);
        assert_eq!(done.frame.keyframe, 1);
        assert_eq!(wb.execute(id).unwrap_err().code(), "no_pending_action");
        let history = wb.history(id).unwrap();
        assert_eq!(history.entries.len(), 1);
        let replayed = history.replay().unwrap();
        let live = wb.session(id).unwrap();
        assert_eq!(replayed.joint.state, live.lock().scene.joint.state);
    }

    #[test]
    fn invalid_prompt_lists_fields() {
        let wb = Workbench::new(ServiceConfig::default());
        let id = wb.create_session("door", 2).unwrap().session_id;
        let req = SubmitPrompt {
            prompt: serde_json::json!({
                "contact_px": [10.0, 10.0],
                "z_dir": [0.0, 0.0],
                "pattern": "PZYM"
            }),
            primitive: "pull".into(),
            target: None,
        };
        match wb.submit_prompt(id, &req).unwrap_err() {
            ServiceError::InvalidPrompt(issues) => {
                let fields: Vec<_> = issues.iter().map(|i| i.field.as_str()).collect();
                assert!(fields.contains(&"z_dir"), "{fields:?}");
                assert!(fields.contains(&"y_dir"), "{fields:?}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
