//! HTTP/JSON API over interactive sessions. Every session runs the
//! `serum_rnn` policy one suggestion at a time and never stops on its own;
//! the user decides what to keep.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use fxtutor_core::dsp::{read_wav_bytes, wav_bytes, EffectKind, EffectStep};
use fxtutor_core::ensemble::{
    Engine, Policy, PolicyKind, SessionState, SessionStatus, StopConfig, Suggestion, MAX_STEPS,
};
use fxtutor_core::features::Spectrogram;
use fxtutor_core::metrics::{MetricKind, MetricReport};
use fxtutor_core::Error as CoreError;

use crate::commands::fit_pair;

/// Frames beyond this are averaged down for display.
const MAX_DISPLAY_FRAMES: usize = 256;
const UPLOAD_LIMIT: usize = 64 << 20;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        let status = match &e {
            CoreError::Exhausted => StatusCode::CONFLICT,
            CoreError::Input(_)
            | CoreError::Parameter(_)
            | CoreError::Chain(_)
            | CoreError::Wav(_)
            | CoreError::UndefinedCorrelation(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Row-major matrix for display.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    /// `[rows, cols]`: Mel bins by frames.
    pub dims: [usize; 2],
    pub data: Vec<f32>,
}

impl Matrix {
    fn from_spectrogram(s: &Spectrogram) -> Self {
        let (rows, cols) = s.shape();
        let stride = cols.div_ceil(MAX_DISPLAY_FRAMES).max(1);
        let out_cols = cols.div_ceil(stride);
        let mut data = Vec::with_capacity(rows * out_cols);
        for r in 0..rows {
            for oc in 0..out_cols {
                let span = oc * stride..((oc + 1) * stride).min(cols);
                let n = span.len() as f64;
                data.push((span.map(|c| s.at(r, c)).sum::<f64>() / n) as f32);
            }
        }
        Self {
            dims: [rows, out_cols],
            data,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuggestionView {
    pub effect: EffectKind,
    pub params: EffectStep,
    /// Selector probabilities in effect order.
    pub probs: Option<Vec<f64>>,
    /// The suggestion rendered on the current audio, against the target.
    pub report: MetricReport,
    pub delta: MetricReport,
    pub spectrogram: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepView {
    /// 1-based.
    pub index: usize,
    pub effect: EffectKind,
    pub params: EffectStep,
    pub report: MetricReport,
    /// Change against the previous step.
    pub delta: MetricReport,
    pub is_mistake: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub status: SessionStatus,
    pub policy: PolicyKind,
    pub sample_rate: u32,
    pub samples: usize,
    pub initial: MetricReport,
    pub steps: Vec<StepView>,
    pub used: Vec<EffectKind>,
    pub mistakes: usize,
    pub pending: Option<SuggestionView>,
    pub target_spectrogram: Matrix,
    /// Index 0 is the input, then one per committed step.
    pub step_spectrograms: Vec<Matrix>,
}

/// The committed chain and its scores, without audio or spectrograms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub session_id: String,
    pub status: SessionStatus,
    pub policy: PolicyKind,
    pub sample_rate: u32,
    pub samples: usize,
    pub initial: MetricReport,
    pub steps: Vec<StepView>,
}

struct ApiSession {
    state: SessionState,
    pending: Option<SuggestionView>,
}

pub struct AppState {
    engine: Engine,
    stop: StopConfig,
    sessions: RwLock<HashMap<String, Arc<Mutex<ApiSession>>>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(engine: Engine) -> Self {
        Self {
            engine,
            // Interactive sessions never stop by themselves.
            stop: StopConfig {
                tolerance: MAX_STEPS,
                mistake_metric: MetricKind::Mssmae,
            },
            sessions: RwLock::new(HashMap::new()),
            next_id: AtomicU64::new(1),
        }
    }

    fn session(&self, id: &str) -> ApiResult<Arc<Mutex<ApiSession>>> {
        self.sessions
            .read()
            .expect("session table poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no session {id}")))
    }
}

fn step_views(st: &SessionState) -> Vec<StepView> {
    let mut prev = st.initial;
    st.committed
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let v = StepView {
                index: i + 1,
                effect: c.step.effect,
                params: c.step.clone(),
                report: c.report,
                delta: c.report.delta(&prev),
                is_mistake: c.is_mistake,
            };
            prev = c.report;
            v
        })
        .collect()
}

fn view(id: &str, s: &ApiSession) -> SessionView {
    let st = &s.state;
    let steps = step_views(st);
    SessionView {
        session_id: id.to_string(),
        status: st.status,
        policy: st.policy.kind,
        sample_rate: st.input.sample_rate,
        samples: st.input.len(),
        initial: st.initial,
        steps,
        used: st.used(),
        mistakes: st.mistakes,
        pending: s.pending.clone(),
        target_spectrogram: Matrix::from_spectrogram(&st.target_features().mel_db),
        step_spectrograms: (0..=st.committed.len())
            .map(|k| Matrix::from_spectrogram(&st.features_at(k).expect("in range").mel_db))
            .collect(),
    }
}

/// Runs blocking work on the session under its lock.
async fn with_session<T: Send + 'static>(
    app: &Arc<AppState>,
    id: String,
    f: impl FnOnce(&AppState, &str, &mut ApiSession) -> ApiResult<T> + Send + 'static,
) -> ApiResult<T> {
    let session = app.session(&id)?;
    let app = Arc::clone(app);
    tokio::task::spawn_blocking(move || {
        let mut guard = session.lock().expect("session poisoned");
        f(&app, &id, &mut guard)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

pub fn router(engine: Engine) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/:id", get(get_session))
        .route("/sessions/:id/suggest", post(suggest))
        .route("/sessions/:id/commit", post(commit))
        .route("/sessions/:id/discard", post(discard))
        .route("/sessions/:id/undo", post(undo))
        .route("/sessions/:id/snapshot", get(snapshot))
        .route("/sessions/:id/steps/:k/audio", get(step_audio))
        .route("/sessions/:id/target/audio", get(target_audio))
        .layer(DefaultBodyLimit::max(UPLOAD_LIMIT))
        .with_state(Arc::new(AppState::new(engine)))
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

#[derive(Serialize)]
struct Created {
    session_id: String,
    initial: MetricReport,
}

async fn create_session(State(app): State<Arc<AppState>>, mut form: Multipart) -> ApiResult<Json<Created>> {
    let (mut input, mut target) = (None, None);
    while let Some(field) = form
        .next_field()
        .await
        .map_err(|e| ApiError::bad_request(format!("bad multipart body: {e}")))?
    {
        let name = field.name().unwrap_or_default().to_string();
        let bytes = field
            .bytes()
            .await
            .map_err(|e| ApiError::bad_request(format!("bad multipart field {name}: {e}")))?;
        match name.as_str() {
            "input" => input = Some(bytes),
            "target" => target = Some(bytes),
            _ => {}
        }
    }
    let input = input.ok_or_else(|| ApiError::bad_request("missing \"input\" WAV field"))?;
    let target = target.ok_or_else(|| ApiError::bad_request("missing \"target\" WAV field"))?;
    let app2 = Arc::clone(&app);
    let session = tokio::task::spawn_blocking(move || -> ApiResult<ApiSession> {
        let decode = |b: &[u8], what: &str| {
            read_wav_bytes(b).map_err(|e| ApiError::bad_request(format!("cannot decode {what}: {e}")))
        };
        let (a, b) = fit_pair(&app2.engine, decode(&input, "input")?, decode(&target, "target")?)
            .map_err(ApiError::bad_request)?;
        let state = app2.engine.start(a, b, Policy::new(PolicyKind::SerumRnn, 0), None)?;
        Ok(ApiSession { state, pending: None })
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    let id = format!("s{}", app.next_id.fetch_add(1, Ordering::Relaxed));
    let initial = session.state.initial;
    app.sessions
        .write()
        .expect("session table poisoned")
        .insert(id.clone(), Arc::new(Mutex::new(session)));
    Ok(Json(Created { session_id: id, initial }))
}

async fn get_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<SessionView>> {
    with_session(&app, id, |_, id, s| Ok(view(id, s))).await.map(Json)
}

async fn snapshot(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<SessionSnapshot>> {
    with_session(&app, id, |_, id, s| {
        let st = &s.state;
        Ok(SessionSnapshot {
            session_id: id.to_string(),
            status: st.status,
            policy: st.policy.kind,
            sample_rate: st.input.sample_rate,
            samples: st.input.len(),
            initial: st.initial,
            steps: step_views(st),
        })
    })
    .await
    .map(Json)
}

fn preview(app: &AppState, st: &SessionState, sug: Suggestion) -> ApiResult<SuggestionView> {
    let (report, features) = app.engine.preview(st, &sug.step)?;
    Ok(SuggestionView {
        effect: sug.effect,
        params: sug.step,
        probs: sug.probs,
        delta: report.delta(st.current_report()),
        report,
        spectrogram: Matrix::from_spectrogram(&features.mel_db),
    })
}

async fn suggest(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<SuggestionView>> {
    with_session(&app, id, |app, _, s| {
        if s.pending.is_some() {
            return Err(ApiError::conflict("a suggestion is already pending; commit or discard it"));
        }
        if s.state.status != SessionStatus::Running {
            return Err(ApiError::conflict(format!("session is {:?}", s.state.status).to_lowercase()));
        }
        let sug = app.engine.suggest(&mut s.state)?;
        let v = preview(app, &s.state, sug)?;
        s.pending = Some(v.clone());
        Ok(v)
    })
    .await
    .map(Json)
}

#[derive(Debug, Default, Deserialize)]
struct CommitBody {
    #[serde(default)]
    params: Option<EffectStep>,
}

async fn commit(State(app): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<SessionView>> {
    let body: CommitBody = if body.iter().all(u8::is_ascii_whitespace) {
        CommitBody::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("bad commit body: {e}")))?
    };
    with_session(&app, id, move |app, id, s| {
        let pending = s
            .pending
            .as_ref()
            .ok_or_else(|| ApiError::conflict("no pending suggestion to commit"))?;
        let step = match body.params {
            Some(p) if p.effect != pending.effect => {
                return Err(ApiError::bad_request(format!(
                    "override is for {} but the suggestion is {}",
                    p.effect, pending.effect
                )))
            }
            Some(p) => p,
            None => pending.params.clone(),
        };
        step.validate()?;
        app.engine.commit(&mut s.state, step, &app.stop)?;
        s.pending = None;
        Ok(view(id, s))
    })
    .await
    .map(Json)
}

async fn discard(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<SessionView>> {
    with_session(&app, id, |_, id, s| {
        if s.pending.take().is_none() {
            return Err(ApiError::conflict("no pending suggestion to discard"));
        }
        Ok(view(id, s))
    })
    .await
    .map(Json)
}

async fn undo(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<SessionView>> {
    with_session(&app, id, |app, id, s| {
        if s.state.committed.is_empty() {
            return Err(ApiError::conflict("nothing to undo"));
        }
        app.engine.undo(&mut s.state)?;
        s.pending = None;
        Ok(view(id, s))
    })
    .await
    .map(Json)
}

fn wav_response(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "audio/wav")], bytes).into_response()
}

async fn step_audio(State(app): State<Arc<AppState>>, Path((id, k)): Path<(String, usize)>) -> ApiResult<Response> {
    with_session(&app, id, move |_, _, s| {
        let audio = s
            .state
            .audio_at(k)
            .ok_or_else(|| ApiError::not_found(format!("no step {k}")))?;
        Ok(wav_response(wav_bytes(audio)?))
    })
    .await
}

async fn target_audio(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    with_session(&app, id, |_, _, s| Ok(wav_response(wav_bytes(&s.state.target)?))).await
}
