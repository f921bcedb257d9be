use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use fxtutor_cli::server::router;
use fxtutor_core::dsp::{apply_effect, read_wav_bytes, render_source, wav_bytes, AudioBuffer, EffectKind, EffectStep, Preset, Waveform};
use fxtutor_core::ensemble::{Engine, ModelSet, MAX_STEPS};
use fxtutor_core::features::FeatureConfig;
use fxtutor_core::metrics::MssmaeConfig;
use fxtutor_core::models::{build_param_model, build_selector, ArchProfile, InputShape, SelectorKind};

const SR: u32 = 44100;
const BOUNDARY: &str = "fxtutor-test-boundary";

fn engine() -> Engine {
    let features = FeatureConfig::default();
    let shape = InputShape::new(&features, SR as usize);
    let profile = ArchProfile::tiny();
    let params = EffectKind::ALL
        .iter()
        .map(|&e| build_param_model(e, &profile, &features, shape, e.index() as u64).unwrap())
        .collect();
    let selectors = vec![build_selector(SelectorKind::Rnn, &profile, &features, shape, 9).unwrap()];
    let models = ModelSet::new(params, selectors).unwrap();
    Engine::new(Arc::new(models), SR, MssmaeConfig::default()).unwrap()
}

fn app() -> (Router, Engine) {
    let e = engine();
    (router(e.clone()), e)
}

fn clip(seconds: f64, sr: u32) -> AudioBuffer {
    render_source(&Preset::single("saw", Waveform::Saw), 57, seconds, sr).unwrap()
}

fn target_of(input: &AudioBuffer) -> AudioBuffer {
    let step = EffectStep::new(EffectKind::Equalizer, vec![0.7, 0.3, 0.95], None).unwrap();
    apply_effect(input, &step).unwrap()
}

fn multipart(fields: &[(&str, Vec<u8>)]) -> Request<Body> {
    let mut body = Vec::new();
    for (name, bytes) in fields {
        body.extend_from_slice(
            format!(
                "--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"{name}\"; filename=\"{name}.wav\"\r\nContent-Type: audio/wav\r\n\r\n"
            )
            .as_bytes(),
        );
        body.extend_from_slice(bytes);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    Request::post("/sessions")
        .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(body))
        .unwrap()
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn send_json(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
    let (status, bytes) = send(app, req).await;
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn post(uri: &str) -> Request<Body> {
    Request::post(uri).body(Body::empty()).unwrap()
}

fn post_json(uri: &str, v: &Value) -> Request<Body> {
    Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(v.to_string()))
        .unwrap()
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

async fn create(app: &Router, input: &AudioBuffer, target: &AudioBuffer) -> String {
    let (status, v) = send_json(app, multipart(&[("input", wav_bytes(input).unwrap()), ("target", wav_bytes(target).unwrap())])).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn health_check() {
    let (app, _) = app();
    let (status, v) = send_json(&app, get("/healthz")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["status"], "ok");
}

#[tokio::test]
async fn uploads_are_validated() {
    let (app, _) = app();
    let a = clip(1.0, SR);
    let (status, v) = send_json(&app, multipart(&[("input", wav_bytes(&a).unwrap()), ("target", wav_bytes(&clip(1.0, 48000)).unwrap())])).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().unwrap().contains("sample rates differ"));

    let (status, _) = send_json(&app, multipart(&[("input", wav_bytes(&a).unwrap())])).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (status, v) = send_json(&app, multipart(&[("input", b"not a wav".to_vec()), ("target", wav_bytes(&a).unwrap())])).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().unwrap().contains("input"));

    let long = clip(3.0, SR);
    let (status, _) = send_json(&app, multipart(&[("input", wav_bytes(&long).unwrap()), ("target", wav_bytes(&long).unwrap())])).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn identical_upload_scores_a_perfect_match() {
    let (app, _) = app();
    let a = clip(1.0, SR);
    let (status, v) = send_json(&app, multipart(&[("input", wav_bytes(&a).unwrap()), ("target", wav_bytes(&a).unwrap())])).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["initial"]["mssmae"], 0.0);
    assert!((v["initial"]["pcc"].as_f64().unwrap() - 100.0).abs() < 1e-9);
}

#[tokio::test]
async fn short_clips_are_padded_to_the_model_length() {
    let (app, engine) = app();
    let input = clip(0.8, SR);
    let target = target_of(&clip(0.9, SR));
    let id = create(&app, &input, &target).await;
    let (_, v) = send_json(&app, get(&format!("/sessions/{id}"))).await;
    let samples = v["samples"].as_u64().unwrap() as usize;
    assert!(engine.clip_lengths().contains(&samples));
    let (status, bytes) = send(&app, get(&format!("/sessions/{id}/steps/0/audio"))).await;
    assert_eq!(status, StatusCode::OK);
    let back = read_wav_bytes(&bytes).unwrap();
    assert_eq!(&back.samples[..input.len()], &input.samples[..]);
    assert!(back.samples[input.len()..].iter().all(|&s| s == 0.0));
}

#[tokio::test]
async fn suggest_commit_discard_undo_flow() {
    let (app, engine) = app();
    let input = clip(1.0, SR);
    let id = create(&app, &input, &target_of(&input)).await;
    let base = format!("/sessions/{id}");

    let (status, view) = send_json(&app, get(&base)).await;
    assert_eq!(status, StatusCode::OK);
    let shape = engine.models().input_shape();
    assert_eq!(view["target_spectrogram"]["dims"], json!([shape.n_mels, shape.frames]));
    assert_eq!(view["step_spectrograms"].as_array().unwrap().len(), 1);
    assert_eq!(view["status"], "running");
    assert_eq!(view["policy"], "serum_rnn");

    // Nothing pending yet.
    assert_eq!(send_json(&app, post(&format!("{base}/commit"))).await.0, StatusCode::CONFLICT);
    assert_eq!(send_json(&app, post(&format!("{base}/discard"))).await.0, StatusCode::CONFLICT);
    assert_eq!(send_json(&app, post(&format!("{base}/undo"))).await.0, StatusCode::CONFLICT);

    let (status, sug) = send_json(&app, post(&format!("{base}/suggest"))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(sug["spectrogram"]["dims"], json!([shape.n_mels, shape.frames]));
    let probs: Vec<f64> = serde_json::from_value(sug["probs"].clone()).unwrap();
    assert_eq!(probs.len(), EffectKind::ALL.len());
    assert_eq!(send_json(&app, post(&format!("{base}/suggest"))).await.0, StatusCode::CONFLICT);

    // Overrides must target the suggested effect.
    let effect: EffectKind = serde_json::from_value(sug["effect"].clone()).unwrap();
    let other = EffectKind::ALL.iter().copied().find(|&e| e != effect).unwrap();
    let wrong = EffectStep::new(other, vec![0.5; other.continuous_len()], other.has_categorical().then_some(0)).unwrap();
    let (status, _) = send_json(&app, post_json(&format!("{base}/commit"), &json!({ "params": wrong }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    // Committing the suggestion as-is reproduces its preview exactly.
    let (status, view) = send_json(&app, post(&format!("{base}/commit"))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(view["steps"][0]["report"], sug["report"]);
    assert_eq!(view["steps"][0]["delta"], sug["delta"]);
    assert_eq!(view["steps"][0]["index"], 1);
    assert_eq!(view["used"], json!([effect]));
    assert_eq!(view["pending"], Value::Null);
    assert_eq!(view["step_spectrograms"].as_array().unwrap().len(), 2);
    assert_eq!(view["step_spectrograms"][1], sug["spectrogram"]);

    // Discard drops a pending suggestion without changing the chain.
    send_json(&app, post(&format!("{base}/suggest"))).await;
    let (status, after) = send_json(&app, post(&format!("{base}/discard"))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(after["pending"], Value::Null);
    assert_eq!(after["steps"], view["steps"]);

    let (status, undone) = send_json(&app, post(&format!("{base}/undo"))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(undone["steps"], json!([]));
    assert_eq!(undone["used"], json!([]));

    // A fresh suggestion after undo is the same as the first one.
    let (_, again) = send_json(&app, post(&format!("{base}/suggest"))).await;
    assert_eq!(again, sug);
}

#[tokio::test]
async fn tweaked_parameters_are_committed_and_scored() {
    let (app, engine) = app();
    let input = clip(1.0, SR);
    let target = target_of(&input);
    let id = create(&app, &input, &target).await;
    let base = format!("/sessions/{id}");
    let (_, sug) = send_json(&app, post(&format!("{base}/suggest"))).await;
    let mut step: EffectStep = serde_json::from_value(sug["params"].clone()).unwrap();
    step.continuous[0] = if step.continuous[0] > 0.5 { 0.1 } else { 0.9 };
    let (status, view) = send_json(&app, post_json(&format!("{base}/commit"), &json!({ "params": step }))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(view["steps"][0]["params"], serde_json::to_value(&step).unwrap());

    // The reported metrics are those of the tweaked render.
    let an = engine.analyzer();
    let expect = an
        .report(&an.analyse(&apply_effect(&input, &step).unwrap()).unwrap(), &an.analyse(&target).unwrap())
        .unwrap();
    assert_eq!(view["steps"][0]["report"], serde_json::to_value(expect).unwrap());

    let (status, bytes) = send(&app, get(&format!("{base}/steps/1/audio"))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(read_wav_bytes(&bytes).unwrap(), apply_effect(&input, &step).unwrap());

    send_json(&app, post(&format!("{base}/suggest"))).await;
    let (_, pending) = send_json(&app, get(&base)).await;
    let mut bad_next: EffectStep = serde_json::from_value(pending["pending"]["params"].clone()).unwrap();
    bad_next.continuous[0] = 1.5;
    let (status, _) = send_json(&app, post_json(&format!("{base}/commit"), &json!({ "params": bad_next }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = send_json(&app, post_json(&format!("{base}/commit"), &json!("{"))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn sessions_exhaust_after_five_effects() {
    let (app, _) = app();
    let input = clip(1.0, SR);
    let id = create(&app, &input, &target_of(&input)).await;
    let base = format!("/sessions/{id}");
    let mut last = Value::Null;
    for _ in 0..MAX_STEPS {
        assert_eq!(send_json(&app, post(&format!("{base}/suggest"))).await.0, StatusCode::OK);
        let (status, v) = send_json(&app, post(&format!("{base}/commit"))).await;
        assert_eq!(status, StatusCode::OK);
        last = v;
    }
    assert_eq!(last["status"], "exhausted");
    let mut used: Vec<EffectKind> = serde_json::from_value(last["used"].clone()).unwrap();
    used.sort();
    assert_eq!(used, EffectKind::ALL.to_vec());
    assert_eq!(send_json(&app, post(&format!("{base}/suggest"))).await.0, StatusCode::CONFLICT);

    // Undo reopens the session.
    let (_, v) = send_json(&app, post(&format!("{base}/undo"))).await;
    assert_eq!(v["status"], "running");
    assert_eq!(send_json(&app, post(&format!("{base}/suggest"))).await.0, StatusCode::OK);
}

#[tokio::test]
async fn audio_endpoints_and_unknown_ids() {
    let (app, _) = app();
    let input = clip(1.0, SR);
    let target = target_of(&input);
    let id = create(&app, &input, &target).await;
    let (status, bytes) = send(&app, get(&format!("/sessions/{id}/target/audio"))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(read_wav_bytes(&bytes).unwrap(), target);
    assert_eq!(send(&app, get(&format!("/sessions/{id}/steps/3/audio"))).await.0, StatusCode::NOT_FOUND);
    assert_eq!(send(&app, get("/sessions/nope")).await.0, StatusCode::NOT_FOUND);
    assert_eq!(send(&app, post("/sessions/nope/suggest")).await.0, StatusCode::NOT_FOUND);

    let second = create(&app, &input, &target).await;
    assert_ne!(id, second);
}

#[tokio::test]
async fn replaying_an_operation_log_reproduces_the_session() {
    let input = clip(1.0, SR);
    let target = target_of(&input);
    let ops = ["suggest", "commit", "suggest", "discard", "suggest", "commit", "undo", "suggest", "commit"];
    let mut finals = Vec::new();
    for _ in 0..2 {
        let (app, _) = app();
        let id = create(&app, &input, &target).await;
        for op in ops {
            let (status, _) = send_json(&app, post(&format!("/sessions/{id}/{op}"))).await;
            assert_eq!(status, StatusCode::OK, "{op}");
        }
        finals.push(send_json(&app, get(&format!("/sessions/{id}"))).await.1);
    }
    assert_eq!(finals[0], finals[1]);
    assert_eq!(finals[0]["steps"].as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn snapshots_export_the_chain_and_replay_offline() {
    let (app, engine) = app();
    let input = clip(1.0, SR);
    let target = target_of(&input);
    let id = create(&app, &input, &target).await;
    let base = format!("/sessions/{id}");
    for _ in 0..2 {
        send_json(&app, post(&format!("{base}/suggest"))).await;
        send_json(&app, post(&format!("{base}/commit"))).await;
    }
    let (status, snap) = send_json(&app, get(&format!("{base}/snapshot"))).await;
    assert_eq!(status, StatusCode::OK);
    let (_, view) = send_json(&app, get(&base)).await;
    for key in ["session_id", "status", "policy", "sample_rate", "samples", "initial", "steps"] {
        assert_eq!(snap[key], view[key], "{key}");
    }
    assert!(snap.get("step_spectrograms").is_none());

    let chain: Vec<EffectStep> = snap["steps"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| serde_json::from_value(s["params"].clone()).unwrap())
        .collect();
    let an = engine.analyzer();
    let tgt = an.analyse(&target).unwrap();
    let mut audio = input.clone();
    for (step, shown) in chain.iter().zip(snap["steps"].as_array().unwrap()) {
        audio = apply_effect(&audio, step).unwrap();
        let report = an.report(&an.analyse(&audio).unwrap(), &tgt).unwrap();
        assert_eq!(shown["report"], serde_json::to_value(report).unwrap());
    }
    assert_eq!(send(&app, get("/sessions/s99/snapshot")).await.0, StatusCode::NOT_FOUND);
}
