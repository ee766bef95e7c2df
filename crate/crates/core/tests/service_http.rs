use std::io::Cursor;
use std::net::SocketAddr;
use std::sync::OnceLock;

use base64::Engine;
use serde_json::{json, Value};

use crayon_bench::autoprompt::{self, HttpSelector, SelectionContext, SelectorMode, SelectorRequest};
use crayon_bench::geometry::{DepthImage, Vec2};
use crayon_bench::prompt::{self, Pattern, PromptRecord};
use crayon_bench::service::{self, ServiceConfig, Workbench, FINGERPRINT_HEADER};
use crayon_bench::sim::{self, JointMotion, SceneKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn server() -> SocketAddr {
    static ADDR: OnceLock<SocketAddr> = OnceLock::new();
    *ADDR.get_or_init(|| {
        let (tx, rx) = std::sync::mpsc::channel();
        std::thread::spawn(move || {
            let rt = tokio::runtime::Runtime::new().unwrap();
            rt.block_on(service::serve("127.0.0.1:0".parse().unwrap(), ServiceConfig::default(), move |a| {
                tx.send(a).unwrap();
            }))
            .unwrap();
        });
        rx.recv().unwrap()
    })
}

fn url(path: &str) -> String {
    format!("http://{}{path}", server())
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().into()
}

struct Reply {
    status: u16,
    fingerprint: Option<String>,
    body: Value,
}

fn read(mut resp: ureq::http::Response<ureq::Body>) -> Reply {
    let status = resp.status().as_u16();
    let fingerprint = resp
        .headers()
        .get(FINGERPRINT_HEADER)
        .map(|v| v.to_str().unwrap().to_string());
    let body = serde_json::from_str(&resp.body_mut().read_to_string().unwrap()).unwrap();
    Reply { status, fingerprint, body }
}

fn post(path: &str, body: &Value) -> Reply {
    read(agent().post(url(path)).send_json(body).unwrap())
}

fn post_empty(path: &str) -> Reply {
    read(agent().post(url(path)).send_empty().unwrap())
}

fn get(path: &str) -> Reply {
    read(agent().get(url(path)).call().unwrap())
}

fn expected_fingerprint() -> String {
    Workbench::new(ServiceConfig::default()).fingerprint().to_string()
}

/// First seed whose view of `kind` admits a ground-truth prompt.
fn promptable(kind: SceneKind) -> (u64, PromptRecord) {
    let cfg = ServiceConfig::default();
    for seed in 0..50 {
        let (scene, cam) = service::seeded_setup(&cfg, kind, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let Ok(gt) = sim::collect_ground_truth(&scene, &cam.intrinsics, &cam.extrinsics, &mut rng, JointMotion::Open) else {
            continue;
        };
        if let Ok(d) = prompt::derive_2d_prompts(&gt, &cam.intrinsics, &cam.extrinsics, Pattern::PZYM) {
            return (seed, d.prompt.to_record());
        }
    }
    panic!("no promptable {kind} seed");
}

fn create(kind: &str, seed: u64) -> Reply {
    post("/session", &json!({ "kind": kind, "seed": seed }))
}

fn decode_png(b64: &str) -> image::RgbImage {
    let bytes = base64::engine::general_purpose::STANDARD.decode(b64).unwrap();
    image::load(Cursor::new(bytes), image::ImageFormat::Png).unwrap().to_rgb8()
}

#[test]
fn frames_match_the_simulator_and_carry_the_fingerprint() {
    let fp = expected_fingerprint();
    let r = create("door", 7);
    assert_eq!(r.status, 200);
    assert_eq!(r.fingerprint.as_deref(), Some(fp.as_str()));
    assert_eq!(r.body["config_fingerprint"], fp.as_str());

    let (scene, cam) = service::seeded_setup(&ServiceConfig::default(), SceneKind::Door, 7);
    let (rgb, depth) = sim::render(&scene, &cam.intrinsics, &cam.extrinsics);
    let frame = &r.body["frame"];
    assert!(decode_png(frame["rgb_png_base64"].as_str().unwrap()) == rgb, "rgb differs");
    let depth_bytes = base64::engine::general_purpose::STANDARD
        .decode(frame["depth_base64"].as_str().unwrap())
        .unwrap();
    assert!(depth_bytes == depth.to_bytes(), "depth raster differs");
    let decoded = DepthImage::from_bytes(&depth_bytes).unwrap();
    assert_eq!((decoded.width, decoded.height), (depth.width, depth.height));

    let id = r.body["session_id"].as_u64().unwrap();
    let again = get(&format!("/session/{id}/frame"));
    assert_eq!(again.body["rgb_png_base64"], frame["rgb_png_base64"]);
    assert_eq!(again.body["keyframe"], 0);
}

#[test]
fn errors_have_stable_codes() {
    let fp = expected_fingerprint();
    let code = |r: &Reply| r.body["error"]["code"].as_str().unwrap().to_string();

    let r = create("teapot", 1);
    assert_eq!((r.status, code(&r).as_str()), (422, "unknown_kind"));
    assert_eq!(r.fingerprint.as_deref(), Some(fp.as_str()));

    let r = get("/session/999999/frame");
    assert_eq!(code(&r), "unknown_session");

    let r = post("/session", &json!({ "kind": "drawer", "seed": 1, "colour": "red" }));
    assert_eq!(code(&r), "invalid_request");

    let id = create("drawer", 1).body["session_id"].as_u64().unwrap();
    let r = post_empty(&format!("/session/{id}/execute"));
    assert_eq!(code(&r), "no_pending_action");

    let bad = json!({ "prompt": { "contact_px": [5.0, 5.0], "pattern": "PZY" }, "primitive": "pull" });
    let r = post(&format!("/session/{id}/prompt"), &bad);
    assert_eq!(code(&r), "invalid_prompt");
    let fields: Vec<_> = r.body["error"]["issues"]
        .as_array()
        .unwrap()
        .iter()
        .map(|i| i["field"].as_str().unwrap().to_string())
        .collect();
    assert!(fields.contains(&"z_dir".to_string()), "{fields:?}");

    let (seed, record) = promptable(SceneKind::Drawer);
    let id = create("drawer", seed).body["session_id"].as_u64().unwrap();
    let rotate = json!({ "prompt": record, "primitive": "rotate" });
    let r = post(&format!("/session/{id}/prompt"), &rotate);
    assert_eq!(code(&r), "unsupported_primitive");
}

#[test]
fn executed_history_replays_to_the_live_state() {
    let (seed, record) = promptable(SceneKind::Drawer);
    let id = create("drawer", seed).body["session_id"].as_u64().unwrap();
    let submit = json!({ "prompt": record, "primitive": "pull" });
    let preview = post(&format!("/session/{id}/prompt"), &submit);
    assert_eq!(preview.status, 200, "{}", preview.body);
    assert!(!preview.body["waypoints"].as_array().unwrap().is_empty());

    let done = post_empty(&format!("/session/{id}/execute"));
    assert_eq!(done.status, 200, "{}", done.body);
    assert_eq!(done.body["frame"]["keyframe"], 1);

    let h = get(&format!("/session/{id}/history"));
    let mut body = h.body;
    body.as_object_mut().unwrap().remove("config_fingerprint");
    let history: service::SessionHistory = serde_json::from_value(body).unwrap();
    assert_eq!(history.entries.len(), 1);
    let replayed = history.replay().unwrap();
    let state = done.body["result"]["final_state"].as_f64().unwrap();
    assert_eq!(replayed.joint.state, state);

    let (rgb, _) = sim::render(&replayed, &history.camera.intrinsics, &history.camera.extrinsics);
    assert!(decode_png(done.body["frame"]["rgb_png_base64"].as_str().unwrap()) == rgb, "rgb differs");
}

#[test]
fn selector_hook_answers_in_the_bare_schema() {
    let fp = expected_fingerprint();
    let request = SelectorRequest {
        image_png_base64: autoprompt::encode_png(&image::RgbImage::new(8, 8)),
        contact_px: [100.0, 120.0],
        candidate_angles_deg: (0..autoprompt::NUM_CANDIDATES).map(autoprompt::CandidateSet::angle_deg).collect(),
        task: "pull".into(),
        needs_move: true,
    };
    let r = post("/selector", &serde_json::to_value(&request).unwrap());
    assert_eq!(r.status, 200);
    assert_eq!(r.fingerprint.as_deref(), Some(fp.as_str()));
    assert!(r.body.get("config_fingerprint").is_none());
    let reply: autoprompt::SelectorResponse = serde_json::from_value(r.body).unwrap();
    assert_eq!(reply, autoprompt::reference_selector_reply(&request).unwrap());

    let short = SelectorRequest {
        candidate_angles_deg: vec![0.0; 3],
        ..request
    };
    let r = post("/selector", &serde_json::to_value(&short).unwrap());
    assert_eq!(r.body["error"]["code"], "invalid_selector_request");

    let client = HttpSelector::new(url("/selector"));
    let c = autoprompt::sample_candidates(Vec2::new(100.0, 120.0));
    let img = image::RgbImage::new(336, 336);
    let ctx = SelectionContext {
        reference: None,
        depth: None,
        camera: None,
        scene: None,
        image: Some(&img),
        motion: JointMotion::Open,
        needs_move: true,
        task: "pull".into(),
    };
    let choice = autoprompt::select(&c, &SelectorMode::External(&client), &ctx).unwrap();
    assert!(choice.m.is_some());
}
