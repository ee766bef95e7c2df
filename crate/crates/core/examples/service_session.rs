// Drives a workbench session over HTTP: create, fetch a frame, preview a
// prompt, execute it, and replay the history.

use std::net::SocketAddr;

use crayon_bench::prompt::{self, Pattern};
use crayon_bench::service::{self, ServiceConfig, SessionHistory};
use crayon_bench::sim::{self, JointMotion, SceneKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

fn start() -> SocketAddr {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().expect("runtime");
        rt.block_on(service::serve("127.0.0.1:0".parse().unwrap(), ServiceConfig::default(), move |a| {
            let _ = tx.send(a);
        }))
    });
    rx.recv().expect("server bound")
}

fn call(req: ureq::RequestBuilder<ureq::typestate::WithBody>, body: Value) -> Result<Value, Box<dyn std::error::Error>> {
    Ok(req.send_json(body)?.body_mut().read_json()?)
}

pub fn run() -> Result<(), Box<dyn std::error::Error>> {
    let base = format!("http://{}", start());
    let cfg = ServiceConfig::default();

    // Sessions are seeded, so the client can find a seed with a promptable view
    // and derive the ground-truth prompt for it locally.
    let (seed, record) = (0..50)
        .find_map(|seed| {
            let (scene, cam) = service::seeded_setup(&cfg, SceneKind::Drawer, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let gt = sim::collect_ground_truth(&scene, &cam.intrinsics, &cam.extrinsics, &mut rng, JointMotion::Open).ok()?;
            let d = prompt::derive_2d_prompts(&gt, &cam.intrinsics, &cam.extrinsics, Pattern::PZYM).ok()?;
            Some((seed, d.prompt.to_record()))
        })
        .ok_or("no promptable seed")?;

    let created = call(ureq::post(format!("{base}/session")), json!({ "kind": "drawer", "seed": seed }))?;
    let id = created["session_id"].as_u64().ok_or("no session id")?;
    println!("session {id} (seed {seed}), config {}", created["config_fingerprint"]);

    let frame: Value = ureq::get(format!("{base}/session/{id}/frame")).call()?.body_mut().read_json()?;
    println!("frame {}x{}, keyframe {}", frame["width"], frame["height"], frame["keyframe"]);

    let preview = call(ureq::post(format!("{base}/session/{id}/prompt")), json!({ "prompt": record, "primitive": "pull" }))?;
    println!("preview: {} waypoints, contact {}", preview["waypoints"].as_array().map_or(0, |w| w.len()), preview["action"]["contact_3d"]);

    let done = call(ureq::post(format!("{base}/session/{id}/execute")), json!({}))?;
    println!("executed: success {}, displacement {}", done["result"]["success"], done["result"]["part_displacement"]);

    let mut history: Value = ureq::get(format!("{base}/session/{id}/history")).call()?.body_mut().read_json()?;
    history.as_object_mut().ok_or("history")?.remove("config_fingerprint");
    let history: SessionHistory = serde_json::from_value(history)?;
    let replayed = history.replay()?;
    println!("replayed {} entries, joint state {:.4} (live {})", history.entries.len(), replayed.joint.state, done["result"]["final_state"]);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run()
}
