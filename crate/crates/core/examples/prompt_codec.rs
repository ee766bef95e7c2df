// Ground truth to 2D prompt, overlay on the rendered frame, and back.

use crayon_bench::geometry::{self, Camera};
use crayon_bench::prompt::{self, DirectionAxis, Pattern, PromptStyle};
use crayon_bench::sim::{self, JointMotion, Scene, SceneKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn run() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let k = geometry::CameraIntrinsics::desk_default();
    let (scene, camera, gt) = loop {
        let scene = Scene::build(SceneKind::Door, rand::Rng::random(&mut rng));
        let e = geometry::sample_camera_pose(&mut rng, &Default::default(), &scene.focus());
        if let Ok(gt) = sim::collect_ground_truth(&scene, &k, &e, &mut rng, JointMotion::Open) {
            break (scene, Camera::new(k, e), gt);
        }
    };
    let derived = prompt::derive_2d_prompts(&gt, &camera.intrinsics, &camera.extrinsics, Pattern::PZYM)?;
    let p = derived.prompt;
    println!("{}", prompt::format_language(&p));
    println!("record: {}", serde_json::to_string(&p.to_record())?);

    let (rgb, _) = sim::render(&scene, &camera.intrinsics, &camera.extrinsics);
    let style = PromptStyle::default();
    let overlay = prompt::rasterize(&rgb, &p, &style);
    let read = prompt::extract(&overlay, &style)?;
    println!("read back {:?}, contact off by {:.2} px", read.pattern(), (read.contact_px() - p.contact_px()).norm());
    for axis in DirectionAxis::ALL {
        let (a, b) = (read.direction(axis).unwrap(), p.direction(axis).unwrap());
        println!("  {axis}: {:.2} deg", geometry::angle_deg_2d(&a, &b));
    }

    // Each pattern drops lines from the full prompt.
    for pattern in Pattern::ALL {
        let lines = DirectionAxis::ALL.iter().filter(|a| pattern.has(**a)).count();
        println!("{pattern:?}: {lines} lines");
    }

    let path = std::env::temp_dir().join("crayon_prompt_overlay.png");
    overlay.save(&path)?;
    println!("overlay saved to {}", path.display());
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run()
}
