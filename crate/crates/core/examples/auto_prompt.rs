// Automatic prompts: contact from the part's box centre, 32 candidate lines,
// and the oracle and heuristic selectors choosing among them.

use crayon_bench::autoprompt::{self, SelectionContext, SelectorMode};
use crayon_bench::geometry;
use crayon_bench::harness::{self, CollectionConfig};
use crayon_bench::prompt::DirectionAxis;
use crayon_bench::sim;

pub fn run() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = CollectionConfig {
        train: 0,
        test_seen: 8,
        test_unseen: 0,
        ..CollectionConfig::default()
    };
    let ds = harness::run_collection(&cfg, 31)?;
    for rec in &ds.records {
        let scene = rec.scene()?;
        let frame = sim::render_frame(&scene, &rec.camera.intrinsics, &rec.camera.extrinsics);
        let center = autoprompt::detect_contact(&frame)?;
        let candidates = autoprompt::sample_candidates(center);
        let full = rec.full_prompt();
        let ctx = SelectionContext {
            reference: Some(&full),
            depth: Some(&frame.depth),
            camera: Some(&rec.camera),
            scene: Some(&scene),
            image: Some(&frame.rgb),
            motion: rec.gt.motion,
            needs_move: true,
            task: sim::ExecParams::for_task(rec.kind(), rec.gt.motion).primitive.to_string(),
        };
        let offset = (center - full.contact_px()).norm();
        print!("{:>2} {:<6} box centre {offset:>5.1} px from gt contact", rec.id, rec.kind().to_string());
        for (name, mode) in [("oracle", SelectorMode::Oracle), ("heuristic", SelectorMode::Heuristic)] {
            match autoprompt::select(&candidates, &mode, &ctx).and_then(|c| autoprompt::assemble(&candidates, &c)) {
                Ok(p) => {
                    let worst = DirectionAxis::ALL
                        .iter()
                        .map(|a| geometry::angle_deg_2d(&p.direction(*a).unwrap(), &full.direction(*a).unwrap()))
                        .fold(0.0, f64::max);
                    print!(" | {name} worst {worst:>6.2} deg");
                }
                Err(e) => print!(" | {name}: {e}"),
            }
        }
        println!();
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run()
}
