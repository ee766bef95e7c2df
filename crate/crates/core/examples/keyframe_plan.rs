// Pull-then-push episodes: each key-frame is prompted from the live scene,
// planned into waypoints, executed, and the recorded plan replays exactly.

use crayon_bench::harness::{self, LongHorizonConfig};
use crayon_bench::planner::{self, PlanParams};
use crayon_bench::predictor::GeometricPredictor;

pub fn run() -> Result<(), Box<dyn std::error::Error>> {
    let solver = GeometricPredictor::default();
    let cfg = LongHorizonConfig {
        trials: 6,
        ..LongHorizonConfig::default()
    };
    let trials = harness::run_longhorizon(&cfg, &solver, 8);
    for t in &trials {
        let steps: Vec<String> = t
            .plan
            .steps
            .iter()
            .zip(&t.steps)
            .map(|(k, s)| format!("{} {:+.2}", k.primitive, s.result.part_displacement))
            .collect();
        println!("{:>2} {:<6} {:<5} [{}] {}", t.id, t.scene.kind.to_string(), t.success, steps.join(", "), t.failure.as_deref().unwrap_or(""));
    }

    let t = trials.iter().find(|t| t.success).ok_or("no successful episode")?;
    let first = &t.steps[0];
    let waypoints = planner::plan_step(&first.action, t.plan.steps[0].primitive, &PlanParams::default())?;
    println!("episode {} step 0: {} waypoints", t.id, waypoints.len());
    for w in waypoints.iter().take(3) {
        println!("  {:?} closed={} at {:.3?}", w.phase, w.closed, w.position.as_slice());
    }

    let (scene, outcome) = harness::replay_plan(&t.scene, &t.plan, &solver)?;
    assert_eq!(outcome.success, t.success);
    println!("replayed: success {}, final joint state {:.4}", outcome.success, scene.joint.state);

    let report = harness::longhorizon_report(&trials, 8, "example", "solver");
    println!("{}", report.to_json());
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run()
}
