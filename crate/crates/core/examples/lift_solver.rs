// Lifts ground-truth prompts to 3D contact poses and compares with the
// simulator's answer.

use crayon_bench::geometry;
use crayon_bench::harness::{self, CollectionConfig, Split};
use crayon_bench::planner::RotationMatrix;
use crayon_bench::predictor::{GeometricPredictor, Observation, Predictor};
use crayon_bench::sim;

pub fn run() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = CollectionConfig {
        train: 0,
        test_seen: 8,
        test_unseen: 2,
        ..CollectionConfig::default()
    };
    let ds = harness::run_collection(&cfg, 11)?;
    let solver = GeometricPredictor::default();
    println!("{:>4} {:>7} {:>8} {:>8} {:>8} {:>9}", "id", "kind", "z err", "y err", "m err", "contact");
    for rec in ds.split(Split::TestSeen).into_iter().chain(ds.split(Split::TestUnseen)) {
        let scene = rec.scene()?;
        let frame = sim::render_frame(&scene, &rec.camera.intrinsics, &rec.camera.extrinsics);
        let obs = Observation {
            depth: &frame.depth,
            camera: &rec.camera,
            scene: Some(&scene),
        };
        let a = solver.predict(&rec.full_prompt(), &obs)?;
        let m_err = match (a.move_dir, rec.gt.move_dir) {
            (Some(m), Some(g)) => format!("{:.2}", geometry::angle_deg(&m, &g)),
            _ => "-".into(),
        };
        println!(
            "{:>4} {:>7} {:>8.2} {:>8.2} {:>8} {:>8.1}mm",
            rec.id,
            rec.kind().to_string(),
            geometry::angle_deg(&a.z_axis, &rec.gt.z_axis),
            geometry::angle_deg(&a.y_axis, &rec.gt.y_axis),
            m_err,
            (a.contact_3d - rec.gt.contact_point_3d).norm() * 1000.0
        );
        let r = RotationMatrix::from_zy(&a.z_axis, &a.y_axis)?;
        assert!(geometry::orthonormality_error(r.matrix()) < 1e-9);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run()
}
