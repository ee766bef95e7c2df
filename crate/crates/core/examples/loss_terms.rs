// The three training losses on one record: bin cross-entropy over the
// direction components, the z/y orthogonality penalty, and the reprojection
// of predicted 3D directions onto the drawn lines.

use crayon_bench::harness::{self, CollectionConfig};
use crayon_bench::objective::{self, DirectionLogits, LossParts, LossWeights};
use crayon_bench::predictor::{GeometricPredictor, Observation, Predictor};
use crayon_bench::sim;
use crayon_bench::Vec3;

pub fn run() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = CollectionConfig {
        train: 0,
        test_seen: 4,
        test_unseen: 0,
        ..CollectionConfig::default()
    };
    let ds = harness::run_collection(&cfg, 3)?;
    let rec = &ds.records[0];
    let scene = rec.scene()?;
    let frame = sim::render_frame(&scene, &rec.camera.intrinsics, &rec.camera.extrinsics);

    let bins = objective::gt_bins(&rec.gt);
    println!("gt z {:.3?} -> bins {:?}", rec.gt.z_axis.as_slice(), &bins[..3]);

    // Uniform logits cost ln(101) per active component.
    let mask = objective::gt_mask(&rec.gt);
    let flat = objective::text_loss(&DirectionLogits::zeros(), &rec.gt, &mask);
    println!("L_T(uniform) = {flat:.4} (ln 101 = {:.4})", (101f64).ln());

    let z = Vec3::new(1.0, 0.0, 0.0);
    for y in [Vec3::new(0.0, 1.0, 0.0), Vec3::new(1.0, 1.0, 0.0), z] {
        println!("L_O(x, {:?}) = {:.3}", y.as_slice(), objective::orthogonal_loss(&z, &y)?);
    }

    let solver = GeometricPredictor::default();
    let obs = Observation {
        depth: &frame.depth,
        camera: &rec.camera,
        scene: Some(&scene),
    };
    let prompt = rec.full_prompt();
    let action = solver.predict(&prompt, &obs)?;
    let lp = objective::projection_loss(&action, &prompt, &rec.camera.intrinsics, &rec.camera.extrinsics, &frame.depth)?;
    println!("L_P(solver) = {:.2e} over {} lines", lp.value, lp.terms);

    let parts = LossParts {
        l_text: flat,
        l_ortho: objective::orthogonal_loss(&action.z_axis, &action.y_axis)?,
        l_proj: lp.value,
    };
    for (name, w) in harness::ablation_weights() {
        println!("{name:>10}: total {:.4}", objective::total_loss(&parts, &w).total);
    }
    assert!(LossWeights::new(0.0, 0.0, 0.0).is_err());

    let (_, gz, gy) = objective::orthogonal_loss_grad(&Vec3::new(0.3, 0.9, 0.1), &Vec3::new(0.8, -0.2, 0.4))?;
    let analytic = [gz.x, gz.y, gz.z, gy.x, gy.y, gy.z];
    let x = [0.3, 0.9, 0.1, 0.8, -0.2, 0.4];
    let err = objective::check_gradient(
        |v| objective::orthogonal_loss(&Vec3::new(v[0], v[1], v[2]), &Vec3::new(v[3], v[4], v[5])),
        &x,
        &analytic,
        1e-6,
    )?;
    println!("L_O gradient vs central differences: {err:.2e}");
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run()
}
