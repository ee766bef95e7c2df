// Pinhole projection, lifting with depth, and image directions of 3D vectors.

use crayon_bench::geometry::{self, CameraExtrinsics, CameraIntrinsics, Vec3};

pub fn run() -> Result<(), Box<dyn std::error::Error>> {
    let k = CameraIntrinsics::desk_default();
    let target = Vec3::new(0.0, 0.0, 0.6);
    let e = CameraExtrinsics::look_at(geometry::spherical_eye(&target, 2.5, 30.0, 25.0), target);
    println!("camera centre {:.3?}", e.camera_center().as_slice());

    let p = Vec3::new(0.1, -0.2, 0.75);
    let px = geometry::project(&p, &k, &e)?;
    let depth = e.to_camera(&p).z;
    let back = geometry::lift(&px, depth, &k, &e)?;
    println!("point {:?} -> pixel ({:.2}, {:.2}) at depth {:.3} -> {:?}", p.as_slice(), px.x, px.y, depth, back.as_slice());
    println!("round-trip error {:.2e}", (back - p).norm());

    let step = geometry::default_step(&p, &e);
    for (name, d) in [("world +z", Vec3::z()), ("world -x", -Vec3::x()), ("world +y", Vec3::y())] {
        let d2 = geometry::project_direction(&p, &d, step, &k, &e)?;
        println!("{name:>9} draws as ({:+.3}, {:+.3})", d2.x, d2.y);
    }

    // A direction along the viewing ray has no image direction.
    let ray = (p - e.camera_center()).normalize();
    println!("along the ray: {:?}", geometry::project_direction(&p, &ray, step, &k, &e).err());
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run()
}
