mod camera_geometry {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/camera_geometry.rs"));
}

mod collect_dataset {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/collect_dataset.rs"));
}

mod prompt_codec {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/prompt_codec.rs"));
}

mod loss_terms {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/loss_terms.rs"));
}

mod lift_solver {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/lift_solver.rs"));
}

mod train_toy {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/train_toy.rs"));
}

mod keyframe_plan {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/keyframe_plan.rs"));
}

mod auto_prompt {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/auto_prompt.rs"));
}

mod eval_sweeps {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/eval_sweeps.rs"));
}

mod service_session {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/service_session.rs"));
}


#[test]
fn camera_geometry_example_runs() {
    camera_geometry::run().expect("camera_geometry example");
}

#[test]
fn collect_dataset_example_runs() {
    collect_dataset::run().expect("collect_dataset example");
}

#[test]
fn prompt_codec_example_runs() {
    prompt_codec::run().expect("prompt_codec example");
}

#[test]
fn loss_terms_example_runs() {
    loss_terms::run().expect("loss_terms example");
}

#[test]
fn lift_solver_example_runs() {
    lift_solver::run().expect("lift_solver example");
}

#[test]
fn train_toy_example_runs() {
    train_toy::run().expect("train_toy example");
}

#[test]
fn keyframe_plan_example_runs() {
    keyframe_plan::run().expect("keyframe_plan example");
}

#[test]
fn auto_prompt_example_runs() {
    auto_prompt::run().expect("auto_prompt example");
}

#[test]
fn eval_sweeps_example_runs() {
    eval_sweeps::run().expect("eval_sweeps example");
}

#[test]
fn service_session_example_runs() {
    service_session::run().expect("service_session example");
}
