//! Crayon visual prompts for articulated-object manipulation.
//!
//! A prompt is a blue contact dot plus red (gripper z), green (gripper y) and
//! yellow (moving direction) lines drawn on a camera image. This crate turns
//! prompts into 3D contact poses and executes them in a small procedural
//! simulator:
//!
//! - [`geometry`]: pinhole projection, lifting, surface normals, camera sampling.
//! - [`sim`]: drawers, doors, lids, buttons and levers with a flying gripper.
//! - [`prompt`]: prompt records, overlays, language templates, noise.
//! - [`objective`]: bin discretization, text/orthogonality/reprojection losses.
//! - [`predictor`]: the geometric lifting solver and a trainable toy model.
//! - [`planner`]: waypoints, primitives, rotate pairs, key-frame plans.
//! - [`autoprompt`]: automatic prompts from detected regions and 32 candidate lines.
//! - [`harness`]: dataset collection, evaluation sweeps and reports.
//! - [`service`]: session workbench and its HTTP routes.

pub mod autoprompt;
pub mod geometry;
pub mod harness;
pub mod objective;
pub mod planner;
pub mod predictor;
pub mod prompt;
pub mod service;
pub mod sim;

pub use geometry::{Camera, CameraExtrinsics, CameraIntrinsics, DepthImage, Vec2, Vec3};
pub use planner::{KeyFramePlan, PrimitiveKind};
pub use predictor::{GeometricPredictor, PredictedAction, Predictor};
pub use prompt::{CrayonPrompt, Pattern, PromptRecord};
pub use sim::{GroundTruthAction, Scene, SceneKind};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] geometry::GeometryError),
    #[error(transparent)]
    Sim(#[from] sim::SimError),
    #[error(transparent)]
    Prompt(#[from] prompt::PromptError),
    #[error(transparent)]
    Validation(#[from] prompt::ValidationError),
    #[error(transparent)]
    Objective(#[from] objective::ObjectiveError),
    #[error(transparent)]
    Predict(#[from] predictor::PredictError),
    #[error(transparent)]
    Plan(#[from] planner::PlanError),
    #[error(transparent)]
    Step(#[from] planner::StepError),
    #[error(transparent)]
    AutoPrompt(#[from] autoprompt::AutoPromptError),
    #[error(transparent)]
    Harness(#[from] harness::HarnessError),
}

pub type Result<T> = std::result::Result<T, Error>;
