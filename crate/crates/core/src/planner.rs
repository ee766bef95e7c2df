//! Waypoint planning from predicted contact poses, and sequential key-frame
//! execution for long-horizon tasks.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Rotation3, Unit};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, Camera, Mat3, Vec3};
use crate::predictor::{Observation, PredictError, PredictedAction, Predictor};
use crate::prompt::{CrayonPrompt, PromptRecord};
use crate::sim::{self, ContactAction, ExecParams, ExecutionResult, JointMotion, Scene, SimError};

/// Largest |Ẑ·Ŷ| accepted when building a rotation.
pub const MAX_ZY_DOT: f64 = 0.99;
/// Contact points of the two rotate key-frames must coincide within this distance.
pub const ROTATE_CONTACT_TOLERANCE: f64 = 0.02;
pub const ROTATE_AXIS_TOLERANCE_DEG: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("axis {0} has zero length")]
    ZeroAxis(&'static str),
    #[error("z and y axes are nearly parallel (|z.y| = {0:.4})")]
    NearParallel(f64),
    #[error("primitive {0} requires a moving direction")]
    MissingMove(PrimitiveKind),
    #[error("plan has no steps")]
    Empty,
    #[error("rotate step {0} is not part of a consecutive pair")]
    UnpairedRotate(usize),
    #[error("rotate key-frames translate the contact by {0:.4}")]
    RotateTranslation(f64),
    #[error("rotate key-frames tilt the approach axis by {0:.2} degrees")]
    RotateAxis(f64),
    #[error("unknown primitive {0:?}")]
    UnknownPrimitive(String),
}

pub type Result<T> = std::result::Result<T, PlanError>;

/// Orthonormal gripper frame with columns (x̂, ŷ, ẑ).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationMatrix(Mat3);

impl RotationMatrix {
    /// Gram-Schmidt: keeps Z, removes Y's component along Z, and completes the
    /// frame with x̂ = ŷ × ẑ.
    pub fn from_zy(z: &Vec3, y: &Vec3) -> Result<Self> {
        let (nz, ny) = (z.norm(), y.norm());
        if !(nz > 1e-9) {
            return Err(PlanError::ZeroAxis("z"));
        }
        if !(ny > 1e-9) {
            return Err(PlanError::ZeroAxis("y"));
        }
        let zh = z / nz;
        let dot = zh.dot(&(y / ny));
        if dot.abs() >= MAX_ZY_DOT {
            return Err(PlanError::NearParallel(dot.abs()));
        }
        let yh = (y - zh * y.dot(&zh)).normalize();
        let xh = yh.cross(&zh);
        Ok(Self(Mat3::from_columns(&[xh, yh, zh])))
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn x(&self) -> Vec3 {
        self.0.column(0).into_owned()
    }

    pub fn y(&self) -> Vec3 {
        self.0.column(1).into_owned()
    }

    pub fn z(&self) -> Vec3 {
        self.0.column(2).into_owned()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveKind {
    Pick,
    Place,
    Push,
    Pull,
    Move,
    Rotate,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 6] = [
        PrimitiveKind::Pick,
        PrimitiveKind::Place,
        PrimitiveKind::Push,
        PrimitiveKind::Pull,
        PrimitiveKind::Move,
        PrimitiveKind::Rotate,
    ];

    pub fn requires_move_prompt(&self) -> bool {
        matches!(self, PrimitiveKind::Pick | PrimitiveKind::Push | PrimitiveKind::Pull)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            PrimitiveKind::Pick => "pick",
            PrimitiveKind::Place => "place",
            PrimitiveKind::Push => "push",
            PrimitiveKind::Pull => "pull",
            PrimitiveKind::Move => "move",
            PrimitiveKind::Rotate => "rotate",
        }
    }
}

impl fmt::Display for PrimitiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PrimitiveKind {
    type Err = PlanError;

    fn from_str(s: &str) -> Result<Self> {
        PrimitiveKind::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| PlanError::UnknownPrimitive(s.to_string()))
    }
}

/// Gripper opening before and after the contact key-frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Aperture {
    pub before_contact_closed: bool,
    pub after_contact_closed: bool,
}

impl Aperture {
    pub fn for_primitive(kind: PrimitiveKind) -> Self {
        let (before, after) = match kind {
            PrimitiveKind::Pick | PrimitiveKind::Pull | PrimitiveKind::Rotate => (false, true),
            PrimitiveKind::Place => (true, false),
            PrimitiveKind::Push | PrimitiveKind::Move => (true, true),
        };
        Self {
            before_contact_closed: before,
            after_contact_closed: after,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WaypointPhase {
    PreMove,
    Contact,
    PostMove,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub rotation: RotationMatrix,
    pub position: Vec3,
    pub closed: bool,
    pub phase: WaypointPhase,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanParams {
    /// Approach offset along the gripper's -z.
    pub d_pre: f64,
    /// Total post-contact travel along the moving direction.
    pub d_move: f64,
    pub n_post: usize,
}

impl Default for PlanParams {
    fn default() -> Self {
        Self {
            d_pre: 0.15,
            d_move: 0.25,
            n_post: 10,
        }
    }
}

/// Pre-move, contact, and (for primitives that need one) evenly spaced
/// post-move waypoints along the moving direction.
pub fn plan_step(action: &PredictedAction, primitive: PrimitiveKind, params: &PlanParams) -> Result<Vec<Waypoint>> {
    let rotation = RotationMatrix::from_zy(&action.z_axis, &action.y_axis)?;
    let z = rotation.z();
    let aperture = Aperture::for_primitive(primitive);
    let mut out = vec![
        Waypoint {
            rotation,
            position: action.contact_3d - z * params.d_pre,
            closed: aperture.before_contact_closed,
            phase: WaypointPhase::PreMove,
        },
        Waypoint {
            rotation,
            position: action.contact_3d,
            closed: aperture.after_contact_closed,
            phase: WaypointPhase::Contact,
        },
    ];
    if primitive.requires_move_prompt() {
        let m = action
            .move_dir
            .filter(|m| m.norm() > 1e-9)
            .ok_or(PlanError::MissingMove(primitive))?
            .normalize();
        for i in 1..=params.n_post {
            out.push(Waypoint {
                rotation,
                position: action.contact_3d + m * (params.d_move * i as f64 / params.n_post as f64),
                closed: aperture.after_contact_closed,
                phase: WaypointPhase::PostMove,
            });
        }
    }
    Ok(out)
}

/// Contact with pose `a`, then an in-place wrist sweep to pose `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotatePlan {
    pub approach: [Waypoint; 2],
    /// Signed sweep about the shared gripper z-axis, radians.
    pub angle: f64,
    pub sweep: Vec<Waypoint>,
}

pub fn plan_rotate(a: &PredictedAction, b: &PredictedAction, n_steps: usize, d_pre: f64) -> Result<RotatePlan> {
    let ra = RotationMatrix::from_zy(&a.z_axis, &a.y_axis)?;
    let rb = RotationMatrix::from_zy(&b.z_axis, &b.y_axis)?;
    let shift = (a.contact_3d - b.contact_3d).norm();
    if shift > ROTATE_CONTACT_TOLERANCE {
        return Err(PlanError::RotateTranslation(shift));
    }
    let tilt = geometry::angle_deg(&ra.z(), &rb.z());
    if tilt > ROTATE_AXIS_TOLERANCE_DEG {
        return Err(PlanError::RotateAxis(tilt));
    }
    let z = ra.z();
    // The relative rotation is (nearly) about z; read its angle in the xy plane.
    let yb = rb.y();
    let angle = yb.dot(&-ra.x()).atan2(yb.dot(&ra.y()));
    let steps = n_steps.max(1);
    let axis = Unit::new_normalize(z);
    let sweep = (1..=steps)
        .map(|i| {
            let r = Rotation3::from_axis_angle(&axis, angle * i as f64 / steps as f64);
            Waypoint {
                rotation: RotationMatrix(r.into_inner() * ra.matrix()),
                position: a.contact_3d,
                closed: true,
                phase: WaypointPhase::PostMove,
            }
        })
        .collect();
    let approach = [
        Waypoint {
            rotation: ra,
            position: a.contact_3d - z * d_pre,
            closed: false,
            phase: WaypointPhase::PreMove,
        },
        Waypoint {
            rotation: ra,
            position: a.contact_3d,
            closed: true,
            phase: WaypointPhase::Contact,
        },
    ];
    Ok(RotatePlan { approach, angle, sweep })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyFrameStep {
    pub prompt: PromptRecord,
    pub primitive: PrimitiveKind,
    /// Whether the gripper closes at contact.
    pub close_at_contact: bool,
    /// Joint motion the step is judged against.
    pub target: JointMotion,
}

impl KeyFrameStep {
    pub fn new(prompt: &CrayonPrompt, primitive: PrimitiveKind, target: JointMotion) -> Self {
        Self {
            prompt: prompt.to_record(),
            primitive,
            close_at_contact: Aperture::for_primitive(primitive).after_contact_closed,
            target,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyFramePlan {
    pub camera: Camera,
    pub steps: Vec<KeyFrameStep>,
}

impl KeyFramePlan {
    pub fn new(camera: Camera, steps: Vec<KeyFrameStep>) -> Result<Self> {
        let plan = Self { camera, steps };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(PlanError::Empty);
        }
        let mut i = 0;
        while i < self.steps.len() {
            if self.steps[i].primitive == PrimitiveKind::Rotate {
                if self.steps.get(i + 1).map(|s| s.primitive) != Some(PrimitiveKind::Rotate) {
                    return Err(PlanError::UnpairedRotate(i));
                }
                i += 2;
            } else {
                i += 1;
            }
        }
        Ok(())
    }

    /// Number of executions the plan performs; a rotate pair counts once.
    pub fn executable_steps(&self) -> usize {
        let rotates = self.steps.iter().filter(|s| s.primitive == PrimitiveKind::Rotate).count();
        self.steps.len() - rotates / 2
    }
}

#[derive(Debug, Error)]
pub enum StepError {
    #[error("step {step}: invalid prompt record: {message}")]
    Prompt { step: usize, message: String },
    #[error("step {step}: prediction failed: {source}")]
    Predict { step: usize, source: PredictError },
    #[error("step {step}: planning failed: {source}")]
    Plan { step: usize, source: PlanError },
    #[error("step {step}: simulation failed: {source}")]
    Sim { step: usize, source: SimError },
    #[error(transparent)]
    InvalidPlan(#[from] PlanError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub step: usize,
    pub action: PredictedAction,
    pub result: ExecutionResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanOutcome {
    pub steps: Vec<StepOutcome>,
    pub success: bool,
}

fn predict_step(
    scene: &Scene,
    camera: &Camera,
    index: usize,
    step: &KeyFrameStep,
    predictor: &dyn Predictor,
) -> std::result::Result<PredictedAction, StepError> {
    let prompt = step.prompt.validate().map_err(|e| StepError::Prompt {
        step: index,
        message: e.to_string(),
    })?;
    let frame = sim::render_frame(scene, &camera.intrinsics, &camera.extrinsics);
    let obs = Observation {
        depth: &frame.depth,
        camera,
        scene: Some(scene),
    };
    predictor
        .predict(&prompt, &obs)
        .map_err(|source| StepError::Predict { step: index, source })
}

/// Runs one non-rotate key-frame against the live scene.
pub fn execute_step(
    scene: &mut Scene,
    camera: &Camera,
    index: usize,
    step: &KeyFrameStep,
    predictor: &dyn Predictor,
    base: &ExecParams,
) -> std::result::Result<StepOutcome, StepError> {
    let action = predict_step(scene, camera, index, step, predictor)?;
    let params = ExecParams {
        primitive: step.primitive,
        target: step.target,
        ..*base
    };
    if step.primitive.requires_move_prompt() && action.move_dir.is_none() {
        let result = ExecutionResult {
            success: false,
            part_displacement: 0.0,
            trajectory: Vec::new(),
            failure_reason: Some(sim::FailureReason::NoMotion),
            final_state: scene.joint.state,
        };
        return Ok(StepOutcome { step: index, action, result });
    }
    let result = sim::execute(scene, &action.to_contact_action(), &params)
        .map_err(|source| StepError::Sim { step: index, source })?;
    Ok(StepOutcome { step: index, action, result })
}

/// Executes key-frames in order, stopping at the first unsuccessful step.
/// Overall success is the conjunction of every step's success.
pub fn execute_plan(
    scene: &mut Scene,
    plan: &KeyFramePlan,
    predictor: &dyn Predictor,
    base: &ExecParams,
) -> std::result::Result<PlanOutcome, StepError> {
    plan.validate()?;
    let camera = &plan.camera;
    let mut steps = Vec::new();
    let mut i = 0;
    while i < plan.steps.len() {
        let step = &plan.steps[i];
        let outcome = if step.primitive == PrimitiveKind::Rotate {
            let a = predict_step(scene, camera, i, step, predictor)?;
            let b = predict_step(scene, camera, i + 1, &plan.steps[i + 1], predictor)?;
            let rotate = plan_rotate(&a, &b, base.n_post, base.d_pre).map_err(|source| StepError::Plan { step: i, source })?;
            let params = ExecParams {
                primitive: PrimitiveKind::Rotate,
                target: step.target,
                ..*base
            };
            let result = sim::execute_rotation(scene, &a.to_contact_action(), rotate.angle, &params)
                .map_err(|source| StepError::Sim { step: i, source })?;
            i += 2;
            StepOutcome { step: i - 2, action: a, result }
        } else {
            i += 1;
            execute_step(scene, camera, i - 1, step, predictor, base)?
        };
        let ok = outcome.result.success;
        steps.push(outcome);
        if !ok {
            break;
        }
    }
    let success = steps.len() == plan.executable_steps() && steps.iter().all(|s| s.result.success);
    Ok(PlanOutcome { steps, success })
}

impl PredictedAction {
    pub fn to_contact_action(&self) -> ContactAction {
        ContactAction {
            contact: self.contact_3d,
            z_axis: self.z_axis,
            y_axis: self.y_axis,
            move_dir: self.move_dir,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::Provenance;
    use approx::assert_relative_eq;

    fn action(z: Vec3, y: Vec3, m: Option<Vec3>) -> PredictedAction {
        PredictedAction {
            contact_px_pred: Default::default(),
            contact_3d: Vec3::new(0.5, 0.1, 0.4),
            z_axis: z,
            y_axis: y,
            move_dir: m,
            provenance: Provenance::Solver,
        }
    }

    #[test]
    fn rotation_from_canonical_axes() {
        let r = RotationMatrix::from_zy(&Vec3::z(), &Vec3::y()).unwrap();
        assert_relative_eq!(r.x(), Vec3::x(), epsilon = 1e-15);
        assert_relative_eq!(*r.matrix(), Mat3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn leaning_y_is_straightened_within_zy_plane() {
        let lean = 10f64.to_radians();
        let y = Vec3::new(0.0, lean.cos(), lean.sin());
        let r = RotationMatrix::from_zy(&Vec3::z(), &y).unwrap();
        assert!(r.y().dot(&r.z()).abs() < 1e-15);
        assert_relative_eq!(r.y(), Vec3::y(), epsilon = 1e-15);
        assert!(geometry::orthonormality_error(r.matrix()) < 1e-12);
        assert!((r.matrix().determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rotation_rejects_parallel_and_zero() {
        assert!(matches!(RotationMatrix::from_zy(&Vec3::x(), &Vec3::x()), Err(PlanError::NearParallel(_))));
        assert!(matches!(RotationMatrix::from_zy(&Vec3::zeros(), &Vec3::x()), Err(PlanError::ZeroAxis("z"))));
    }

    #[test]
    fn pick_moves_up_and_place_stops_at_contact() {
        let params = PlanParams::default();
        let a = action(-Vec3::x(), Vec3::y(), Some(Vec3::z()));
        let wps = plan_step(&a, PrimitiveKind::Pick, &params).unwrap();
        assert_eq!(wps.len(), 2 + params.n_post);
        let post: Vec<_> = wps.iter().filter(|w| w.phase == WaypointPhase::PostMove).collect();
        assert!(post.windows(2).all(|p| p[1].position.z > p[0].position.z));
        assert!(!wps[0].closed && wps[1].closed);
        let d = (wps[1].position - wps[0].position).dot(&wps[1].rotation.z());
        assert_relative_eq!(d, params.d_pre, epsilon = 1e-12);

        let place = plan_step(&a, PrimitiveKind::Place, &params).unwrap();
        assert_eq!(place.len(), 2);
        assert!(place[0].closed && !place[1].closed);
    }

    #[test]
    fn move_requiring_primitive_without_m_fails() {
        let a = action(-Vec3::x(), Vec3::y(), None);
        assert_eq!(
            plan_step(&a, PrimitiveKind::Pull, &PlanParams::default()),
            Err(PlanError::MissingMove(PrimitiveKind::Pull))
        );
        assert!(plan_step(&a, PrimitiveKind::Move, &PlanParams::default()).is_ok());
    }

    #[test]
    fn rotate_sweeps_relative_angle() {
        let a = action(Vec3::z(), Vec3::y(), None);
        let same = plan_rotate(&a, &a, 4, 0.15).unwrap();
        assert_eq!(same.angle, 0.0);
        let r90 = Rotation3::from_axis_angle(&Vec3::z_axis(), std::f64::consts::FRAC_PI_2);
        let b = action(Vec3::z(), r90 * Vec3::y(), None);
        let plan = plan_rotate(&a, &b, 4, 0.15).unwrap();
        assert_relative_eq!(plan.angle, std::f64::consts::FRAC_PI_2, epsilon = 1e-12);
        let last = plan.sweep.last().unwrap();
        assert_relative_eq!(last.rotation.y(), r90 * Vec3::y(), epsilon = 1e-12);
        assert!(plan.sweep.iter().all(|w| w.position == a.contact_3d));

        let mut far = b.clone();
        far.contact_3d.x += 0.1;
        assert!(matches!(plan_rotate(&a, &far, 4, 0.15), Err(PlanError::RotateTranslation(_))));
    }

    #[test]
    fn rotate_angle_matches_rotation_log() {
        let base = RotationMatrix::from_zy(&Vec3::new(0.2, -0.3, 1.0), &Vec3::new(1.0, 0.5, 0.0)).unwrap();
        for deg in [-170.0, -45.0, 12.5, 90.0, 179.0] {
            let rel = Rotation3::from_axis_angle(&Unit::new_normalize(base.z()), f64::to_radians(deg));
            let a = action(base.z(), base.y(), None);
            let b = action(base.z(), rel * base.y(), None);
            let plan = plan_rotate(&a, &b, 8, 0.15).unwrap();
            let ra = Rotation3::from_matrix_unchecked(*base.matrix());
            let rb = Rotation3::from_matrix_unchecked(rel.into_inner() * base.matrix());
            let log = (rb * ra.inverse()).scaled_axis();
            assert!((plan.angle - log.dot(&base.z())).abs() < 1e-6, "{deg}");
        }
    }

    #[test]
    fn plan_validation() {
        let cam = Camera::new(geometry::CameraIntrinsics::desk_default(), geometry::CameraExtrinsics::identity());
        let p = CrayonPrompt::contact_only(Default::default());
        assert_eq!(KeyFramePlan::new(cam, vec![]), Err(PlanError::Empty));
        let rot = KeyFrameStep::new(&p, PrimitiveKind::Rotate, JointMotion::Open);
        let pull = KeyFrameStep::new(&p, PrimitiveKind::Pull, JointMotion::Open);
        assert_eq!(
            KeyFramePlan::new(cam, vec![rot.clone(), pull.clone()]),
            Err(PlanError::UnpairedRotate(0))
        );
        assert!(KeyFramePlan::new(cam, vec![pull, rot.clone(), rot]).is_ok());
    }
}
