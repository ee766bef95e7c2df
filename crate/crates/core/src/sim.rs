//! Procedural articulated objects and a quasi-static flying gripper.
//!
//! Every scene is a handful of axis-aligned boxes forming a static base plus
//! one movable box attached through a single prismatic or revolute joint. The
//! movable box is stored in its rest pose; the joint maps it into the world.

use std::fmt;
use std::str::FromStr;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, CameraExtrinsics, CameraIntrinsics, DepthImage, Mat3, Vec2, Vec3};
use crate::planner::{self, PlanParams, PrimitiveKind, RotationMatrix, WaypointPhase};

/// Fraction of the joint range an object part must travel to count as success.
pub const SUCCESS_THRESHOLD: f64 = 0.10;
/// Minimum number of visible graspable pixels before ground truth is collected.
pub const MIN_VISIBLE_PIXELS: usize = 20;
/// Ground-truth sampling attempts before giving up on a scene.
pub const MAX_GT_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("malformed action: {0}")]
    MalformedAction(String),
    #[error("no graspable contact: {visible} handle pixels visible, {attempts} sampled poses replayed without success (0 means no pixel had a handle neighbourhood)")]
    NoGraspableRegion { attempts: usize, visible: usize },
    #[error("unknown scene kind {0:?}")]
    UnknownKind(String),
    #[error("planning failed: {0}")]
    Plan(#[from] planner::PlanError),
    #[error("scene description mismatch: {0}")]
    Description(String),
}

pub type Result<T> = std::result::Result<T, SimError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    Drawer,
    Door,
    Lid,
    Button,
    Lever,
}

impl SceneKind {
    pub const ALL: [SceneKind; 5] = [
        SceneKind::Drawer,
        SceneKind::Door,
        SceneKind::Lid,
        SceneKind::Button,
        SceneKind::Lever,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SceneKind::Drawer => "drawer",
            SceneKind::Door => "door",
            SceneKind::Lid => "lid",
            SceneKind::Button => "button",
            SceneKind::Lever => "lever",
        }
    }

    /// Primitive that opens/actuates this kind of object.
    pub fn opening_primitive(&self) -> PrimitiveKind {
        match self {
            SceneKind::Drawer | SceneKind::Door | SceneKind::Lid => PrimitiveKind::Pull,
            SceneKind::Button | SceneKind::Lever => PrimitiveKind::Push,
        }
    }
}

impl fmt::Display for SceneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SceneKind {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        SceneKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| SimError::UnknownKind(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointKind {
    Prismatic,
    Revolute,
}

/// Which way along the joint a task wants the part to travel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointMotion {
    /// Increasing joint state (opening, pressing).
    #[default]
    Open,
    /// Decreasing joint state.
    Close,
}

impl JointMotion {
    pub fn sign(&self) -> f64 {
        match self {
            JointMotion::Open => 1.0,
            JointMotion::Close => -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub kind: JointKind,
    pub axis: Vec3,
    /// Point on the rotation axis; unused for prismatic joints.
    pub pivot: Vec3,
    pub limits: [f64; 2],
    pub state: f64,
}

impl Joint {
    pub fn range(&self) -> f64 {
        self.limits[1] - self.limits[0]
    }

    pub fn set_state(&mut self, q: f64) {
        self.state = q.clamp(self.limits[0], self.limits[1]);
    }

    fn rotation(&self) -> Mat3 {
        match self.kind {
            JointKind::Prismatic => Mat3::identity(),
            JointKind::Revolute => {
                nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(self.axis), self.state)
                    .into_inner()
            }
        }
    }

    /// Rest-frame point to world at the current state.
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        match self.kind {
            JointKind::Prismatic => p + self.axis * self.state,
            JointKind::Revolute => self.pivot + self.rotation() * (p - self.pivot),
        }
    }

    pub fn apply_dir(&self, d: &Vec3) -> Vec3 {
        self.rotation() * d
    }

    pub fn invert(&self, p: &Vec3) -> Vec3 {
        match self.kind {
            JointKind::Prismatic => p - self.axis * self.state,
            JointKind::Revolute => self.pivot + self.rotation().transpose() * (p - self.pivot),
        }
    }

    pub fn invert_dir(&self, d: &Vec3) -> Vec3 {
        self.rotation().transpose() * d
    }

    /// Velocity of a world point on the part per unit joint velocity.
    pub fn point_velocity(&self, p: &Vec3) -> Vec3 {
        match self.kind {
            JointKind::Prismatic => self.axis,
            JointKind::Revolute => self.axis.cross(&(p - self.pivot)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Face {
    NegX,
    PosX,
    NegY,
    PosY,
    NegZ,
    PosZ,
}

impl Face {
    fn from_axis(axis: usize, positive: bool) -> Self {
        match (axis, positive) {
            (0, false) => Face::NegX,
            (0, true) => Face::PosX,
            (1, false) => Face::NegY,
            (1, true) => Face::PosY,
            (2, false) => Face::NegZ,
            _ => Face::PosZ,
        }
    }

    pub fn axis(&self) -> usize {
        match self {
            Face::NegX | Face::PosX => 0,
            Face::NegY | Face::PosY => 1,
            Face::NegZ | Face::PosZ => 2,
        }
    }

    pub fn normal(&self) -> Vec3 {
        let mut n = Vec3::zeros();
        n[self.axis()] = match self {
            Face::PosX | Face::PosY | Face::PosZ => 1.0,
            _ => -1.0,
        };
        n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self {
            min: Vec3::from(min),
            max: Vec3::from(max),
        }
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) / 2.0
    }

    /// First entry of the ray into the box as (distance parameter, face).
    /// Rays starting inside the box report no hit.
    pub fn ray_hit(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, Face)> {
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        let mut face = Face::PosX;
        for a in 0..3 {
            if dir[a].abs() < 1e-15 {
                if origin[a] < self.min[a] || origin[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[a];
            let (t0, t1, entering_positive) = if inv > 0.0 {
                ((self.min[a] - origin[a]) * inv, (self.max[a] - origin[a]) * inv, false)
            } else {
                ((self.max[a] - origin[a]) * inv, (self.min[a] - origin[a]) * inv, true)
            };
            if t0 > t_near {
                t_near = t0;
                face = Face::from_axis(a, entering_positive);
            }
            t_far = t_far.min(t1);
            if t_near > t_far {
                return None;
            }
        }
        (t_near > 0.0).then_some((t_near, face))
    }

    /// Nearest point on the box surface, its outward face normal and the
    /// unsigned distance from `p`.
    pub fn closest_surface_point(&self, p: &Vec3) -> (Vec3, Vec3, f64) {
        let inside = (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a]);
        if inside {
            let mut best = (f64::INFINITY, Face::PosX);
            for a in 0..3 {
                let dl = p[a] - self.min[a];
                let dh = self.max[a] - p[a];
                if dl < best.0 {
                    best = (dl, Face::from_axis(a, false));
                }
                if dh < best.0 {
                    best = (dh, Face::from_axis(a, true));
                }
            }
            let (dist, face) = best;
            let mut q = *p;
            let a = face.axis();
            q[a] = if face.normal()[a] > 0.0 { self.max[a] } else { self.min[a] };
            (q, face.normal(), dist)
        } else {
            let q = Vec3::new(
                p.x.clamp(self.min.x, self.max.x),
                p.y.clamp(self.min.y, self.max.y),
                p.z.clamp(self.min.z, self.max.z),
            );
            let d = p - q;
            // Dominant clamped axis decides the face normal.
            let a = d.iamax();
            let face = Face::from_axis(a, d[a] > 0.0);
            (q, face.normal(), d.norm())
        }
    }

    pub fn contains(&self, p: &Vec3, tol: f64) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] - tol && p[a] <= self.max[a] + tol)
    }
}

/// Graspable patch on one face of the movable part (rest frame).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HandleRegion {
    pub face: Face,
    pub min: Vec3,
    pub max: Vec3,
    /// Unit tangent along the handle's long edge.
    pub long_axis: Vec3,
}

impl HandleRegion {
    pub fn contains(&self, p_rest: &Vec3) -> bool {
        let axis = self.face.axis();
        (0..3).filter(|a| *a != axis).all(|a| p_rest[a] >= self.min[a] && p_rest[a] <= self.max[a])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Background,
    Base,
    Part,
    Handle,
}

impl Label {
    pub fn is_part(&self) -> bool {
        matches!(self, Label::Part | Label::Handle)
    }
}

/// Replayable record of how a scene was generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDescription {
    pub kind: SceneKind,
    pub seed: u64,
    pub joint_kind: JointKind,
    pub axis: Vec3,
    pub pivot: Vec3,
    pub limits: [f64; 2],
    pub initial_state: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub kind: SceneKind,
    pub seed: u64,
    pub base: Vec<Aabb>,
    /// Movable part in its rest pose.
    pub part: Aabb,
    pub handle: HandleRegion,
    pub joint: Joint,
    pub initial_state: f64,
}

impl Scene {
    /// Deterministic procedural scene for `(kind, seed)`.
    pub fn build(kind: SceneKind, seed: u64) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5CE4_E000_0000_0000);
        let s: f64 = rng.random_range(0.9..1.1);
        let sw: f64 = rng.random_range(0.9..1.1);
        let b = |min: [f64; 3], max: [f64; 3]| {
            Aabb::new(
                [min[0] * s, min[1] * s * sw, min[2] * s],
                [max[0] * s, max[1] * s * sw, max[2] * s],
            )
        };
        let v = |p: [f64; 3]| Vec3::new(p[0] * s, p[1] * s * sw, p[2] * s);
        let (base, part, handle, mut joint) = match kind {
            SceneKind::Drawer => {
                let base = vec![b([-0.45, -0.5, 0.0], [0.45, 0.5, 1.0])];
                let part = b([-0.3, -0.4, 0.55], [0.5, 0.4, 0.9]);
                let hb = b([0.5, -0.25, 0.66], [0.5, 0.25, 0.79]);
                let handle = HandleRegion { face: Face::PosX, min: hb.min, max: hb.max, long_axis: Vec3::y() };
                let joint = Joint {
                    kind: JointKind::Prismatic,
                    axis: Vec3::x(),
                    pivot: Vec3::zeros(),
                    limits: [0.0, 0.5 * s],
                    state: 0.0,
                };
                (base, part, handle, joint)
            }
            SceneKind::Door => {
                let base = vec![b([-0.45, -0.5, 0.0], [0.45, 0.5, 1.2])];
                let part = b([0.45, -0.5, 0.03], [0.52, 0.5, 1.17]);
                let hb = b([0.52, 0.22, 0.4], [0.52, 0.42, 0.8]);
                let handle = HandleRegion { face: Face::PosX, min: hb.min, max: hb.max, long_axis: Vec3::z() };
                let joint = Joint {
                    kind: JointKind::Revolute,
                    axis: -Vec3::z(),
                    pivot: v([0.52, -0.5, 0.0]),
                    limits: [0.0, std::f64::consts::FRAC_PI_2],
                    state: 0.0,
                };
                (base, part, handle, joint)
            }
            SceneKind::Lid => {
                let base = vec![b([-0.4, -0.4, 0.0], [0.4, 0.4, 0.6])];
                let part = b([-0.42, -0.42, 0.6], [0.42, 0.42, 0.74]);
                let hb = b([0.42, -0.25, 0.62], [0.42, 0.25, 0.72]);
                let handle = HandleRegion { face: Face::PosX, min: hb.min, max: hb.max, long_axis: Vec3::y() };
                let joint = Joint {
                    kind: JointKind::Revolute,
                    axis: -Vec3::y(),
                    pivot: v([-0.42, 0.0, 0.6]),
                    limits: [0.0, std::f64::consts::FRAC_PI_2],
                    state: 0.0,
                };
                (base, part, handle, joint)
            }
            SceneKind::Button => {
                let base = vec![b([-0.4, -0.4, 0.0], [0.4, 0.4, 0.5])];
                let part = b([-0.13, -0.13, 0.5], [0.13, 0.13, 0.6]);
                let hb = b([-0.1, -0.1, 0.6], [0.1, 0.1, 0.6]);
                let handle = HandleRegion { face: Face::PosZ, min: hb.min, max: hb.max, long_axis: Vec3::y() };
                let joint = Joint {
                    kind: JointKind::Prismatic,
                    axis: -Vec3::z(),
                    pivot: Vec3::zeros(),
                    limits: [0.0, 0.08 * s],
                    state: 0.0,
                };
                (base, part, handle, joint)
            }
            SceneKind::Lever => {
                let base = vec![b([-0.4, -0.4, 0.0], [0.4, 0.4, 0.5])];
                let part = b([-0.06, -0.12, 0.5], [0.06, 0.12, 0.98]);
                let hb = b([0.06, -0.08, 0.8], [0.06, 0.08, 0.94]);
                let handle = HandleRegion { face: Face::PosX, min: hb.min, max: hb.max, long_axis: Vec3::y() };
                let joint = Joint {
                    kind: JointKind::Revolute,
                    axis: -Vec3::y(),
                    pivot: v([0.0, 0.0, 0.5]),
                    limits: [0.0, std::f64::consts::FRAC_PI_3],
                    state: 0.0,
                };
                (base, part, handle, joint)
            }
        };
        let initial_state = joint.limits[0] + rng.random_range(0.0..=0.5) * joint.range();
        joint.set_state(initial_state);
        Scene {
            kind,
            seed,
            base,
            part,
            handle,
            joint,
            initial_state,
        }
    }

    pub fn description(&self) -> SceneDescription {
        SceneDescription {
            kind: self.kind,
            seed: self.seed,
            joint_kind: self.joint.kind,
            axis: self.joint.axis,
            pivot: self.joint.pivot,
            limits: self.joint.limits,
            initial_state: self.initial_state,
        }
    }

    /// Rebuilds a scene from its description, checking that the procedural
    /// generator still produces the recorded joint.
    pub fn from_description(desc: &SceneDescription) -> Result<Scene> {
        let scene = Scene::build(desc.kind, desc.seed);
        if scene.description() != *desc {
            return Err(SimError::Description(format!(
                "{} seed {} no longer matches its recorded joint parameters",
                desc.kind, desc.seed
            )));
        }
        Ok(scene)
    }

    /// Centre of the scene's bounding box at rest; cameras look here.
    pub fn focus(&self) -> Vec3 {
        let mut min = self.part.min;
        let mut max = self.part.max;
        for b in &self.base {
            min = min.inf(&b.min);
            max = max.sup(&b.max);
        }
        (min + max) / 2.0
    }

    pub fn reset(&mut self) {
        self.joint.set_state(self.initial_state);
    }

    /// Joint displacement since the initial state as a fraction of the range.
    pub fn displacement_fraction(&self) -> f64 {
        (self.joint.state - self.initial_state) / self.joint.range()
    }

    /// Nearest surface hit along a ray: (distance, label, world normal).
    pub fn ray_cast(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, Label, Vec3)> {
        let mut best: Option<(f64, Label, Vec3)> = None;
        for b in &self.base {
            if let Some((t, face)) = b.ray_hit(origin, dir) {
                if best.is_none_or(|h| t < h.0) {
                    best = Some((t, Label::Base, face.normal()));
                }
            }
        }
        let o_rest = self.joint.invert(origin);
        let d_rest = self.joint.invert_dir(dir);
        if let Some((t, face)) = self.part.ray_hit(&o_rest, &d_rest) {
            if best.is_none_or(|h| t < h.0) {
                let hit_rest = o_rest + d_rest * t;
                let label = if face == self.handle.face && self.handle.contains(&hit_rest) {
                    Label::Handle
                } else {
                    Label::Part
                };
                best = Some((t, label, self.joint.apply_dir(&face.normal())));
            }
        }
        best
    }

    /// Distance from a world point to the movable part's surface, with the
    /// nearest surface point and its outward normal (world frame).
    pub fn part_surface(&self, p: &Vec3) -> (Vec3, Vec3, f64) {
        let (q, n, d) = self.part.closest_surface_point(&self.joint.invert(p));
        (self.joint.apply(&q), self.joint.apply_dir(&n), d)
    }

    /// Unit direction a point on the part moves under positive joint velocity.
    pub fn free_direction(&self, p: &Vec3) -> Option<Vec3> {
        let v = self.joint.point_velocity(p);
        (v.norm() > 1e-12).then(|| v.normalize())
    }

    /// True when the world point lies on (or within `tol` of) the movable part.
    pub fn on_part(&self, p: &Vec3, tol: f64) -> bool {
        self.part_surface(p).2 <= tol || self.part.contains(&self.joint.invert(p), 0.0)
    }
}

/// Rasterized view of a scene.
#[derive(Debug, Clone)]
pub struct Frame {
    pub rgb: RgbImage,
    pub depth: DepthImage,
    pub labels: Vec<Label>,
}

impl Frame {
    pub fn label(&self, col: u32, row: u32) -> Label {
        self.labels[(row * self.rgb.width() + col) as usize]
    }
}

const BACKGROUND: [u8; 3] = [232, 232, 236];
const BASE_COLOR: [f64; 3] = [168.0, 164.0, 158.0];
const PART_COLOR: [f64; 3] = [150.0, 112.0, 80.0];
const HANDLE_COLOR: [f64; 3] = [88.0, 74.0, 66.0];

fn shade(color: [f64; 3], normal: &Vec3) -> Rgb<u8> {
    let light = Vec3::new(0.45, 0.3, 1.0).normalize();
    let f = 0.55 + 0.45 * normal.dot(&light).abs();
    Rgb([
        (color[0] * f).round() as u8,
        (color[1] * f).round() as u8,
        (color[2] * f).round() as u8,
    ])
}

/// Flat-shaded ray-cast render with exact per-pixel depth and labels.
pub fn render_frame(scene: &Scene, k: &CameraIntrinsics, e: &CameraExtrinsics) -> Frame {
    let mut rgb = RgbImage::from_pixel(k.width, k.height, Rgb(BACKGROUND));
    let mut depth = DepthImage::new_invalid(k.width, k.height);
    let mut labels = vec![Label::Background; (k.width * k.height) as usize];
    let origin = e.camera_center();
    for row in 0..k.height {
        for col in 0..k.width {
            // z-scaled ray: the hit parameter is the camera-frame depth
            let dir = e.dir_to_world(&k.ray(&Vec2::new(col as f64, row as f64)));
            let Some((t, label, normal)) = scene.ray_cast(&origin, &dir) else {
                continue;
            };
            depth.set(col, row, t);
            labels[(row * k.width + col) as usize] = label;
            let color = match label {
                Label::Base => BASE_COLOR,
                Label::Part => PART_COLOR,
                Label::Handle => HANDLE_COLOR,
                Label::Background => unreachable!(),
            };
            rgb.put_pixel(col, row, shade(color, &normal));
        }
    }
    Frame { rgb, depth, labels }
}

pub fn render(scene: &Scene, k: &CameraIntrinsics, e: &CameraExtrinsics) -> (RgbImage, DepthImage) {
    let f = render_frame(scene, k, e);
    (f.rgb, f.depth)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthAction {
    pub contact_point_3d: Vec3,
    pub z_axis: Vec3,
    pub y_axis: Vec3,
    pub move_dir: Option<Vec3>,
    pub part_id: u32,
    #[serde(default)]
    pub motion: JointMotion,
}

/// Pose handed to the executor: where to touch and how to move afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactAction {
    pub contact: Vec3,
    pub z_axis: Vec3,
    pub y_axis: Vec3,
    pub move_dir: Option<Vec3>,
}

impl From<&GroundTruthAction> for ContactAction {
    fn from(gt: &GroundTruthAction) -> Self {
        Self {
            contact: gt.contact_point_3d,
            z_axis: gt.z_axis,
            y_axis: gt.y_axis,
            move_dir: gt.move_dir,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExecParams {
    pub primitive: PrimitiveKind,
    pub target: JointMotion,
    /// Pre-move offset along the gripper's -z.
    pub d_pre: f64,
    pub grasp_tolerance: f64,
    pub grasp_angle_deg: f64,
    /// A step slips, releasing the part, when its lateral component exceeds
    /// this fraction of its length.
    pub slip_tolerance: f64,
    pub n_post: usize,
    /// Post-contact travel as a fraction of the joint range.
    pub move_fraction: f64,
    pub success_threshold: f64,
}

impl Default for ExecParams {
    fn default() -> Self {
        Self {
            primitive: PrimitiveKind::Pull,
            target: JointMotion::Open,
            d_pre: 0.15,
            grasp_tolerance: 0.05,
            grasp_angle_deg: 60.0,
            slip_tolerance: 0.5,
            n_post: 10,
            move_fraction: 0.5,
            success_threshold: SUCCESS_THRESHOLD,
        }
    }
}

impl ExecParams {
    pub fn for_task(kind: SceneKind, target: JointMotion) -> Self {
        let primitive = match (kind.opening_primitive(), target) {
            (p, JointMotion::Open) => p,
            (PrimitiveKind::Pull, JointMotion::Close) => PrimitiveKind::Push,
            (_, JointMotion::Close) => PrimitiveKind::Pull,
        };
        Self {
            primitive,
            target,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    NoContact,
    Slip,
    Collision,
    NoMotion,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GripperState {
    pub rotation: Mat3,
    pub position: Vec3,
    pub closed: bool,
    /// Contact anchor on the movable part (rest frame) once attached.
    pub attached: Option<Vec3>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub success: bool,
    /// Signed progress toward the target motion, as a fraction of the range.
    pub part_displacement: f64,
    pub trajectory: Vec<GripperState>,
    pub failure_reason: Option<FailureReason>,
    pub final_state: f64,
}

fn check_direction(name: &str, v: &Vec3) -> Result<Vec3> {
    if !v.iter().all(|c| c.is_finite()) || v.norm() < 1e-9 {
        return Err(SimError::MalformedAction(format!("{name} is zero or non-finite")));
    }
    Ok(v.normalize())
}

enum Contact {
    Attached { anchor_rest: Vec3, point: Vec3 },
    Failed(FailureReason),
}

fn make_contact(scene: &Scene, pre: &Vec3, z: &Vec3, params: &ExecParams) -> Contact {
    let Some((s, label, normal)) = scene.ray_cast(pre, z) else {
        return Contact::Failed(FailureReason::NoContact);
    };
    if s < params.d_pre - params.grasp_tolerance {
        return Contact::Failed(FailureReason::Collision);
    }
    if s > params.d_pre + params.grasp_tolerance {
        return Contact::Failed(FailureReason::NoContact);
    }
    let point = pre + z * s;
    match label {
        Label::Background => Contact::Failed(FailureReason::NoContact),
        Label::Base => Contact::Failed(FailureReason::NoMotion),
        Label::Part | Label::Handle => {
            if geometry::angle_deg(z, &-normal) > params.grasp_angle_deg {
                return Contact::Failed(FailureReason::NoContact);
            }
            Contact::Attached {
                anchor_rest: scene.joint.invert(&point),
                point,
            }
        }
    }
}

/// Travel distance at the anchor that corresponds to `fraction` of the joint range.
pub fn move_distance(scene: &Scene, anchor: &Vec3, fraction: f64) -> f64 {
    fraction * scene.joint.range() * scene.joint.point_velocity(anchor).norm()
}

fn finish(
    scene: &Scene,
    start: f64,
    params: &ExecParams,
    trajectory: Vec<GripperState>,
    failure: Option<FailureReason>,
) -> ExecutionResult {
    let progress = params.target.sign() * (scene.joint.state - start) / scene.joint.range();
    let success = failure.is_none() && progress >= params.success_threshold;
    let failure_reason = if success {
        None
    } else {
        Some(failure.unwrap_or(FailureReason::NoMotion))
    };
    ExecutionResult {
        success,
        part_displacement: progress,
        trajectory,
        failure_reason,
        final_state: scene.joint.state,
    }
}

/// Quasi-static execution: approach, attach, then follow the move direction,
/// projecting every commanded step onto the joint's free direction.
pub fn execute(scene: &mut Scene, action: &ContactAction, params: &ExecParams) -> Result<ExecutionResult> {
    let z = check_direction("z axis", &action.z_axis)?;
    let y = check_direction("y axis", &action.y_axis)?;
    let move_dir = action.move_dir.map(|m| check_direction("move direction", &m)).transpose()?;
    if !action.contact.iter().all(|c| c.is_finite()) {
        return Err(SimError::MalformedAction("contact point is non-finite".into()));
    }
    let rotation = RotationMatrix::from_zy(&z, &y)?;
    let start = scene.joint.state;
    let pre = action.contact - z * params.d_pre;
    let opening = planner::Aperture::for_primitive(params.primitive);
    let mut trajectory = vec![GripperState {
        rotation: *rotation.matrix(),
        position: pre,
        closed: opening.before_contact_closed,
        attached: None,
    }];

    let (anchor_rest, contact_point) = match make_contact(scene, &pre, &z, params) {
        Contact::Attached { anchor_rest, point } => (anchor_rest, point),
        Contact::Failed(reason) => return Ok(finish(scene, start, params, trajectory, Some(reason))),
    };
    trajectory.push(GripperState {
        rotation: *rotation.matrix(),
        position: contact_point,
        closed: opening.after_contact_closed,
        attached: Some(anchor_rest),
    });

    let plan_params = PlanParams {
        d_pre: params.d_pre,
        d_move: move_distance(scene, &contact_point, params.move_fraction),
        n_post: params.n_post,
    };
    let predicted = crate::predictor::PredictedAction {
        contact_px_pred: Vec2::zeros(),
        contact_3d: action.contact,
        z_axis: z,
        y_axis: y,
        move_dir,
        provenance: crate::predictor::Provenance::GroundTruth,
    };
    let waypoints = planner::plan_step(&predicted, params.primitive, &plan_params)?;
    let post: Vec<_> = waypoints.iter().filter(|w| w.phase == WaypointPhase::PostMove).collect();
    let mut previous = waypoints
        .iter()
        .find(|w| w.phase == WaypointPhase::Contact)
        .map(|w| w.position)
        .unwrap_or(action.contact);
    let mut slipped = false;
    for w in post {
        let commanded = w.position - previous;
        previous = w.position;
        let anchor = scene.joint.apply(&anchor_rest);
        let velocity = scene.joint.point_velocity(&anchor);
        let speed = velocity.norm();
        let step_len = commanded.norm();
        if speed < 1e-12 || step_len < 1e-15 {
            continue;
        }
        let free = velocity / speed;
        let along = commanded.dot(&free);
        let lateral = (commanded - free * along).norm();
        if lateral > params.slip_tolerance * step_len {
            slipped = true;
            break;
        }
        let q = scene.joint.state + along / speed;
        scene.joint.set_state(q);
        trajectory.push(GripperState {
            rotation: *rotation.matrix(),
            position: scene.joint.apply(&anchor_rest),
            closed: opening.after_contact_closed,
            attached: Some(anchor_rest),
        });
    }
    let progress = params.target.sign() * (scene.joint.state - start) / scene.joint.range();
    let failure = (slipped && progress < params.success_threshold).then_some(FailureReason::Slip);
    Ok(finish(scene, start, params, trajectory, failure))
}

/// Contact followed by an in-place wrist rotation of `angle` radians about the
/// gripper z-axis. Only a revolute joint aligned with the wrist axis follows.
pub fn execute_rotation(
    scene: &mut Scene,
    action: &ContactAction,
    angle: f64,
    params: &ExecParams,
) -> Result<ExecutionResult> {
    const AXIS_ALIGNMENT_DEG: f64 = 5.0;
    let z = check_direction("z axis", &action.z_axis)?;
    let y = check_direction("y axis", &action.y_axis)?;
    let rotation = RotationMatrix::from_zy(&z, &y)?;
    let start = scene.joint.state;
    let pre = action.contact - z * params.d_pre;
    let mut trajectory = vec![GripperState {
        rotation: *rotation.matrix(),
        position: pre,
        closed: false,
        attached: None,
    }];
    let (anchor_rest, point) = match make_contact(scene, &pre, &z, params) {
        Contact::Attached { anchor_rest, point } => (anchor_rest, point),
        Contact::Failed(reason) => return Ok(finish(scene, start, params, trajectory, Some(reason))),
    };
    let wrist = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(z), angle);
    trajectory.push(GripperState {
        rotation: *rotation.matrix(),
        position: point,
        closed: true,
        attached: Some(anchor_rest),
    });
    let aligned = scene.joint.kind == JointKind::Revolute
        && geometry::angle_deg(&scene.joint.axis, &z).min(geometry::angle_deg(&scene.joint.axis, &-z))
            <= AXIS_ALIGNMENT_DEG;
    if aligned {
        let sign = scene.joint.axis.dot(&z).signum();
        scene.joint.set_state(scene.joint.state + sign * angle);
    }
    trajectory.push(GripperState {
        rotation: wrist.into_inner() * rotation.matrix(),
        position: point,
        closed: true,
        attached: Some(anchor_rest),
    });
    Ok(finish(scene, start, params, trajectory, None))
}

/// Rule-based ground truth: sample a visible handle pixel, build the contact
/// pose from the surface geometry, and keep it only if it replays successfully.
pub fn collect_ground_truth<R: Rng + ?Sized>(
    scene: &Scene,
    k: &CameraIntrinsics,
    e: &CameraExtrinsics,
    rng: &mut R,
    motion: JointMotion,
) -> Result<GroundTruthAction> {
    const INTERIOR_RADIUS: i64 = 3;
    let frame = render_frame(scene, k, e);
    let (w, h) = (k.width as i64, k.height as i64);
    let handle_at = |c: i64, r: i64| c >= 0 && r >= 0 && c < w && r < h && frame.labels[(r * w + c) as usize] == Label::Handle;
    let visible = frame.labels.iter().filter(|l| **l == Label::Handle).count();
    let mut candidates = Vec::new();
    if visible >= MIN_VISIBLE_PIXELS {
        for r in 0..h {
            for c in 0..w {
                let interior = (-INTERIOR_RADIUS..=INTERIOR_RADIUS)
                    .all(|dr| (-INTERIOR_RADIUS..=INTERIOR_RADIUS).all(|dc| handle_at(c + dc, r + dr)));
                if interior {
                    candidates.push((c, r));
                }
            }
        }
    }
    if candidates.is_empty() {
        return Err(SimError::NoGraspableRegion {
            attempts: 0,
            visible,
        });
    }
    let params = ExecParams::for_task(scene.kind, motion);
    for _ in 0..MAX_GT_ATTEMPTS {
        let (c, r) = candidates[rng.random_range(0..candidates.len())];
        let px = Vec2::new(c as f64, r as f64);
        let Some(d) = frame.depth.get(c, r) else { continue };
        let Ok(contact) = geometry::lift(&px, d, k, e) else { continue };
        let normal = scene.joint.apply_dir(&scene.handle.face.normal());
        let z_axis = -normal;
        let y_axis = scene.joint.apply_dir(&scene.handle.long_axis);
        let move_dir = scene.free_direction(&contact).map(|f| f * motion.sign());
        let gt = GroundTruthAction {
            contact_point_3d: contact,
            z_axis,
            y_axis,
            move_dir,
            part_id: 0,
            motion,
        };
        let mut replay = scene.clone();
        if execute(&mut replay, &ContactAction::from(&gt), &params)?.success {
            return Ok(gt);
        }
    }
    Err(SimError::NoGraspableRegion {
        attempts: MAX_GT_ATTEMPTS,
        visible,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{lift, project};

    fn front_camera(scene: &Scene) -> (CameraIntrinsics, CameraExtrinsics) {
        let target = scene.focus();
        let eye = geometry::spherical_eye(&target, 5.0, 20.0, 35.0);
        (CameraIntrinsics::desk_default(), CameraExtrinsics::look_at(eye, target))
    }

    #[test]
    fn drawer_and_door_joint_layout() {
        let drawer = Scene::build(SceneKind::Drawer, 3);
        assert_eq!(drawer.joint.kind, JointKind::Prismatic);
        assert_eq!(drawer.joint.axis, Vec3::x());
        let door = Scene::build(SceneKind::Door, 3);
        assert_eq!(door.joint.kind, JointKind::Revolute);
        assert!(door.joint.axis.cross(&Vec3::z()).norm() < 1e-12);
        // hinge sits on the frame edge
        assert!((door.joint.pivot.y - door.part.min.y).abs() < 1e-12);
    }

    #[test]
    fn initial_state_in_lower_half_of_range() {
        for kind in SceneKind::ALL {
            for seed in 0..50 {
                let s = Scene::build(kind, seed);
                let frac = (s.joint.state - s.joint.limits[0]) / s.joint.range();
                assert!((0.0..=0.5).contains(&frac));
                assert_eq!(s, Scene::build(kind, seed));
            }
        }
    }

    #[test]
    fn description_roundtrip_and_text_is_stable() {
        let s = Scene::build(SceneKind::Lid, 11);
        let text = serde_json::to_string(&s.description()).unwrap();
        let again = serde_json::to_string(&Scene::build(SceneKind::Lid, 11).description()).unwrap();
        assert_eq!(text, again);
        let desc: SceneDescription = serde_json::from_str(&text).unwrap();
        assert_eq!(Scene::from_description(&desc).unwrap(), s);
    }

    #[test]
    fn depth_at_part_face_matches_ray_plane_distance() {
        let mut scene = Scene::build(SceneKind::Drawer, 5);
        let (k, e) = front_camera(&scene);
        let face_x = scene.part.max.x + scene.joint.state;
        let center = Vec3::new(face_x, scene.part.center().y, scene.part.center().z);
        let px = project(&center, &k, &e).unwrap();
        let (col, row) = (px.x.round(), px.y.round());
        let frame = render_frame(&scene, &k, &e);
        let depth = frame.depth.get(col as i64, row as i64).unwrap();
        // analytic: ray through the pixel meets plane x = face_x
        let c = e.camera_center();
        let d = e.dir_to_world(&k.ray(&Vec2::new(col, row)));
        let s = (face_x - c.x) / d.x;
        assert!((depth - s).abs() < 1e-6);
        assert!(frame.label(col as u32, row as u32).is_part());

        // pulling the drawer by delta changes depth by delta along the ray
        let delta = 0.05;
        scene.joint.set_state(scene.joint.state + delta);
        let moved = render_frame(&scene, &k, &e);
        let depth2 = moved.depth.get(col as i64, row as i64).unwrap();
        let s2 = (face_x + delta - c.x) / d.x;
        assert!((depth2 - s2).abs() < 1e-6);
        assert!(depth2 < depth);
    }

    #[test]
    fn background_is_invalid_and_lifted_pixels_lie_on_geometry() {
        for kind in SceneKind::ALL {
            let scene = Scene::build(kind, 2);
            let (k, e) = front_camera(&scene);
            let frame = render_frame(&scene, &k, &e);
            assert_eq!(frame.label(0, 0), Label::Background);
            assert!(frame.depth.get(0, 0).is_none());
            for row in (0..k.height).step_by(7) {
                for col in (0..k.width).step_by(7) {
                    let Some(d) = frame.depth.get(col as i64, row as i64) else { continue };
                    let p = lift(&Vec2::new(col as f64, row as f64), d, &k, &e).unwrap();
                    let on_base = scene.base.iter().map(|b| b.closest_surface_point(&p).2).fold(f64::INFINITY, f64::min);
                    let on_part = scene.part_surface(&p).2;
                    assert!(on_base.min(on_part) < 1e-5, "{kind} ({col},{row})");
                }
            }
        }
    }

    #[test]
    fn gt_move_dir_follows_joint_kinematics() {
        let scene = Scene::build(SceneKind::Drawer, 8);
        let (k, e) = front_camera(&scene);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = collect_ground_truth(&scene, &k, &e, &mut rng, JointMotion::Open).unwrap();
        assert!((gt.move_dir.unwrap() - Vec3::x()).norm() < 1e-12);
        assert!(gt.z_axis.dot(&gt.y_axis).abs() < 1e-6);

        let door = Scene::build(SceneKind::Door, 8);
        let (k, e) = front_camera(&door);
        let gt = collect_ground_truth(&door, &k, &e, &mut rng, JointMotion::Open).unwrap();
        let m = gt.move_dir.unwrap();
        let arm = gt.contact_point_3d - door.joint.pivot;
        assert!(m.dot(&door.joint.axis).abs() < 1e-9);
        let arm_perp = arm - door.joint.axis * arm.dot(&door.joint.axis);
        assert!(m.dot(&arm_perp).abs() < 1e-9);
    }

    #[test]
    fn contact_on_static_base_does_not_move() {
        let mut scene = Scene::build(SceneKind::Drawer, 4);
        let b = scene.base[0];
        let contact = Vec3::new(b.max.x, 0.0, 0.2);
        let action = ContactAction {
            contact,
            z_axis: -Vec3::x(),
            y_axis: Vec3::y(),
            move_dir: Some(Vec3::x()),
        };
        let res = execute(&mut scene, &action, &ExecParams::default()).unwrap();
        assert!(!res.success);
        assert_eq!(res.failure_reason, Some(FailureReason::NoMotion));
        assert_eq!(res.part_displacement, 0.0);
    }

    fn drawer_front_action(scene: &Scene, move_dir: Vec3) -> ContactAction {
        ContactAction {
            contact: Vec3::new(
                scene.part.max.x + scene.joint.state,
                scene.part.center().y,
                scene.part.center().z,
            ),
            z_axis: -Vec3::x(),
            y_axis: Vec3::y(),
            move_dir: Some(move_dir),
        }
    }

    #[test]
    fn orthogonal_move_gives_no_displacement() {
        let mut scene = Scene::build(SceneKind::Drawer, 4);
        let action = drawer_front_action(&scene, Vec3::z());
        let res = execute(&mut scene, &action, &ExecParams::default()).unwrap();
        assert_eq!(res.part_displacement, 0.0);
        assert!(!res.success);
    }

    #[test]
    fn pulling_drawer_succeeds_and_respects_limits() {
        let mut scene = Scene::build(SceneKind::Drawer, 4);
        let action = drawer_front_action(&scene, Vec3::x());
        let params = ExecParams {
            move_fraction: 3.0,
            ..ExecParams::default()
        };
        let res = execute(&mut scene, &action, &params).unwrap();
        assert!(res.success);
        assert_eq!(scene.joint.state, scene.joint.limits[1]);
        assert!(res.trajectory.len() >= 3);
    }

    #[test]
    fn zero_vector_is_malformed() {
        let mut scene = Scene::build(SceneKind::Drawer, 4);
        let mut action = drawer_front_action(&scene, Vec3::x());
        action.z_axis = Vec3::zeros();
        assert!(matches!(
            execute(&mut scene, &action, &ExecParams::default()),
            Err(SimError::MalformedAction(_))
        ));
    }

    #[test]
    fn far_contact_misses() {
        let mut scene = Scene::build(SceneKind::Drawer, 4);
        let mut action = drawer_front_action(&scene, Vec3::x());
        action.contact.x += 0.3;
        let res = execute(&mut scene, &action, &ExecParams::default()).unwrap();
        assert_eq!(res.failure_reason, Some(FailureReason::NoContact));
    }

    #[test]
    fn execution_is_deterministic() {
        let scene = Scene::build(SceneKind::Door, 9);
        let (k, e) = front_camera(&scene);
        let gt = collect_ground_truth(&scene, &k, &e, &mut ChaCha8Rng::seed_from_u64(3), JointMotion::Open).unwrap();
        let mut a = scene.clone();
        let mut b = scene.clone();
        let p = ExecParams::default();
        assert_eq!(
            execute(&mut a, &(&gt).into(), &p).unwrap(),
            execute(&mut b, &(&gt).into(), &p).unwrap()
        );
    }

    #[test]
    fn wrist_rotation_drives_aligned_revolute_joint_only() {
        let mut scene = Scene::build(SceneKind::Button, 1);
        let top = Vec3::new(0.0, 0.0, scene.part.max.z - scene.joint.state);
        let action = ContactAction {
            contact: top,
            z_axis: -Vec3::z(),
            y_axis: Vec3::y(),
            move_dir: None,
        };
        // prismatic button ignores wrist rotation
        let res = execute_rotation(&mut scene, &action, 0.5, &ExecParams::default()).unwrap();
        assert_eq!(res.failure_reason, Some(FailureReason::NoMotion));

        // a knob: same geometry with a vertical revolute joint
        scene.joint = Joint {
            kind: JointKind::Revolute,
            axis: Vec3::z(),
            pivot: Vec3::zeros(),
            limits: [0.0, std::f64::consts::PI],
            state: 0.0,
        };
        scene.initial_state = 0.0;
        let action = ContactAction {
            contact: Vec3::new(0.0, 0.0, scene.part.max.z),
            ..action
        };
        let res = execute_rotation(&mut scene, &action, -1.0, &ExecParams::default()).unwrap();
        assert!(res.success, "{res:?}");
        assert!((scene.joint.state - 1.0).abs() < 1e-12);
    }
}
