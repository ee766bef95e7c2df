//! Prompt-to-action predictors.
//!
//! [`GeometricPredictor`] lifts a prompt with depth and camera geometry by
//! minimising the reprojection and orthogonality losses on the sphere.
//! [`ToyModel`] is a small trainable network over local depth and prompt
//! features, supervised with the same objective.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{self, Camera, CameraExtrinsics, CameraIntrinsics, DepthImage, GeometryError, SurfacePatch, Vec2, Vec3};
use crate::objective::{self, CompositeObjective, LossParts, LossWeights, ObjectiveError, NUM_BINS, NUM_COMPONENTS};
use crate::prompt::{CrayonPrompt, DirectionAxis, Pattern};
use crate::sim::{GroundTruthAction, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Solver,
    ToyModel,
    GroundTruth,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictedAction {
    pub contact_px_pred: Vec2,
    pub contact_3d: Vec3,
    pub z_axis: Vec3,
    pub y_axis: Vec3,
    pub move_dir: Option<Vec3>,
    pub provenance: Provenance,
}

impl PredictedAction {
    pub fn from_ground_truth(gt: &GroundTruthAction, contact_px: Vec2) -> Self {
        Self {
            contact_px_pred: contact_px,
            contact_3d: gt.contact_point_3d,
            z_axis: gt.z_axis,
            y_axis: gt.y_axis,
            move_dir: gt.move_dir,
            provenance: Provenance::GroundTruth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PredictError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("solver did not converge in {iterations} iterations (best loss {loss:.3e})")]
    NonConvergence {
        iterations: usize,
        loss: f64,
        best: Box<PredictedAction>,
    },
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("curriculum probabilities must be non-negative and sum to 1 (got {0})")]
    InvalidCurriculum(f64),
    #[error("model file config hash {found} does not match expected {expected}")]
    HashMismatch { expected: String, found: String },
    #[error("model file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, PredictError>;

/// What a predictor may look at besides the prompt.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub depth: &'a DepthImage,
    pub camera: &'a Camera,
    /// Present when the predictor may use scene articulation for tie-breaks.
    pub scene: Option<&'a Scene>,
}

pub trait Predictor: Send + Sync {
    fn predict(&self, prompt: &CrayonPrompt, obs: &Observation<'_>) -> Result<PredictedAction>;
    fn provenance(&self) -> Provenance;
}

/// Directions at a pixel whose image projection is parallel to a 2D
/// direction. `ray` and `in_plane` are orthonormal; directions with a positive
/// `in_plane` component project onto `+dir2d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeasibleFamily {
    pub ray: Vec3,
    pub in_plane: Vec3,
}

impl FeasibleFamily {
    pub fn basis(&self) -> [Vec3; 2] {
        [self.ray, self.in_plane]
    }

    /// Unit normal of the family plane.
    pub fn normal(&self) -> Vec3 {
        self.ray.cross(&self.in_plane)
    }

    /// Projection of `±v` onto the family plane, signed to have a positive
    /// `in_plane` component. `None` if `v` is orthogonal to the in-plane axis.
    pub fn project(&self, v: &Vec3) -> Option<Vec3> {
        let a = v.dot(&self.ray);
        let b = v.dot(&self.in_plane);
        let w = (self.ray * a + self.in_plane * b) * b.signum();
        (w.norm() > 1e-9 && b.abs() > 1e-9).then(|| w.normalize())
    }
}

pub fn feasible_family(dir2d: &Vec2, pixel: &Vec2, k: &CameraIntrinsics, e: &CameraExtrinsics) -> FeasibleFamily {
    let d = dir2d.normalize();
    let ray = e.dir_to_world(&k.ray(pixel)).normalize();
    let ahead = e.dir_to_world(&k.ray(&(pixel + d))).normalize();
    let in_plane = (ahead - ray * ahead.dot(&ray)).normalize();
    FeasibleFamily { ray, in_plane }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub w_p: f64,
    pub w_o: f64,
    pub w_n: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub normal_window: usize,
    pub initial_step: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            w_p: 1.0,
            w_o: 1.0,
            w_n: 0.3,
            max_iters: 500,
            tol: 1e-8,
            normal_window: 5,
            initial_step: 0.1,
        }
    }
}

/// Diagnostics from one solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub action: PredictedAction,
    pub normal: Vec3,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub iterations: usize,
}

/// World contact point for a pixel plus the fitted local surface.
pub fn lift_contact(
    pixel: &Vec2,
    depth: &DepthImage,
    k: &CameraIntrinsics,
    e: &CameraExtrinsics,
    window: usize,
) -> Result<(Vec3, SurfacePatch)> {
    let patch = geometry::fit_surface(depth, pixel, window, k, e)?;
    let point = match depth.at(pixel) {
        Some(d) => geometry::lift(pixel, d, k, e)?,
        None => patch
            .intersect(pixel, k, e)
            .ok_or(GeometryError::InvalidDepth(f64::NAN))?,
    };
    Ok((point, patch))
}

/// A unit vector orthogonal to `z`, preferring the horizontal one.
pub fn default_y(z: &Vec3) -> Vec3 {
    let c = z.cross(&Vec3::z());
    if c.norm() > 1e-6 {
        c.normalize()
    } else {
        z.cross(&Vec3::x()).normalize()
    }
}

struct SolverObjective<'a> {
    cfg: &'a SolverConfig,
    origin: Vec3,
    step: f64,
    k: &'a CameraIntrinsics,
    e: &'a CameraExtrinsics,
    z2d: Option<Vec2>,
    y2d: Option<Vec2>,
    normal: Vec3,
}

impl SolverObjective<'_> {
    /// Loss and Euclidean gradients with respect to Z and Y.
    fn eval(&self, z: &Vec3, y: &Vec3) -> Result<(f64, Vec3, Vec3)> {
        let (lo, mut gz, mut gy) = objective::orthogonal_loss_grad(z, y)?;
        let mut f = self.cfg.w_o * lo;
        gz *= self.cfg.w_o;
        gy *= self.cfg.w_o;
        f += self.cfg.w_n * (1.0 - z.dot(&-self.normal));
        gz += self.normal * self.cfg.w_n;
        for (target, v, g) in [(self.z2d, z, &mut gz), (self.y2d, y, &mut gy)] {
            let Some(t) = target else { continue };
            match objective::reprojection_term(&self.origin, v, &t, self.step, self.k, self.e)? {
                Some((val, grad)) => {
                    f += self.cfg.w_p * val;
                    *g += grad * self.cfg.w_p;
                }
                // Along the viewing ray the reprojection is undefined: cos = 0.
                None => f += self.cfg.w_p,
            }
        }
        Ok((f, gz, gy))
    }
}

fn tangent(g: &Vec3, v: &Vec3) -> Vec3 {
    g - v * g.dot(v)
}

/// Picks M inside its feasible family: aligned with the joint's free
/// direction when a scene is known, otherwise the member parallel to the
/// image plane.
pub fn resolve_move(family: &FeasibleFamily, contact: &Vec3, e: &CameraExtrinsics, scene: Option<&Scene>) -> Vec3 {
    if let Some(free) = scene.and_then(|s| s.free_direction(contact)) {
        if let Some(m) = family.project(&free) {
            return m;
        }
    }
    let flat = family.normal().cross(&e.forward());
    family.project(&flat).unwrap_or(family.in_plane)
}

/// Lifts a prompt to a 3D action.
pub fn lift_pose_geometric(
    prompt: &CrayonPrompt,
    depth: &DepthImage,
    k: &CameraIntrinsics,
    e: &CameraExtrinsics,
    config: &SolverConfig,
    scene: Option<&Scene>,
) -> Result<PredictedAction> {
    solve(prompt, depth, k, e, config, scene).map(|r| r.action)
}

pub fn solve(
    prompt: &CrayonPrompt,
    depth: &DepthImage,
    k: &CameraIntrinsics,
    e: &CameraExtrinsics,
    cfg: &SolverConfig,
    scene: Option<&Scene>,
) -> Result<SolveReport> {
    let px = prompt.contact_px();
    let (origin, patch) = lift_contact(&px, depth, k, e, cfg.normal_window)?;
    let normal = patch.normal;
    let family = |axis| prompt.direction(axis).map(|d| feasible_family(&d, &px, k, e));
    let (fz, fy, fm) = (family(DirectionAxis::Z), family(DirectionAxis::Y), family(DirectionAxis::M));

    let mut z = fz.and_then(|f| f.project(&-normal)).unwrap_or(-normal);
    let mut y = match fy {
        Some(f) => {
            let w = f.normal().cross(&z);
            if w.norm() > 1e-9 {
                let w = w.normalize();
                if w.dot(&f.in_plane) >= 0.0 {
                    w
                } else {
                    -w
                }
            } else {
                f.in_plane
            }
        }
        None => default_y(&z),
    };

    let obj = SolverObjective {
        cfg,
        origin,
        step: geometry::default_step(&origin, e),
        k,
        e,
        z2d: prompt.z_dir(),
        y2d: prompt.y_dir(),
        normal,
    };
    let (mut f, mut gz, mut gy) = obj.eval(&z, &y)?;
    let initial_loss = f;
    let mut step = cfg.initial_step;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let (tz, ty) = (tangent(&gz, &z), tangent(&gy, &y));
        if (tz.norm_squared() + ty.norm_squared()).sqrt() < 1e-12 {
            converged = true;
            break;
        }
        let mut accepted = false;
        while step > 1e-14 {
            let zn = (z - tz * step).normalize();
            let yn = (y - ty * step).normalize();
            let (fn_, gzn, gyn) = obj.eval(&zn, &yn)?;
            if fn_ < f {
                let gain = f - fn_;
                (z, y, f, gz, gy) = (zn, yn, fn_, gzn, gyn);
                step = (step * 1.5).min(1.0);
                accepted = true;
                if gain < cfg.tol {
                    converged = true;
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            converged = true;
        }
        if converged {
            break;
        }
    }

    let y_fixed = y - z * y.dot(&z);
    let y = if y_fixed.norm() > 1e-9 { y_fixed.normalize() } else { default_y(&z) };
    let move_dir = fm.map(|f| resolve_move(&f, &origin, e, scene));
    let action = PredictedAction {
        contact_px_pred: px,
        contact_3d: origin,
        z_axis: z,
        y_axis: y,
        move_dir,
        provenance: Provenance::Solver,
    };
    if !converged {
        return Err(PredictError::NonConvergence {
            iterations,
            loss: f,
            best: Box::new(action),
        });
    }
    Ok(SolveReport {
        action,
        normal,
        initial_loss,
        final_loss: f,
        iterations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GeometricPredictor {
    pub config: SolverConfig,
}

impl Predictor for GeometricPredictor {
    fn predict(&self, prompt: &CrayonPrompt, obs: &Observation<'_>) -> Result<PredictedAction> {
        let c = obs.camera;
        lift_pose_geometric(prompt, obs.depth, &c.intrinsics, &c.extrinsics, &self.config, obs.scene)
    }

    fn provenance(&self) -> Provenance {
        Provenance::Solver
    }
}

/// Probability of training on each prompt pattern, in P, PZ, PZY, PZYM order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSpec {
    pub probabilities: [f64; 4],
}

impl Default for CurriculumSpec {
    fn default() -> Self {
        Self {
            probabilities: [0.25; 4],
        }
    }
}

impl CurriculumSpec {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.probabilities.iter().sum();
        if self.probabilities.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(PredictError::InvalidCurriculum(sum));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Pattern {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (p, pattern) in self.probabilities.iter().zip(Pattern::ALL) {
            acc += p;
            if u < acc {
                return pattern;
            }
        }
        Pattern::PZYM
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub hidden: usize,
    pub patch: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Largest contact correction the model may predict, in pixels.
    pub offset_cap_px: f64,
    pub offset_weight: f64,
    /// Training-time contact jitter (pixels) and how often it is applied.
    pub contact_jitter_px: f64,
    pub jitter_probability: f64,
    pub init_scale: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            patch: 16,
            learning_rate: 2e-3,
            batch_size: 32,
            offset_cap_px: 16.0,
            offset_weight: 0.2,
            contact_jitter_px: 6.0,
            jitter_probability: 0.3,
            init_scale: 1.0,
        }
    }
}

impl ToyConfig {
    pub fn feature_dim(&self) -> usize {
        self.patch * self.patch + 3 + 3 + 3 * 6
    }

    pub fn output_dim(&self) -> usize {
        NUM_COMPONENTS * NUM_BINS + 2
    }

    fn crop_size(&self) -> usize {
        self.patch + 2 * self.offset_cap_px.ceil() as usize + 8
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Depth crop around a pixel with intrinsics re-based onto the crop.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthCrop {
    pub depth: DepthImage,
    pub camera: Camera,
    pub origin: (i64, i64),
}

impl DepthCrop {
    pub fn around(depth: &DepthImage, camera: &Camera, center: &Vec2, size: usize) -> Self {
        let half = size as i64 / 2;
        let c0 = center.x.round() as i64 - half;
        let r0 = center.y.round() as i64 - half;
        let mut crop = DepthImage::new_invalid(size as u32, size as u32);
        for r in 0..size as i64 {
            for c in 0..size as i64 {
                if let Some(d) = depth.get(c0 + c, r0 + r) {
                    crop.set(c as u32, r as u32, d);
                }
            }
        }
        let k = camera.intrinsics;
        let intrinsics = CameraIntrinsics {
            principal_x: k.principal_x - c0 as f64,
            principal_y: k.principal_y - r0 as f64,
            width: size as u32,
            height: size as u32,
            ..k
        };
        Self {
            depth: crop,
            camera: Camera::new(intrinsics, camera.extrinsics),
            origin: (c0, r0),
        }
    }

    pub fn to_local(&self, px: &Vec2) -> Vec2 {
        Vec2::new(px.x - self.origin.0 as f64, px.y - self.origin.1 as f64)
    }
}

/// Network input for one prompt observation.
pub fn toy_features(cfg: &ToyConfig, prompt: &CrayonPrompt, crop: &DepthCrop) -> Vec<f64> {
    let k = &crop.camera.intrinsics;
    let e = &crop.camera.extrinsics;
    let px = crop.to_local(&prompt.contact_px());
    let mut out = Vec::with_capacity(cfg.feature_dim());
    let (pc, pr) = (px.x.round() as i64, px.y.round() as i64);
    let half = cfg.patch as i64 / 2;
    let center = crop.depth.get(pc, pr).or_else(|| {
        let vals: Vec<f64> = (-2..=2)
            .flat_map(|dr| (-2..=2).filter_map(move |dc| crop.depth.get(pc + dc, pr + dr)))
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    });
    for r in 0..cfg.patch as i64 {
        for c in 0..cfg.patch as i64 {
            let v = match (crop.depth.get(pc + c - half, pr + r - half), center) {
                (Some(d), Some(dc)) => ((d - dc) * 10.0).clamp(-3.0, 3.0),
                _ => 0.0,
            };
            out.push(v);
        }
    }
    let normal = geometry::estimate_normal(&crop.depth, &px, 5, k, e).unwrap_or_else(|_| Vec3::zeros());
    out.extend(normal.iter());
    let ray = e.dir_to_world(&k.ray(&px)).normalize();
    out.extend(ray.iter());
    for axis in DirectionAxis::ALL {
        match prompt.direction(axis) {
            Some(d) => {
                let fam = feasible_family(&d, &px, k, e);
                out.push(1.0);
                out.extend([d.x, d.y]);
                out.extend(fam.in_plane.iter());
            }
            None => out.extend([0.0; 6]),
        }
    }
    out
}

/// Two-layer network: tanh hidden layer, linear logits plus a contact offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModelParams {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl ToyModelParams {
    fn init<R: Rng + ?Sized>(cfg: &ToyConfig, rng: &mut R) -> Self {
        let (n_in, n_h, n_out) = (cfg.feature_dim(), cfg.hidden, cfg.output_dim());
        let s1 = cfg.init_scale * (1.0 / n_in as f64).sqrt();
        let s2 = cfg.init_scale * (1.0 / n_h as f64).sqrt();
        Self {
            w1: (0..n_in * n_h).map(|_| rng.random_range(-s1..s1)).collect(),
            b1: vec![0.0; n_h],
            w2: (0..n_h * n_out).map(|_| rng.random_range(-s2..s2)).collect(),
            b2: vec![0.0; n_out],
        }
    }

    fn len(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    fn slices_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    fn flat(&self) -> impl Iterator<Item = &f64> {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2)
    }

    fn forward(&self, cfg: &ToyConfig, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (n_in, n_h, n_out) = (cfg.feature_dim(), cfg.hidden, cfg.output_dim());
        let h: Vec<f64> = (0..n_h)
            .map(|j| {
                let row = &self.w1[j * n_in..(j + 1) * n_in];
                (self.b1[j] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()).tanh()
            })
            .collect();
        let out: Vec<f64> = (0..n_out)
            .map(|o| {
                let row = &self.w2[o * n_h..(o + 1) * n_h];
                self.b2[o] + row.iter().zip(&h).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect();
        (h, out)
    }

    /// Accumulates parameter gradients for one sample given dL/d(output).
    fn backward(&self, cfg: &ToyConfig, x: &[f64], h: &[f64], g_out: &[f64], grad: &mut ToyModelParams) {
        let (n_in, n_h, n_out) = (cfg.feature_dim(), cfg.hidden, cfg.output_dim());
        let mut g_h = vec![0.0; n_h];
        for o in 0..n_out {
            let g = g_out[o];
            if g == 0.0 {
                continue;
            }
            grad.b2[o] += g;
            let row = &self.w2[o * n_h..(o + 1) * n_h];
            let grow = &mut grad.w2[o * n_h..(o + 1) * n_h];
            for j in 0..n_h {
                grow[j] += g * h[j];
                g_h[j] += g * row[j];
            }
        }
        for j in 0..n_h {
            let g = g_h[j] * (1.0 - h[j] * h[j]);
            grad.b1[j] += g;
            let grow = &mut grad.w1[j * n_in..(j + 1) * n_in];
            for (gw, v) in grow.iter_mut().zip(x) {
                *gw += g * v;
            }
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            w1: vec![0.0; self.w1.len()],
            b1: vec![0.0; self.b1.len()],
            w2: vec![0.0; self.w2.len()],
            b2: vec![0.0; self.b2.len()],
        }
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.slices_mut().into_iter().zip([&other.w1, &other.b1, &other.w2, &other.b2]) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// One supervised example: exact full prompt, ground truth, and a depth crop.
#[derive(Debug, Clone)]
pub struct ToySample {
    pub gt: GroundTruthAction,
    pub prompt: CrayonPrompt,
    pub crop: Arc<DepthCrop>,
    pub camera: Camera,
}

impl ToySample {
    pub fn new(cfg: &ToyConfig, gt: GroundTruthAction, prompt: CrayonPrompt, depth: &DepthImage, camera: &Camera) -> Self {
        let crop = DepthCrop::around(depth, camera, &prompt.contact_px(), cfg.crop_size());
        Self {
            gt,
            prompt,
            crop: Arc::new(crop),
            camera: *camera,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub total: f64,
    pub l_text: f64,
    pub l_ortho: f64,
    pub l_proj: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub config: ToyConfig,
    pub config_hash: String,
    pub weights: LossWeights,
    pub params: ToyModelParams,
    pub curve: Vec<EpochStats>,
}

struct Prepared {
    features: Vec<f64>,
    objective: CompositeObjective,
    offset_target: Vec2,
}

fn prepare<R: Rng + ?Sized>(cfg: &ToyConfig, weights: &LossWeights, sample: &ToySample, pattern: Pattern, rng: &mut R) -> Prepared {
    let mut prompt = sample.prompt.restricted(pattern).expect("full prompt restricts to any pattern");
    let mut offset_target = Vec2::zeros();
    if cfg.contact_jitter_px > 0.0 && rng.random::<f64>() < cfg.jitter_probability {
        let j = cfg.contact_jitter_px;
        let shift = Vec2::new(rng.random_range(-j..=j), rng.random_range(-j..=j));
        let z = prompt.z_dir();
        let y = prompt.y_dir();
        let m = prompt.move_dir();
        prompt = CrayonPrompt::with_pattern(prompt.contact_px() + shift, z, y, m, pattern).expect("jitter keeps pattern");
        offset_target = -shift;
    }
    let features = toy_features(cfg, &prompt, &sample.crop);
    let origin = sample.gt.contact_point_3d;
    let e = sample.camera.extrinsics;
    let objective = CompositeObjective {
        targets: objective::gt_bins(&sample.gt),
        active: objective::gt_mask(&sample.gt),
        weights: *weights,
        origin,
        prompt,
        intrinsics: sample.camera.intrinsics,
        extrinsics: e,
        step: geometry::default_step(&origin, &e),
    };
    Prepared {
        features,
        objective,
        offset_target,
    }
}

struct SampleGrad {
    grad: ToyModelParams,
    parts: LossParts,
    total: f64,
}

fn sample_gradient(model: &ToyModelParams, cfg: &ToyConfig, p: &Prepared) -> SampleGrad {
    let (h, out) = model.forward(cfg, &p.features);
    let n_logits = NUM_COMPONENTS * NUM_BINS;
    let logits = &out[..n_logits];
    let eval = p.objective.evaluate(logits, true).or_else(|_| {
        // Degenerate reprojection of the current soft directions: supervise
        // with the text term only for this sample.
        let mut fallback = p.objective.clone();
        fallback.weights = LossWeights {
            text: p.objective.weights.text.max(1.0),
            ortho: 0.0,
            proj: 0.0,
        };
        fallback.evaluate(logits, true)
    });
    let mut g_out = vec![0.0; out.len()];
    let (mut parts, mut total) = (LossParts::default(), 0.0);
    if let Ok(eval) = eval {
        g_out[..n_logits].copy_from_slice(&eval.gradient);
        parts = eval.parts;
        total = eval.breakdown.total;
    }
    let cap = cfg.offset_cap_px;
    for i in 0..2 {
        let a = out[n_logits + i].tanh();
        let err = (a * cap - p.offset_target[i]) / cap;
        total += cfg.offset_weight * err * err;
        g_out[n_logits + i] = cfg.offset_weight * 2.0 * err * (1.0 - a * a);
    }
    let mut grad = model.zeros_like();
    model.backward(cfg, &p.features, &h, &g_out, &mut grad);
    SampleGrad { grad, parts, total }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ToyModelParams, grad: &ToyModelParams, lr: f64, scale: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        let grads: Vec<f64> = grad.flat().map(|g| g * scale).collect();
        let mut i = 0;
        for slice in params.slices_mut() {
            for p in slice.iter_mut() {
                let g = grads[i];
                self.m[i] = B1 * self.m[i] + (1.0 - B1) * g;
                self.v[i] = B2 * self.v[i] + (1.0 - B2) * g * g;
                *p -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
                i += 1;
            }
        }
    }
}

/// Trains a toy model; deterministic for a given seed regardless of thread count.
pub fn train_toy_model(
    dataset: &[ToySample],
    cfg: &ToyConfig,
    weights: &LossWeights,
    curriculum: &CurriculumSpec,
    epochs: usize,
    seed: u64,
) -> Result<ToyModel> {
    if dataset.is_empty() {
        return Err(PredictError::EmptyDataset);
    }
    curriculum.validate()?;
    weights.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ToyModelParams::init(cfg, &mut rng);
    let mut adam = Adam::new(params.len());
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let mut stats = EpochStats {
            epoch,
            total: 0.0,
            l_text: 0.0,
            l_ortho: 0.0,
            l_proj: 0.0,
        };
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let prepared: Vec<Prepared> = batch
                .iter()
                .map(|&i| {
                    let pattern = curriculum.sample(&mut rng);
                    prepare(cfg, weights, &dataset[i], pattern, &mut rng)
                })
                .collect();
            let grads: Vec<SampleGrad> = prepared.par_iter().map(|p| sample_gradient(&params, cfg, p)).collect();
            let mut sum = params.zeros_like();
            for g in &grads {
                sum.add_assign(&g.grad);
                stats.total += g.total;
                stats.l_text += g.parts.l_text;
                stats.l_ortho += g.parts.l_ortho;
                stats.l_proj += g.parts.l_proj;
            }
            adam.step(&mut params, &sum, cfg.learning_rate, 1.0 / batch.len() as f64);
        }
        let n = dataset.len() as f64;
        stats.total /= n;
        stats.l_text /= n;
        stats.l_ortho /= n;
        stats.l_proj /= n;
        if !stats.total.is_finite() || params.flat().any(|p| !p.is_finite()) {
            return Err(PredictError::Diverged {
                epoch,
                detail: format!("mean loss {}", stats.total),
            });
        }
        curve.push(stats);
    }
    Ok(ToyModel {
        config: *cfg,
        config_hash: cfg.hash(),
        weights: *weights,
        params,
        curve,
    })
}

/// Hard-argmax decode of logits into unit, orthogonal directions.
pub fn decode_logits(logits: &objective::DirectionLogits, with_move: bool) -> (Vec3, Vec3, Option<Vec3>) {
    let unit = |v: Vec3, fallback: Vec3| if v.norm() > 1e-9 { v.normalize() } else { fallback };
    let z = unit(logits.hard_direction(0), -Vec3::x());
    let y_raw = logits.hard_direction(1);
    let y_fixed = y_raw - z * y_raw.dot(&z);
    let y = if y_fixed.norm() > 1e-9 { y_fixed.normalize() } else { default_y(&z) };
    let m = with_move.then(|| unit(logits.hard_direction(2), z));
    (z, y, m)
}

impl ToyModel {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    /// Loads a model, refusing files whose config hash does not match either
    /// their own embedded config or the expected one.
    pub fn from_json(text: &str, expected: &ToyConfig) -> Result<Self> {
        let model: ToyModel = serde_json::from_str(text).map_err(|e| PredictError::Format(e.to_string()))?;
        let own = model.config.hash();
        if model.config_hash != own {
            return Err(PredictError::HashMismatch {
                expected: own,
                found: model.config_hash,
            });
        }
        let want = expected.hash();
        if model.config_hash != want {
            return Err(PredictError::HashMismatch {
                expected: want,
                found: model.config_hash,
            });
        }
        let cfg = &model.config;
        let p = &model.params;
        if p.w1.len() != cfg.feature_dim() * cfg.hidden || p.w2.len() != cfg.hidden * cfg.output_dim() {
            return Err(PredictError::Format("parameter shapes do not match config".into()));
        }
        Ok(model)
    }

    pub fn logits(&self, prompt: &CrayonPrompt, depth: &DepthImage, camera: &Camera) -> (objective::DirectionLogits, Vec2) {
        let crop = DepthCrop::around(depth, camera, &prompt.contact_px(), self.config.crop_size());
        let x = toy_features(&self.config, prompt, &crop);
        let (_, out) = self.params.forward(&self.config, &x);
        let n = NUM_COMPONENTS * NUM_BINS;
        let offset = Vec2::new(out[n].tanh(), out[n + 1].tanh()) * self.config.offset_cap_px;
        (objective::DirectionLogits { values: out[..n].to_vec() }, offset)
    }

    pub fn predict(&self, prompt: &CrayonPrompt, depth: &DepthImage, camera: &Camera) -> Result<PredictedAction> {
        let (logits, offset) = self.logits(prompt, depth, camera);
        let (z, y, m) = decode_logits(&logits, prompt.move_dir().is_some());
        let k = &camera.intrinsics;
        let e = &camera.extrinsics;
        let mut px = prompt.contact_px() + offset;
        if depth.at(&px).is_none() {
            px = prompt.contact_px();
        }
        let (contact, _) = lift_contact(&px, depth, k, e, 5)?;
        Ok(PredictedAction {
            contact_px_pred: px,
            contact_3d: contact,
            z_axis: z,
            y_axis: y,
            move_dir: m,
            provenance: Provenance::ToyModel,
        })
    }
}

impl Predictor for ToyModel {
    fn predict(&self, prompt: &CrayonPrompt, obs: &Observation<'_>) -> Result<PredictedAction> {
        ToyModel::predict(self, prompt, obs.depth, obs.camera)
    }

    fn provenance(&self) -> Provenance {
        Provenance::ToyModel
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::DirectionLogits;
    use approx::assert_relative_eq;

    fn camera() -> Camera {
        let e = CameraExtrinsics::look_at(Vec3::new(4.6, 1.2, 2.8), Vec3::new(0.0, 0.0, 0.5));
        Camera::new(CameraIntrinsics::desk_default(), e)
    }

    #[test]
    fn fronto_parallel_family_spans_image_x_and_ray() {
        let k = CameraIntrinsics::desk_default();
        let e = CameraExtrinsics::identity();
        let px = Vec2::new(k.principal_x, k.principal_y);
        let fam = feasible_family(&Vec2::new(1.0, 0.0), &px, &k, &e);
        assert_relative_eq!(fam.ray, Vec3::z(), epsilon = 1e-12);
        assert_relative_eq!(fam.in_plane, Vec3::x(), epsilon = 1e-12);
        assert!(fam.ray.dot(&fam.in_plane).abs() < 1e-12);
    }

    #[test]
    fn family_members_project_onto_the_prompt_direction() {
        let cam = camera();
        let (k, e) = (&cam.intrinsics, &cam.extrinsics);
        let px = Vec2::new(140.0, 190.0);
        let origin = geometry::lift(&px, 4.7, k, e).unwrap();
        let d2 = Vec2::new(0.3, -0.8).normalize();
        let fam = feasible_family(&d2, &px, k, e);
        for i in 1..36 {
            let t = std::f64::consts::PI * i as f64 / 36.0;
            let v = fam.ray * t.cos() + fam.in_plane * t.sin();
            let p = geometry::project_direction(&origin, &v, geometry::default_step(&origin, e), k, e).unwrap();
            assert!((p.x * d2.y - p.y * d2.x).abs() < 1e-9);
            assert!(p.dot(&d2) > 0.0);
        }
    }

    #[test]
    fn one_hot_decode_gives_discretized_directions() {
        let gt = GroundTruthAction {
            contact_point_3d: Vec3::zeros(),
            z_axis: Vec3::new(-0.8, 0.6, 0.0),
            y_axis: Vec3::new(0.6, 0.8, 0.0),
            move_dir: Some(Vec3::new(0.0, 0.0, 1.0)),
            part_id: 0,
            motion: Default::default(),
        };
        let bins = objective::gt_bins(&gt).map(|b| b.unwrap());
        let (z, y, m) = decode_logits(&DirectionLogits::one_hot(&bins, 10.0), true);
        assert_relative_eq!(z, gt.z_axis, epsilon = 1e-12);
        assert_relative_eq!(y, gt.y_axis, epsilon = 1e-12);
        assert_relative_eq!(m.unwrap(), Vec3::z(), epsilon = 1e-12);
    }

    #[test]
    fn curriculum_validation_and_sampling() {
        assert!(CurriculumSpec { probabilities: [0.5, 0.5, 0.5, 0.0] }.validate().is_err());
        let only = CurriculumSpec { probabilities: [0.0, 0.0, 1.0, 0.0] };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..100).all(|_| only.sample(&mut rng) == Pattern::PZY));
    }

    #[test]
    fn config_hash_tracks_every_field() {
        let a = ToyConfig::default();
        let b = ToyConfig { hidden: 65, ..a };
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), ToyConfig::default().hash());
    }
}
