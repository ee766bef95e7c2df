//! Training objective: bin discretization, the text (classification) loss,
//! the orthogonality loss, the reprojection loss, their weighted total, and
//! analytic gradients with a finite-difference checker.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, CameraExtrinsics, CameraIntrinsics, DepthImage, GeometryError, Vec2, Vec3};
use crate::predictor::PredictedAction;
use crate::prompt::{self, CrayonPrompt, DirectionAxis};
use crate::sim::GroundTruthAction;

pub const BIN_WIDTH: f64 = 0.02;
pub const MIN_BIN: i32 = -50;
pub const MAX_BIN: i32 = 50;
pub const NUM_BINS: usize = 101;
/// Direction components with logits: Z, Y, M times x, y, z.
pub const NUM_COMPONENTS: usize = 9;
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ObjectiveError {
    #[error("value {0} is outside [-1, 1]")]
    OutOfRange(f64),
    #[error("{0} has zero length")]
    ZeroVector(&'static str),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("loss is not finite at the evaluation point")]
    NonFinite,
    #[error("loss weights must be non-negative and not all zero")]
    InvalidWeights,
    #[error("gradient has {got} entries, expected {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("{0} reprojection is degenerate; the loss is not differentiable here")]
    Degenerate(DirectionAxis),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

pub type BinIndex = i32;

pub fn discretize(v: f64) -> Result<BinIndex> {
    if !(v.abs() <= 1.0 + 1e-9) {
        return Err(ObjectiveError::OutOfRange(v));
    }
    Ok(discretize_clamped(v))
}

/// As [`discretize`] but clamps instead of failing.
pub fn discretize_clamped(v: f64) -> BinIndex {
    ((v.clamp(-1.0, 1.0) / BIN_WIDTH).round() as i32).clamp(MIN_BIN, MAX_BIN)
}

pub fn undiscretize(b: BinIndex) -> f64 {
    BIN_WIDTH * b as f64
}

/// Value of logit slot `i` (0..101).
pub fn bin_center(i: usize) -> f64 {
    undiscretize(i as i32 + MIN_BIN)
}

fn slot(b: BinIndex) -> usize {
    (b - MIN_BIN) as usize
}

/// 9 x 101 logits, component-major (Zx, Zy, Zz, Yx, ..., Mz).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionLogits {
    pub values: Vec<f64>,
}

impl DirectionLogits {
    pub fn zeros() -> Self {
        Self {
            values: vec![0.0; NUM_COMPONENTS * NUM_BINS],
        }
    }

    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.len() != NUM_COMPONENTS * NUM_BINS {
            return Err(ObjectiveError::DimensionMismatch {
                got: values.len(),
                expected: NUM_COMPONENTS * NUM_BINS,
            });
        }
        Ok(Self { values })
    }

    pub fn component(&self, c: usize) -> &[f64] {
        &self.values[c * NUM_BINS..(c + 1) * NUM_BINS]
    }

    pub fn component_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.values[c * NUM_BINS..(c + 1) * NUM_BINS]
    }

    /// Logits concentrated (height `scale`) on the bins of the given targets.
    pub fn one_hot(targets: &[BinIndex; NUM_COMPONENTS], scale: f64) -> Self {
        let mut out = Self::zeros();
        for (c, b) in targets.iter().enumerate() {
            out.component_mut(c)[slot(*b)] = scale;
        }
        out
    }

    pub fn argmax(&self, c: usize) -> BinIndex {
        let comp = self.component(c);
        let best = (0..NUM_BINS).fold(0, |best, i| if comp[i] > comp[best] { i } else { best });
        best as i32 + MIN_BIN
    }

    /// Softmax-expected bin value of component `c`.
    pub fn soft_value(&self, c: usize) -> f64 {
        let p = softmax(self.component(c));
        p.iter().enumerate().map(|(i, pi)| pi * bin_center(i)).sum()
    }

    pub fn hard_direction(&self, axis: usize) -> Vec3 {
        Vec3::new(
            undiscretize(self.argmax(3 * axis)),
            undiscretize(self.argmax(3 * axis + 1)),
            undiscretize(self.argmax(3 * axis + 2)),
        )
    }

    pub fn soft_direction(&self, axis: usize) -> Vec3 {
        Vec3::new(self.soft_value(3 * axis), self.soft_value(3 * axis + 1), self.soft_value(3 * axis + 2))
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

/// Which of the nine components are supervised.
pub type ComponentMask = [bool; NUM_COMPONENTS];

/// Bin targets of a ground-truth action; M components are `None` when the
/// action has no moving direction.
pub fn gt_bins(gt: &GroundTruthAction) -> [Option<BinIndex>; NUM_COMPONENTS] {
    let mut out = [None; NUM_COMPONENTS];
    let dirs = [Some(gt.z_axis), Some(gt.y_axis), gt.move_dir];
    for (axis, d) in dirs.iter().enumerate() {
        if let Some(d) = d {
            let d = d.normalize();
            for j in 0..3 {
                out[3 * axis + j] = Some(discretize_clamped(d[j]));
            }
        }
    }
    out
}

pub fn gt_mask(gt: &GroundTruthAction) -> ComponentMask {
    gt_bins(gt).map(|b| b.is_some())
}

/// Mean cross-entropy over the active components.
pub fn text_loss(logits: &DirectionLogits, gt: &GroundTruthAction, active: &ComponentMask) -> f64 {
    text_loss_bins(logits, &gt_bins(gt), active)
}

pub fn text_loss_bins(logits: &DirectionLogits, targets: &[Option<BinIndex>; NUM_COMPONENTS], active: &ComponentMask) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for c in 0..NUM_COMPONENTS {
        if let (true, Some(b)) = (active[c], targets[c]) {
            let comp = logits.component(c);
            total += log_sum_exp(comp) - comp[slot(b)];
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Gradient of [`text_loss_bins`] with respect to every logit.
pub fn text_loss_gradient(
    logits: &DirectionLogits,
    targets: &[Option<BinIndex>; NUM_COMPONENTS],
    active: &ComponentMask,
) -> Vec<f64> {
    let mut grad = vec![0.0; NUM_COMPONENTS * NUM_BINS];
    let n = (0..NUM_COMPONENTS).filter(|c| active[*c] && targets[*c].is_some()).count();
    if n == 0 {
        return grad;
    }
    for c in 0..NUM_COMPONENTS {
        if let (true, Some(b)) = (active[c], targets[c]) {
            let p = softmax(logits.component(c));
            let g = &mut grad[c * NUM_BINS..(c + 1) * NUM_BINS];
            for i in 0..NUM_BINS {
                g[i] = p[i] / n as f64;
            }
            g[slot(b)] -= 1.0 / n as f64;
        }
    }
    grad
}

/// (Ẑ·Ŷ)² on normalized inputs.
pub fn orthogonal_loss(z: &Vec3, y: &Vec3) -> Result<f64> {
    Ok(orthogonal_loss_grad(z, y)?.0)
}

/// Loss plus gradients with respect to the unnormalized Z and Y.
pub fn orthogonal_loss_grad(z: &Vec3, y: &Vec3) -> Result<(f64, Vec3, Vec3)> {
    let (nz, ny) = (z.norm(), y.norm());
    if !(nz > 1e-9) {
        return Err(ObjectiveError::ZeroVector("z"));
    }
    if !(ny > 1e-9) {
        return Err(ObjectiveError::ZeroVector("y"));
    }
    let (zh, yh) = (z / nz, y / ny);
    let c = zh.dot(&yh);
    let gz = (yh - zh * c) * (2.0 * c / nz);
    let gy = (zh - yh * c) * (2.0 * c / ny);
    Ok((c * c, gz, gy))
}

/// One reprojection term `1 - cos(project(P + s·v̂) - project(P), d)` and its
/// gradient with respect to the unnormalized `v`.
pub fn reprojection_term(
    origin: &Vec3,
    v: &Vec3,
    target: &Vec2,
    step: f64,
    k: &CameraIntrinsics,
    e: &CameraExtrinsics,
) -> Result<Option<(f64, Vec3)>> {
    let nv = v.norm();
    if !(nv > 1e-12) {
        return Err(ObjectiveError::ZeroVector("direction"));
    }
    let vh = v / nv;
    let q = geometry::project_displacement(origin, &vh, step, k, e)?;
    let qn = q.norm();
    if qn < geometry::DEGENERATE_PX {
        return Ok(None);
    }
    let d = target.normalize();
    let qh = q / qn;
    let c = qh.dot(&d);
    let dc_dq = (d - qh * c) / qn;
    let j = geometry::project_jacobian(&(origin + vh * step), k, e)?;
    // dq/dvh = step * J; chain through the normalization of v.
    let mut g_vh = Vec3::zeros();
    for row in 0..2 {
        for col in 0..3 {
            g_vh[col] -= step * j[row][col] * dc_dq[row];
        }
    }
    let g_v = (g_vh - vh * vh.dot(&g_vh)) / nv;
    Ok(Some((1.0 - c, g_v)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionLoss {
    pub value: f64,
    pub terms: usize,
    /// Directions whose reprojection needed the noise remedy.
    pub remedied: Vec<DirectionAxis>,
}

/// Sum of (1 - cosine) between each prompted 2D direction and the
/// reprojection of the matching predicted 3D direction.
pub fn projection_loss(
    pred: &PredictedAction,
    prompt: &CrayonPrompt,
    k: &CameraIntrinsics,
    e: &CameraExtrinsics,
    depth: &DepthImage,
) -> Result<ProjectionLoss> {
    let d = depth
        .at(&pred.contact_px_pred)
        .ok_or(GeometryError::InvalidDepth(f64::NAN))?;
    let origin = geometry::lift(&pred.contact_px_pred, d, k, e)?;
    let mut out = ProjectionLoss {
        value: 0.0,
        terms: 0,
        remedied: Vec::new(),
    };
    for axis in DirectionAxis::ALL {
        let Some(target) = prompt.direction(axis) else { continue };
        let dir3 = match axis {
            DirectionAxis::Z => Some(pred.z_axis),
            DirectionAxis::Y => Some(pred.y_axis),
            DirectionAxis::M => pred.move_dir,
        };
        let Some(dir3) = dir3 else { continue };
        let (reproj, remedy) = prompt::project_direction_remedied(&origin, &dir3, k, e, axis).map_err(|err| match err {
            prompt::PromptError::Geometry(g) => ObjectiveError::Geometry(g),
            _ => ObjectiveError::Degenerate(axis),
        })?;
        if remedy.is_some() {
            out.remedied.push(axis);
        }
        out.value += 1.0 - reproj.dot(&target.normalize()).clamp(-1.0, 1.0);
        out.terms += 1;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub text: f64,
    pub ortho: f64,
    pub proj: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            text: 1.0,
            ortho: 1.0,
            proj: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(text: f64, ortho: f64, proj: f64) -> Result<Self> {
        let w = Self { text, ortho, proj };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.text, self.ortho, self.proj];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || all.iter().all(|w| *w == 0.0) {
            return Err(ObjectiveError::InvalidWeights);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub l_text: f64,
    pub l_ortho: f64,
    pub l_proj: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_text: f64,
    pub l_ortho: f64,
    pub l_proj: f64,
    pub total: f64,
    /// Text, ortho, projection; a term is active when its weight is non-zero.
    pub active: [bool; 3],
}

pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> LossBreakdown {
    let active = [weights.text != 0.0, weights.ortho != 0.0, weights.proj != 0.0];
    let terms = [
        (weights.text, parts.l_text),
        (weights.ortho, parts.l_ortho),
        (weights.proj, parts.l_proj),
    ];
    let total = terms
        .iter()
        .zip(active)
        .filter(|(_, a)| *a)
        .map(|((w, l), _)| w * l)
        .sum();
    LossBreakdown {
        l_text: parts.l_text,
        l_ortho: parts.l_ortho,
        l_proj: parts.l_proj,
        total,
        active,
    }
}

/// Max relative error between an analytic gradient and central differences.
///
/// Relative error is `‖a − f‖∞ / max(‖a‖∞, ‖f‖∞, 1e-8)`.
pub fn check_gradient<F>(f: F, x: &[f64], analytic: &[f64], h: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if analytic.len() != x.len() {
        return Err(ObjectiveError::DimensionMismatch {
            got: analytic.len(),
            expected: x.len(),
        });
    }
    let mut probe = x.to_vec();
    let mut max_diff: f64 = 0.0;
    let mut max_a: f64 = 0.0;
    let mut max_f: f64 = 0.0;
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe)?;
        probe[i] = x[i] - h;
        let fm = f(&probe)?;
        probe[i] = x[i];
        let fd = (fp - fm) / (2.0 * h);
        if !fd.is_finite() || !analytic[i].is_finite() {
            return Err(ObjectiveError::NonFinite);
        }
        max_diff = max_diff.max((fd - analytic[i]).abs());
        max_a = max_a.max(analytic[i].abs());
        max_f = max_f.max(fd.abs());
    }
    Ok(max_diff / max_a.max(max_f).max(1e-8))
}

/// The composite objective as a function of the nine-component logits: the
/// text loss on the logits, plus orthogonality and reprojection losses on
/// the softmax-expected (soft-argmax) directions.
#[derive(Debug, Clone)]
pub struct CompositeObjective {
    pub targets: [Option<BinIndex>; NUM_COMPONENTS],
    pub active: ComponentMask,
    pub weights: LossWeights,
    pub origin: Vec3,
    pub prompt: CrayonPrompt,
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: CameraExtrinsics,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeEval {
    pub parts: LossParts,
    pub breakdown: LossBreakdown,
    pub gradient: Vec<f64>,
}

impl CompositeObjective {
    pub fn value(&self, logits: &[f64]) -> Result<f64> {
        Ok(self.evaluate(logits, false)?.breakdown.total)
    }

    pub fn evaluate(&self, logits: &[f64], with_gradient: bool) -> Result<CompositeEval> {
        let l = DirectionLogits::from_values(logits.to_vec())?;
        let mut grad = if with_gradient && self.weights.text != 0.0 {
            text_loss_gradient(&l, &self.targets, &self.active)
                .into_iter()
                .map(|g| g * self.weights.text)
                .collect()
        } else {
            vec![0.0; logits.len()]
        };
        let mut parts = LossParts {
            l_text: text_loss_bins(&l, &self.targets, &self.active),
            ..Default::default()
        };
        let probs: Vec<Vec<f64>> = (0..NUM_COMPONENTS).map(|c| softmax(l.component(c))).collect();
        let soft = |axis: usize| {
            Vec3::from_fn(|j, _| {
                probs[3 * axis + j]
                    .iter()
                    .enumerate()
                    .map(|(i, p)| p * bin_center(i))
                    .sum()
            })
        };
        let dirs = [soft(0), soft(1), soft(2)];
        // dL/d(soft direction) for each axis.
        let mut g_dir = [Vec3::zeros(); 3];
        if self.weights.ortho != 0.0 {
            let (lo, gz, gy) = orthogonal_loss_grad(&dirs[0], &dirs[1])?;
            parts.l_ortho = lo;
            g_dir[0] += gz * self.weights.ortho;
            g_dir[1] += gy * self.weights.ortho;
        }
        if self.weights.proj != 0.0 {
            for (a, axis) in DirectionAxis::ALL.into_iter().enumerate() {
                let Some(target) = self.prompt.direction(axis) else { continue };
                match reprojection_term(&self.origin, &dirs[a], &target, self.step, &self.intrinsics, &self.extrinsics)? {
                    Some((v, g)) => {
                        parts.l_proj += v;
                        g_dir[a] += g * self.weights.proj;
                    }
                    None => return Err(ObjectiveError::Degenerate(axis)),
                }
            }
        }
        if with_gradient {
            // Chain through soft-argmax: d E[v] / d logit_i = p_i (b_i - E[v]).
            for a in 0..3 {
                for j in 0..3 {
                    let c = 3 * a + j;
                    let gd = g_dir[a][j];
                    if gd == 0.0 {
                        continue;
                    }
                    let mean = dirs[a][j];
                    for (i, p) in probs[c].iter().enumerate() {
                        grad[c * NUM_BINS + i] += gd * p * (bin_center(i) - mean);
                    }
                }
            }
        }
        let breakdown = total_loss(&parts, &self.weights);
        if !breakdown.total.is_finite() {
            return Err(ObjectiveError::NonFinite);
        }
        Ok(CompositeEval {
            parts,
            breakdown,
            gradient: grad,
        })
    }
}
