//! Automatic prompts: contact from the detected part's box centre, directions
//! chosen from 32 evenly spaced candidate lines by a pluggable selector.

use std::io::Cursor;
use std::time::Duration;

use base64::Engine;
use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, Camera, DepthImage, Vec2, Vec3};
use crate::predictor::{self, feasible_family};
use crate::prompt::{self, CrayonPrompt, DirectionAxis};
use crate::sim::{self, Frame, JointMotion, Scene};

pub const NUM_CANDIDATES: usize = 32;
/// Half the candidate spacing; the oracle's worst-case angular error.
pub const HALF_SPACING_DEG: f64 = 180.0 / NUM_CANDIDATES as f64;

#[derive(Debug, Error)]
pub enum AutoPromptError {
    #[error("movable part is not visible")]
    PartNotVisible,
    #[error("selector context lacks {0}")]
    MissingContext(&'static str),
    #[error("external selector request failed: {0}")]
    Transport(String),
    #[error("external selector reply is invalid: {0}")]
    InvalidReply(String),
    #[error(transparent)]
    Prompt(#[from] prompt::PromptError),
    #[error(transparent)]
    Geometry(#[from] geometry::GeometryError),
}

pub type Result<T> = std::result::Result<T, AutoPromptError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub center: Vec2,
    pub directions: Vec<Vec2>,
}

impl CandidateSet {
    pub fn angle_deg(k: usize) -> f64 {
        360.0 * k as f64 / NUM_CANDIDATES as f64
    }

    /// Index of the candidate closest in angle to `dir`.
    pub fn nearest(&self, dir: &Vec2) -> usize {
        let a = dir.y.atan2(dir.x).to_degrees().rem_euclid(360.0);
        ((a / (360.0 / NUM_CANDIDATES as f64)).round() as usize) % NUM_CANDIDATES
    }
}

/// Candidates at angles 2πk/32 starting from image +x.
pub fn sample_candidates(center: Vec2) -> CandidateSet {
    let directions = (0..NUM_CANDIDATES)
        .map(|k| {
            let t = std::f64::consts::TAU * k as f64 / NUM_CANDIDATES as f64;
            Vec2::new(t.cos(), t.sin())
        })
        .collect();
    CandidateSet { center, directions }
}

/// Centre of the 2D bounding box of pixels satisfying `keep`.
pub fn bbox_center<F: Fn(u32, u32) -> bool>(width: u32, height: u32, keep: F) -> Option<Vec2> {
    let (mut c0, mut c1, mut r0, mut r1) = (u32::MAX, 0, u32::MAX, 0);
    for r in 0..height {
        for c in 0..width {
            if keep(c, r) {
                c0 = c0.min(c);
                c1 = c1.max(c);
                r0 = r0.min(r);
                r1 = r1.max(r);
            }
        }
    }
    (c0 != u32::MAX).then(|| Vec2::new((c0 + c1) as f64 / 2.0, (r0 + r1) as f64 / 2.0))
}

/// Box centre of the movable part's rendered mask. This stands in for an
/// object detector; the centre need not lie on the graspable region.
pub fn detect_contact(frame: &Frame) -> Result<Vec2> {
    let w = frame.depth.width;
    bbox_center(w, frame.depth.height, |c, r| frame.label(c, r).is_part()).ok_or(AutoPromptError::PartNotVisible)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectorChoice {
    pub z: usize,
    pub y: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
}

impl SelectorChoice {
    pub fn validate(&self) -> Result<()> {
        let bad = |i: usize| i >= NUM_CANDIDATES;
        if bad(self.z) || bad(self.y) || self.m.is_some_and(bad) {
            return Err(AutoPromptError::InvalidReply(format!("index out of range in {self:?}")));
        }
        Ok(())
    }
}

/// Request sent to an external selector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectorRequest {
    /// PNG of the frame with the contact dot drawn, base64.
    pub image_png_base64: String,
    pub contact_px: [f64; 2],
    pub candidate_angles_deg: Vec<f64>,
    pub task: String,
    pub needs_move: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectorResponse {
    pub z: usize,
    pub y: usize,
    #[serde(default)]
    pub m: Option<usize>,
}

pub trait ExternalSelector: Send + Sync {
    fn select(&self, request: &SelectorRequest) -> Result<SelectorResponse>;
}

/// Blocking HTTP client that POSTs a [`SelectorRequest`] as JSON.
#[derive(Debug, Clone)]
pub struct HttpSelector {
    pub url: String,
    pub timeout: Duration,
}

impl HttpSelector {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            timeout: Duration::from_secs(10),
        }
    }
}

impl ExternalSelector for HttpSelector {
    fn select(&self, request: &SelectorRequest) -> Result<SelectorResponse> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut resp = agent
            .post(&self.url)
            .send_json(request)
            .map_err(|e| AutoPromptError::Transport(e.to_string()))?;
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| AutoPromptError::Transport(e.to_string()))?;
        serde_json::from_str(&body).map_err(|e| AutoPromptError::InvalidReply(e.to_string()))
    }
}

pub fn encode_png(img: &RgbImage) -> String {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png).expect("png encoding to memory");
    base64::engine::general_purpose::STANDARD.encode(buf.into_inner())
}

/// What a selector may consult.
pub struct SelectionContext<'a> {
    /// Ground-truth 2D directions, for the oracle.
    pub reference: Option<&'a CrayonPrompt>,
    pub depth: Option<&'a DepthImage>,
    pub camera: Option<&'a Camera>,
    pub scene: Option<&'a Scene>,
    pub image: Option<&'a RgbImage>,
    pub motion: JointMotion,
    pub needs_move: bool,
    pub task: String,
}

pub enum SelectorMode<'a> {
    Oracle,
    Heuristic,
    External(&'a dyn ExternalSelector),
}

fn oracle(c: &CandidateSet, ctx: &SelectionContext<'_>) -> Result<SelectorChoice> {
    let r = ctx.reference.ok_or(AutoPromptError::MissingContext("a reference prompt"))?;
    let z_dir = r.z_dir().ok_or(AutoPromptError::MissingContext("a reference z direction"))?;
    let y_dir = r.y_dir().ok_or(AutoPromptError::MissingContext("a reference y direction"))?;
    let z = c.nearest(&z_dir);
    let y = c.nearest(&y_dir);
    let m = if ctx.needs_move {
        Some(c.nearest(&r.move_dir().ok_or(AutoPromptError::MissingContext("a reference move direction"))?))
    } else {
        None
    };
    Ok(SelectorChoice { z, y, m })
}

/// Image direction of a 3D direction at `origin`, with the degenerate-case remedy.
fn image_direction(origin: &Vec3, dir: &Vec3, cam: &Camera, axis: DirectionAxis) -> Result<Vec2> {
    Ok(prompt::project_direction_remedied(origin, dir, &cam.intrinsics, &cam.extrinsics, axis)?.0)
}

/// 3D motion of the part's visible points under a small joint perturbation.
pub fn estimate_motion(scene: &Scene, cam: &Camera, motion: JointMotion) -> Option<Vec3> {
    let (k, e) = (&cam.intrinsics, &cam.extrinsics);
    let centroid = |s: &Scene| {
        let f = sim::render_frame(s, k, e);
        let mut sum = Vec3::zeros();
        let mut n = 0usize;
        for r in 0..k.height {
            for c in 0..k.width {
                if !f.label(c, r).is_part() {
                    continue;
                }
                if let Some(d) = f.depth.get(c as i64, r as i64) {
                    if let Ok(p) = geometry::lift(&Vec2::new(c as f64, r as f64), d, k, e) {
                        sum += p;
                        n += 1;
                    }
                }
            }
        }
        (n > 0).then(|| sum / n as f64)
    };
    let before = centroid(scene)?;
    let mut moved = scene.clone();
    let delta = 0.05 * scene.joint.range() * motion.sign();
    moved.joint.set_state(scene.joint.state + delta);
    if moved.joint.state == scene.joint.state {
        moved.joint.set_state(scene.joint.state - delta);
        let after = centroid(&moved)?;
        return Some(before - after).filter(|v| v.norm() > 1e-9);
    }
    let after = centroid(&moved)?;
    Some(after - before).filter(|v| v.norm() > 1e-9)
}

fn heuristic(c: &CandidateSet, ctx: &SelectionContext<'_>) -> Result<SelectorChoice> {
    let depth = ctx.depth.ok_or(AutoPromptError::MissingContext("depth"))?;
    let cam = ctx.camera.ok_or(AutoPromptError::MissingContext("a camera"))?;
    let (k, e) = (&cam.intrinsics, &cam.extrinsics);
    let (origin, patch) =
        predictor::lift_contact(&c.center, depth, k, e, 5).map_err(|_| AutoPromptError::MissingContext("valid depth at the centre"))?;
    let z3 = -patch.normal;
    let z = c.nearest(&image_direction(&origin, &z3, cam, DirectionAxis::Z)?);
    let m = if ctx.needs_move {
        let scene = ctx.scene.ok_or(AutoPromptError::MissingContext("a scene"))?;
        let motion = estimate_motion(scene, cam, ctx.motion).ok_or(AutoPromptError::PartNotVisible)?;
        Some(c.nearest(&image_direction(&origin, &motion, cam, DirectionAxis::M)?))
    } else {
        None
    };
    let zdir = c.directions[z];
    let score = |i: usize| {
        let fam = feasible_family(&c.directions[i], &c.center, k, e);
        let lifted = predictor::resolve_move(&fam, &origin, e, None);
        let ortho = 1.0 - lifted.dot(&z3).abs();
        let perp = 1.0 - c.directions[i].dot(&zdir).abs();
        (ortho, perp)
    };
    let y = (0..NUM_CANDIDATES)
        .filter(|i| *i != z)
        .max_by(|a, b| {
            let (sa, sb) = (score(*a), score(*b));
            sa.0.total_cmp(&sb.0).then(sa.1.total_cmp(&sb.1)).then(b.cmp(a))
        })
        .expect("31 candidates");
    Ok(SelectorChoice { z, y, m })
}

fn external(c: &CandidateSet, ctx: &SelectionContext<'_>, client: &dyn ExternalSelector) -> Result<SelectorChoice> {
    let img = ctx.image.ok_or(AutoPromptError::MissingContext("an image"))?;
    let marked = prompt::rasterize(img, &CrayonPrompt::contact_only(c.center), &prompt::PromptStyle::default());
    let request = SelectorRequest {
        image_png_base64: encode_png(&marked),
        contact_px: [c.center.x, c.center.y],
        candidate_angles_deg: (0..NUM_CANDIDATES).map(CandidateSet::angle_deg).collect(),
        task: ctx.task.clone(),
        needs_move: ctx.needs_move,
    };
    let reply = client.select(&request)?;
    let choice = SelectorChoice {
        z: reply.z,
        y: reply.y,
        m: reply.m,
    };
    choice.validate()?;
    if ctx.needs_move && choice.m.is_none() {
        return Err(AutoPromptError::InvalidReply("task needs a moving direction".into()));
    }
    Ok(choice)
}

pub fn select(c: &CandidateSet, mode: &SelectorMode<'_>, ctx: &SelectionContext<'_>) -> Result<SelectorChoice> {
    let choice = match mode {
        SelectorMode::Oracle => oracle(c, ctx)?,
        SelectorMode::Heuristic => heuristic(c, ctx)?,
        SelectorMode::External(client) => external(c, ctx, *client)?,
    };
    choice.validate()?;
    Ok(choice)
}

/// Prompt assembled from a selection.
pub fn assemble(c: &CandidateSet, choice: &SelectorChoice) -> Result<CrayonPrompt> {
    choice.validate()?;
    Ok(CrayonPrompt::new(
        c.center,
        Some(c.directions[choice.z]),
        Some(c.directions[choice.y]),
        choice.m.map(|i| c.directions[i]),
    )?)
}

/// Reference selector served at the service's selector hook: picks the
/// candidates nearest to fixed image directions.
pub fn reference_selector_reply(request: &SelectorRequest) -> Result<SelectorResponse> {
    if request.candidate_angles_deg.len() != NUM_CANDIDATES {
        return Err(AutoPromptError::InvalidReply(format!(
            "expected {NUM_CANDIDATES} candidate angles, got {}",
            request.candidate_angles_deg.len()
        )));
    }
    let c = sample_candidates(Vec2::new(request.contact_px[0], request.contact_px[1]));
    let z = c.nearest(&Vec2::new(-1.0, 0.0));
    let y = c.nearest(&Vec2::new(0.0, 1.0));
    let m = request.needs_move.then(|| c.nearest(&Vec2::new(1.0, 0.0)));
    Ok(SelectorResponse { z, y, m })
}
