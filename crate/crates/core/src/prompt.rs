//! Crayon prompts: the 2D goal overlay and its text form.
//!
//! A prompt is a contact pixel (blue dot) plus up to three unit image
//! directions: gripper z-axis (red), gripper y-axis (green) and moving
//! direction (yellow). The structured [`PromptRecord`] is canonical; the
//! raster overlay is a derived view that [`extract`] can read back.

use std::fmt;
use std::str::FromStr;

use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, CameraExtrinsics, CameraIntrinsics, GeometryError, Vec2, Vec3};
use crate::objective;
use crate::sim::GroundTruthAction;

/// Largest angular perturbation applied to make a degenerate direction visible.
pub const MAX_REMEDY_DEG: f64 = 5.0;
const UNIT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PromptError {
    #[error("prompt fields do not match pattern {pattern}: {detail}")]
    PatternMismatch { pattern: Pattern, detail: String },
    #[error("{0} direction is not unit norm")]
    NotUnit(DirectionAxis),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{axis} direction stays degenerate after {max_deg} degrees of noise")]
    Unremediable { axis: DirectionAxis, max_deg: f64 },
    #[error("no contact (blue) pixels in the overlay")]
    NoContact,
    #[error("overlay colours {0} do not form a valid pattern")]
    InconsistentOverlay(String),
    #[error("cannot parse ground-truth text: {0}")]
    Parse(String),
    #[error("unknown pattern {0:?}")]
    UnknownPattern(String),
}

pub type Result<T> = std::result::Result<T, PromptError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Pattern {
    P,
    PZ,
    PZY,
    PZYM,
}

impl Pattern {
    pub const ALL: [Pattern; 4] = [Pattern::P, Pattern::PZ, Pattern::PZY, Pattern::PZYM];

    pub fn has(&self, axis: DirectionAxis) -> bool {
        match axis {
            DirectionAxis::Z => *self >= Pattern::PZ,
            DirectionAxis::Y => *self >= Pattern::PZY,
            DirectionAxis::M => *self == Pattern::PZYM,
        }
    }

    fn from_presence(z: bool, y: bool, m: bool) -> Option<Pattern> {
        match (z, y, m) {
            (false, false, false) => Some(Pattern::P),
            (true, false, false) => Some(Pattern::PZ),
            (true, true, false) => Some(Pattern::PZY),
            (true, true, true) => Some(Pattern::PZYM),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Pattern::P => "P",
            Pattern::PZ => "PZ",
            Pattern::PZY => "PZY",
            Pattern::PZYM => "PZYM",
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Pattern {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self> {
        Pattern::ALL
            .into_iter()
            .find(|p| p.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| PromptError::UnknownPattern(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionAxis {
    Z,
    Y,
    M,
}

impl DirectionAxis {
    pub const ALL: [DirectionAxis; 3] = [DirectionAxis::Z, DirectionAxis::Y, DirectionAxis::M];
}

impl fmt::Display for DirectionAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DirectionAxis::Z => "z",
            DirectionAxis::Y => "y",
            DirectionAxis::M => "m",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrayonPrompt {
    contact_px: Vec2,
    z_dir: Option<Vec2>,
    y_dir: Option<Vec2>,
    move_dir: Option<Vec2>,
    pattern: Pattern,
}

fn check_unit(axis: DirectionAxis, v: &Option<Vec2>) -> Result<()> {
    match v {
        Some(d) if (d.norm() - 1.0).abs() >= UNIT_TOLERANCE || !d.iter().all(|c| c.is_finite()) => {
            Err(PromptError::NotUnit(axis))
        }
        _ => Ok(()),
    }
}

impl CrayonPrompt {
    /// Builds a prompt, inferring its pattern from the directions present.
    pub fn new(contact_px: Vec2, z_dir: Option<Vec2>, y_dir: Option<Vec2>, move_dir: Option<Vec2>) -> Result<Self> {
        let pattern = Pattern::from_presence(z_dir.is_some(), y_dir.is_some(), move_dir.is_some()).ok_or_else(|| {
            PromptError::PatternMismatch {
                pattern: Pattern::PZYM,
                detail: "directions must be added in the order z, y, m".into(),
            }
        })?;
        Self::with_pattern(contact_px, z_dir, y_dir, move_dir, pattern)
    }

    pub fn with_pattern(
        contact_px: Vec2,
        z_dir: Option<Vec2>,
        y_dir: Option<Vec2>,
        move_dir: Option<Vec2>,
        pattern: Pattern,
    ) -> Result<Self> {
        for (axis, v) in [(DirectionAxis::Z, &z_dir), (DirectionAxis::Y, &y_dir), (DirectionAxis::M, &move_dir)] {
            if v.is_some() != pattern.has(axis) {
                return Err(PromptError::PatternMismatch {
                    pattern,
                    detail: format!("{axis} direction {}", if v.is_some() { "unexpected" } else { "missing" }),
                });
            }
            check_unit(axis, v)?;
        }
        if !contact_px.iter().all(|c| c.is_finite()) {
            return Err(PromptError::PatternMismatch {
                pattern,
                detail: "contact pixel is non-finite".into(),
            });
        }
        Ok(Self {
            contact_px,
            z_dir,
            y_dir,
            move_dir,
            pattern,
        })
    }

    pub fn contact_only(contact_px: Vec2) -> Self {
        Self {
            contact_px,
            z_dir: None,
            y_dir: None,
            move_dir: None,
            pattern: Pattern::P,
        }
    }

    pub fn contact_px(&self) -> Vec2 {
        self.contact_px
    }

    pub fn pattern(&self) -> Pattern {
        self.pattern
    }

    pub fn direction(&self, axis: DirectionAxis) -> Option<Vec2> {
        match axis {
            DirectionAxis::Z => self.z_dir,
            DirectionAxis::Y => self.y_dir,
            DirectionAxis::M => self.move_dir,
        }
    }

    pub fn z_dir(&self) -> Option<Vec2> {
        self.z_dir
    }

    pub fn y_dir(&self) -> Option<Vec2> {
        self.y_dir
    }

    pub fn move_dir(&self) -> Option<Vec2> {
        self.move_dir
    }

    /// The same prompt with every direction beyond `pattern` dropped.
    pub fn restricted(&self, pattern: Pattern) -> Result<Self> {
        let keep = |axis: DirectionAxis| if pattern.has(axis) { self.direction(axis) } else { None };
        Self::with_pattern(
            self.contact_px,
            keep(DirectionAxis::Z),
            keep(DirectionAxis::Y),
            keep(DirectionAxis::M),
            pattern,
        )
    }

    pub fn to_record(&self) -> PromptRecord {
        let arr = |v: Option<Vec2>| v.map(|d| [d.x, d.y]);
        PromptRecord {
            contact_px: [self.contact_px.x, self.contact_px.y],
            z_dir: arr(self.z_dir),
            y_dir: arr(self.y_dir),
            move_dir: arr(self.move_dir),
            pattern: self.pattern,
            camera_ref: None,
            scene_ref: None,
        }
    }
}

/// Structured interchange form of a prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub contact_px: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_dir: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_dir: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub move_dir: Option<[f64; 2]>,
    pub pattern: Pattern,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldIssue {
    pub field: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("invalid prompt record: {}", .issues.iter().map(|i| format!("{}: {}", i.field, i.message)).collect::<Vec<_>>().join("; "))]
pub struct ValidationError {
    pub issues: Vec<FieldIssue>,
}

impl PromptRecord {
    /// Checks every field against the prompt invariants, reporting all
    /// offending fields at once.
    pub fn validate(&self) -> std::result::Result<CrayonPrompt, ValidationError> {
        let mut issues = Vec::new();
        if !self.contact_px.iter().all(|c| c.is_finite()) {
            issues.push(FieldIssue {
                field: "contact_px".into(),
                message: "must be finite".into(),
            });
        }
        let fields = [
            ("z_dir", DirectionAxis::Z, self.z_dir),
            ("y_dir", DirectionAxis::Y, self.y_dir),
            ("move_dir", DirectionAxis::M, self.move_dir),
        ];
        for (name, axis, v) in fields {
            match (self.pattern.has(axis), v) {
                (true, None) => issues.push(FieldIssue {
                    field: name.into(),
                    message: format!("required by pattern {}", self.pattern),
                }),
                (false, Some(_)) => issues.push(FieldIssue {
                    field: name.into(),
                    message: format!("not allowed by pattern {}", self.pattern),
                }),
                (true, Some(d)) => {
                    let n = (d[0] * d[0] + d[1] * d[1]).sqrt();
                    if !n.is_finite() || (n - 1.0).abs() >= UNIT_TOLERANCE {
                        issues.push(FieldIssue {
                            field: name.into(),
                            message: format!("must be a unit vector (norm {n})"),
                        });
                    }
                }
                (false, None) => {}
            }
        }
        if !issues.is_empty() {
            return Err(ValidationError { issues });
        }
        let v = |d: Option<[f64; 2]>| d.map(|a| Vec2::new(a[0], a[1]));
        CrayonPrompt::with_pattern(
            Vec2::new(self.contact_px[0], self.contact_px[1]),
            v(self.z_dir),
            v(self.y_dir),
            v(self.move_dir),
            self.pattern,
        )
        .map_err(|e| ValidationError {
            issues: vec![FieldIssue {
                field: "pattern".into(),
                message: e.to_string(),
            }],
        })
    }
}

/// Record of a degenerate direction that was perturbed to become visible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseRemedy {
    pub axis: DirectionAxis,
    pub angle_deg: f64,
    /// The perturbed 3D direction actually projected.
    pub perturbed: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DerivedPrompt {
    pub prompt: CrayonPrompt,
    pub remedies: Vec<NoiseRemedy>,
}

/// Projects a 3D direction, tilting it by the smallest angle (up to
/// [`MAX_REMEDY_DEG`]) that makes its image projection non-degenerate.
pub fn project_direction_remedied(
    origin: &Vec3,
    dir: &Vec3,
    k: &CameraIntrinsics,
    e: &CameraExtrinsics,
    axis: DirectionAxis,
) -> Result<(Vec2, Option<NoiseRemedy>)> {
    project_direction_remedied_avoiding(origin, dir, k, e, axis, &[])
}

/// As [`project_direction_remedied`], but among the tilts of the smallest
/// working angle picks the one whose image direction is furthest from `avoid`.
pub fn project_direction_remedied_avoiding(
    origin: &Vec3,
    dir: &Vec3,
    k: &CameraIntrinsics,
    e: &CameraExtrinsics,
    axis: DirectionAxis,
    avoid: &[Vec2],
) -> Result<(Vec2, Option<NoiseRemedy>)> {
    const ANGLE_STEP_DEG: f64 = 0.25;
    const AZIMUTHS: usize = 12;
    let step = geometry::default_step(origin, e);
    let dir = dir.normalize();
    match geometry::project_direction(origin, &dir, step, k, e) {
        Ok(d) => return Ok((d, None)),
        Err(GeometryError::Degenerate { .. }) => {}
        Err(other) => return Err(other.into()),
    }
    let a = geometry::any_perpendicular(&dir);
    let b = dir.cross(&a);
    let n_angles = (MAX_REMEDY_DEG / ANGLE_STEP_DEG).round() as usize;
    for i in 1..=n_angles {
        let theta = (i as f64 * ANGLE_STEP_DEG).to_radians();
        let clearance = |d: &Vec2| avoid.iter().map(|o| geometry::angle_deg_2d(o, d)).fold(f64::INFINITY, f64::min);
        let best = (0..AZIMUTHS)
            .filter_map(|j| {
                let phi = std::f64::consts::TAU * j as f64 / AZIMUTHS as f64;
                let tilted = dir * theta.cos() + (a * phi.cos() + b * phi.sin()) * theta.sin();
                geometry::project_direction(origin, &tilted, step, k, e).ok().map(|d| (d, tilted))
            })
            .fold(None, |best: Option<(Vec2, Vec3)>, cand| match best {
                Some(b) if clearance(&b.0) >= clearance(&cand.0) => Some(b),
                _ => Some(cand),
            });
        if let Some((d, tilted)) = best {
            return Ok((
                d,
                Some(NoiseRemedy {
                    axis,
                    angle_deg: theta.to_degrees(),
                    perturbed: tilted,
                }),
            ));
        }
    }
    Err(PromptError::Unremediable {
        axis,
        max_deg: MAX_REMEDY_DEG,
    })
}

/// 2D prompt of a ground-truth action as seen by the camera.
pub fn derive_2d_prompts(
    gt: &GroundTruthAction,
    k: &CameraIntrinsics,
    e: &CameraExtrinsics,
    pattern: Pattern,
) -> Result<DerivedPrompt> {
    let contact_px = geometry::project(&gt.contact_point_3d, k, e)?;
    if !k.contains(&contact_px) {
        return Err(GeometryError::OutOfBounds(contact_px.x, contact_px.y).into());
    }
    let mut remedies = Vec::new();
    let mut dirs = [None, None, None];
    let sources = [(DirectionAxis::Z, Some(gt.z_axis)), (DirectionAxis::Y, Some(gt.y_axis)), (DirectionAxis::M, gt.move_dir)];
    let mut degenerate = Vec::new();
    for (i, (axis, dir3)) in sources.into_iter().enumerate() {
        if !pattern.has(axis) {
            continue;
        }
        let dir3 = dir3.ok_or(PromptError::PatternMismatch {
            pattern,
            detail: "ground truth has no moving direction".into(),
        })?;
        let step = geometry::default_step(&gt.contact_point_3d, e);
        match geometry::project_direction(&gt.contact_point_3d, &dir3.normalize(), step, k, e) {
            Ok(d) => dirs[i] = Some(d),
            Err(GeometryError::Degenerate { .. }) => degenerate.push((i, axis, dir3)),
            Err(other) => return Err(other.into()),
        }
    }
    // Remedied strokes are tilted away from the strokes already drawn.
    for (i, axis, dir3) in degenerate {
        let avoid: Vec<Vec2> = dirs.iter().flatten().copied().collect();
        let (d, remedy) = project_direction_remedied_avoiding(&gt.contact_point_3d, &dir3, k, e, axis, &avoid)?;
        remedies.extend(remedy);
        dirs[i] = Some(d);
    }
    let prompt = CrayonPrompt::with_pattern(contact_px, dirs[0], dirs[1], dirs[2], pattern)?;
    Ok(DerivedPrompt { prompt, remedies })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptStyle {
    pub contact_color: [u8; 3],
    pub z_color: [u8; 3],
    pub y_color: [u8; 3],
    pub move_color: [u8; 3],
    pub disc_radius: f64,
    pub line_length: f64,
    pub line_thickness: f64,
    /// Per-channel tolerance when classifying overlay pixels.
    pub tolerance: u8,
}

impl Default for PromptStyle {
    fn default() -> Self {
        Self {
            contact_color: [0, 0, 255],
            z_color: [255, 0, 0],
            y_color: [0, 255, 0],
            move_color: [255, 255, 0],
            disc_radius: 5.0,
            line_length: 40.0,
            line_thickness: 3.0,
            tolerance: 30,
        }
    }
}

impl PromptStyle {
    pub fn color(&self, axis: DirectionAxis) -> [u8; 3] {
        match axis {
            DirectionAxis::Z => self.z_color,
            DirectionAxis::Y => self.y_color,
            DirectionAxis::M => self.move_color,
        }
    }

    fn matches(&self, px: &Rgb<u8>, color: [u8; 3]) -> bool {
        px.0.iter().zip(color).all(|(a, b)| a.abs_diff(b) <= self.tolerance)
    }
}

/// Pixel-centre test for a thick segment starting at `start`.
fn in_segment(q: &Vec2, start: &Vec2, dir: &Vec2, length: f64, half_width: f64) -> bool {
    let v = q - start;
    let t = v.dot(dir);
    let perp = (v.x * dir.y - v.y * dir.x).abs();
    (0.0..=length).contains(&t) && perp <= half_width
}

/// Paints a thick segment of `length` pixels from `start` along unit `dir`,
/// clipped to the image.
pub fn draw_segment(img: &mut RgbImage, start: &Vec2, dir: &Vec2, length: f64, thickness: f64, color: [u8; 3]) {
    let end = start + dir * length;
    let pad = thickness;
    let (w, h) = (img.width() as i64, img.height() as i64);
    let lo_x = ((start.x.min(end.x) - pad).floor() as i64).max(0);
    let hi_x = ((start.x.max(end.x) + pad).ceil() as i64).min(w - 1);
    let lo_y = ((start.y.min(end.y) - pad).floor() as i64).max(0);
    let hi_y = ((start.y.max(end.y) + pad).ceil() as i64).min(h - 1);
    for row in lo_y..=hi_y {
        for col in lo_x..=hi_x {
            if in_segment(&Vec2::new(col as f64, row as f64), start, dir, length, thickness / 2.0) {
                img.put_pixel(col as u32, row as u32, Rgb(color));
            }
        }
    }
}

pub fn draw_disc(img: &mut RgbImage, center: &Vec2, radius: f64, color: [u8; 3]) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let lo_x = ((center.x - radius).floor() as i64).max(0);
    let hi_x = ((center.x + radius).ceil() as i64).min(w - 1);
    let lo_y = ((center.y - radius).floor() as i64).max(0);
    let hi_y = ((center.y + radius).ceil() as i64).min(h - 1);
    for row in lo_y..=hi_y {
        for col in lo_x..=hi_x {
            if (Vec2::new(col as f64, row as f64) - center).norm() <= radius {
                img.put_pixel(col as u32, row as u32, Rgb(color));
            }
        }
    }
}

/// Overlays the prompt. Lines start at the contact pixel; the blue disc is
/// drawn last so the contact is never occluded.
pub fn rasterize(image: &RgbImage, prompt: &CrayonPrompt, style: &PromptStyle) -> RgbImage {
    let mut out = image.clone();
    let c = prompt.contact_px();
    for axis in [DirectionAxis::M, DirectionAxis::Y, DirectionAxis::Z] {
        if let Some(d) = prompt.direction(axis) {
            draw_segment(&mut out, &c, &d, style.line_length, style.line_thickness, style.color(axis));
        }
    }
    draw_disc(&mut out, &c, style.disc_radius, style.contact_color);
    out
}

fn color_pixels(img: &RgbImage, style: &PromptStyle, color: [u8; 3]) -> Vec<Vec2> {
    img.enumerate_pixels()
        .filter(|(_, _, p)| style.matches(p, color))
        .map(|(x, y, _)| Vec2::new(x as f64, y as f64))
        .collect()
}

fn centroid(pts: &[Vec2]) -> Vec2 {
    pts.iter().sum::<Vec2>() / pts.len() as f64
}

/// Unsigned principal axis of a pixel set plus the set's mean.
fn principal_axis(pts: &[Vec2]) -> (Vec2, Vec2) {
    let mean = centroid(pts);
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in pts {
        let d = p - mean;
        sxx += d.x * d.x;
        sxy += d.x * d.y;
        syy += d.y * d.y;
    }
    let angle = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    (Vec2::new(angle.cos(), angle.sin()), mean)
}

/// A detected direction line before sign resolution.
#[derive(Debug, Clone, Copy)]
struct LineFit {
    axis: Vec2,
    /// Signed extent along `axis`, measured from the contact centroid.
    t_min: f64,
    t_max: f64,
    /// Distance from the contact centroid to the infinite line.
    offset: f64,
}

impl LineFit {
    fn head_sign(&self) -> f64 {
        if self.t_max.abs() >= self.t_min.abs() {
            1.0
        } else {
            -1.0
        }
    }

    /// True when the line does not start at the contact dot.
    fn detached(&self, style: &PromptStyle) -> bool {
        let near_end = self.t_min.abs().min(self.t_max.abs());
        let straddles = self.t_min < 0.0 && self.t_max > 0.0;
        self.offset > style.disc_radius || (!straddles && near_end > style.disc_radius + 2.0 * style.line_thickness) || (straddles && self.t_min.abs().min(self.t_max) > style.disc_radius + 2.0 * style.line_thickness)
    }
}

fn fit_line(pts: &[Vec2], contact: &Vec2) -> LineFit {
    let (axis, mean) = principal_axis(pts);
    let (mut t_min, mut t_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in pts {
        let t = (p - contact).dot(&axis);
        t_min = t_min.min(t);
        t_max = t_max.max(t);
    }
    let rel = mean - contact;
    let offset = (rel.x * axis.y - rel.y * axis.x).abs();
    LineFit {
        axis,
        t_min,
        t_max,
        offset,
    }
}

fn extract_impl(img: &RgbImage, style: &PromptStyle, record: Option<&CrayonPrompt>) -> Result<CrayonPrompt> {
    let blue = color_pixels(img, style, style.contact_color);
    if blue.is_empty() {
        return Err(PromptError::NoContact);
    }
    let contact = centroid(&blue);
    let min_pixels = (style.line_thickness * style.line_thickness).ceil() as usize;
    let mut dirs = [None, None, None];
    for (slot, axis) in dirs.iter_mut().zip(DirectionAxis::ALL) {
        let pts = color_pixels(img, style, style.color(axis));
        if pts.len() < min_pixels {
            continue;
        }
        let fit = fit_line(&pts, &contact);
        let mut sign = fit.head_sign();
        if fit.detached(style) {
            if let Some(hint) = record.and_then(|r| r.direction(axis)) {
                sign = if hint.dot(&fit.axis) >= 0.0 { 1.0 } else { -1.0 };
            }
        }
        *slot = Some(fit.axis * sign);
    }
    let present: String = DirectionAxis::ALL
        .iter()
        .zip(&dirs)
        .filter(|(_, d)| d.is_some())
        .map(|(a, _)| a.to_string())
        .collect();
    let pattern = Pattern::from_presence(dirs[0].is_some(), dirs[1].is_some(), dirs[2].is_some())
        .ok_or(PromptError::InconsistentOverlay(present))?;
    CrayonPrompt::with_pattern(contact, dirs[0], dirs[1], dirs[2], pattern)
}

/// Reads a prompt back from an overlay by palette colour.
///
/// Each direction's sign is taken from whichever end of its line lies
/// farther from the contact dot.
pub fn extract(img: &RgbImage, style: &PromptStyle) -> Result<CrayonPrompt> {
    extract_impl(img, style, None)
}

/// As [`extract`], but lines that do not start at the contact dot take their
/// sign from the accompanying structured record.
pub fn extract_with_record(img: &RgbImage, style: &PromptStyle, record: &CrayonPrompt) -> Result<CrayonPrompt> {
    extract_impl(img, style, Some(record))
}

/// Two-decimal rendering without a negative zero.
pub fn fmt2(v: f64) -> String {
    let r = (v * 100.0).round() / 100.0;
    let r = if r == 0.0 { 0.0 } else { r };
    format!("{r:.2}")
}

fn fmt_vec2(v: &Vec2) -> String {
    format!("({}, {})", fmt2(v.x), fmt2(v.y))
}

fn fmt_vec3(v: &Vec3) -> String {
    format!("({}, {}, {})", fmt2(v.x), fmt2(v.y), fmt2(v.z))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LanguagePrompt(pub String);

impl fmt::Display for LanguagePrompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

const TASK: &str = "Predict the contact point and orientation for manipulating the object.";

/// Text prompt accompanying the overlay, one template per pattern.
pub fn format_language(prompt: &CrayonPrompt) -> LanguagePrompt {
    let p = fmt_vec2(&prompt.contact_px());
    let dir = |axis| fmt_vec2(&prompt.direction(axis).expect("pattern guarantees direction"));
    let text = match prompt.pattern() {
        Pattern::P => format!(
            "{TASK} The hints in the image include the contact point with a blue dot. Specifically, the contact point is at {p}."
        ),
        Pattern::PZ => format!(
            "{TASK} The hints in the image include a blue dot for the contact point and a red line for the gripper z-axis 2D direction. Specifically, the contact point is at {p}, and the gripper z-axis 2D direction is {}.",
            dir(DirectionAxis::Z)
        ),
        Pattern::PZY => format!(
            "{TASK} The hints in the image include a blue dot for the contact point, a red line for the gripper z-axis 2D direction, and a green line for the gripper y-axis 2D direction. Specifically, the contact point is at {p}, the gripper z-axis 2D direction is {}, and the gripper y-axis 2D direction is {}.",
            dir(DirectionAxis::Z),
            dir(DirectionAxis::Y)
        ),
        Pattern::PZYM => format!(
            "{TASK} The hints in the image include a blue dot for the contact point, a red line for the gripper z-axis 2D direction, a green line for the gripper y-axis 2D direction, and a yellow line for the moving 2D direction. Specifically, the contact point is at {p}, the gripper z-axis 2D direction is {}, the gripper y-axis 2D direction is {}, and the gripper moving 2D direction is {}.",
            dir(DirectionAxis::Z),
            dir(DirectionAxis::Y),
            dir(DirectionAxis::M)
        ),
    };
    LanguagePrompt(text)
}

fn quantize(v: &Vec3) -> Vec3 {
    v.map(|c| objective::undiscretize(objective::discretize_clamped(c)))
}

/// Supervision text for a ground-truth action, directions at bin precision.
pub fn format_ground_truth_text(gt: &GroundTruthAction, contact_px: &Vec2) -> String {
    let z = fmt_vec3(&quantize(&gt.z_axis));
    let y = fmt_vec3(&quantize(&gt.y_axis));
    let p = fmt_vec2(contact_px);
    match gt.move_dir {
        Some(m) => format!(
            "The contact point is at {p}, the gripper z-axis 3D direction is {z}, the gripper y-axis 3D direction is {y}, and the moving 3D direction is {}.",
            fmt_vec3(&quantize(&m))
        ),
        None => format!(
            "The contact point is at {p}, the gripper z-axis 3D direction is {z}, and the gripper y-axis 3D direction is {y}."
        ),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthText {
    pub contact_px: Vec2,
    pub z_axis: Vec3,
    pub y_axis: Vec3,
    pub move_dir: Option<Vec3>,
}

/// Inverse of [`format_ground_truth_text`].
pub fn parse_ground_truth_text(text: &str) -> Result<GroundTruthText> {
    let mut groups = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('(') {
        let close = rest[open..]
            .find(')')
            .ok_or_else(|| PromptError::Parse("unbalanced parenthesis".into()))?;
        let inner = &rest[open + 1..open + close];
        let nums = inner
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| PromptError::Parse(e.to_string()))?;
        groups.push(nums);
        rest = &rest[open + close + 1..];
    }
    let shape: Vec<usize> = groups.iter().map(Vec::len).collect();
    let v3 = |g: &[f64]| Vec3::new(g[0], g[1], g[2]);
    match shape.as_slice() {
        [2, 3, 3] | [2, 3, 3, 3] => Ok(GroundTruthText {
            contact_px: Vec2::new(groups[0][0], groups[0][1]),
            z_axis: v3(&groups[1]),
            y_axis: v3(&groups[2]),
            move_dir: groups.get(3).map(|g| v3(g)),
        }),
        other => Err(PromptError::Parse(format!("unexpected tuple arities {other:?}"))),
    }
}

/// Uniform per-component noise of relative magnitude `noise_fraction` on every
/// direction; the contact pixel is left untouched.
pub fn perturb<R: Rng + ?Sized>(prompt: &CrayonPrompt, noise_fraction: f64, rng: &mut R) -> CrayonPrompt {
    if noise_fraction <= 0.0 {
        return *prompt;
    }
    let mut noisy = |v: Option<Vec2>| {
        v.map(|d| {
            let n = d.map(|c| {
                let a = noise_fraction * c.abs();
                if a > 0.0 {
                    c + rng.random_range(-a..=a)
                } else {
                    c
                }
            });
            let len = n.norm();
            if len > 1e-12 {
                n / len
            } else {
                d
            }
        })
    };
    let z = noisy(prompt.z_dir);
    let y = noisy(prompt.y_dir);
    let m = noisy(prompt.move_dir);
    CrayonPrompt {
        z_dir: z,
        y_dir: y,
        move_dir: m,
        ..*prompt
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::angle_deg_2d;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(deg: f64) -> Vec2 {
        let r = deg.to_radians();
        Vec2::new(r.cos(), r.sin())
    }

    fn blank() -> RgbImage {
        RgbImage::from_pixel(336, 336, Rgb([200, 200, 200]))
    }

    #[test]
    fn pattern_invariants_are_enforced() {
        let c = Vec2::new(10.0, 10.0);
        assert!(CrayonPrompt::with_pattern(c, Some(unit(0.0)), None, None, Pattern::P).is_err());
        assert!(CrayonPrompt::with_pattern(c, None, None, None, Pattern::PZ).is_err());
        assert!(CrayonPrompt::new(c, None, Some(unit(0.0)), None).is_err());
        assert!(matches!(
            CrayonPrompt::new(c, Some(Vec2::new(2.0, 0.0)), None, None),
            Err(PromptError::NotUnit(DirectionAxis::Z))
        ));
        let p = CrayonPrompt::new(c, Some(unit(0.0)), Some(unit(90.0)), None).unwrap();
        assert_eq!(p.pattern(), Pattern::PZY);
        assert_eq!(p.restricted(Pattern::PZ).unwrap().pattern(), Pattern::PZ);
    }

    #[test]
    fn record_validation_lists_all_offending_fields() {
        let rec = PromptRecord {
            contact_px: [1.0, 2.0],
            z_dir: None,
            y_dir: Some([3.0, 0.0]),
            move_dir: Some([1.0, 0.0]),
            pattern: Pattern::PZY,
            camera_ref: None,
            scene_ref: None,
        };
        let err = rec.validate().unwrap_err();
        let fields: Vec<_> = err.issues.iter().map(|i| i.field.as_str()).collect();
        assert_eq!(fields, ["z_dir", "y_dir", "move_dir"]);
    }

    #[test]
    fn contact_only_overlay_is_pattern_p() {
        let p = CrayonPrompt::contact_only(Vec2::new(100.0, 120.0));
        let img = rasterize(&blank(), &p, &PromptStyle::default());
        let blue = color_pixels(&img, &PromptStyle::default(), [0, 0, 255]).len();
        assert!(blue > 60 && blue < 100, "{blue}");
        let back = extract(&img, &PromptStyle::default()).unwrap();
        assert_eq!(back.pattern(), Pattern::P);
        assert!((back.contact_px() - p.contact_px()).norm() < 1e-9);
    }

    #[test]
    fn red_segment_pixel_count_matches_area() {
        let style = PromptStyle::default();
        for deg in [0.0, 17.0, 45.0, 90.0, 133.0] {
            let mut img = blank();
            draw_segment(&mut img, &Vec2::new(150.3, 160.7), &unit(deg), style.line_length, style.line_thickness, style.z_color);
            let n = color_pixels(&img, &style, style.z_color).len() as f64;
            let area = style.line_length * style.line_thickness;
            assert!((n - area).abs() / area < 0.15, "{deg}: {n}");
        }
    }

    #[test]
    fn overlay_with_drawn_lines_roundtrips() {
        let style = PromptStyle::default();
        let p = CrayonPrompt::new(Vec2::new(150.4, 170.2), Some(unit(200.0)), Some(unit(95.0)), Some(unit(-20.0))).unwrap();
        let back = extract(&rasterize(&blank(), &p, &style), &style).unwrap();
        assert_eq!(back.pattern(), Pattern::PZYM);
        assert!((back.contact_px() - p.contact_px()).norm() <= 1.0);
        for axis in DirectionAxis::ALL {
            let e = angle_deg_2d(&back.direction(axis).unwrap(), &p.direction(axis).unwrap());
            assert!(e <= 2.0, "{axis}: {e}");
        }
    }

    #[test]
    fn detached_line_takes_sign_from_record() {
        let style = PromptStyle::default();
        let mut img = blank();
        let contact = Vec2::new(100.0, 100.0);
        draw_disc(&mut img, &contact, style.disc_radius, style.contact_color);
        // red line drawn away from the dot, pointing back toward it
        draw_segment(&mut img, &Vec2::new(200.0, 150.0), &unit(180.0), 40.0, 3.0, style.z_color);
        let record = CrayonPrompt::new(contact, Some(unit(180.0)), None, None).unwrap();
        let with = extract_with_record(&img, &style, &record).unwrap();
        assert!(angle_deg_2d(&with.z_dir().unwrap(), &unit(180.0)) < 2.0);
        let without = extract(&img, &style).unwrap();
        assert!(angle_deg_2d(&without.z_dir().unwrap(), &unit(0.0)) < 2.0);
    }

    #[test]
    fn tiny_colour_blob_is_reported_absent() {
        let style = PromptStyle::default();
        let mut img = blank();
        draw_disc(&mut img, &Vec2::new(50.0, 50.0), 5.0, style.contact_color);
        img.put_pixel(120, 120, Rgb(style.z_color));
        img.put_pixel(121, 120, Rgb(style.z_color));
        assert_eq!(extract(&img, &style).unwrap().pattern(), Pattern::P);
        assert!(matches!(extract(&blank(), &style), Err(PromptError::NoContact)));
    }

    #[test]
    fn language_templates() {
        let p = CrayonPrompt::contact_only(Vec2::new(12.0, 34.5));
        assert_eq!(
            format_language(&p).0,
            "Predict the contact point and orientation for manipulating the object. The hints in the image include the contact point with a blue dot. Specifically, the contact point is at (12.00, 34.50)."
        );
        let full = CrayonPrompt::new(Vec2::new(1.0, 2.0), Some(unit(0.0)), Some(unit(90.0)), Some(unit(180.0))).unwrap();
        assert_eq!(
            format_language(&full).0,
            "Predict the contact point and orientation for manipulating the object. The hints in the image include a blue dot for the contact point, a red line for the gripper z-axis 2D direction, a green line for the gripper y-axis 2D direction, and a yellow line for the moving 2D direction. Specifically, the contact point is at (1.00, 2.00), the gripper z-axis 2D direction is (1.00, 0.00), the gripper y-axis 2D direction is (0.00, 1.00), and the gripper moving 2D direction is (-1.00, 0.00)."
        );
        assert_eq!(format_language(&full), format_language(&full));
    }

    #[test]
    fn ground_truth_text_format_and_parse() {
        let gt = GroundTruthAction {
            contact_point_3d: Vec3::zeros(),
            z_axis: Vec3::new(0.0, 0.0, -1.0),
            y_axis: Vec3::new(0.6, 0.8, 0.0),
            move_dir: Some(Vec3::new(0.123, -0.456, 0.789)),
            part_id: 0,
            motion: Default::default(),
        };
        let text = format_ground_truth_text(&gt, &Vec2::new(10.0, 20.0));
        assert!(text.contains("z-axis 3D direction is (0.00, 0.00, -1.00)"), "{text}");
        let parsed = parse_ground_truth_text(&text).unwrap();
        assert_eq!(parsed.move_dir.unwrap(), Vec3::new(0.12, -0.46, 0.78));
        assert_eq!(parsed.z_axis, quantize(&gt.z_axis));
        assert!(parse_ground_truth_text("The contact point is at (1, 2).").is_err());
    }

    #[test]
    fn zero_noise_is_identity_and_contact_is_kept() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = CrayonPrompt::new(Vec2::new(3.25, 4.5), Some(unit(33.0)), Some(unit(123.0)), Some(unit(250.0))).unwrap();
        assert_eq!(perturb(&p, 0.0, &mut rng), p);
        let q = perturb(&p, 0.3, &mut rng);
        assert_eq!(q.contact_px().x.to_bits(), p.contact_px().x.to_bits());
        assert_eq!(q.contact_px().y.to_bits(), p.contact_px().y.to_bits());
        for axis in DirectionAxis::ALL {
            assert!((q.direction(axis).unwrap().norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn more_noise_means_larger_mean_deviation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mean_dev = |f: f64, rng: &mut ChaCha8Rng| {
            let mut total = 0.0;
            for i in 0..1000 {
                let d = unit(i as f64 * 0.37 * 360.0 / 1000.0 + 10.0);
                let p = CrayonPrompt::new(Vec2::zeros(), Some(d), None, None).unwrap();
                total += angle_deg_2d(&perturb(&p, f, rng).z_dir().unwrap(), &d);
            }
            total / 1000.0
        };
        let low = mean_dev(0.1, &mut rng);
        let high = mean_dev(0.4, &mut rng);
        assert!(high > low, "{low} vs {high}");
    }
}
