//! Pinhole camera geometry.
//!
//! Conventions used everywhere in the crate:
//! - world frame is right-handed with +z up;
//! - camera frame is right-handed with +x right, +y down and +z into the scene;
//! - pixel coordinates are continuous, origin at the top-left, and the pixel
//!   with integer index `(col, row)` is centred on `(col, row)`;
//! - extrinsics map world to camera: `p_cam = R * p_world + t`;
//! - "depth" is the camera-frame z coordinate, not the ray length.

use nalgebra::{Matrix3, SymmetricEigen, Vector2, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Projections shorter than this (in pixels) carry no usable direction.
pub const DEGENERATE_PX: f64 = 0.5;

/// Fraction of the camera-to-origin distance used as the default step when
/// projecting a 3D direction.
pub const DEFAULT_STEP_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("point is behind the camera (camera-frame z = {0})")]
    BehindCamera(f64),
    #[error("invalid depth value {0} (must be finite and positive)")]
    InvalidDepth(f64),
    #[error("pixel ({0:.2}, {1:.2}) lies outside the image")]
    OutOfBounds(f64, f64),
    #[error("direction projects to {length:.3} px, below the {threshold} px threshold")]
    Degenerate { length: f64, threshold: f64 },
    #[error("invalid step {0}")]
    InvalidStep(f64),
    #[error("only {found} valid depth samples in window, need at least {needed}")]
    InsufficientDepth { found: usize, needed: usize },
    #[error("invalid window size {0} (must be odd and >= 3)")]
    InvalidWindow(usize),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("depth raster: {0}")]
    Raster(String),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub focal_x: f64,
    pub focal_y: f64,
    pub principal_x: f64,
    pub principal_y: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(
        focal_x: f64,
        focal_y: f64,
        principal_x: f64,
        principal_y: f64,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let k = Self {
            focal_x,
            focal_y,
            principal_x,
            principal_y,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Default render camera: 336x336 with a ~33 degree field of view.
    pub fn desk_default() -> Self {
        Self {
            focal_x: 560.0,
            focal_y: 560.0,
            principal_x: 168.0,
            principal_y: 168.0,
            width: 336,
            height: 336,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal_x > 0.0 && self.focal_y > 0.0) {
            return Err(GeometryError::InvalidCamera("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidCamera("image dimensions must be positive".into()));
        }
        let inside = (0.0..self.width as f64).contains(&self.principal_x)
            && (0.0..self.height as f64).contains(&self.principal_y);
        if !inside {
            return Err(GeometryError::InvalidCamera("principal point outside image".into()));
        }
        Ok(())
    }

    /// True when the continuous pixel falls on some pixel of the raster.
    pub fn contains(&self, px: &Vec2) -> bool {
        px.x >= -0.5
            && px.y >= -0.5
            && px.x < self.width as f64 - 0.5
            && px.y < self.height as f64 - 0.5
    }

    /// Camera-frame ray through the pixel, scaled so that its z component is 1.
    pub fn ray(&self, px: &Vec2) -> Vec3 {
        Vec3::new(
            (px.x - self.principal_x) / self.focal_x,
            (px.y - self.principal_y) / self.focal_y,
            1.0,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraExtrinsics {
    /// World-to-camera rotation.
    pub rotation: Mat3,
    /// World-to-camera translation.
    pub translation: Vec3,
}

impl CameraExtrinsics {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let e = Self {
            rotation,
            translation,
        };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        if orthonormality_error(&self.rotation) > 1e-9 || self.rotation.determinant() < 0.0 {
            return Err(GeometryError::InvalidCamera(
                "rotation is not a proper orthonormal matrix".into(),
            ));
        }
        Ok(())
    }

    /// Builds a camera at `eye` looking at `target` with world +z as up.
    ///
    /// Falls back to world +x as the reference when looking straight up or down.
    pub fn look_at(eye: Vec3, target: Vec3) -> Self {
        let forward = (target - eye).normalize();
        let up = if forward.cross(&Vec3::z()).norm() < 1e-9 {
            Vec3::x()
        } else {
            Vec3::z()
        };
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        // Rows of the world-to-camera rotation are the camera axes in world.
        let rotation = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        Self {
            rotation,
            translation: -(rotation * eye),
        }
    }

    pub fn camera_center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn to_world(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }

    pub fn dir_to_world(&self, d: &Vec3) -> Vec3 {
        self.rotation.transpose() * d
    }

    /// Camera optical axis in world coordinates.
    pub fn forward(&self) -> Vec3 {
        self.rotation.row(2).transpose()
    }
}

/// Intrinsics and extrinsics of one observing camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: CameraExtrinsics,
}

impl Camera {
    pub fn new(intrinsics: CameraIntrinsics, extrinsics: CameraExtrinsics) -> Self {
        Self {
            intrinsics,
            extrinsics,
        }
    }
}

/// max |RᵀR − I|
pub fn orthonormality_error(r: &Mat3) -> f64 {
    (r.transpose() * r - Mat3::identity()).abs().max()
}

/// Continuous pixel coordinates of a world point.
pub fn project(point: &Vec3, k: &CameraIntrinsics, e: &CameraExtrinsics) -> Result<Vec2> {
    let pc = e.to_camera(point);
    if !(pc.z > 0.0) {
        return Err(GeometryError::BehindCamera(pc.z));
    }
    Ok(Vec2::new(
        k.focal_x * pc.x / pc.z + k.principal_x,
        k.focal_y * pc.y / pc.z + k.principal_y,
    ))
}

/// Jacobian of `project` with respect to the world point (2x3, row-major).
pub fn project_jacobian(
    point: &Vec3,
    k: &CameraIntrinsics,
    e: &CameraExtrinsics,
) -> Result<[[f64; 3]; 2]> {
    let pc = e.to_camera(point);
    if !(pc.z > 0.0) {
        return Err(GeometryError::BehindCamera(pc.z));
    }
    let iz = 1.0 / pc.z;
    // d(pixel)/d(p_cam), then chain through R.
    let jc = [
        [k.focal_x * iz, 0.0, -k.focal_x * pc.x * iz * iz],
        [0.0, k.focal_y * iz, -k.focal_y * pc.y * iz * iz],
    ];
    let r = &e.rotation;
    let mut out = [[0.0; 3]; 2];
    for (i, row) in jc.iter().enumerate() {
        for j in 0..3 {
            out[i][j] = row[0] * r[(0, j)] + row[1] * r[(1, j)] + row[2] * r[(2, j)];
        }
    }
    Ok(out)
}

/// World point seen at `pixel` with camera-frame depth `depth`.
pub fn lift(pixel: &Vec2, depth: f64, k: &CameraIntrinsics, e: &CameraExtrinsics) -> Result<Vec3> {
    if !(depth.is_finite() && depth > 0.0) {
        return Err(GeometryError::InvalidDepth(depth));
    }
    if !k.contains(pixel) {
        return Err(GeometryError::OutOfBounds(pixel.x, pixel.y));
    }
    Ok(e.to_world(&(k.ray(pixel) * depth)))
}

/// Step length used by [`project_direction`] when the caller has no preference.
pub fn default_step(origin: &Vec3, e: &CameraExtrinsics) -> f64 {
    DEFAULT_STEP_FRACTION * (origin - e.camera_center()).norm()
}

/// Raw 2D displacement of `project(origin + step * dir) - project(origin)`.
pub fn project_displacement(
    origin: &Vec3,
    dir: &Vec3,
    step: f64,
    k: &CameraIntrinsics,
    e: &CameraExtrinsics,
) -> Result<Vec2> {
    if !(step.is_finite() && step > 0.0) {
        return Err(GeometryError::InvalidStep(step));
    }
    let a = project(origin, k, e)?;
    let b = project(&(origin + dir * step), k, e)?;
    Ok(b - a)
}

/// Unit 2D image direction of a 3D direction anchored at `origin`.
pub fn project_direction(
    origin: &Vec3,
    dir: &Vec3,
    step: f64,
    k: &CameraIntrinsics,
    e: &CameraExtrinsics,
) -> Result<Vec2> {
    let d = project_displacement(origin, dir, step, k, e)?;
    let length = d.norm();
    if length < DEGENERATE_PX {
        return Err(GeometryError::Degenerate {
            length,
            threshold: DEGENERATE_PX,
        });
    }
    Ok(d / length)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: u32,
    pub height: u32,
    /// Row-major depths; meaningful only where `valid` is set.
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

const DEPTH_MAGIC: &[u8; 4] = b"CRDP";

impl DepthImage {
    pub fn new_invalid(width: u32, height: u32) -> Self {
        let n = (width * height) as usize;
        Self {
            width,
            height,
            values: vec![0.0; n],
            valid: vec![false; n],
        }
    }

    fn index(&self, col: i64, row: i64) -> Option<usize> {
        if col < 0 || row < 0 || col >= self.width as i64 || row >= self.height as i64 {
            return None;
        }
        Some(row as usize * self.width as usize + col as usize)
    }

    pub fn get(&self, col: i64, row: i64) -> Option<f64> {
        let i = self.index(col, row)?;
        self.valid[i].then_some(self.values[i])
    }

    pub fn set(&mut self, col: u32, row: u32, depth: f64) {
        let i = row as usize * self.width as usize + col as usize;
        self.values[i] = depth;
        self.valid[i] = depth.is_finite() && depth > 0.0;
    }

    /// Depth at the pixel nearest to a continuous coordinate.
    pub fn at(&self, px: &Vec2) -> Option<f64> {
        self.get(px.x.round() as i64, px.y.round() as i64)
    }

    /// Serializes to the raster format: `CRDP`, u32 width, u32 height (all
    /// little-endian), then row-major f32 depths with 0.0 marking invalid.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.values.len());
        out.extend_from_slice(DEPTH_MAGIC);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        for (v, ok) in self.values.iter().zip(&self.valid) {
            let f = if *ok { *v as f32 } else { 0.0 };
            out.extend_from_slice(&f.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != DEPTH_MAGIC {
            return Err(GeometryError::Raster("bad magic".into()));
        }
        let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        let n = width as usize * height as usize;
        if bytes.len() != 12 + 4 * n {
            return Err(GeometryError::Raster(format!(
                "expected {} bytes of payload, found {}",
                4 * n,
                bytes.len() - 12
            )));
        }
        let mut img = Self::new_invalid(width, height);
        for (i, chunk) in bytes[12..].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
            img.values[i] = v;
            img.valid[i] = v.is_finite() && v > 0.0;
        }
        Ok(img)
    }
}

/// Local plane fitted to lifted depth samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePatch {
    pub centroid: Vec3,
    /// Unit normal facing the camera.
    pub normal: Vec3,
}

impl SurfacePatch {
    /// Intersection of the viewing ray through `pixel` with the patch plane.
    pub fn intersect(&self, pixel: &Vec2, k: &CameraIntrinsics, e: &CameraExtrinsics) -> Option<Vec3> {
        let c = e.camera_center();
        let d = e.dir_to_world(&k.ray(pixel));
        let denom = d.dot(&self.normal);
        if denom.abs() < 1e-12 {
            return None;
        }
        let s = (self.centroid - c).dot(&self.normal) / denom;
        (s > 0.0).then(|| c + d * s)
    }
}

/// Least-squares plane over the lifted neighbours of `pixel`.
///
/// Samples whose depth differs from the centre by more than `max_depth_jump`
/// are ignored so that windows straddling an occlusion edge stay on one surface.
pub fn fit_surface(
    depth: &DepthImage,
    pixel: &Vec2,
    window: usize,
    k: &CameraIntrinsics,
    e: &CameraExtrinsics,
) -> Result<SurfacePatch> {
    const MAX_DEPTH_JUMP: f64 = 0.1;
    if window < 3 || window % 2 == 0 {
        return Err(GeometryError::InvalidWindow(window));
    }
    let col = pixel.x.round() as i64;
    let row = pixel.y.round() as i64;
    let half = (window / 2) as i64;
    let center_depth = depth.get(col, row);
    let mut pts = Vec::with_capacity(window * window);
    for r in row - half..=row + half {
        for c in col - half..=col + half {
            let Some(d) = depth.get(c, r) else { continue };
            if let Some(cd) = center_depth {
                if (d - cd).abs() > MAX_DEPTH_JUMP {
                    continue;
                }
            }
            pts.push(e.to_world(&(k.ray(&Vec2::new(c as f64, r as f64)) * d)));
        }
    }
    if pts.len() < 3 {
        return Err(GeometryError::InsufficientDepth {
            found: pts.len(),
            needed: 3,
        });
    }
    let centroid = pts.iter().sum::<Vec3>() / pts.len() as f64;
    let mut cov = Mat3::zeros();
    for p in &pts {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|a, b| eig.eigenvalues[*a].total_cmp(&eig.eigenvalues[*b]));
    // Collinear samples leave two near-zero eigenvalues; no plane is defined.
    if eig.eigenvalues[order[1]] <= 1e-12 * eig.eigenvalues[order[2]].max(1e-300) {
        return Err(GeometryError::InsufficientDepth {
            found: pts.len(),
            needed: 3,
        });
    }
    let mut normal: Vec3 = eig.eigenvectors.column(order[0]).into_owned().normalize();
    if normal.dot(&(centroid - e.camera_center())) > 0.0 {
        normal = -normal;
    }
    Ok(SurfacePatch { centroid, normal })
}

/// Unit surface normal at `pixel`, oriented toward the camera.
pub fn estimate_normal(
    depth: &DepthImage,
    pixel: &Vec2,
    window: usize,
    k: &CameraIntrinsics,
    e: &CameraExtrinsics,
) -> Result<Vec3> {
    fit_surface(depth, pixel, window, k, e).map(|p| p.normal)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraSamplingConfig {
    /// World units.
    pub distance_range: [f64; 2],
    /// Degrees, measured about world +z from the +x axis.
    pub azimuth_range: [f64; 2],
    /// Degrees above the horizontal plane.
    pub altitude_range: [f64; 2],
}

impl Default for CameraSamplingConfig {
    fn default() -> Self {
        Self {
            distance_range: [4.5, 5.5],
            azimuth_range: [-45.0, 45.0],
            altitude_range: [30.0, 60.0],
        }
    }
}

impl CameraSamplingConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("distance", self.distance_range),
            ("azimuth", self.azimuth_range),
            ("altitude", self.altitude_range),
        ] {
            if !(r[0] <= r[1]) {
                return Err(GeometryError::InvalidCamera(format!("{name} range is empty")));
            }
        }
        if self.distance_range[0] <= 0.0 {
            return Err(GeometryError::InvalidCamera("distance must be positive".into()));
        }
        Ok(())
    }
}

fn sample_range<R: Rng + ?Sized>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

/// Camera position on a sphere around `target` at the given spherical coordinates.
pub fn spherical_eye(target: &Vec3, distance: f64, azimuth_deg: f64, altitude_deg: f64) -> Vec3 {
    let (az, alt) = (azimuth_deg.to_radians(), altitude_deg.to_radians());
    target + distance * Vec3::new(alt.cos() * az.cos(), alt.cos() * az.sin(), alt.sin())
}

/// Random camera on the upper hemisphere around `target`, facing it.
pub fn sample_camera_pose<R: Rng + ?Sized>(
    rng: &mut R,
    config: &CameraSamplingConfig,
    target: &Vec3,
) -> CameraExtrinsics {
    let distance = sample_range(rng, config.distance_range);
    let azimuth = sample_range(rng, config.azimuth_range);
    let altitude = sample_range(rng, config.altitude_range);
    CameraExtrinsics::look_at(spherical_eye(target, distance, azimuth, altitude), *target)
}

/// Angle between two vectors in degrees.
pub fn angle_deg(a: &Vec3, b: &Vec3) -> f64 {
    let c = a.dot(b) / (a.norm() * b.norm());
    c.clamp(-1.0, 1.0).acos().to_degrees()
}

pub fn angle_deg_2d(a: &Vec2, b: &Vec2) -> f64 {
    let c = a.dot(b) / (a.norm() * b.norm());
    c.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Some unit vector perpendicular to `v`.
pub fn any_perpendicular(v: &Vec3) -> Vec3 {
    let pick = if v.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    v.cross(&pick).normalize()
}
