//! Rigid-body and pinhole camera geometry.
//!
//! Conventions used throughout the crate:
//!
//! * A [`Pose`] is camera-to-world: `x_world = R * x_cam + center`.
//! * Camera frame is x right, y down, z forward.
//! * World frame is z up; the ground plane is world x/y.
//! * Heading angles follow a yaw (world z) / pitch (camera x) / roll (camera z)
//!   convention, see [`Pose::from_yaw_pitch_roll`] and [`yaw_deg`].

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat4 = Matrix4<f64>;
/// A point in world (or camera) coordinates, meters.
pub type Point3 = Vec3;

const MIN_QUAT_NORM: f64 = 1e-12;
const ROTATION_TOLERANCE: f64 = 1e-6;
/// Slack applied before flooring so that a pixel unprojected and re-projected
/// through the same camera lands back on itself despite rounding.
const DEHOMOGENIZE_EPS: f64 = 1e-9;

/// Unit quaternion `w + xi + yj + zk`, Hamilton convention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let axis = axis.normalize();
        let (s, c) = (angle * 0.5).sin_cos();
        Self::new(c, axis.x * s, axis.y * s, axis.z * s).canonical()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dot(&self, other: &Quaternion) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    /// Scales to unit length and flips the sign so that `w >= 0`.
    pub fn normalize(&self) -> Result<Self> {
        let n = self.norm();
        if !(n > MIN_QUAT_NORM) {
            return Err(Error::ZeroQuaternion(n));
        }
        Ok(Self::new(self.w / n, self.x / n, self.y / n, self.z / n).canonical())
    }

    /// Representative of `{q, -q}` with non-negative `w`.
    pub fn canonical(self) -> Self {
        if self.w < 0.0 {
            Self::new(-self.w, -self.x, -self.y, -self.z)
        } else {
            self
        }
    }

    pub fn conjugate(&self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Hamilton product `self * rhs`.
    pub fn mul(&self, rhs: &Quaternion) -> Self {
        let (a, b) = (self, rhs);
        Self::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.to_matrix() * v
    }

    pub fn to_matrix(&self) -> Mat3 {
        let Quaternion { w, x, y, z } = *self;
        Mat3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Inverse of [`Quaternion::to_matrix`], returning the `w >= 0` representative.
    pub fn from_matrix(r: &Mat3) -> Result<Self> {
        let residual = (r.transpose() * r - Mat3::identity()).amax();
        if !(residual <= ROTATION_TOLERANCE) || !(r.determinant() > 0.0) {
            return Err(Error::NotARotation(residual));
        }
        // Shepperd: branch on the largest diagonal term for stability.
        let trace = r.trace();
        let q = if trace > r[(0, 0)] && trace > r[(1, 1)] && trace > r[(2, 2)] {
            let s = (1.0 + trace).sqrt() * 2.0;
            Self::new(
                0.25 * s,
                (r[(2, 1)] - r[(1, 2)]) / s,
                (r[(0, 2)] - r[(2, 0)]) / s,
                (r[(1, 0)] - r[(0, 1)]) / s,
            )
        } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
            let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
            Self::new(
                (r[(2, 1)] - r[(1, 2)]) / s,
                0.25 * s,
                (r[(0, 1)] + r[(1, 0)]) / s,
                (r[(0, 2)] + r[(2, 0)]) / s,
            )
        } else if r[(1, 1)] > r[(2, 2)] {
            let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
            Self::new(
                (r[(0, 2)] - r[(2, 0)]) / s,
                (r[(0, 1)] + r[(1, 0)]) / s,
                0.25 * s,
                (r[(1, 2)] + r[(2, 1)]) / s,
            )
        } else {
            let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
            Self::new(
                (r[(1, 0)] - r[(0, 1)]) / s,
                (r[(0, 2)] + r[(2, 0)]) / s,
                (r[(1, 2)] + r[(2, 1)]) / s,
                0.25 * s,
            )
        };
        q.normalize()
    }
}

impl Default for Quaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

pub fn quat_normalize(q: Quaternion) -> Result<Quaternion> {
    q.normalize()
}

pub fn quat_to_matrix(q: &Quaternion) -> Mat3 {
    q.to_matrix()
}

pub fn matrix_to_quat(r: &Mat3) -> Result<Quaternion> {
    Quaternion::from_matrix(r)
}

/// Absolute camera pose, camera-to-world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Quaternion,
    pub center: Vec3,
}

impl Pose {
    pub fn new(rotation: Quaternion, center: Vec3) -> Self {
        Self { rotation, center }
    }

    pub fn identity() -> Self {
        Self::new(Quaternion::IDENTITY, Vec3::zeros())
    }

    /// Upright camera at `center` facing heading `yaw` (counter-clockwise from
    /// world +x, radians), then tilted by `pitch` about its own x axis and
    /// `roll` about its own optical axis.
    pub fn from_yaw_pitch_roll(yaw: f64, pitch: f64, roll: f64, center: Vec3) -> Self {
        let r = yaw_rotation(yaw).mul(&level_camera()).mul(&pitch_roll_rotation(pitch, roll));
        Self::new(r.canonical(), center)
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        self.rotation.to_matrix()
    }

    /// Homogeneous camera-to-world matrix `[R | c; 0 1]`.
    pub fn matrix(&self) -> Mat4 {
        let mut m = Mat4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.center);
        m
    }

    pub fn camera_to_world(&self, x_cam: &Vec3) -> Vec3 {
        self.rotation_matrix() * x_cam + self.center
    }

    pub fn world_to_camera(&self, x_world: &Vec3) -> Vec3 {
        self.rotation_matrix().transpose() * (x_world - self.center)
    }

    /// Unit viewing direction in world coordinates.
    pub fn forward(&self) -> Vec3 {
        self.rotation.rotate(&Vec3::z())
    }

    pub fn to_line(&self, name: &str) -> String {
        let q = self.rotation;
        let c = self.center;
        format!(
            "{name} {} {} {} {} {} {} {}",
            q.w, q.x, q.y, q.z, c.x, c.y, c.z
        )
    }

    /// Parses `image_rel_path qw qx qy qz tx ty tz`.
    pub fn parse_line(line: &str) -> std::result::Result<(String, Pose), String> {
        let mut it = line.split_whitespace();
        let name = it.next().ok_or("empty pose line")?.to_string();
        let vals = parse_floats(it, 7)?;
        let q = Quaternion::new(vals[0], vals[1], vals[2], vals[3]);
        // Stored quaternions are already unit; keep their bits.
        let q = if (q.norm() - 1.0).abs() < 1e-9 {
            q.canonical()
        } else {
            q.normalize().map_err(|e| e.to_string())?
        };
        Ok((name, Pose::new(q, Vec3::new(vals[4], vals[5], vals[6]))))
    }
}

fn parse_floats<'a>(
    it: impl Iterator<Item = &'a str>,
    n: usize,
) -> std::result::Result<Vec<f64>, String> {
    let vals = it
        .map(|s| s.parse::<f64>().map_err(|e| format!("{s:?}: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if vals.len() != n {
        return Err(format!("expected {n} numbers, found {}", vals.len()));
    }
    Ok(vals)
}

fn yaw_rotation(yaw: f64) -> Quaternion {
    Quaternion::from_axis_angle(Vec3::z(), yaw)
}

// Camera at yaw 0: forward = +x, right = -y, down = -z.
fn level_camera() -> Quaternion {
    let r = Mat3::from_columns(&[-Vec3::y(), -Vec3::z(), Vec3::x()]);
    Quaternion::from_matrix(&r).expect("constant rotation")
}

fn pitch_roll_rotation(pitch: f64, roll: f64) -> Quaternion {
    Quaternion::from_axis_angle(Vec3::x(), pitch).mul(&Quaternion::from_axis_angle(Vec3::z(), roll))
}

/// Rotation from yaw, pitch, roll angles (radians) in the crate's convention:
/// yaw is applied about world z (left-multiplied), pitch and roll about the
/// camera's x and z axes (right-multiplied).
pub fn perturb_rotation(base: &Quaternion, yaw: f64, pitch: f64, roll: f64) -> Quaternion {
    yaw_rotation(yaw)
        .mul(base)
        .mul(&pitch_roll_rotation(pitch, roll))
        .normalize()
        .expect("product of unit quaternions")
}

/// Heading of a camera-to-world rotation in degrees, `[0, 360)`.
pub fn yaw_deg(rotation: &Quaternion) -> f64 {
    let f = rotation.rotate(&Vec3::z());
    let yaw = f.y.atan2(f.x).to_degrees();
    let yaw = yaw.rem_euclid(360.0);
    if yaw >= 360.0 {
        0.0
    } else {
        yaw
    }
}

/// Angle in degrees wrapped to `(-180, 180]`.
pub fn wrap_deg(a: f64) -> f64 {
    let r = (a + 180.0).rem_euclid(360.0) - 180.0;
    if r == -180.0 {
        180.0
    } else {
        r
    }
}

/// Relative pose: rotation `R_query^T R_nn` and world-frame translation
/// `c_query - c_nn`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativePose {
    pub rotation: Quaternion,
    pub translation: Vec3,
}

impl RelativePose {
    pub fn identity() -> Self {
        Self {
            rotation: Quaternion::IDENTITY,
            translation: Vec3::zeros(),
        }
    }
}

pub fn relative_pose(query: &Pose, nn: &Pose) -> RelativePose {
    let rotation = query
        .rotation
        .conjugate()
        .mul(&nn.rotation)
        .normalize()
        .expect("product of unit quaternions");
    RelativePose {
        rotation,
        translation: query.center - nn.center,
    }
}

/// Recovers the query pose from its neighbour and the relative pose:
/// `R = R_nn R_rel^T`, `c = c_nn + t_rel`.
pub fn compose_absolute(nn: &Pose, rel: &RelativePose) -> Pose {
    let rotation = nn
        .rotation
        .mul(&rel.rotation.conjugate())
        .normalize()
        .expect("product of unit quaternions");
    Pose::new(rotation, nn.center + rel.translation)
}

/// Geodesic angle between two rotations in degrees, in `[0, 180]`, insensitive
/// to quaternion sign.
pub fn angular_error_deg(q1: &Quaternion, q2: &Quaternion) -> f64 {
    // atan2 form of 2*acos(|<q1,q2>|); stays accurate near zero.
    let d = q1.conjugate().mul(q2);
    let v = (d.x * d.x + d.y * d.y + d.z * d.z).sqrt();
    (2.0 * v.atan2(d.w.abs())).to_degrees().min(180.0)
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Square-pixel camera with the given horizontal field of view, principal
    /// point at the image center.
    pub fn from_fov(width: u32, height: u32, hfov_deg: f64) -> Result<Self> {
        let f = width as f64 * 0.5 / (hfov_deg.to_radians() * 0.5).tan();
        Self::new(f, f, width as f64 * 0.5, height as f64 * 0.5, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidIntrinsics(format!("{self:?}")))
        }
    }

    pub fn contains(&self, p: PixelCoord) -> bool {
        p.u >= 0 && p.v >= 0 && p.u < self.width as i64 && p.v < self.height as i64
    }

    pub fn matrix(&self) -> Mat3 {
        Mat3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn to_line(&self) -> String {
        format!(
            "{} {} {} {} {} {}",
            self.fx, self.fy, self.cx, self.cy, self.width, self.height
        )
    }
}

impl FromStr for Intrinsics {
    type Err = String;

    fn from_str(line: &str) -> std::result::Result<Self, String> {
        let vals = parse_floats(line.split_whitespace(), 6)?;
        let dim = |v: f64| -> std::result::Result<u32, String> {
            if v.fract() == 0.0 && v > 0.0 && v <= u32::MAX as f64 {
                Ok(v as u32)
            } else {
                Err(format!("image dimension {v} is not a positive integer"))
            }
        };
        Intrinsics::new(vals[0], vals[1], vals[2], vals[3], dim(vals[4])?, dim(vals[5])?)
            .map_err(|e| e.to_string())
    }
}

impl fmt::Display for Intrinsics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_line())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PixelCoord {
    pub u: i64,
    pub v: i64,
}

impl PixelCoord {
    pub const fn new(u: i64, v: i64) -> Self {
        Self { u, v }
    }
}

/// Dehomogenization used by [`project`]. `Floor` reproduces the reference
/// warping; `Nearest` rounds to the closest pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Dehomogenize {
    #[default]
    Floor,
    Nearest,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    Visible { pixel: PixelCoord, depth: f64 },
    OutOfBounds { pixel: PixelCoord, depth: f64 },
    BehindCamera { depth: f64 },
}

impl Projection {
    pub fn visible(&self) -> Option<(PixelCoord, f64)> {
        match *self {
            Projection::Visible { pixel, depth } => Some((pixel, depth)),
            _ => None,
        }
    }
}

/// Lifts pixel `p` at metric `depth` into world coordinates: `C * D * K^-1 * p~`.
pub fn unproject(p: PixelCoord, depth: f64, k: &Intrinsics, pose: &Pose) -> Result<Point3> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(Error::InvalidDepth(depth));
    }
    Ok(pose.camera_to_world(&(camera_ray(p, k) * depth)))
}

/// Camera-frame ray through pixel `p` with unit z component.
pub fn camera_ray(p: PixelCoord, k: &Intrinsics) -> Vec3 {
    Vec3::new(
        (p.u as f64 - k.cx) / k.fx,
        (p.v as f64 - k.cy) / k.fy,
        1.0,
    )
}

pub fn project(x: &Point3, k: &Intrinsics, pose: &Pose) -> Projection {
    project_with(x, k, pose, Dehomogenize::Floor)
}

/// Projects a world point with `K * C^-1`, returning the target-frame depth.
pub fn project_with(x: &Point3, k: &Intrinsics, pose: &Pose, mode: Dehomogenize) -> Projection {
    project_camera(&pose.world_to_camera(x), k, mode)
}

pub(crate) fn project_camera(xc: &Vec3, k: &Intrinsics, mode: Dehomogenize) -> Projection {
    let z = xc.z;
    if !(z > 0.0) {
        return Projection::BehindCamera { depth: z };
    }
    let u = k.fx * xc.x / z + k.cx;
    let v = k.fy * xc.y / z + k.cy;
    let pixel = match mode {
        Dehomogenize::Floor => PixelCoord::new(
            (u + DEHOMOGENIZE_EPS).floor() as i64,
            (v + DEHOMOGENIZE_EPS).floor() as i64,
        ),
        Dehomogenize::Nearest => PixelCoord::new(u.round() as i64, v.round() as i64),
    };
    if k.contains(pixel) {
        Projection::Visible { pixel, depth: z }
    } else {
        Projection::OutOfBounds { pixel, depth: z }
    }
}
