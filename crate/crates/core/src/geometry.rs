//! Quaternion algebra, rigid transforms and pinhole projection.
//!
//! Conventions used throughout the crate:
//!
//! - World units are centimeters.
//! - Quaternions are Hamilton, stored scalar-first as `(w, x, y, z)`.
//! - A camera pose maps object points into the camera frame, `p_cam = R(q)·p + t`.
//! - The camera sits at the camera-frame origin looking along `-z`; projection
//!   divides by `w' = z_cam` with its sign preserved, so points in front of the
//!   camera have negative `w'`.

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat4 = Matrix4<f64>;

/// Tolerance on `|‖q‖² − 1|` for a quaternion to count as unit.
pub const UNIT_TOLERANCE: f64 = 1e-9;
/// Raw quaternion norms at or below this are rejected by [`quat_normalize`].
pub const MIN_RAW_NORM: f64 = 1e-12;
/// `|w'|` at or below this makes a projection singular.
pub const MIN_DEPTH: f64 = 1e-9;

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

    pub fn to_vector(self) -> Vector4<f64> {
        Vector4::new(self.w, self.x, self.y, self.z)
    }

    /// Rotation by `angle` radians about `axis` (need not be normalized).
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let a = axis.normalize();
        let (s, c) = (0.5 * angle).sin_cos();
        Self::new(c, s * a.x, s * a.y, s * a.z)
    }

    /// Rotation `Rz(roll)·Rx(pitch)·Ry(yaw)`, angles in degrees.
    pub fn from_yaw_pitch_roll(yaw: f64, pitch: f64, roll: f64) -> Self {
        let qy = Self::from_axis_angle(Vec3::y(), yaw.to_radians());
        let qx = Self::from_axis_angle(Vec3::x(), pitch.to_radians());
        let qz = Self::from_axis_angle(Vec3::z(), roll.to_radians());
        qz * qx * qy
    }

    pub fn dot(self, other: Quaternion) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn scale(self, c: f64) -> Quaternion {
        Quaternion::new(c * self.w, c * self.x, c * self.y, c * self.z)
    }

    pub fn is_unit(self) -> bool {
        (self.norm_squared() - 1.0).abs() <= UNIT_TOLERANCE
    }

    pub fn is_finite(self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Reflection through the `x = 0` plane: `R' = M·R·M` with `M = diag(-1, 1, 1)`.
    pub fn mirrored(self) -> Quaternion {
        Quaternion::new(self.w, self.x, -self.y, -self.z)
    }

    /// Rotation matrix from the Hamilton formula without checking the norm.
    pub fn rotation_unchecked(self) -> Mat3 {
        let Quaternion { w, x, y, z } = self;
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

    /// Partial derivatives `∂R/∂w, ∂R/∂x, ∂R/∂y, ∂R/∂z` of the Hamilton formula.
    pub fn rotation_partials(self) -> [Mat3; 4] {
        let Quaternion { w, x, y, z } = self;
        let two = 2.0;
        [
            Mat3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * two,
            Mat3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * two,
            Mat3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * two,
            Mat3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * two,
        ]
    }
}

impl std::ops::Mul for Quaternion {
    type Output = Quaternion;

    /// Hamilton product `self ⊗ rhs`.
    fn mul(self, rhs: Quaternion) -> Quaternion {
        let (a, b) = (self, rhs);
        Quaternion::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }
}

impl std::ops::Neg for Quaternion {
    type Output = Quaternion;

    fn neg(self) -> Quaternion {
        Quaternion::new(-self.w, -self.x, -self.y, -self.z)
    }
}

/// Pulls a gradient w.r.t. the rotation matrix back onto the quaternion.
pub fn rotation_grad_to_quat(q: Quaternion, grad_r: &Mat3) -> Vector4<f64> {
    let p = q.rotation_partials();
    Vector4::new(
        p[0].component_mul(grad_r).sum(),
        p[1].component_mul(grad_r).sum(),
        p[2].component_mul(grad_r).sum(),
        p[3].component_mul(grad_r).sum(),
    )
}

/// Normalizes a raw 4-vector and returns the Jacobian `(I − q̄q̄ᵀ)/‖raw‖`.
pub fn quat_normalize(raw: [f64; 4]) -> Result<(Quaternion, Mat4)> {
    let v = Vector4::from(raw);
    let norm = v.norm();
    if !(norm > MIN_RAW_NORM) {
        return Err(Error::DegenerateQuaternion { norm });
    }
    let unit = v / norm;
    let jac = (Mat4::identity() - unit * unit.transpose()) / norm;
    Ok((Quaternion::new(unit[0], unit[1], unit[2], unit[3]), jac))
}

pub fn quat_to_rotation(q: Quaternion) -> Result<Mat3> {
    if !q.is_unit() {
        return Err(Error::NotNormalized {
            norm_sq: q.norm_squared(),
        });
    }
    Ok(q.rotation_unchecked())
}

/// Extracts `(yaw, pitch, roll)` in degrees from `R = Rz(roll)·Rx(pitch)·Ry(yaw)`.
pub fn yaw_pitch_roll(r: &Mat3) -> (f64, f64, f64) {
    let pitch = r[(2, 1)].clamp(-1.0, 1.0).asin();
    let yaw = (-r[(2, 0)]).atan2(r[(2, 2)]);
    let roll = (-r[(0, 1)]).atan2(r[(1, 1)]);
    (yaw.to_degrees(), pitch.to_degrees(), roll.to_degrees())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseRepr", into = "PoseRepr")]
pub struct CameraPose {
    q: Quaternion,
    t: Vec3,
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    q: [f64; 4],
    t: [f64; 3],
}

impl TryFrom<PoseRepr> for CameraPose {
    type Error = Error;
    fn try_from(r: PoseRepr) -> Result<Self> {
        CameraPose::new(Quaternion::from_array(r.q), Vec3::from(r.t))
    }
}

impl From<CameraPose> for PoseRepr {
    fn from(p: CameraPose) -> Self {
        PoseRepr {
            q: p.q.to_array(),
            t: p.t.into(),
        }
    }
}

impl CameraPose {
    pub fn new(q: Quaternion, t: Vec3) -> Result<Self> {
        if !q.is_unit() {
            return Err(Error::NotNormalized {
                norm_sq: q.norm_squared(),
            });
        }
        if !t.iter().all(|v| v.is_finite()) {
            return Err(Error::DegenerateGeometry("non-finite translation".into()));
        }
        Ok(Self { q, t })
    }

    /// Default framing: identity rotation, subject 60 cm in front of the camera.
    pub fn frontal() -> Self {
        Self {
            q: Quaternion::IDENTITY,
            t: Vec3::new(0.0, 0.0, -60.0),
        }
    }

    pub fn q(&self) -> Quaternion {
        self.q
    }

    pub fn t(&self) -> Vec3 {
        self.t
    }

    pub fn rotation(&self) -> Mat3 {
        self.q.rotation_unchecked()
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation() * p + self.t
    }

    pub fn matrix3x4(&self) -> Matrix3x4<f64> {
        let mut m = Matrix3x4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.t);
        m
    }

    pub fn to_homogeneous(&self) -> Mat4 {
        rigid_homogeneous(&self.rotation(), &self.t)
    }

    /// Closed-form inverse `[Rᵀ | −Rᵀt]`.
    pub fn inverse_homogeneous(&self) -> Mat4 {
        let rt = self.rotation().transpose();
        rigid_homogeneous(&rt, &(-(rt * self.t)))
    }

    pub fn yaw_pitch_roll(&self) -> (f64, f64, f64) {
        yaw_pitch_roll(&self.rotation())
    }

    /// Mirror image through the `x = 0` plane.
    pub fn mirrored(&self) -> CameraPose {
        CameraPose {
            q: self.q.mirrored(),
            t: Vec3::new(-self.t.x, self.t.y, self.t.z),
        }
    }
}

pub(crate) fn rigid_homogeneous(r: &Mat3, t: &Vec3) -> Mat4 {
    let mut m = Mat4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(t);
    m
}

/// Pinhole intrinsics plus image size, all in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CalibrationRepr", into = "CalibrationRepr")]
pub struct Calibration {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: f64,
    height: f64,
}

#[derive(Serialize, Deserialize)]
struct CalibrationRepr {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: f64,
    height: f64,
}

impl TryFrom<CalibrationRepr> for Calibration {
    type Error = Error;
    fn try_from(r: CalibrationRepr) -> Result<Self> {
        Calibration::new(r.fx, r.fy, r.cx, r.cy, r.width, r.height)
    }
}

impl From<Calibration> for CalibrationRepr {
    fn from(c: Calibration) -> Self {
        CalibrationRepr {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
        }
    }
}

impl Default for Calibration {
    /// 224×224 image, `fx = fy = 500`, principal point at the image center.
    fn default() -> Self {
        Self {
            fx: 500.0,
            fy: 500.0,
            cx: 112.0,
            cy: 112.0,
            width: 224.0,
            height: 224.0,
        }
    }
}

impl Calibration {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: f64, height: f64) -> Result<Self> {
        let all = [fx, fy, cx, cy, width, height];
        if !all.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidCalibration("non-finite value".into()));
        }
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidCalibration(format!(
                "focal lengths must be positive (fx={fx}, fy={fy})"
            )));
        }
        if !(0.0..=width).contains(&cx) || !(0.0..=height).contains(&cy) {
            return Err(Error::InvalidCalibration(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    pub fn fx(&self) -> f64 {
        self.fx
    }
    pub fn fy(&self) -> f64 {
        self.fy
    }
    pub fn cx(&self) -> f64 {
        self.cx
    }
    pub fn cy(&self) -> f64 {
        self.cy
    }
    pub fn width(&self) -> f64 {
        self.width
    }
    pub fn height(&self) -> f64 {
        self.height
    }

    pub fn matrix(&self) -> Mat3 {
        Mat3::new(
            self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0,
        )
    }

    pub fn contains(&self, p: &Vec2) -> bool {
        (0.0..=self.width).contains(&p.x) && (0.0..=self.height).contains(&p.y)
    }

    /// Projects a camera-frame point. Returns `None` when `|w'|` is singular.
    pub fn project_camera_point(&self, c: &Vec3) -> Option<Vec2> {
        if c.z.abs() <= MIN_DEPTH || !c.z.is_finite() {
            return None;
        }
        Some(Vec2::new(
            self.fx * c.x / c.z + self.cx,
            self.fy * c.y / c.z + self.cy,
        ))
    }

    /// Pulls a pixel-space gradient back to the camera-frame point
    /// (quotient rule on `u'/w'`, `v'/w'`).
    pub fn pullback(&self, c: &Vec3, g: &Vec2) -> Vec3 {
        let iz = 1.0 / c.z;
        let gx = g.x * self.fx * iz;
        let gy = g.y * self.fy * iz;
        Vec3::new(gx, gy, -(gx * c.x + gy * c.y) * iz)
    }
}

/// An ordered point set; index `n` always denotes the same semantic vertex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 3]>", into = "Vec<[f64; 3]>")]
pub struct Shape {
    points: Vec<Vec3>,
}

impl TryFrom<Vec<[f64; 3]>> for Shape {
    type Error = Error;
    fn try_from(v: Vec<[f64; 3]>) -> Result<Self> {
        Shape::new(v.into_iter().map(Vec3::from).collect())
    }
}

impl From<Shape> for Vec<[f64; 3]> {
    fn from(s: Shape) -> Self {
        s.points.into_iter().map(Into::into).collect()
    }
}

impl Shape {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidShape("no points".into()));
        }
        if let Some(i) = points
            .iter()
            .position(|p| !p.iter().all(|v| v.is_finite()))
        {
            return Err(Error::InvalidShape(format!("point {i} is not finite")));
        }
        Ok(Self { points })
    }

    /// Builds a shape from `[x0, y0, z0, x1, ...]`.
    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if !flat.len().is_multiple_of(3) {
            return Err(Error::InvalidShape(format!(
                "flat length {} is not a multiple of 3",
                flat.len()
            )));
        }
        Self::new(
            flat.chunks_exact(3)
                .map(|c| Vec3::new(c[0], c[1], c[2]))
                .collect(),
        )
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vec3 {
        self.points.iter().sum::<Vec3>() / self.points.len() as f64
    }

    /// Homogeneous lift `x_H`.
    pub fn lifted(&self) -> Vec<Vector4<f64>> {
        self.points.iter().map(|p| p.push(1.0)).collect()
    }

    pub fn map(&self, f: impl FnMut(&Vec3) -> Vec3) -> Shape {
        Shape {
            points: self.points.iter().map(f).collect(),
        }
    }

    pub(crate) fn from_points_unchecked(points: Vec<Vec3>) -> Shape {
        Shape { points }
    }
}

/// `R(q)·x_n + t` for every point, order preserved.
pub fn pose_apply(pose: &CameraPose, shape: &Shape) -> Shape {
    let r = pose.rotation();
    shape.map(|p| r * p + pose.t)
}

/// Applies a homogeneous 4×4 transform to every point.
pub fn transform_apply(m: &Mat4, shape: &Shape) -> Shape {
    let r = m.fixed_view::<3, 3>(0, 0).into_owned();
    let t = m.fixed_view::<3, 1>(0, 3).into_owned();
    shape.map(|p| r * p + t)
}

/// `(u'/w', v'/w')` for `(u', v', w')ᵀ = K·[R|t]·y_H`. No clipping to the image.
pub fn project(k: &Calibration, pose: &CameraPose, shape: &Shape) -> Result<Vec<Vec2>> {
    let r = pose.rotation();
    shape
        .points()
        .iter()
        .enumerate()
        .map(|(index, p)| {
            let c = r * p + pose.t;
            k.project_camera_point(&c)
                .ok_or(Error::BehindImagePlane { index, w: c.z })
        })
        .collect()
}

/// `[R(q)|t]·[R(q̂)|t̂]⁻¹` as a 4×4 homogeneous matrix.
pub fn pose_relative(gt: &CameraPose, pred: &CameraPose) -> Mat4 {
    gt.to_homogeneous() * pred.inverse_homogeneous()
}
