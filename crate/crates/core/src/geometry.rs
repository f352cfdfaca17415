//! Rigid transforms, rotations and the pinhole camera model.
//!
//! Poses are world-to-camera: `p_cam = R * p_world + t`, so the camera
//! center in world coordinates is `C = -Rᵀ t`. Pixel coordinates are
//! continuous, with pixel `(i, j)` covering `[i, i+1) × [j, j+1)` and its
//! center at `(i + 0.5, j + 0.5)`.

use nalgebra::{Matrix3, Quaternion, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid quaternion: {0}")]
    InvalidQuaternion(String),
}

/// Unit quaternion rotation, canonicalized so that `w >= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(UnitQuaternion<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(UnitQuaternion::identity())
    }

    /// Builds a rotation from quaternion components.
    ///
    /// Components already of unit norm (to within a few ulp) are kept
    /// bit-for-bit so that serialized poses round-trip exactly.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Result<Self, GeometryError> {
        let q = Quaternion::new(w, x, y, z);
        let n = q.norm();
        if !n.is_finite() || n < 1e-12 {
            return Err(GeometryError::InvalidQuaternion(format!(
                "[{w}, {x}, {y}, {z}] has norm {n}"
            )));
        }
        let q = if (n - 1.0).abs() <= 4.0 * f64::EPSILON {
            q
        } else {
            q / n
        };
        Ok(Self::canonical(UnitQuaternion::new_unchecked(q)))
    }

    pub fn from_unit_quaternion(q: UnitQuaternion<f64>) -> Self {
        Self::canonical(UnitQuaternion::new_normalize(q.into_inner()))
    }

    pub fn from_axis_angle(axis: &Vec3, angle_rad: f64) -> Self {
        match Unit::try_new(*axis, 1e-15) {
            Some(axis) => Self::from_unit_quaternion(UnitQuaternion::from_axis_angle(&axis, angle_rad)),
            None => Self::identity(),
        }
    }

    /// Rotation `exp([v]×)` for a rotation vector `v` (radians).
    pub fn from_rotation_vector(v: &Vec3) -> Self {
        Self::from_unit_quaternion(UnitQuaternion::from_scaled_axis(*v))
    }

    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(*m);
        Self::from_unit_quaternion(UnitQuaternion::from_rotation_matrix(&rot))
    }

    pub fn rz_deg(deg: f64) -> Self {
        Self::from_axis_angle(&Vec3::z(), deg.to_radians())
    }

    fn canonical(q: UnitQuaternion<f64>) -> Self {
        if q.w < 0.0 {
            Rotation(UnitQuaternion::new_unchecked(-q.into_inner()))
        } else {
            Rotation(q)
        }
    }

    /// `[w, x, y, z]`
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.0.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn quaternion(&self) -> &UnitQuaternion<f64> {
        &self.0
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        self.0.to_rotation_matrix().into_inner()
    }

    pub fn rotate(&self, p: &Vec3) -> Vec3 {
        self.0.transform_vector(p)
    }

    pub fn inverse(&self) -> Self {
        Self::canonical(self.0.inverse())
    }

    /// `self ∘ other`, renormalized.
    pub fn compose(&self, other: &Rotation) -> Self {
        Self::from_unit_quaternion(self.0 * other.0)
    }

    pub fn rotation_vector(&self) -> Vec3 {
        self.0.scaled_axis()
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

/// Angle in degrees of the relative rotation `aᵀ b`, in `[0, 180]`.
pub fn rotation_angle_deg(a: &Rotation, b: &Rotation) -> f64 {
    let rel = a.matrix().transpose() * b.matrix();
    let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Rotation,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rotation: Rotation, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::new(Rotation::identity(), Vec3::zeros())
    }

    /// Pose whose camera sits at `center` with camera-to-world rotation
    /// `cam_to_world`.
    pub fn from_camera_center(cam_to_world: &Rotation, center: &Vec3) -> Self {
        let rotation = cam_to_world.inverse();
        let translation = -rotation.rotate(center);
        Self { rotation, translation }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation.rotate(p) + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rotation = self.rotation.inverse();
        let translation = -rotation.rotate(&self.translation);
        Self { rotation, translation }
    }

    /// Camera center `-Rᵀ t` in world coordinates.
    pub fn camera_center(&self) -> Vec3 {
        -self.rotation.inverse().rotate(&self.translation)
    }

    pub fn to_matrix(&self) -> nalgebra::Matrix4<f64> {
        let mut m = nalgebra::Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

/// Transform mapping `p ↦ a(b(p))`.
pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    RigidTransform {
        rotation: a.rotation.compose(&b.rotation),
        translation: a.rotation.rotate(&b.translation) + a.translation,
    }
}

/// Pinhole intrinsics with zero skew.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |msg: String| Err(GeometryError::InvalidIntrinsics(msg));
        if !(self.fx > 0.0 && self.fx.is_finite() && self.fy > 0.0 && self.fy.is_finite()) {
            return bad(format!("focal lengths must be positive (fx={}, fy={})", self.fx, self.fy));
        }
        if self.width == 0 || self.height == 0 {
            return bad(format!("empty image size {}x{}", self.width, self.height));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return bad(format!("cx={} outside [0, {})", self.cx, self.width));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return bad(format!("cy={} outside [0, {})", self.cy, self.height));
        }
        Ok(())
    }
}

/// Projects a camera-frame point to `(u, v, depth)`. The pixel may fall
/// outside the image; callers clip.
pub fn project(intr: &CameraIntrinsics, p_cam: &Vec3) -> Result<(f64, f64, f64), GeometryError> {
    if p_cam.z <= 0.0 {
        return Err(GeometryError::BehindCamera(p_cam.z));
    }
    let u = intr.fx * p_cam.x / p_cam.z + intr.cx;
    let v = intr.fy * p_cam.y / p_cam.z + intr.cy;
    Ok((u, v, p_cam.z))
}

pub fn unproject(intr: &CameraIntrinsics, u: f64, v: f64, depth: f64) -> Result<Vec3, GeometryError> {
    if depth <= 0.0 || depth.is_nan() {
        return Err(GeometryError::NonPositiveDepth(depth));
    }
    Ok(Vec3::new(
        (u - intr.cx) / intr.fx * depth,
        (v - intr.cy) / intr.fy * depth,
        depth,
    ))
}
