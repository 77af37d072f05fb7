//! Pinhole camera model and rigid-body pose algebra.
//!
//! Poses map camera coordinates to world coordinates: `transform(T, p) = R p + t`,
//! so the camera center of `T` is its translation.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = Vector3<f64>;
pub type Pixel = Vector2<f64>;

const ORTHONORMAL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
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

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx = {}, fy = {})",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64)
            || !(self.cy >= 0.0 && self.cy < self.height as f64)
        {
            return Err(Error::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// The conventional 640x480 RGB-D sensor calibration.
    pub fn default_vga() -> Self {
        Self {
            fx: 525.0,
            fy: 525.0,
            cx: 319.5,
            cy: 239.5,
            width: 640,
            height: 480,
        }
    }

    /// Same field of view at `1/factor` resolution.
    pub fn downscaled(&self, factor: usize) -> Self {
        let f = factor as f64;
        Self {
            fx: self.fx / f,
            fy: self.fy / f,
            cx: (self.cx + 0.5) / f - 0.5,
            cy: (self.cy + 0.5) / f - 0.5,
            width: self.width / factor,
            height: self.height / factor,
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn project(&self, p: &Point3) -> Result<Pixel> {
        if !(p.z > 0.0) {
            return Err(Error::InvalidProjection(p.z));
        }
        Ok(self.project_unchecked(p))
    }

    #[inline]
    pub(crate) fn project_unchecked(&self, p: &Point3) -> Pixel {
        Pixel::new(self.cx + self.fx * p.x / p.z, self.cy + self.fy * p.y / p.z)
    }

    pub fn unproject(&self, x: &Pixel, z: f64) -> Result<Point3> {
        if !(z > 0.0) {
            return Err(Error::InvalidDepth(z));
        }
        Ok(self.unproject_unchecked(x.x, x.y, z))
    }

    #[inline]
    pub(crate) fn unproject_unchecked(&self, u: f64, v: f64, z: f64) -> Point3 {
        Point3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }

    /// Nearest integer pixel of a real-valued projection, if inside the image.
    #[inline]
    pub(crate) fn nearest_pixel(&self, x: &Pixel) -> Option<(usize, usize)> {
        let u = x.x.round();
        let v = x.y.round();
        if u >= 0.0 && v >= 0.0 && (u as usize) < self.width && (v as usize) < self.height {
            Some((u as usize, v as usize))
        } else {
            None
        }
    }
}

/// Rigid-body transform in SE(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, rejecting rotations that are not orthonormal with unit determinant.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
        };
        if !pose.is_valid(ORTHONORMAL_TOL) {
            return Err(Error::InvalidPose(format!(
                "rotation is not in SO(3): {rotation:?}"
            )));
        }
        Ok(pose)
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64, t: Vector3<f64>) -> Self {
        let rot = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle);
        Self {
            rotation: *rot.matrix(),
            translation: t,
        }
    }

    /// Rotation from intrinsic Z-Y-X angles `[roll, pitch, yaw]`.
    pub fn from_euler(euler: &Vector3<f64>, t: Vector3<f64>) -> Self {
        let rot = Rotation3::from_euler_angles(euler.x, euler.y, euler.z);
        Self {
            rotation: *rot.matrix(),
            translation: t,
        }
    }

    /// Hamilton quaternion in `(x, y, z, w)` order. The quaternion must have unit norm
    /// within `norm_tol`; it is renormalized before use.
    pub fn from_quaternion(q: [f64; 4], t: Vector3<f64>, norm_tol: f64) -> Result<Self> {
        let [x, y, z, w] = q;
        let norm = (x * x + y * y + z * z + w * w).sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > norm_tol {
            return Err(Error::InvalidPose(format!(
                "quaternion norm {norm} deviates from 1 by more than {norm_tol}"
            )));
        }
        let uq = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z));
        Ok(Self {
            rotation: *uq.to_rotation_matrix().matrix(),
            translation: t,
        })
    }

    /// Hamilton quaternion `(x, y, z, w)` with non-negative `w`.
    pub fn quaternion(&self) -> [f64; 4] {
        let rot = Rotation3::from_matrix_unchecked(self.rotation);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        let (x, y, z, w) = (q.i, q.j, q.k, q.w);
        if w < 0.0 {
            [-x, -y, -z, -w]
        } else {
            [x, y, z, w]
        }
    }

    #[inline]
    pub fn transform(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn camera_center(&self) -> Point3 {
        self.translation
    }

    /// Magnitude of the rotation in radians, in `[0, π]`.
    pub fn rotation_angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        c.acos()
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let r = &self.rotation;
        r.iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite())
            && (r.transpose() * r - Matrix3::identity()).abs().max() <= tol
            && (r.determinant() - 1.0).abs() <= tol
    }

    /// Projects the rotation back onto SO(3), removing accumulated rounding.
    pub fn orthonormalized(&self) -> Pose {
        let rot = Rotation3::from_matrix_eps(&self.rotation, 1e-12, 32, Rotation3::identity());
        Pose {
            rotation: *rot.matrix(),
            translation: self.translation,
        }
    }
}

/// Euler angles plus translation of a pose, the parameterization used for
/// the re-integration pose distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseVector {
    /// Intrinsic Z-Y-X angles `[roll, pitch, yaw]`, pitch in `[-π/2, π/2]`.
    pub euler: Vector3<f64>,
    pub trans: Vector3<f64>,
}

impl PoseVector {
    pub fn from_pose(pose: &Pose) -> Self {
        let r = &pose.rotation;
        let sp = (-r[(2, 0)]).clamp(-1.0, 1.0);
        let pitch = sp.asin();
        let (roll, yaw) = if sp.abs() > 1.0 - 1e-12 {
            // gimbal lock: roll folded into yaw
            (0.0, (-r[(0, 1)]).atan2(r[(1, 1)]))
        } else {
            (r[(2, 1)].atan2(r[(2, 2)]), r[(1, 0)].atan2(r[(0, 0)]))
        };
        Self {
            euler: Vector3::new(roll, pitch, yaw),
            trans: pose.translation,
        }
    }
}

/// Per-component weights applied to `[euler; trans]` before taking the norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseScale(pub [f64; 6]);

impl Default for PoseScale {
    fn default() -> Self {
        PoseScale([2.0, 2.0, 2.0, 1.0, 1.0, 1.0])
    }
}

/// Wraps an angle difference into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Scaled Euclidean distance between the pose vectors of `a` and `b`.
pub fn pose_distance(a: &Pose, b: &Pose, s: &PoseScale) -> f64 {
    let va = PoseVector::from_pose(a);
    let vb = PoseVector::from_pose(b);
    let mut sum = 0.0;
    for k in 0..3 {
        let d = s.0[k] * wrap_angle(va.euler[k] - vb.euler[k]);
        sum += d * d;
    }
    for k in 0..3 {
        let d = s.0[k + 3] * (va.trans[k] - vb.trans[k]);
        sum += d * d;
    }
    sum.sqrt()
}

/// Camera-to-world rotation for a camera at `eye` looking at `target`, with
/// `up` pointing away from the image's +y (down) axis.
pub fn look_at(eye: &Point3, target: &Point3, up: &Vector3<f64>) -> Pose {
    let z = (target - eye).normalize();
    let x = z.cross(up).normalize();
    let y = z.cross(&x);
    Pose {
        rotation: Matrix3::from_columns(&[x, y, z]),
        translation: *eye,
    }
}
