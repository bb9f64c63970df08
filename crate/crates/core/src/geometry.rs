//! Rigid-body helpers and the 9-value camera encoding.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Camera-to-reference rigid transform: `x_ref = rotation · x_cam + center`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub center: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            center: Vec3::zeros(),
        }
    }

    pub fn to_ref(&self, p_cam: &Vec3) -> Vec3 {
        self.rotation * p_cam + self.center
    }

    pub fn from_ref(&self, p_ref: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p_ref - self.center)
    }

    /// Re-expresses this pose in the camera frame of `reference`.
    pub fn relative_to(&self, reference: &Pose) -> Pose {
        let rt = reference.rotation.transpose();
        Pose {
            rotation: rt * self.rotation,
            center: rt * (self.center - reference.center),
        }
    }
}

/// Unit quaternion `(w, x, y, z)` of a rotation matrix, with `w ≥ 0`.
pub fn quat_from_matrix(r: &Mat3) -> [f64; 4] {
    let rot = Rotation3::from_matrix_unchecked(*r);
    let q = UnitQuaternion::from_rotation_matrix(&rot);
    canonical_quat([q.w, q.i, q.j, q.k])
}

pub fn canonical_quat(q: [f64; 4]) -> [f64; 4] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let s = if q[0] < 0.0 { -1.0 / n } else { 1.0 / n };
    q.map(|v| v * s)
}

/// Rotation matrix of a (not necessarily unit) quaternion `(w, x, y, z)`.
pub fn matrix_from_quat(q: &[f64]) -> Mat3 {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
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

/// Rotation angle of `r` in degrees.
pub fn rotation_angle_deg(r: &Mat3) -> f64 {
    let c = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

/// Rotation about the world `y` axis.
pub fn rot_y(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// Per-frame camera parameters: quaternion, translation, normalized focal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraParams {
    /// Camera-to-reference rotation `(w, x, y, z)`, unit norm, `w ≥ 0`.
    pub quat: [f64; 4],
    /// Camera center in reference coordinates.
    pub translation: [f64; 3],
    /// `fx / W` and `fy / H`.
    pub focal: [f64; 2],
}

impl CameraParams {
    pub const LEN: usize = 9;

    pub fn from_pose(pose: &Pose, focal: [f64; 2]) -> Self {
        Self {
            quat: quat_from_matrix(&pose.rotation),
            translation: [pose.center.x, pose.center.y, pose.center.z],
            focal,
        }
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != Self::LEN {
            return Err(Error::Shape(format!("camera encoding needs 9 values, got {}", v.len())));
        }
        Ok(Self {
            quat: [v[0], v[1], v[2], v[3]],
            translation: [v[4], v[5], v[6]],
            focal: [v[7], v[8]],
        })
    }

    pub fn to_array(&self) -> [f64; 9] {
        let (q, t, f) = (self.quat, self.translation, self.focal);
        [q[0], q[1], q[2], q[3], t[0], t[1], t[2], f[0], f[1]]
    }

    pub fn pose(&self) -> Pose {
        Pose {
            rotation: matrix_from_quat(&self.quat),
            center: Vec3::new(self.translation[0], self.translation[1], self.translation[2]),
        }
    }

    /// Pixel intrinsics `(fx, fy, cx, cy)` for an `h × w` image.
    pub fn intrinsics(&self, h: usize, w: usize) -> [f64; 4] {
        [
            self.focal[0] * w as f64,
            self.focal[1] * h as f64,
            principal_point(w),
            principal_point(h),
        ]
    }

    /// Back-projects pixel `(u, v)` at z-depth `depth` into reference coordinates.
    pub fn unproject(&self, u: f64, v: f64, depth: f64, h: usize, w: usize) -> Vec3 {
        let [fx, fy, cx, cy] = self.intrinsics(h, w);
        let p_cam = Vec3::new((u - cx) / fx * depth, (v - cy) / fy * depth, depth);
        self.pose().to_ref(&p_cam)
    }

    /// Projects a reference-frame point to `(u, v, depth)`.
    pub fn project(&self, p_ref: &Vec3, h: usize, w: usize) -> Result<(f64, f64, f64)> {
        let [fx, fy, cx, cy] = self.intrinsics(h, w);
        let p = self.pose().from_ref(p_ref);
        if p.z <= 0.0 {
            return Err(Error::BehindCamera(p.z));
        }
        Ok((fx * p.x / p.z + cx, fy * p.y / p.z + cy, p.z))
    }
}

/// Pixel centers sit on integer coordinates, so the image center is `(n − 1) / 2`.
pub fn principal_point(n: usize) -> f64 {
    (n as f64 - 1.0) / 2.0
}
