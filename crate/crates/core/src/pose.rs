//! Rigid transforms for ego and sensor poses.

use alloc::format;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Mat3 = [[f64; 3]; 3];
pub type Vec3 = [f64; 3];

pub const IDENTITY3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    r
}

pub fn mat_vec(a: &Mat3, v: Vec3) -> Vec3 {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

pub fn transpose(a: &Mat3) -> Mat3 {
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = a[j][i];
        }
    }
    r
}

pub fn det(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

pub fn rot_z(yaw: f64) -> Mat3 {
    let (s, c) = libm::sincos(yaw);
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn norm(a: Vec3) -> f64 {
    libm::sqrt(dot(a, a))
}

/// Maps points from a local frame into a parent frame:
/// `p_parent = rotation * p_local + translation`.
///
/// For an ego pose the parent is the world frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoPose {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub timestamp: u32,
}

impl EgoPose {
    pub fn identity() -> Self {
        Self { rotation: IDENTITY3, translation: [0.0; 3], timestamp: 0 }
    }

    /// Rotation must be orthonormal with determinant +1 (tolerance 1e-6).
    pub fn new(rotation: Mat3, translation: Vec3, timestamp: u32) -> Result<Self> {
        let p = Self { rotation, translation, timestamp };
        p.validate()?;
        Ok(p)
    }

    pub fn from_yaw(yaw: f64, translation: Vec3, timestamp: u32) -> Self {
        Self { rotation: rot_z(yaw), translation, timestamp }
    }

    pub fn validate(&self) -> Result<()> {
        let rrt = mat_mul(&self.rotation, &transpose(&self.rotation));
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                if libm::fabs(rrt[i][j] - e) > 1e-6 {
                    return Err(Error::InvalidPose(format!("R*R^T[{}][{}] = {}", i, j, rrt[i][j])));
                }
            }
        }
        let d = det(&self.rotation);
        if libm::fabs(d - 1.0) > 1e-6 {
            return Err(Error::InvalidPose(format!("det(R) = {}", d)));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidPose("non-finite translation".into()));
        }
        Ok(())
    }

    pub fn transform_point(&self, p: Vec3) -> Vec3 {
        add(mat_vec(&self.rotation, p), self.translation)
    }

    pub fn transform_vector(&self, v: Vec3) -> Vec3 {
        mat_vec(&self.rotation, v)
    }

    /// Heading angle of the local x axis in the parent frame.
    pub fn yaw(&self) -> f64 {
        libm::atan2(self.rotation[1][0], self.rotation[0][0])
    }

    pub fn inverse(&self) -> Self {
        invert_pose(self)
    }

    pub fn max_abs_diff(&self, other: &EgoPose) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                m = m.max(libm::fabs(self.rotation[i][j] - other.rotation[i][j]));
            }
            m = m.max(libm::fabs(self.translation[i] - other.translation[i]));
        }
        m
    }
}

/// `a ∘ b`: apply `b` first, then `a`. Keeps `b`'s timestamp.
pub fn compose_pose(a: &EgoPose, b: &EgoPose) -> EgoPose {
    EgoPose {
        rotation: mat_mul(&a.rotation, &b.rotation),
        translation: add(mat_vec(&a.rotation, b.translation), a.translation),
        timestamp: b.timestamp,
    }
}

pub fn invert_pose(a: &EgoPose) -> EgoPose {
    let rt = transpose(&a.rotation);
    let t = mat_vec(&rt, a.translation);
    EgoPose { rotation: rt, translation: [-t[0], -t[1], -t[2]], timestamp: a.timestamp }
}
