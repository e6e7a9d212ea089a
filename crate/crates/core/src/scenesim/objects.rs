use serde::{Deserialize, Serialize};

use crate::pose::{self, rot_z, EgoPose, Vec3};

/// Oriented box with constant velocity. Rotation is about z only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class_id: u8,
    pub center: Vec3,
    pub size: Vec3,
    pub yaw: f64,
    pub velocity: Vec3,
}

impl SceneObject {
    pub fn is_static(&self) -> bool {
        self.velocity == [0.0; 3]
    }

    /// Position after `dt` seconds of constant-velocity motion.
    pub fn advanced(&self, dt: f64) -> Self {
        Self { center: pose::add(self.center, pose::scale(self.velocity, dt)), ..*self }
    }

    /// Re-expresses the object in the local frame of `frame`
    /// (`frame` maps local -> parent).
    pub fn in_frame(&self, frame: &EgoPose) -> Self {
        let inv = frame.inverse();
        Self {
            class_id: self.class_id,
            center: inv.transform_point(self.center),
            size: self.size,
            yaw: self.yaw - frame.yaw(),
            velocity: inv.transform_vector(self.velocity),
        }
    }

    /// Point expressed in the box frame (axis aligned, centered).
    pub fn to_local(&self, p: Vec3) -> Vec3 {
        let d = pose::sub(p, self.center);
        let (s, c) = libm::sincos(self.yaw);
        [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]]
    }

    pub fn local_to_parent(&self, l: Vec3) -> Vec3 {
        pose::add(pose::mat_vec(&rot_z(self.yaw), l), self.center)
    }

    pub fn contains(&self, p: Vec3) -> bool {
        let l = self.to_local(p);
        (0..3).all(|a| libm::fabs(l[a]) <= 0.5 * self.size[a])
    }

    /// Radius of the footprint's circumscribed circle.
    pub fn footprint_radius(&self) -> f64 {
        0.5 * libm::hypot(self.size[0], self.size[1])
    }

    /// Axis-aligned bounds `(min, max)` of the rotated box.
    pub fn aabb(&self) -> (Vec3, Vec3) {
        let (s, c) = libm::sincos(self.yaw);
        let hx = 0.5 * (libm::fabs(c) * self.size[0] + libm::fabs(s) * self.size[1]);
        let hy = 0.5 * (libm::fabs(s) * self.size[0] + libm::fabs(c) * self.size[1]);
        let hz = 0.5 * self.size[2];
        let c3 = self.center;
        ([c3[0] - hx, c3[1] - hy, c3[2] - hz], [c3[0] + hx, c3[1] + hy, c3[2] + hz])
    }

    /// Entry distance of a ray (origin `o`, direction `d`, both in the
    /// parent frame) into the box, if it enters in front of the origin.
    pub fn ray_hit(&self, o: Vec3, d: Vec3) -> Option<f64> {
        let lo = self.to_local(o);
        let (s, c) = libm::sincos(self.yaw);
        let ld = [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]];
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        for a in 0..3 {
            let h = 0.5 * self.size[a];
            if libm::fabs(ld[a]) < 1e-15 {
                if libm::fabs(lo[a]) > h {
                    return None;
                }
                continue;
            }
            let t1 = (-h - lo[a]) / ld[a];
            let t2 = (h - lo[a]) / ld[a];
            let (a1, a2) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            t_near = t_near.max(a1);
            t_far = t_far.min(a2);
        }
        (t_near <= t_far && t_near > 1e-9).then_some(t_near)
    }
}
