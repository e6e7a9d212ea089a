use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::objects::SceneObject;
use super::GROUND;
use crate::error::{Error, Result};
use crate::pose::{self, cross, EgoPose, Mat3, Vec3};

/// Pinhole camera. Pixel `(u, v)` looks along the ray through image
/// coordinates `(u, v)`; the optical axis passes through `(cx, cy)`.
/// Camera axes: x right, y down, z forward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub height: usize,
    pub width: usize,
    /// Camera -> ego transform.
    pub extrinsic: EgoPose,
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidConfig(format!("focal lengths {} {} must be positive", self.fx, self.fy)));
        }
        if !(self.cx >= 0.0 && self.cx <= self.width as f64 && self.cy >= 0.0 && self.cy <= self.height as f64) {
            return Err(Error::InvalidConfig(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        self.extrinsic.validate()
    }

    /// Camera looking along ego heading `yaw`, tilted down by `pitch`.
    pub fn looking(yaw: f64, pitch: f64, position: Vec3, height: usize, width: usize, hfov: f64) -> Self {
        let (sy, cy) = libm::sincos(yaw);
        let (sp, cp) = libm::sincos(pitch);
        let fwd = [cy * cp, sy * cp, -sp];
        let right = [sy, -cy, 0.0];
        let down = cross(fwd, right);
        let rotation: Mat3 = [
            [right[0], down[0], fwd[0]],
            [right[1], down[1], fwd[1]],
            [right[2], down[2], fwd[2]],
        ];
        let f = 0.5 * width as f64 / libm::tan(0.5 * hfov);
        Self {
            fx: f,
            fy: f,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            height,
            width,
            extrinsic: EgoPose { rotation, translation: position, timestamp: 0 },
        }
    }

    /// Ray direction in the ego frame, scaled so that the ray parameter
    /// equals depth along the optical axis.
    pub fn ray_ego(&self, u: f64, v: f64) -> Vec3 {
        let d = [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0];
        self.extrinsic.transform_vector(d)
    }

    pub fn origin_ego(&self) -> Vec3 {
        self.extrinsic.translation
    }
}

/// Toy camera image: channel 0 holds the class id of the first surface
/// hit (0 = nothing), channel 1 its depth along the optical axis in
/// meters (0 = nothing).
#[derive(Clone, Debug, PartialEq)]
pub struct CameraImage {
    pub height: usize,
    pub width: usize,
    /// `(2, height, width)` in C order.
    pub data: Vec<f32>,
}

impl CameraImage {
    pub fn semantic(&self, v: usize, u: usize) -> f32 {
        self.data[v * self.width + u]
    }

    pub fn depth(&self, v: usize, u: usize) -> f32 {
        self.data[self.height * self.width + v * self.width + u]
    }
}

/// First hit along a ray against boxes and the ground plane.
pub(crate) fn cast(objects: &[SceneObject], ground_height: f64, o: Vec3, d: Vec3) -> Option<(u8, f64)> {
    let mut best: Option<(u8, f64)> = None;
    for obj in objects {
        if let Some(t) = obj.ray_hit(o, d) {
            if best.is_none_or(|(_, bt)| t < bt) {
                best = Some((obj.class_id, t));
            }
        }
    }
    if d[2] < -1e-12 {
        let t = (ground_height - o[2]) / d[2];
        if t > 0.0 && best.is_none_or(|(_, bt)| t < bt) {
            best = Some((GROUND, t));
        }
    }
    best
}

/// Ray-casts `objects` (world frame) seen from `camera` mounted on the ego
/// at `ego_pose`. The ground is the plane `z = ground_height` of the ego
/// frame.
pub fn render_camera(objects: &[SceneObject], ground_height: f64, camera: &CameraModel, ego_pose: &EgoPose) -> CameraImage {
    let local: Vec<SceneObject> = objects.iter().map(|o| o.in_frame(ego_pose)).collect();
    render_local(&local, ground_height, camera)
}

pub(crate) fn render_local(local: &[SceneObject], ground_height: f64, camera: &CameraModel) -> CameraImage {
    let (h, w) = (camera.height, camera.width);
    let mut data = vec![0.0f32; 2 * h * w];
    let o = camera.origin_ego();
    for v in 0..h {
        for u in 0..w {
            let d = camera.ray_ego(u as f64, v as f64);
            if let Some((class, t)) = cast(local, ground_height, o, d) {
                data[v * w + u] = class as f32;
                data[h * w + v * w + u] = t as f32;
            }
        }
    }
    CameraImage { height: h, width: w, data }
}

pub fn point_at(camera: &CameraModel, u: f64, v: f64, depth: f64) -> Vec3 {
    pose::add(camera.origin_ego(), pose::scale(camera.ray_ego(u, v), depth))
}
