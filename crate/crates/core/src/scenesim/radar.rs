use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::objects::SceneObject;
use crate::pose::{self, EgoPose, Vec3};

/// Number of per-point features after the xyz position.
pub const RADAR_FEATURES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadarPoint {
    pub position: [f32; 3],
    /// Object velocity projected on the line of sight, positive when
    /// receding.
    pub radial_velocity: f32,
    pub intensity: f32,
}

/// Radar returns in the ego frame of the frame that captured them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RadarPointCloud {
    pub points: Vec<RadarPoint>,
}

impl RadarPointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Moves the cloud from the ego frame at `from` to the ego frame at
    /// `to` (both ego -> world).
    pub fn transformed(&self, from: &EgoPose, to: &EgoPose) -> Self {
        let rel = crate::pose::compose_pose(&to.inverse(), from);
        let points = self
            .points
            .iter()
            .map(|p| {
                let q = rel.transform_point(p.position.map(f64::from));
                RadarPoint { position: q.map(|v| v as f32), ..*p }
            })
            .collect();
        Self { points }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadarConfig {
    pub points_per_object: [usize; 2],
    pub noise_sigma: f64,
    pub dropout: f64,
    pub sensor_height: f64,
    pub max_range: f64,
}

impl Default for RadarConfig {
    fn default() -> Self {
        Self { points_per_object: [3, 8], noise_sigma: 0.05, dropout: 0.1, sensor_height: 0.5, max_range: 30.0 }
    }
}

fn reflectivity(class_id: u8) -> f64 {
    match class_id {
        2 => 0.9,
        3 => 0.6,
        4 => 1.0,
        5 => 0.3,
        _ => 0.5,
    }
}

/// Samples noisy returns from the sensor-facing faces of every object in
/// range. Occlusion between objects is ignored.
pub fn sample_radar(objects: &[SceneObject], config: &RadarConfig, ego_pose: &EgoPose, rng: &mut crate::Rng) -> RadarPointCloud {
    let sensor: Vec3 = [0.0, 0.0, config.sensor_height];
    let noise = (config.noise_sigma > 0.0).then(|| Normal::new(0.0, config.noise_sigma).expect("positive sigma"));
    let mut points = Vec::new();
    for world in objects {
        let obj = world.in_frame(ego_pose);
        if pose::norm(pose::sub(obj.center, sensor)) > config.max_range {
            continue;
        }
        let faces = visible_faces(&obj, sensor);
        if faces.is_empty() {
            continue;
        }
        let total_area: f64 = faces.iter().map(|f| f.area).sum();
        let [lo, hi] = config.points_per_object;
        let count = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        for _ in 0..count {
            let mut pick = rng.random_range(0.0..total_area);
            let face = faces
                .iter()
                .find(|f| {
                    pick -= f.area;
                    pick < 0.0
                })
                .unwrap_or(&faces[faces.len() - 1]);
            let mut local = [0.0; 3];
            for a in 0..3 {
                let h = 0.5 * obj.size[a];
                local[a] = if a == face.axis { face.sign * h } else { rng.random_range(-h..=h) };
            }
            let dropped = rng.random_bool(config.dropout.clamp(0.0, 1.0));
            let mut p = obj.local_to_parent(local);
            if let Some(n) = &noise {
                for v in &mut p {
                    *v += n.sample(rng);
                }
            }
            if dropped {
                continue;
            }
            let los = pose::sub(p, sensor);
            let dist = pose::norm(los);
            let radial = if dist > 1e-9 { pose::dot(obj.velocity, los) / dist } else { 0.0 };
            let intensity = reflectivity(obj.class_id) / (1.0 + dist / 20.0);
            points.push(RadarPoint {
                position: p.map(|v| v as f32),
                radial_velocity: radial as f32,
                intensity: intensity as f32,
            });
        }
    }
    RadarPointCloud { points }
}

struct Face {
    axis: usize,
    sign: f64,
    area: f64,
}

fn visible_faces(obj: &SceneObject, sensor: Vec3) -> Vec<Face> {
    let s = obj.to_local(sensor);
    let mut faces = Vec::new();
    for axis in 0..3 {
        for sign in [-1.0, 1.0] {
            // Outward normal along `axis`; facing the sensor when the sensor
            // lies beyond the face plane.
            if sign * s[axis] > 0.5 * obj.size[axis] {
                let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
                faces.push(Face { axis, sign, area: obj.size[a] * obj.size[b] });
            }
        }
    }
    faces
}
