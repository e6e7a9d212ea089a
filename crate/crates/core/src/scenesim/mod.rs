//! Procedural driving-scene episodes with toy cameras, radar and
//! ground-truth occupancy.

mod camera;
mod objects;
mod radar;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

pub use camera::{point_at, render_camera, CameraImage, CameraModel};
pub use objects::SceneObject;
pub use radar::{sample_radar, RadarConfig, RadarPoint, RadarPointCloud, RADAR_FEATURES};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, OccupancyLabelGrid, SemanticLabelSet, FREE};
use crate::pose::{self, EgoPose};

pub const GROUND: u8 = 1;
pub const BUILDING: u8 = 2;
pub const BARRIER: u8 = 3;
pub const CAR: u8 = 4;
pub const PEDESTRIAN: u8 = 5;

/// Labels voxels by the first object (in list order) containing the voxel
/// center; otherwise ground below `ground_height`, otherwise free.
/// Objects are given in the grid's (ego) frame.
pub fn rasterize_occupancy(objects: &[SceneObject], ground_height: f64, spec: &GridSpec) -> OccupancyLabelGrid {
    let dims = spec.dims();
    let mut labels = vec![FREE; spec.num_voxels()];
    let mut claimed = vec![false; labels.len()];
    let min = spec.min();
    let vs = spec.voxel_size();
    for obj in objects {
        let (lo, hi) = obj.aabb();
        let mut range = [(0usize, 0usize); 3];
        for a in 0..3 {
            // Voxel centers min + (i + 0.5) * vs inside [lo, hi].
            let first = libm::ceil((lo[a] - min[a]) / vs[a] - 0.5).max(0.0);
            let last = libm::floor((hi[a] - min[a]) / vs[a] - 0.5).min(dims[a] as f64 - 1.0);
            if last < first {
                range[a] = (0, 0);
            } else {
                range[a] = (first as usize, last as usize + 1);
            }
        }
        for x in range[0].0..range[0].1 {
            for y in range[1].0..range[1].1 {
                for z in range[2].0..range[2].1 {
                    let f = spec.flat_index([x, y, z]);
                    if !claimed[f] && obj.contains(spec.voxel_center([x, y, z])) {
                        claimed[f] = true;
                        labels[f] = obj.class_id;
                    }
                }
            }
        }
    }
    for (f, l) in labels.iter_mut().enumerate() {
        if !claimed[f] && spec.voxel_center(spec.unflatten(f))[2] < ground_height {
            *l = GROUND;
        }
    }
    OccupancyLabelGrid { spec: spec.clone(), labels }
}

/// Simulator settings. Distances in meters, speeds in m/s, angles in
/// degrees unless noted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub grid: GridSpec,
    pub num_frames: usize,
    pub frame_dt: f64,
    pub ground_height: f64,
    pub ego_speed: [f64; 2],
    /// rad/s
    pub ego_yaw_rate: [f64; 2],
    pub ego_clearance: f64,
    pub num_cars: usize,
    pub num_pedestrians: usize,
    pub num_buildings: usize,
    pub num_barriers: usize,
    pub car_speed: [f64; 2],
    pub pedestrian_speed: [f64; 2],
    pub car_size: [f64; 3],
    pub pedestrian_size: [f64; 3],
    pub barrier_size: [f64; 3],
    pub building_size_min: [f64; 3],
    pub building_size_max: [f64; 3],
    pub num_cameras: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub camera_height: f64,
    pub camera_pitch_deg: f64,
    pub camera_hfov_deg: f64,
    pub radar_points_per_object: [usize; 2],
    pub radar_noise_sigma: f64,
    pub radar_dropout: f64,
    pub radar_sensor_height: f64,
    pub radar_max_range: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::desk(),
            num_frames: 12,
            frame_dt: 0.5,
            ground_height: 0.0,
            ego_speed: [0.0, 3.0],
            ego_yaw_rate: [-0.1, 0.1],
            ego_clearance: 1.5,
            num_cars: 3,
            num_pedestrians: 2,
            num_buildings: 2,
            num_barriers: 2,
            car_speed: [1.0, 3.0],
            pedestrian_speed: [0.3, 1.2],
            car_size: [4.0, 1.8, 1.5],
            pedestrian_size: [0.6, 0.6, 1.7],
            barrier_size: [2.0, 0.5, 1.0],
            building_size_min: [3.0, 3.0, 2.5],
            building_size_max: [6.0, 6.0, 4.0],
            num_cameras: 4,
            image_height: 32,
            image_width: 64,
            camera_height: 1.6,
            camera_pitch_deg: 10.0,
            camera_hfov_deg: 90.0,
            radar_points_per_object: [3, 8],
            radar_noise_sigma: 0.05,
            radar_dropout: 0.1,
            radar_sensor_height: 0.5,
            radar_max_range: 30.0,
        }
    }
}

impl SimConfig {
    pub fn labels(&self) -> SemanticLabelSet {
        SemanticLabelSet::desk()
    }

    pub fn radar(&self) -> RadarConfig {
        RadarConfig {
            points_per_object: self.radar_points_per_object,
            noise_sigma: self.radar_noise_sigma,
            dropout: self.radar_dropout,
            sensor_height: self.radar_sensor_height,
            max_range: self.radar_max_range,
        }
    }

    /// Cameras spread evenly in yaw around the ego.
    pub fn camera_rig(&self) -> Vec<CameraModel> {
        (0..self.num_cameras)
            .map(|i| {
                let yaw = 2.0 * core::f64::consts::PI * i as f64 / self.num_cameras as f64;
                CameraModel::looking(
                    yaw,
                    self.camera_pitch_deg.to_radians(),
                    [0.0, 0.0, self.camera_height],
                    self.image_height,
                    self.image_width,
                    self.camera_hfov_deg.to_radians(),
                )
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.num_frames == 0 {
            return bad("num_frames must be positive");
        }
        if !(self.frame_dt > 0.0) {
            return bad("frame_dt must be positive");
        }
        if self.num_cameras == 0 || self.image_height == 0 || self.image_width == 0 {
            return bad("camera rig needs at least one camera with a nonempty image");
        }
        if !(self.camera_hfov_deg > 0.0 && self.camera_hfov_deg < 180.0) {
            return bad("camera_hfov_deg must be in (0, 180)");
        }
        for r in [self.ego_speed, self.ego_yaw_rate, self.car_speed, self.pedestrian_speed] {
            if r[0] > r[1] {
                return bad("speed ranges must be ordered [min, max]");
            }
        }
        for s in [self.car_size, self.pedestrian_size, self.barrier_size, self.building_size_min] {
            if s.iter().any(|&v| !(v > 0.0)) {
                return bad("object sizes must be positive");
            }
        }
        if (0..3).any(|a| self.building_size_min[a] > self.building_size_max[a]) {
            return bad("building_size_min exceeds building_size_max");
        }
        if self.radar_points_per_object[0] > self.radar_points_per_object[1] {
            return bad("radar_points_per_object must be ordered [min, max]");
        }
        if !(0.0..=1.0).contains(&self.radar_dropout) || self.radar_noise_sigma < 0.0 {
            return bad("radar dropout must be in [0, 1] and noise sigma nonnegative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub timestamp: u32,
    /// Ego -> world.
    pub ego_pose: EgoPose,
    /// One image per camera of the episode rig.
    pub images: Vec<CameraImage>,
    pub radar: RadarPointCloud,
    pub gt_occupancy: OccupancyLabelGrid,
    /// Scene state at this timestamp, world frame.
    pub objects: Vec<SceneObject>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub config: SimConfig,
    pub seed: u64,
    pub cameras: Vec<CameraModel>,
    pub frames: Vec<Frame>,
}

impl Episode {
    pub fn spec(&self) -> &GridSpec {
        &self.config.grid
    }

    /// Labels of the scene at frame `source`, expressed in the ego frame of
    /// frame `target`.
    pub fn labels_in_frame(&self, source: usize, target: usize) -> OccupancyLabelGrid {
        if source == target {
            return self.frames[source].gt_occupancy.clone();
        }
        let pose = &self.frames[target].ego_pose;
        let local: Vec<SceneObject> = self.frames[source].objects.iter().map(|o| o.in_frame(pose)).collect();
        rasterize_occupancy(&local, self.config.ground_height, &self.config.grid)
    }
}

/// Planar unicycle ego trajectory starting at the world origin.
fn ego_pose_at(speed: f64, yaw_rate: f64, t: f64, timestamp: u32) -> EgoPose {
    let yaw = yaw_rate * t;
    let (x, y) = if libm::fabs(yaw_rate) < 1e-9 {
        (speed * t, 0.0)
    } else {
        let r = speed / yaw_rate;
        (r * libm::sin(yaw), r * (1.0 - libm::cos(yaw)))
    };
    EgoPose::from_yaw(yaw, [x, y, 0.0], timestamp)
}

fn uniform(rng: &mut crate::Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

/// Generates one episode. The result depends only on `(config, seed)`.
pub fn generate_episode(config: &SimConfig, seed: u64) -> Result<Episode> {
    config.validate()?;
    let mut rng = crate::Rng::seed_from_u64(seed);
    let spec = &config.grid;
    let speed = uniform(&mut rng, config.ego_speed);
    let yaw_rate = uniform(&mut rng, config.ego_yaw_rate);
    let poses: Vec<EgoPose> = (0..config.num_frames)
        .map(|i| ego_pose_at(speed, yaw_rate, i as f64 * config.frame_dt, i as u32))
        .collect();

    let objects = place_objects(config, &poses, &mut rng)?;
    let cameras = config.camera_rig();
    let radar_cfg = config.radar();
    let mut frames = Vec::with_capacity(config.num_frames);
    for (i, pose) in poses.iter().enumerate() {
        let t = i as f64 * config.frame_dt;
        let world: Vec<SceneObject> = objects.iter().map(|o| o.advanced(t)).collect();
        let local: Vec<SceneObject> = world.iter().map(|o| o.in_frame(pose)).collect();
        let images = cameras.iter().map(|c| camera::render_local(&local, config.ground_height, c)).collect();
        let radar = sample_radar(&world, &radar_cfg, pose, &mut rng);
        let gt_occupancy = rasterize_occupancy(&local, config.ground_height, spec);
        frames.push(Frame { timestamp: i as u32, ego_pose: *pose, images, radar, gt_occupancy, objects: world });
    }
    Ok(Episode { config: config.clone(), seed, cameras, frames })
}

fn place_objects(config: &SimConfig, poses: &[EgoPose], rng: &mut crate::Rng) -> Result<Vec<SceneObject>> {
    let spec = &config.grid;
    let [xr, yr] = [spec.range(0), spec.range(1)];
    let area = (xr[1] - xr[0]) * (yr[1] - yr[0]);
    let footprint = |s: [f64; 3]| s[0] * s[1];
    let demand = config.num_cars as f64 * footprint(config.car_size)
        + config.num_pedestrians as f64 * footprint(config.pedestrian_size)
        + config.num_barriers as f64 * footprint(config.barrier_size)
        + config.num_buildings as f64 * footprint(config.building_size_max);
    if demand > 0.5 * area {
        return Err(Error::Infeasible(format!(
            "objects need {:.1} m^2 of footprint but the grid has {:.1} m^2",
            demand, area
        )));
    }

    let mut specs: Vec<(u8, [f64; 3], f64)> = Vec::new();
    for _ in 0..config.num_buildings {
        let mut s = [0.0; 3];
        for a in 0..3 {
            s[a] = uniform(rng, [config.building_size_min[a], config.building_size_max[a]]);
        }
        specs.push((BUILDING, s, 0.0));
    }
    for _ in 0..config.num_barriers {
        specs.push((BARRIER, config.barrier_size, 0.0));
    }
    for _ in 0..config.num_cars {
        specs.push((CAR, config.car_size, uniform(rng, config.car_speed)));
    }
    for _ in 0..config.num_pedestrians {
        specs.push((PEDESTRIAN, config.pedestrian_size, uniform(rng, config.pedestrian_speed)));
    }

    let mut placed: Vec<SceneObject> = Vec::new();
    for (class_id, size, speed) in specs {
        let mut ok = None;
        for _ in 0..500 {
            let yaw = rng.random_range(0.0..core::f64::consts::TAU);
            let center = [
                rng.random_range(xr[0]..xr[1]),
                rng.random_range(yr[0]..yr[1]),
                config.ground_height + 0.5 * size[2],
            ];
            let velocity = [speed * libm::cos(yaw), speed * libm::sin(yaw), 0.0];
            let cand = SceneObject { class_id, center, size, yaw, velocity };
            let r = cand.footprint_radius();
            let clear_of_ego = poses.iter().all(|p| {
                let d = pose::sub(cand.center, p.translation);
                libm::hypot(d[0], d[1]) > r + config.ego_clearance + 1.0
            });
            let clear_of_others = placed.iter().all(|o| {
                let d = pose::sub(cand.center, o.center);
                libm::hypot(d[0], d[1]) > r + o.footprint_radius() + 0.2
            });
            if clear_of_ego && clear_of_others {
                ok = Some(cand);
                break;
            }
        }
        match ok {
            Some(o) => placed.push(o),
            None => {
                return Err(Error::Infeasible(format!(
                    "could not place object of class {} after 500 attempts",
                    class_id
                )))
            }
        }
    }
    Ok(placed)
}
