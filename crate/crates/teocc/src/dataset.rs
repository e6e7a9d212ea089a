//! Episode directories: `manifest.json` plus per-frame TEOC blobs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use teocc_core::scenesim::{CameraImage, CameraModel, Episode, Frame, RadarPoint, RadarPointCloud, SceneObject, SimConfig};
use teocc_core::{EgoPose, GridSpec, OccupancyLabelGrid};

use crate::blob::{read_blob, write_blob, Blob, BlobData};
use crate::error::{io_err, parse_err, Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT: &str = "teocc-episode";
pub const FORMAT_VERSION: u32 = 1;

/// Floats per radar point: x, y, z, radial velocity, intensity.
const RADAR_COLUMNS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameMeta {
    pub timestamp: u32,
    pub ego_pose: EgoPose,
    pub objects: Vec<SceneObject>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub num_frames: usize,
    pub grid: GridSpec,
    pub label_names: Vec<String>,
    pub cameras: Vec<CameraModel>,
    pub config: SimConfig,
    pub frames: Vec<FrameMeta>,
}

fn images_file(i: usize) -> String {
    format!("frame_{:03}_images.teoc", i)
}

fn radar_file(i: usize) -> String {
    format!("frame_{:03}_radar.teoc", i)
}

fn labels_file(i: usize) -> String {
    format!("frame_{:03}_labels.teoc", i)
}

fn blob(path: &Path, dims: Vec<usize>, data: BlobData) -> Result<Blob> {
    Blob::new(dims, data).map_err(|d| parse_err(path, "dims", d))
}

pub fn save_episode(ep: &Episode, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest = Manifest {
        format: FORMAT.into(),
        version: FORMAT_VERSION,
        seed: ep.seed,
        num_frames: ep.frames.len(),
        grid: ep.config.grid.clone(),
        label_names: ep.config.labels().names().to_vec(),
        cameras: ep.cameras.clone(),
        config: ep.config.clone(),
        frames: ep.frames.iter().map(|f| FrameMeta { timestamp: f.timestamp, ego_pose: f.ego_pose, objects: f.objects.clone() }).collect(),
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| parse_err(&path, "manifest", e))?;
    std::fs::write(&path, text).map_err(io_err(&path))?;

    for (i, f) in ep.frames.iter().enumerate() {
        let (h, w) = f.images.first().map_or((0, 0), |im| (im.height, im.width));
        let mut px = Vec::with_capacity(f.images.len() * 2 * h * w);
        for im in &f.images {
            px.extend_from_slice(&im.data);
        }
        let p = dir.join(images_file(i));
        write_blob(&p, &blob(&p, vec![f.images.len(), 2, h, w], BlobData::F32(px))?)?;

        let pts: Vec<f32> = f
            .radar
            .points
            .iter()
            .flat_map(|q| [q.position[0], q.position[1], q.position[2], q.radial_velocity, q.intensity])
            .collect();
        let p = dir.join(radar_file(i));
        write_blob(&p, &blob(&p, vec![f.radar.len(), RADAR_COLUMNS], BlobData::F32(pts))?)?;

        let labels = f.gt_occupancy.labels.iter().map(|&l| l as i32).collect();
        let p = dir.join(labels_file(i));
        write_blob(&p, &blob(&p, f.gt_occupancy.spec.dims().to_vec(), BlobData::I32(labels))?)?;
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| parse_err(&path, "manifest", e))?;
    match value.get("format").and_then(|v| v.as_str()) {
        Some(FORMAT) => {}
        other => return Err(parse_err(&path, "format", format!("expected \"{}\", found {:?}", FORMAT, other))),
    }
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        _ => return Err(Error::UnsupportedVersion { path, version: value.get("version").map_or("missing".into(), |v| v.to_string()) }),
    }
    let m: Manifest = serde_json::from_value(value).map_err(|e| parse_err(&path, "manifest", e))?;
    if m.frames.len() != m.num_frames {
        return Err(parse_err(&path, "frames", format!("{} entries for num_frames {}", m.frames.len(), m.num_frames)));
    }
    if m.grid != m.config.grid {
        return Err(parse_err(&path, "grid", "differs from config.grid"));
    }
    if m.label_names != m.config.labels().names() {
        return Err(parse_err(&path, "label_names", format!("{:?} does not match the simulator label set", m.label_names)));
    }
    Ok(m)
}

fn expect_dims(path: &Path, dims: &[usize], want: &[Option<usize>]) -> Result<()> {
    let ok = dims.len() == want.len() && dims.iter().zip(want).all(|(d, w)| w.is_none_or(|w| w == *d));
    if ok {
        Ok(())
    } else {
        Err(parse_err(path, "dims", format!("{:?} does not match {:?}", dims, want)))
    }
}

pub fn load_episode(dir: &Path) -> Result<Episode> {
    let m = read_manifest(dir)?;
    let num_classes = m.label_names.len();
    let mut frames = Vec::with_capacity(m.num_frames);
    for (i, meta) in m.frames.iter().enumerate() {
        let p = dir.join(images_file(i));
        let (dims, px) = read_blob(&p)?.into_f32(&p)?;
        expect_dims(&p, &dims, &[Some(m.cameras.len()), Some(2), None, None])?;
        let (h, w) = (dims[2], dims[3]);
        if let Some(c) = m.cameras.iter().find(|c| (c.height, c.width) != (h, w)) {
            return Err(parse_err(&p, "dims", format!("images {}x{} for a {}x{} camera", h, w, c.height, c.width)));
        }
        let images = px.chunks_exact(2 * h * w).map(|c| CameraImage { height: h, width: w, data: c.to_vec() }).collect();

        let p = dir.join(radar_file(i));
        let (dims, pts) = read_blob(&p)?.into_f32(&p)?;
        expect_dims(&p, &dims, &[None, Some(RADAR_COLUMNS)])?;
        let radar = RadarPointCloud {
            points: pts
                .chunks_exact(RADAR_COLUMNS)
                .map(|c| RadarPoint { position: [c[0], c[1], c[2]], radial_velocity: c[3], intensity: c[4] })
                .collect(),
        };

        let p = dir.join(labels_file(i));
        let (dims, raw) = read_blob(&p)?.into_i32(&p)?;
        expect_dims(&p, &dims, &m.grid.dims().map(Some))?;
        let labels = raw
            .iter()
            .map(|&l| if l >= 0 && (l as usize) < num_classes { Ok(l as u8) } else { Err(parse_err(&p, "labels", format!("label {} outside 0..{}", l, num_classes))) })
            .collect::<Result<Vec<u8>>>()?;
        let gt_occupancy = OccupancyLabelGrid::new(m.grid.clone(), labels)?;

        frames.push(Frame { timestamp: meta.timestamp, ego_pose: meta.ego_pose, images, radar, gt_occupancy, objects: meta.objects.clone() });
    }
    Ok(Episode { config: m.config, seed: m.seed, cameras: m.cameras, frames })
}

pub fn episode_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("episode_{:04}", index))
}

/// Saves `episodes` as `episode_0000`, `episode_0001`, ... under `root`.
pub fn save_dataset(episodes: &[Episode], root: &Path) -> Result<()> {
    episodes.iter().enumerate().try_for_each(|(i, ep)| save_episode(ep, &episode_dir(root, i)))
}

/// Loads every episode directory under `root` in name order.
pub fn load_dataset(root: &Path) -> Result<Vec<Episode>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(io_err(root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::EmptyDataset(format!("no episode directories under {}", root.display())));
    }
    dirs.iter().map(|d| load_episode(d)).collect()
}
