//! Camera branch: toy image encoder, depth-weighted lift into voxels, and
//! ego-motion alignment of historical voxel features.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ResampleTable, SplatTable, Var};
use crate::error::{shape_err, Error, Result};
use crate::grid::{GridSpec, VoxelFeatureGrid};
use crate::params::{he_normal, ParamId, ParamStore};
use crate::pose::{compose_pose, EgoPose};
use crate::scenesim::{point_at, CameraImage, CameraModel};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// Output channels of the three conv blocks (strides 2, 1, 2).
    pub channels: [usize; 3],
    pub depth_bins: usize,
    /// Depth range covered by the bins, meters.
    pub depth_range: [f64; 2],
    /// Divisors applied to the semantic and depth image channels.
    pub input_scale: [f64; 2],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { in_channels: 2, channels: [16, 32, 32], depth_bins: 16, depth_range: [1.0, 17.0], input_scale: [5.0, 17.0] }
    }
}

pub const ENCODER_STRIDES: [usize; 3] = [2, 1, 2];

impl EncoderConfig {
    pub fn out_channels(&self) -> usize {
        self.channels[2]
    }

    pub fn total_stride(&self) -> usize {
        ENCODER_STRIDES.iter().product()
    }

    pub fn feature_dims(&self, height: usize, width: usize) -> (usize, usize) {
        let mut hw = (height, width);
        for s in ENCODER_STRIDES {
            hw = (hw.0.div_ceil(s), hw.1.div_ceil(s));
        }
        hw
    }

    /// Depth value of each bin center.
    pub fn bin_depths(&self) -> Vec<f64> {
        let [lo, hi] = self.depth_range;
        let step = (hi - lo) / self.depth_bins as f64;
        (0..self.depth_bins).map(|i| lo + (i as f64 + 0.5) * step).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvNormParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl ConvNormParams {
    /// `kernel` has 2 or 3 entries for 2D or 3D convolutions.
    pub fn init(store: &mut ParamStore, group: &str, name: &str, cin: usize, cout: usize, kernel: &[usize], rng: &mut crate::Rng) -> Self {
        let mut shape = vec![cout, cin];
        shape.extend_from_slice(kernel);
        let fan_in = cin * kernel.iter().product::<usize>();
        Self {
            weight: store.add(group, &format!("{}.weight", name), he_normal(&shape, fan_in, rng)),
            bias: store.add(group, &format!("{}.bias", name), Tensor::zeros(&[cout])),
            gamma: store.add(group, &format!("{}.gamma", name), Tensor::full(&[cout], 1.0)),
            beta: store.add(group, &format!("{}.beta", name), Tensor::zeros(&[cout])),
        }
    }

    /// conv -> norm, without activation.
    pub fn conv_norm(&self, g: &mut Graph, store: &ParamStore, x: Var, stride: usize) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.conv(x, w, Some(b), stride)?;
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.group_norm(y, gamma, beta)
    }

    /// conv -> norm -> ReLU.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, stride: usize) -> Result<Var> {
        let y = self.conv_norm(g, store, x, stride)?;
        Ok(g.relu(y))
    }
}

/// Weight + bias of a plain convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvParams {
    pub fn init(store: &mut ParamStore, group: &str, name: &str, cin: usize, cout: usize, kernel: &[usize], rng: &mut crate::Rng) -> Self {
        let mut shape = vec![cout, cin];
        shape.extend_from_slice(kernel);
        let fan_in = cin * kernel.iter().product::<usize>();
        Self {
            weight: store.add(group, &format!("{}.weight", name), he_normal(&shape, fan_in, rng)),
            bias: store.add(group, &format!("{}.bias", name), Tensor::zeros(&[cout])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, stride: usize) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv(x, w, Some(b), stride)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub blocks: [ConvNormParams; 3],
    pub depth_head: ConvParams,
}

impl EncoderParams {
    pub fn init(store: &mut ParamStore, group: &str, cfg: &EncoderConfig, rng: &mut crate::Rng) -> Self {
        let c = cfg.channels;
        let blocks = [
            ConvNormParams::init(store, group, "block0", cfg.in_channels, c[0], &[3, 3], rng),
            ConvNormParams::init(store, group, "block1", c[0], c[1], &[3, 3], rng),
            ConvNormParams::init(store, group, "block2", c[1], c[2], &[3, 3], rng),
        ];
        let depth_head = ConvParams::init(store, group, "depth", c[2], cfg.depth_bins, &[1, 1], rng);
        Self { blocks, depth_head }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatureMap {
    /// `(channels, h, w)`.
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthDistribution {
    pub bins: Vec<f64>,
    /// `(bins, h, w)`, a distribution over bins at every pixel.
    pub probs: Tensor,
}

/// Scaled `(2, h, w)` network input for a toy image.
pub fn image_tensor(image: &CameraImage, cfg: &EncoderConfig) -> Tensor {
    let hw = image.height * image.width;
    let data = image
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| v as f64 / cfg.input_scale[i / hw])
        .collect();
    Tensor::from_vec(&[2, image.height, image.width], data).expect("image layout")
}

#[derive(Clone, Copy, Debug)]
pub struct EncodedImage {
    pub features: Var,
    pub depth_logits: Var,
    pub depth_probs: Var,
}

/// Encodes one image on the tape.
pub fn encode_image_graph(g: &mut Graph, store: &ParamStore, params: &EncoderParams, x: Var) -> Result<EncodedImage> {
    let mut h = x;
    for (blk, &s) in params.blocks.iter().zip(&ENCODER_STRIDES) {
        h = blk.forward(g, store, h, s)?;
    }
    let depth_logits = params.depth_head.forward(g, store, h, 1)?;
    let depth_probs = g.softmax_channels(depth_logits);
    Ok(EncodedImage { features: h, depth_logits, depth_probs })
}

pub fn encode_image(
    store: &ParamStore,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    camera: &CameraModel,
    image: &CameraImage,
) -> Result<(ImageFeatureMap, DepthDistribution)> {
    if image.height != camera.height || image.width != camera.width || image.data.len() != 2 * image.height * image.width {
        return Err(shape_err(
            "encode_image",
            format!("image {}x{} for camera {}x{}", image.height, image.width, camera.height, camera.width),
        ));
    }
    let mut g = Graph::new();
    let x = g.input(image_tensor(image, cfg));
    let e = encode_image_graph(&mut g, store, params, x)?;
    Ok((
        ImageFeatureMap { tensor: g.value(e.features).clone() },
        DepthDistribution { bins: cfg.bin_depths(), probs: g.value(e.depth_probs).clone() },
    ))
}

/// Voxel hit by each `(bin, feature pixel)` of a camera, in the ego frame.
pub fn splat_table(camera: &CameraModel, feat_hw: (usize, usize), stride: usize, bins: &[f64], spec: &GridSpec) -> SplatTable {
    let (h, w) = feat_hw;
    let pixels = h * w;
    let half = 0.5 * (stride as f64 - 1.0);
    let mut voxel = vec![None; bins.len() * pixels];
    for (d, &depth) in bins.iter().enumerate() {
        for i in 0..h {
            for j in 0..w {
                let (u, v) = (stride as f64 * j as f64 + half, stride as f64 * i as f64 + half);
                let p = point_at(camera, u, v, depth);
                voxel[d * pixels + i * w + j] = spec.voxel_index(p).map(|idx| spec.flat_index(idx) as u32);
            }
        }
    }
    SplatTable { bins: bins.len(), pixels, out_dims: spec.dims(), voxel }
}

/// Sum-splats `probs[d, p] * feat[:, p]` into the voxel containing the
/// pixel's point at bin depth `d`. Points outside the grid are dropped.
pub fn lift_splat(
    feat: &ImageFeatureMap,
    depth: &DepthDistribution,
    camera: &CameraModel,
    stride: usize,
    spec: &GridSpec,
) -> Result<VoxelFeatureGrid> {
    let fs = feat.tensor.shape();
    let table = Arc::new(splat_table(camera, (fs[1], fs[2]), stride, &depth.bins, spec));
    let mut g = Graph::new();
    let f = g.input(feat.tensor.clone());
    let p = g.input(depth.probs.clone());
    let v = g.splat(f, p, table)?;
    VoxelFeatureGrid::new(spec.clone(), g.value(v).clone())
}

/// Sum of per-camera lifts on one grid.
pub fn multi_view_lift(per_camera: &[VoxelFeatureGrid]) -> Result<VoxelFeatureGrid> {
    let first = per_camera.first().ok_or_else(|| shape_err("multi_view_lift", "no cameras".into()))?;
    let mut out = first.clone();
    for v in &per_camera[1..] {
        v.spec.ensure_same(&first.spec)?;
        if v.tensor.shape() != first.tensor.shape() {
            return Err(shape_err("multi_view_lift", format!("{:?} vs {:?}", v.tensor.shape(), first.tensor.shape())));
        }
        out.tensor.add_assign(&v.tensor);
    }
    Ok(out)
}

fn snap(v: f64) -> f64 {
    let r = libm::round(v);
    if libm::fabs(v - r) < 1e-9 {
        r
    } else {
        v
    }
}

/// Trilinear taps that sample the source-frame grid at each current-frame
/// voxel center. Taps outside the source grid are dropped (zero fill).
pub fn warp_table(spec: &GridSpec, pose_src: &EgoPose, pose_cur: &EgoPose) -> ResampleTable {
    let cur_to_src = compose_pose(&pose_src.inverse(), pose_cur);
    let dims = spec.dims();
    let rows = (0..spec.num_voxels())
        .map(|f| {
            let p = cur_to_src.transform_point(spec.voxel_center(spec.unflatten(f)));
            trilinear_taps(spec.continuous_index(p).map(snap), dims, false)
        })
        .collect();
    ResampleTable::from_rows(dims, dims, rows)
}

/// Trilinear taps at continuous index `c` (voxel centers on integers).
/// With `clamp` the coordinate is clamped into the grid, otherwise
/// out-of-grid corners contribute nothing.
pub(crate) fn trilinear_taps(c: [f64; 3], dims: [usize; 3], clamp: bool) -> Vec<(usize, f64)> {
    let mut axes = [[(0usize, 0.0f64); 2]; 3];
    let mut counts = [0usize; 3];
    for a in 0..3 {
        let n = dims[a] as f64;
        let x = if clamp { c[a].clamp(0.0, n - 1.0) } else { c[a] };
        let i0 = libm::floor(x);
        let t = x - i0;
        for (idx, w) in [(i0, 1.0 - t), (i0 + 1.0, t)] {
            if w > 0.0 && idx >= 0.0 && idx < n {
                axes[a][counts[a]] = (idx as usize, w);
                counts[a] += 1;
            }
        }
    }
    let mut taps = Vec::with_capacity(counts.iter().product());
    for &(x, wx) in &axes[0][..counts[0]] {
        for &(y, wy) in &axes[1][..counts[1]] {
            for &(z, wz) in &axes[2][..counts[2]] {
                taps.push(((x * dims[1] + y) * dims[2] + z, wx * wy * wz));
            }
        }
    }
    taps
}

/// Resamples a feature grid captured at `pose_src` into the ego frame at
/// `pose_cur`.
pub fn warp_to_current(v: &VoxelFeatureGrid, pose_src: &EgoPose, pose_cur: &EgoPose) -> Result<VoxelFeatureGrid> {
    let table = Arc::new(warp_table(&v.spec, pose_src, pose_cur));
    let mut g = Graph::new();
    let x = g.input(v.tensor.clone());
    let y = g.resample(x, table)?;
    VoxelFeatureGrid::new(v.spec.clone(), g.value(y).clone())
}

/// Precomputed lift geometry for a camera rig on a grid.
#[derive(Clone, Debug)]
pub struct LiftGeometry {
    pub tables: Vec<Arc<SplatTable>>,
}

impl LiftGeometry {
    pub fn new(cameras: &[CameraModel], cfg: &EncoderConfig, spec: &GridSpec) -> Self {
        let bins = cfg.bin_depths();
        let tables = cameras
            .iter()
            .map(|c| Arc::new(splat_table(c, cfg.feature_dims(c.height, c.width), cfg.total_stride(), &bins, spec)))
            .collect();
        Self { tables }
    }
}

/// Encodes every camera of one frame and sums their lifts; the result is
/// in that frame's ego coordinates. Depth logits of each camera are pushed
/// to `depth_logits` when given.
pub fn lift_frame(
    g: &mut Graph,
    store: &ParamStore,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    geometry: &LiftGeometry,
    images: &[CameraImage],
    mut depth_logits: Option<&mut Vec<Var>>,
) -> Result<Var> {
    if images.len() != geometry.tables.len() {
        return Err(shape_err("lift_frame", format!("{} images for {} cameras", images.len(), geometry.tables.len())));
    }
    let mut acc: Option<Var> = None;
    for (img, table) in images.iter().zip(&geometry.tables) {
        let x = g.input(image_tensor(img, cfg));
        let e = encode_image_graph(g, store, params, x)?;
        if let Some(out) = depth_logits.as_deref_mut() {
            out.push(e.depth_logits);
        }
        let v = g.splat(e.features, e.depth_probs, table.clone())?;
        acc = Some(match acc {
            Some(a) => g.add(a, v)?,
            None => v,
        });
    }
    acc.ok_or_else(|| shape_err("lift_frame", "no cameras".into()))
}

/// Aligns per-frame lifted features into the ego frame of the last pose.
/// `frames` pairs each frame's lifted feature with its ego pose, oldest
/// first; the output keeps that order.
pub fn align_sequence(g: &mut Graph, spec: &GridSpec, frames: &[(Var, EgoPose)]) -> Result<Vec<Var>> {
    let (_, cur) = frames.last().ok_or(Error::InsufficientFrames { needed: 1, available: 0 })?;
    frames
        .iter()
        .map(|(v, pose)| {
            if pose.rotation == cur.rotation && pose.translation == cur.translation {
                Ok(*v)
            } else {
                g.resample(*v, Arc::new(warp_table(spec, pose, cur)))
            }
        })
        .collect()
}

/// `[V_{t-N}, ..., V_t]` for frames `t-N..=t`, each encoded, lifted over
/// all cameras, and warped into frame `t`.
#[allow(clippy::too_many_arguments)]
pub fn build_temporal_sequence(
    g: &mut Graph,
    store: &ParamStore,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    geometry: &LiftGeometry,
    spec: &GridSpec,
    frames: &[(&[CameraImage], EgoPose)],
    history: usize,
) -> Result<Vec<Var>> {
    if frames.len() < history + 1 {
        return Err(Error::InsufficientFrames { needed: history + 1, available: frames.len() });
    }
    let used = &frames[frames.len() - history - 1..];
    let mut lifted = Vec::with_capacity(used.len());
    for (images, pose) in used {
        lifted.push((lift_frame(g, store, params, cfg, geometry, images, None)?, *pose));
    }
    align_sequence(g, spec, &lifted)
}

#[cfg(test)]
mod tests;
