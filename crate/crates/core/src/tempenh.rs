//! Temporal enhancement: random frame masking and the long-term
//! (ResNet-3D + FPN-3D) and short-term (two 3D convs) decoders that
//! reconstruct the masked voxel feature.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ResampleTable, Var};
use crate::camnet::{trilinear_taps, ConvNormParams, ConvParams};
use crate::error::{shape_err, Error, Result};
use crate::params::ParamStore;

/// Which historical frame is masked: `V_{t-k}` sits at `index = N - k` of
/// the aligned sequence `[V_{t-N}, ..., V_t]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskChoice {
    pub k: usize,
    pub index: usize,
}

impl MaskChoice {
    pub fn new(history: usize, k: usize) -> Result<Self> {
        if history < 2 {
            return Err(Error::NoValidMask(history));
        }
        if k == 0 || k >= history {
            return Err(Error::InvalidConfig(format!("mask offset {} outside 1..{}", k, history)));
        }
        Ok(Self { k, index: history - k })
    }
}

/// Draws `k` uniformly from `1..=N-1`.
pub fn select_mask_index(history: usize, rng: &mut crate::Rng) -> Result<MaskChoice> {
    if history < 2 {
        return Err(Error::NoValidMask(history));
    }
    MaskChoice::new(history, rng.random_range(1..history))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResNetConfig {
    pub channels: [usize; 3],
    pub blocks: usize,
}

impl Default for ResNetConfig {
    fn default() -> Self {
        Self { channels: [32, 64, 128], blocks: 2 }
    }
}

pub const STAGE_STRIDES: [usize; 3] = [1, 2, 2];

#[derive(Clone, Debug, PartialEq)]
pub struct BasicBlockParams {
    pub conv1: ConvNormParams,
    pub conv2: ConvNormParams,
    /// 1x1x1 projection on the skip path when stride or width change.
    pub proj: Option<ConvNormParams>,
}

impl BasicBlockParams {
    pub fn init(store: &mut ParamStore, group: &str, name: &str, cin: usize, cout: usize, stride: usize, rng: &mut crate::Rng) -> Self {
        let proj = (stride != 1 || cin != cout)
            .then(|| ConvNormParams::init(store, group, &format!("{}.proj", name), cin, cout, &[1, 1, 1], rng));
        Self {
            conv1: ConvNormParams::init(store, group, &format!("{}.conv1", name), cin, cout, &[3, 3, 3], rng),
            conv2: ConvNormParams::init(store, group, &format!("{}.conv2", name), cout, cout, &[3, 3, 3], rng),
            proj,
        }
    }
}

pub fn basicblock3d(g: &mut Graph, store: &ParamStore, p: &BasicBlockParams, x: Var, stride: usize) -> Result<Var> {
    let h = p.conv1.forward(g, store, x, stride)?;
    let h = p.conv2.conv_norm(g, store, h, 1)?;
    let skip = match &p.proj {
        Some(proj) => proj.conv_norm(g, store, x, stride)?,
        None if stride == 1 => x,
        None => return Err(shape_err("basicblock3d", format!("stride {} without projection", stride))),
    };
    let y = g.add(h, skip)?;
    Ok(g.relu(y))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResNet3dParams {
    pub stages: Vec<Vec<BasicBlockParams>>,
}

impl ResNet3dParams {
    pub fn init(store: &mut ParamStore, group: &str, cin: usize, cfg: &ResNetConfig, rng: &mut crate::Rng) -> Self {
        let mut c = cin;
        let stages = (0..3)
            .map(|s| {
                (0..cfg.blocks.max(1))
                    .map(|b| {
                        let stride = if b == 0 { STAGE_STRIDES[s] } else { 1 };
                        let blk = BasicBlockParams::init(store, group, &format!("stage{}.block{}", s, b), c, cfg.channels[s], stride, rng);
                        c = cfg.channels[s];
                        blk
                    })
                    .collect()
            })
            .collect();
        Self { stages }
    }
}

/// Stage outputs at full, half and quarter resolution.
pub fn resnet3d_forward(g: &mut Graph, store: &ParamStore, p: &ResNet3dParams, x: Var) -> Result<[Var; 3]> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[1..].iter().any(|&d| d < 4) {
        return Err(shape_err("resnet3d", format!("input {:?} too small for two halvings", s)));
    }
    let mut h = x;
    let mut outs = [x; 3];
    for (i, stage) in p.stages.iter().enumerate() {
        for (b, blk) in stage.iter().enumerate() {
            h = basicblock3d(g, store, blk, h, if b == 0 { STAGE_STRIDES[i] } else { 1 })?;
        }
        outs[i] = h;
    }
    Ok(outs)
}

/// Trilinear resampling from `src` to `dst` dims with half-pixel centers
/// and edge clamping.
pub fn upsample_table(src: [usize; 3], dst: [usize; 3]) -> ResampleTable {
    let n: usize = dst.iter().product();
    let rows = (0..n)
        .map(|f| {
            let idx = [f / (dst[1] * dst[2]), (f / dst[2]) % dst[1], f % dst[2]];
            let c = core::array::from_fn(|a| (idx[a] as f64 + 0.5) * src[a] as f64 / dst[a] as f64 - 0.5);
            trilinear_taps(c, src, true)
        })
        .collect();
    ResampleTable::from_rows(src, dst, rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fpn3dParams {
    pub conv: ConvNormParams,
}

impl Fpn3dParams {
    pub fn init(store: &mut ParamStore, group: &str, cfg: &ResNetConfig, cout: usize, rng: &mut crate::Rng) -> Self {
        let cin = cfg.channels.iter().sum();
        Self { conv: ConvNormParams::init(store, group, "fpn.conv", cin, cout, &[3, 3, 3], rng) }
    }
}

fn spatial(g: &Graph, v: Var) -> Result<[usize; 3]> {
    let s = g.shape(v);
    if s.len() != 4 {
        return Err(shape_err("fpn3d", format!("expected (C, X, Y, Z), got {:?}", s)));
    }
    Ok([s[1], s[2], s[3]])
}

/// Upsamples the coarser scales to full resolution, concatenates and
/// fuses with one conv -> norm -> ReLU.
pub fn fpn3d_forward(g: &mut Graph, store: &ParamStore, p: &Fpn3dParams, scales: [Var; 3]) -> Result<Var> {
    let full = spatial(g, scales[0])?;
    let mut expect = full;
    let mut parts = Vec::with_capacity(3);
    parts.push(scales[0]);
    for &v in &scales[1..] {
        expect = expect.map(|d| d.div_ceil(2));
        let dims = spatial(g, v)?;
        if dims != expect {
            return Err(shape_err("fpn3d", format!("scale {:?}, expected {:?}", dims, expect)));
        }
        parts.push(g.resample(v, Arc::new(upsample_table(dims, full)))?);
    }
    let cat = g.concat(&parts)?;
    p.conv.forward(g, store, cat, 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LongTermParams {
    pub resnet: ResNet3dParams,
    pub fpn: Fpn3dParams,
}

impl LongTermParams {
    /// `cin = N * C_img + C_radar`.
    pub fn init(store: &mut ParamStore, group: &str, cin: usize, c_img: usize, cfg: &ResNetConfig, rng: &mut crate::Rng) -> Self {
        Self { resnet: ResNet3dParams::init(store, group, cin, cfg, rng), fpn: Fpn3dParams::init(store, group, cfg, c_img, rng) }
    }
}

fn same_spatial(g: &Graph, op: &'static str, vars: &[Var]) -> Result<()> {
    let first = &g.shape(vars[0])[1..];
    if let Some(v) = vars.iter().find(|&&v| g.shape(v).len() != 4 || &g.shape(v)[1..] != first) {
        return Err(shape_err(op, format!("{:?} vs {:?}", g.shape(*v), g.shape(vars[0]))));
    }
    Ok(())
}

/// `remaining` is the aligned sequence with the masked frame removed, in
/// temporal order.
pub fn long_term_decode(g: &mut Graph, store: &ParamStore, p: &LongTermParams, remaining: &[Var], radar: Var) -> Result<Var> {
    let mut parts = remaining.to_vec();
    parts.push(radar);
    same_spatial(g, "long_term_decode", &parts)?;
    let x = g.concat(&parts)?;
    let scales = resnet3d_forward(g, store, &p.resnet, x)?;
    fpn3d_forward(g, store, &p.fpn, scales)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShortTermParams {
    pub conv1: ConvParams,
    pub conv2: ConvParams,
}

impl ShortTermParams {
    /// `cin = 2 * C_img + C_radar`.
    pub fn init(store: &mut ParamStore, group: &str, cin: usize, c_img: usize, rng: &mut crate::Rng) -> Self {
        Self {
            conv1: ConvParams::init(store, group, "conv1", cin, c_img, &[3, 3, 3], rng),
            conv2: ConvParams::init(store, group, "conv2", c_img, c_img, &[3, 3, 3], rng),
        }
    }
}

pub fn short_term_decode(g: &mut Graph, store: &ParamStore, p: &ShortTermParams, prev: Var, next: Var, radar: Var) -> Result<Var> {
    same_spatial(g, "short_term_decode", &[prev, next, radar])?;
    let x = g.concat(&[prev, next, radar])?;
    let h = p.conv1.forward(g, store, x, 1)?;
    let h = g.relu(h);
    p.conv2.forward(g, store, h, 1)
}

/// The sequence without the masked frame and the masked frame's two
/// neighbours.
pub fn split_for_mask(sequence: &[Var], mask: MaskChoice) -> Result<(Vec<Var>, Var, Var)> {
    let history = sequence.len().checked_sub(1).ok_or(Error::InsufficientFrames { needed: 3, available: 0 })?;
    if mask.index == 0 || mask.index >= history || mask.index != history - mask.k {
        return Err(Error::InvalidConfig(format!("mask {:?} for history {}", mask, history)));
    }
    let remaining = sequence.iter().enumerate().filter(|&(i, _)| i != mask.index).map(|(_, &v)| v).collect();
    Ok((remaining, sequence[mask.index - 1], sequence[mask.index + 1]))
}
