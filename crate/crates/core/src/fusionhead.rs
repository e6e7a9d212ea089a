//! Radar-camera fusion layers, the shared occupancy head, and the losses.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::camnet::{ConvNormParams, ConvParams};
use crate::error::{shape_err, Error, Result};
use crate::grid::{GridSpec, OccupancyLabelGrid, VoxelFeatureGrid};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Main,
    Long,
    Short,
}

/// Three independent fusion layers. The temporal ones only exist when the
/// corresponding decoder does.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub main: ConvNormParams,
    pub long: Option<ConvNormParams>,
    pub short: Option<ConvNormParams>,
}

impl FusionParams {
    pub fn layer(&self, branch: Branch) -> Result<&ConvNormParams> {
        match branch {
            Branch::Main => Some(&self.main),
            Branch::Long => self.long.as_ref(),
            Branch::Short => self.short.as_ref(),
        }
        .ok_or_else(|| Error::MissingParam(format!("fusion layer for {:?}", branch)))
    }
}

pub fn init_fusion_layer(store: &mut ParamStore, group: &str, cin: usize, cout: usize, rng: &mut crate::Rng) -> ConvNormParams {
    ConvNormParams::init(store, group, "conv", cin, cout, &[3, 3, 3], rng)
}

/// Channel concat of image and radar features, then conv -> norm -> ReLU.
pub fn fuse_graph(g: &mut Graph, store: &ParamStore, layer: &ConvNormParams, img: Var, radar: Var) -> Result<Var> {
    if g.shape(img).len() != 4 || g.shape(img)[1..] != g.shape(radar)[1..] {
        return Err(shape_err("fuse", format!("image {:?} vs radar {:?}", g.shape(img), g.shape(radar))));
    }
    let x = g.concat(&[img, radar])?;
    layer.forward(g, store, x, 1)
}

pub fn fuse(
    img: &VoxelFeatureGrid,
    radar: &VoxelFeatureGrid,
    branch: Branch,
    params: &FusionParams,
    store: &ParamStore,
) -> Result<VoxelFeatureGrid> {
    img.spec.ensure_same(&radar.spec)?;
    let mut g = Graph::new();
    let a = g.input(img.tensor.clone());
    let b = g.input(radar.tensor.clone());
    let y = fuse_graph(&mut g, store, params.layer(branch)?, a, b)?;
    VoxelFeatureGrid::new(img.spec.clone(), g.value(y).clone())
}

/// Per-voxel MLP `C_fused -> H -> num_classes` as two pointwise convs.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub hidden: ConvParams,
    pub out: ConvParams,
}

impl HeadParams {
    pub fn init(store: &mut ParamStore, group: &str, cin: usize, hidden: usize, classes: usize, rng: &mut crate::Rng) -> Self {
        Self {
            hidden: ConvParams::init(store, group, "fc1", cin, hidden, &[1, 1, 1], rng),
            out: ConvParams::init(store, group, "fc2", hidden, classes, &[1, 1, 1], rng),
        }
    }

    pub fn in_channels(&self, store: &ParamStore) -> usize {
        store.get(self.hidden.weight).shape()[1]
    }
}

pub fn occ_head_graph(g: &mut Graph, store: &ParamStore, head: &HeadParams, feat: Var) -> Result<Var> {
    let c = head.in_channels(store);
    if g.shape(feat).len() != 4 || g.shape(feat)[0] != c {
        return Err(shape_err("occ_head", format!("feature {:?} for a {}-channel head", g.shape(feat), c)));
    }
    let h = head.hidden.forward(g, store, feat, 1)?;
    let h = g.relu(h);
    head.out.forward(g, store, h, 1)
}

/// Class logits `(num_classes, nx, ny, nz)`.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyPrediction {
    pub spec: GridSpec,
    pub logits: Tensor,
}

impl OccupancyPrediction {
    pub fn new(spec: GridSpec, logits: Tensor) -> Result<Self> {
        let s = logits.shape();
        if s.len() != 4 || s[1..] != spec.dims() || s[0] < 2 {
            return Err(shape_err("OccupancyPrediction", format!("logits {:?} on grid {:?}", s, spec.dims())));
        }
        if !logits.is_finite() {
            return Err(shape_err("OccupancyPrediction", "non-finite logits".into()));
        }
        Ok(Self { spec, logits })
    }

    pub fn num_classes(&self) -> usize {
        self.logits.shape()[0]
    }

    /// Argmax over classes; ties go to the lower class id.
    pub fn labels(&self) -> OccupancyLabelGrid {
        let k = self.num_classes();
        let n = self.logits.inner_len();
        let d = self.logits.data();
        let labels = (0..n)
            .map(|p| {
                let mut best = 0;
                for c in 1..k {
                    if d[c * n + p] > d[best * n + p] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        OccupancyLabelGrid { spec: self.spec.clone(), labels }
    }
}

pub fn occ_head(feat: &VoxelFeatureGrid, head: &HeadParams, store: &ParamStore) -> Result<OccupancyPrediction> {
    let mut g = Graph::new();
    let x = g.input(feat.tensor.clone());
    let y = occ_head_graph(&mut g, store, head, x)?;
    OccupancyPrediction::new(feat.spec.clone(), g.value(y).clone())
}

pub fn label_targets(gt: &OccupancyLabelGrid) -> Arc<Vec<u32>> {
    Arc::new(gt.labels.iter().map(|&l| l as u32).collect())
}

/// Mean per-voxel cross-entropy, optionally class-weighted.
pub fn occ_loss_graph(g: &mut Graph, logits: Var, labels: Arc<Vec<u32>>, weights: Option<Arc<Vec<f64>>>) -> Result<Var> {
    g.cross_entropy(logits, labels, weights)
}

pub fn occ_loss(pred: &OccupancyPrediction, gt: &OccupancyLabelGrid) -> Result<f64> {
    pred.spec.ensure_same(&gt.spec)?;
    gt.validate(pred.num_classes())?;
    let mut g = Graph::new();
    let x = g.input(pred.logits.clone());
    let l = occ_loss_graph(&mut g, x, label_targets(gt), None)?;
    Ok(g.value(l).item())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    Train,
    Infer,
}

/// Training objective: `L_Occ + L_long + L_short`; only `L_Occ` at
/// inference.
pub fn total_loss(l_main: f64, l_long: f64, l_short: f64, mode: LossMode) -> f64 {
    weighted_total_loss(l_main, l_long, l_short, [1.0; 3], mode)
}

pub fn weighted_total_loss(l_main: f64, l_long: f64, l_short: f64, weights: [f64; 3], mode: LossMode) -> f64 {
    match mode {
        LossMode::Train => weights[0] * l_main + weights[1] * l_long + weights[2] * l_short,
        LossMode::Infer => l_main,
    }
}
