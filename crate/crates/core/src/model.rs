//! Full model: camera and radar branches, main-branch fusion and head, and
//! the training-only temporal enhancement branch.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var, IGNORE_LABEL};
use crate::camnet::{self, warp_table, ConvNormParams, EncoderConfig, EncoderParams, LiftGeometry};
use crate::error::{Error, Result};
use crate::fusionhead::{self, FusionParams, HeadParams, OccupancyPrediction};
use crate::grid::{flip_buffer, Axis, GridSpec, OccupancyLabelGrid};
use crate::params::ParamStore;
use crate::pose::EgoPose;
use crate::radarnet::{self, PillarBuffer, RadarParams};
use crate::scenesim::{CameraImage, CameraModel, Episode};
use crate::tempenh::{self, LongTermParams, MaskChoice, ResNetConfig, ShortTermParams};
use crate::tensor::Tensor;

pub const GROUP_ENCODER: &str = "encoder";
pub const GROUP_TEMPORAL: &str = "temporal";
pub const GROUP_RADAR: &str = "radar";
pub const GROUP_FUSION_MAIN: &str = "fusion.main";
pub const GROUP_FUSION_LONG: &str = "fusion.long";
pub const GROUP_FUSION_SHORT: &str = "fusion.short";
pub const GROUP_HEAD: &str = "head";
pub const GROUP_AUX_HEAD: &str = "aux_head";
pub const GROUP_DECODER_LONG: &str = "decoder.long";
pub const GROUP_DECODER_SHORT: &str = "decoder.short";

/// Parameter groups used only by the temporal enhancement branch.
pub const TE_GROUPS: [&str; 5] = [GROUP_DECODER_LONG, GROUP_DECODER_SHORT, GROUP_FUSION_LONG, GROUP_FUSION_SHORT, GROUP_AUX_HEAD];

const TE_SEED_SALT: u64 = 0x7e0c_c7e0_cc7e_0cc7;
const RADAR_SHUFFLE_SEED: u64 = 0x5ad4_5eed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub grid: GridSpec,
    pub num_classes: usize,
    /// Number of history frames N; the model sees `t-N..=t`.
    pub history: usize,
    pub encoder: EncoderConfig,
    pub radar_channels: usize,
    pub fused_channels: usize,
    pub head_hidden: usize,
    pub resnet: ResNetConfig,
    pub radar_max_points: usize,
    pub use_radar: bool,
    pub use_long: bool,
    pub use_short: bool,
    /// Draw the masked offset uniformly; otherwise always mask `t-1`.
    pub random_mask: bool,
    /// Score pseudo features with the main head; otherwise with an
    /// auxiliary head.
    pub shared_head: bool,
    /// Concatenate both pseudo features and score them once.
    pub fused_decoders: bool,
    /// Main branch aggregates all aligned frames instead of `V_t` alone.
    pub temporal_fusion: bool,
    /// Weights of the main, long and short terms.
    pub loss_weights: [f64; 3],
    pub class_weights: Option<Vec<f64>>,
    pub depth_loss_weight: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::desk(),
            num_classes: 6,
            history: 5,
            encoder: EncoderConfig::default(),
            radar_channels: 16,
            fused_channels: 64,
            head_hidden: 64,
            resnet: ResNetConfig::default(),
            radar_max_points: radarnet::DEFAULT_MAX_POINTS,
            use_radar: true,
            use_long: true,
            use_short: true,
            random_mask: true,
            shared_head: true,
            fused_decoders: false,
            temporal_fusion: true,
            loss_weights: [1.0; 3],
            class_weights: None,
            depth_loss_weight: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn image_channels(&self) -> usize {
        self.encoder.out_channels()
    }

    pub fn te_enabled(&self) -> bool {
        self.use_long || self.use_short
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_classes < 2 || self.num_classes > 256 {
            return bad(format!("num_classes {} outside 2..=256", self.num_classes));
        }
        if self.te_enabled() && self.history < 2 {
            return Err(Error::NoValidMask(self.history));
        }
        if self.fused_decoders && !(self.use_long && self.use_short) {
            return bad("fused_decoders needs both use_long and use_short".into());
        }
        if [self.radar_channels, self.fused_channels, self.head_hidden, self.radar_max_points, self.encoder.depth_bins]
            .contains(&0)
            || self.encoder.channels.contains(&0)
            || self.resnet.channels.contains(&0)
        {
            return bad("channel counts must be positive".into());
        }
        let [lo, hi] = self.encoder.depth_range;
        if !(lo > 0.0 && hi > lo) {
            return bad(format!("depth range [{}, {}]", lo, hi));
        }
        if let Some(w) = &self.class_weights {
            if w.len() != self.num_classes || w.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
                return bad(format!("class_weights needs {} non-negative entries", self.num_classes));
            }
        }
        if self.loss_weights.iter().chain([&self.depth_loss_weight]).any(|&v| !(v >= 0.0 && v.is_finite())) {
            return bad("loss weights must be finite and non-negative".into());
        }
        if self.te_enabled() && self.grid.dims().iter().any(|&d| d < 4) {
            return bad(format!("grid {:?} too small for the long-term decoder", self.grid.dims()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub temporal: Option<ConvNormParams>,
    pub radar: Option<RadarParams>,
    pub fusion: FusionParams,
    pub head: HeadParams,
    pub aux_head: Option<HeadParams>,
    pub long: Option<LongTermParams>,
    pub short: Option<ShortTermParams>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub params: ModelParams,
}

/// One training / inference example: frames `t-N..=t`, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub images: Vec<Vec<CameraImage>>,
    pub poses: Vec<EgoPose>,
    /// Radar of each frame, expressed in the ego frame of `t`.
    pub radar: Vec<PillarBuffer>,
    /// Labels of each frame's scene, expressed in the ego frame of `t`.
    pub labels: Vec<OccupancyLabelGrid>,
    /// Depth-bin target per feature pixel for each camera at `t`.
    pub depth_targets: Vec<Arc<Vec<u32>>>,
}

impl Sample {
    pub fn history(&self) -> usize {
        self.images.len() - 1
    }

    pub fn current_labels(&self) -> &OccupancyLabelGrid {
        &self.labels[self.history()]
    }

    /// Builds the sample ending at frame `t` of `episode`.
    pub fn from_episode(episode: &Episode, t: usize, config: &ModelConfig) -> Result<Self> {
        let n = config.history;
        if t >= episode.frames.len() || t < n {
            return Err(Error::InsufficientFrames { needed: n + 1, available: t.min(episode.frames.len().saturating_sub(1)) + 1 });
        }
        episode.spec().ensure_same(&config.grid)?;
        let cur = &episode.frames[t];
        let mut s = Sample {
            images: Vec::with_capacity(n + 1),
            poses: Vec::with_capacity(n + 1),
            radar: Vec::with_capacity(n + 1),
            labels: Vec::with_capacity(n + 1),
            depth_targets: Vec::new(),
        };
        for i in t - n..=t {
            let f = &episode.frames[i];
            s.images.push(f.images.clone());
            s.poses.push(f.ego_pose);
            let cloud = if i == t { f.radar.clone() } else { f.radar.transformed(&f.ego_pose, &cur.ego_pose) };
            let mut rng = crate::Rng::seed_from_u64(RADAR_SHUFFLE_SEED ^ (i as u64));
            s.radar.push(radarnet::voxelize_radar(&cloud, &config.grid, config.radar_max_points, &mut rng));
            s.labels.push(episode.labels_in_frame(i, t));
        }
        s.depth_targets = cur.images.iter().map(|img| Arc::new(depth_targets(img, &config.encoder))).collect();
        Ok(s)
    }
}

/// Depth bin of the image pixel under each feature pixel, or
/// [`IGNORE_LABEL`] where nothing was hit or the depth is out of range.
pub fn depth_targets(image: &CameraImage, cfg: &EncoderConfig) -> Vec<u32> {
    let (h, w) = cfg.feature_dims(image.height, image.width);
    let s = cfg.total_stride();
    let [lo, hi] = cfg.depth_range;
    let step = (hi - lo) / cfg.depth_bins as f64;
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let v = (s * i + s / 2).min(image.height - 1);
            let u = (s * j + s / 2).min(image.width - 1);
            let d = image.depth(v, u) as f64;
            out.push(if d >= lo && d < hi { libm::floor((d - lo) / step) as u32 } else { IGNORE_LABEL });
        }
    }
    out
}

/// Graph handles produced by one training forward pass.
#[derive(Clone, Copy, Debug)]
pub struct TrainOutputs {
    pub total: Var,
    pub main: Var,
    pub long: Option<Var>,
    pub short: Option<Var>,
    pub depth: Option<Var>,
    pub main_logits: Var,
}

impl Model {
    /// Initializes every parameter from `seed`. Main-branch parameters are
    /// drawn from their own stream, so they do not depend on which
    /// temporal-enhancement parts are enabled.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::Rng::seed_from_u64(seed);
        let mut te_rng = crate::Rng::seed_from_u64(seed ^ TE_SEED_SALT);
        let mut store = ParamStore::new();
        let c_img = config.image_channels();
        let c_r = config.radar_channels;
        let c_f = config.fused_channels;
        let n = config.history;

        let encoder = EncoderParams::init(&mut store, GROUP_ENCODER, &config.encoder, &mut rng);
        let temporal = (config.temporal_fusion && n > 0)
            .then(|| ConvNormParams::init(&mut store, GROUP_TEMPORAL, "agg", (n + 1) * c_img, c_img, &[1, 1, 1], &mut rng));
        let radar = config.use_radar.then(|| RadarParams::init(&mut store, GROUP_RADAR, c_r, &mut rng));
        let main = fusionhead::init_fusion_layer(&mut store, GROUP_FUSION_MAIN, c_img + c_r, c_f, &mut rng);
        let head = HeadParams::init(&mut store, GROUP_HEAD, c_f, config.head_hidden, config.num_classes, &mut rng);

        let long = config
            .use_long
            .then(|| LongTermParams::init(&mut store, GROUP_DECODER_LONG, n * c_img + c_r, c_img, &config.resnet, &mut te_rng));
        let short = config
            .use_short
            .then(|| ShortTermParams::init(&mut store, GROUP_DECODER_SHORT, 2 * c_img + c_r, c_img, &mut te_rng));
        let (fusion_long, fusion_short) = if config.fused_decoders {
            (Some(fusionhead::init_fusion_layer(&mut store, GROUP_FUSION_LONG, 2 * c_img + c_r, c_f, &mut te_rng)), None)
        } else {
            (
                config.use_long.then(|| fusionhead::init_fusion_layer(&mut store, GROUP_FUSION_LONG, c_img + c_r, c_f, &mut te_rng)),
                config.use_short.then(|| fusionhead::init_fusion_layer(&mut store, GROUP_FUSION_SHORT, c_img + c_r, c_f, &mut te_rng)),
            )
        };
        let aux_head = (config.te_enabled() && !config.shared_head)
            .then(|| HeadParams::init(&mut store, GROUP_AUX_HEAD, c_f, config.head_hidden, config.num_classes, &mut te_rng));

        let params = ModelParams {
            encoder,
            temporal,
            radar,
            fusion: FusionParams { main, long: fusion_long, short: fusion_short },
            head,
            aux_head,
            long,
            short,
        };
        Ok(Self { config, store, params })
    }

    pub fn lift_geometry(&self, cameras: &[CameraModel]) -> LiftGeometry {
        LiftGeometry::new(cameras, &self.config.encoder, &self.config.grid)
    }

    /// Overwrites parameter values by name. Every parameter of the model
    /// must be provided exactly once with a matching shape.
    pub fn load_values<'a, I>(&mut self, values: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, Tensor)>,
    {
        let mut seen = vec![false; self.store.len()];
        for (name, t) in values {
            let id = self.store.find(name)?;
            let slot = self.store.get_mut(id);
            if slot.shape() != t.shape() {
                return Err(Error::SpecMismatch(format!("{}: shape {:?}, expected {:?}", name, t.shape(), slot.shape())));
            }
            *slot = t;
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::MissingParam(self.store.param(crate::params::ParamId(i)).name.clone()));
        }
        Ok(())
    }

    fn check_sample(&self, sample: &Sample) -> Result<()> {
        let n = self.config.history;
        if sample.images.len() < n + 1 || sample.poses.len() != sample.images.len() || sample.radar.len() != sample.images.len() {
            return Err(Error::InsufficientFrames { needed: n + 1, available: sample.images.len() });
        }
        Ok(())
    }

    /// Aligned (and optionally flipped) `[V_{t-N}, ..., V_t]`.
    fn sequence(
        &self,
        g: &mut Graph,
        geometry: &LiftGeometry,
        sample: &Sample,
        flip: &[Axis],
        mut depth_logits: Option<&mut Vec<Var>>,
    ) -> Result<Vec<Var>> {
        let n = self.config.history;
        let first = sample.images.len() - n - 1;
        let cur = sample.poses[sample.poses.len() - 1];
        let mut seq = Vec::with_capacity(n + 1);
        for i in first..sample.images.len() {
            let logits = if i + 1 == sample.images.len() { depth_logits.as_deref_mut() } else { None };
            let v = camnet::lift_frame(g, &self.store, &self.params.encoder, &self.config.encoder, geometry, &sample.images[i], logits)?;
            let pose = sample.poses[i];
            let mut v = if pose.rotation == cur.rotation && pose.translation == cur.translation {
                v
            } else {
                g.resample(v, Arc::new(warp_table(&self.config.grid, &pose, &cur)))?
            };
            for a in flip {
                v = g.flip(v, a.index())?;
            }
            seq.push(v);
        }
        Ok(seq)
    }

    fn radar_grid(&self, g: &mut Graph, buf: &PillarBuffer, flip: &[Axis]) -> Result<Var> {
        let mut v = match &self.params.radar {
            Some(p) => radarnet::radar_grid_graph(g, &self.store, p, buf)?,
            None => {
                let [nx, ny, nz] = self.config.grid.dims();
                return Ok(g.input(Tensor::zeros(&[self.config.radar_channels, nx, ny, nz])));
            }
        };
        for a in flip {
            v = g.flip(v, a.index())?;
        }
        Ok(v)
    }

    fn main_logits(&self, g: &mut Graph, seq: &[Var], radar: Var) -> Result<Var> {
        let img = match &self.params.temporal {
            Some(agg) => {
                let cat = g.concat(seq)?;
                agg.forward(g, &self.store, cat, 1)?
            }
            None => seq[seq.len() - 1],
        };
        let fused = fusionhead::fuse_graph(g, &self.store, &self.params.fusion.main, img, radar)?;
        fusionhead::occ_head_graph(g, &self.store, &self.params.head, fused)
    }

    /// Main branch only; no temporal-enhancement parameter is touched.
    pub fn infer(&self, geometry: &LiftGeometry, sample: &Sample) -> Result<OccupancyPrediction> {
        self.check_sample(sample)?;
        let mut g = Graph::new();
        let seq = self.sequence(&mut g, geometry, sample, &[], None)?;
        let radar = self.radar_grid(&mut g, &sample.radar[sample.radar.len() - 1], &[])?;
        let logits = self.main_logits(&mut g, &seq, radar)?;
        OccupancyPrediction::new(self.config.grid.clone(), g.value(logits).clone())
    }

    fn class_weights(&self) -> Option<Arc<Vec<f64>>> {
        self.config.class_weights.clone().map(Arc::new)
    }

    fn targets(&self, labels: &OccupancyLabelGrid, flip: &[Axis]) -> Result<Arc<Vec<u32>>> {
        labels.validate(self.config.num_classes)?;
        let mut l = labels.labels.clone();
        for a in flip {
            l = flip_buffer(&l, labels.spec.dims(), a.index());
        }
        Ok(Arc::new(l.into_iter().map(u32::from).collect()))
    }

    /// Builds the full training objective on `g`. `mask` selects the masked frame
    /// when the temporal branch is enabled; `flip` mirrors every voxel
    /// quantity (features, radar, labels) along the given axes.
    pub fn forward_train(
        &self,
        g: &mut Graph,
        geometry: &LiftGeometry,
        sample: &Sample,
        mask: Option<MaskChoice>,
        flip: &[Axis],
    ) -> Result<TrainOutputs> {
        self.check_sample(sample)?;
        let cfg = &self.config;
        let mut depth_logits = Vec::new();
        let want_depth = cfg.depth_loss_weight > 0.0;
        let seq = self.sequence(g, geometry, sample, flip, want_depth.then_some(&mut depth_logits))?;
        let last = sample.radar.len() - 1;
        let radar_t = self.radar_grid(g, &sample.radar[last], flip)?;
        let main_logits = self.main_logits(g, &seq, radar_t)?;
        let weights = self.class_weights();
        let main = fusionhead::occ_loss_graph(g, main_logits, self.targets(&sample.labels[last], flip)?, weights.clone())?;
        let mut total = g.scale(main, cfg.loss_weights[0]);
        let (mut long, mut short, mut depth) = (None, None, None);

        if cfg.te_enabled() {
            let mask = match mask {
                Some(m) => m,
                None => MaskChoice::new(cfg.history, 1)?,
            };
            let (remaining, prev, next) = tempenh::split_for_mask(&seq, mask)?;
            let frame = last - cfg.history + mask.index;
            let radar_k = self.radar_grid(g, &sample.radar[frame], flip)?;
            let target = self.targets(&sample.labels[frame], flip)?;
            let head = if cfg.shared_head { &self.params.head } else { self.params.aux_head.as_ref().ok_or_else(|| Error::MissingParam("aux_head".into()))? };
            let v_long = match &self.params.long {
                Some(p) => Some(tempenh::long_term_decode(g, &self.store, p, &remaining, radar_k)?),
                None => None,
            };
            let v_short = match &self.params.short {
                Some(p) => Some(tempenh::short_term_decode(g, &self.store, p, prev, next, radar_k)?),
                None => None,
            };
            let score = |g: &mut Graph, layer: &ConvNormParams, feat: Var| -> Result<Var> {
                let fused = fusionhead::fuse_graph(g, &self.store, layer, feat, radar_k)?;
                let logits = fusionhead::occ_head_graph(g, &self.store, head, fused)?;
                fusionhead::occ_loss_graph(g, logits, target.clone(), weights.clone())
            };
            if cfg.fused_decoders {
                let (Some(a), Some(b)) = (v_long, v_short) else {
                    return Err(Error::InvalidConfig("fused_decoders needs both decoders".into()));
                };
                let cat = g.concat(&[a, b])?;
                long = Some(score(g, self.params.fusion.layer(fusionhead::Branch::Long)?, cat)?);
            } else {
                if let Some(v) = v_long {
                    long = Some(score(g, self.params.fusion.layer(fusionhead::Branch::Long)?, v)?);
                }
                if let Some(v) = v_short {
                    short = Some(score(g, self.params.fusion.layer(fusionhead::Branch::Short)?, v)?);
                }
            }
            for (l, w) in [(long, cfg.loss_weights[1]), (short, cfg.loss_weights[2])] {
                if let Some(l) = l {
                    let s = g.scale(l, w);
                    total = g.add(total, s)?;
                }
            }
        }

        if want_depth {
            let mut acc: Option<Var> = None;
            for (logits, target) in depth_logits.iter().zip(&sample.depth_targets) {
                let l = g.cross_entropy(*logits, target.clone(), None)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, l)?,
                    None => l,
                });
            }
            if let Some(a) = acc {
                let d = g.scale(a, 1.0 / depth_logits.len() as f64);
                depth = Some(d);
                let s = g.scale(d, cfg.depth_loss_weight);
                total = g.add(total, s)?;
            }
        }
        Ok(TrainOutputs { total, main, long, short, depth, main_logits })
    }
}

#[cfg(test)]
pub(crate) mod tests;
