//! Flat key-value training configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use teocc_core::camnet::EncoderConfig;
use teocc_core::model::ModelConfig;
use teocc_core::optim::AdamConfig;
use teocc_core::scenesim::SimConfig;
use teocc_core::tempenh::ResNetConfig;
use teocc_core::train::TrainSettings;
use teocc_core::GridSpec;

use crate::error::{io_err, Error, Result};

/// Every key is optional in a config file; missing keys take the desk
/// defaults and unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Dataset root holding `episode_*` directories.
    pub data_dir: String,
    /// The last `val_episodes` episodes are held out for validation.
    pub val_episodes: usize,

    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub z_range: [f64; 2],
    pub voxel_size: f64,

    pub frames_per_episode: usize,
    pub num_cameras: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub num_cars: usize,
    pub num_pedestrians: usize,
    pub num_buildings: usize,
    pub num_barriers: usize,

    pub history: usize,
    pub encoder_channels: [usize; 3],
    pub depth_bins: usize,
    pub depth_range: [f64; 2],
    pub radar_channels: usize,
    pub fused_channels: usize,
    pub head_hidden: usize,
    pub decoder_channels: [usize; 3],
    pub decoder_blocks: usize,
    pub radar_max_points: usize,

    pub use_radar: bool,
    pub use_long: bool,
    pub use_short: bool,
    pub random_mask: bool,
    pub shared_head: bool,
    pub fused_decoders: bool,
    pub temporal_fusion: bool,
    pub flip_aug: bool,
    pub loss_weights: [f64; 3],
    pub depth_loss_weight: f64,

    pub lr: f64,
    pub min_lr_ratio: f64,
    pub clip_norm: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Validation period in steps; 0 validates only at the end.
    pub eval_every: usize,
    /// Training-loss logging period in steps.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let sim = SimConfig::default();
        let model = ModelConfig::default();
        let grid = &sim.grid;
        Self {
            data_dir: "data".into(),
            val_episodes: 40,
            x_range: grid.range(0),
            y_range: grid.range(1),
            z_range: grid.range(2),
            voxel_size: grid.voxel_size()[0],
            frames_per_episode: sim.num_frames,
            num_cameras: sim.num_cameras,
            image_height: sim.image_height,
            image_width: sim.image_width,
            num_cars: sim.num_cars,
            num_pedestrians: sim.num_pedestrians,
            num_buildings: sim.num_buildings,
            num_barriers: sim.num_barriers,
            history: model.history,
            encoder_channels: model.encoder.channels,
            depth_bins: model.encoder.depth_bins,
            depth_range: model.encoder.depth_range,
            radar_channels: model.radar_channels,
            fused_channels: model.fused_channels,
            head_hidden: model.head_hidden,
            decoder_channels: model.resnet.channels,
            decoder_blocks: model.resnet.blocks,
            radar_max_points: model.radar_max_points,
            use_radar: model.use_radar,
            use_long: model.use_long,
            use_short: model.use_short,
            random_mask: model.random_mask,
            shared_head: model.shared_head,
            fused_decoders: model.fused_decoders,
            temporal_fusion: model.temporal_fusion,
            flip_aug: true,
            loss_weights: model.loss_weights,
            depth_loss_weight: model.depth_loss_weight,
            lr: 1e-3,
            min_lr_ratio: 0.0,
            clip_norm: 0.0,
            steps: 2000,
            batch_size: 2,
            seed: 0,
            eval_every: 500,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {}", path.display(), m)),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn grid(&self) -> Result<GridSpec> {
        Ok(GridSpec::cubic(self.x_range, self.y_range, self.z_range, self.voxel_size)?)
    }

    pub fn sim_config(&self) -> Result<SimConfig> {
        let sim = SimConfig {
            grid: self.grid()?,
            num_frames: self.frames_per_episode,
            num_cameras: self.num_cameras,
            image_height: self.image_height,
            image_width: self.image_width,
            num_cars: self.num_cars,
            num_pedestrians: self.num_pedestrians,
            num_buildings: self.num_buildings,
            num_barriers: self.num_barriers,
            ..SimConfig::default()
        };
        sim.validate()?;
        Ok(sim)
    }

    pub fn model_config(&self, num_classes: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            grid: self.grid()?,
            num_classes,
            history: self.history,
            encoder: EncoderConfig {
                channels: self.encoder_channels,
                depth_bins: self.depth_bins,
                depth_range: self.depth_range,
                ..EncoderConfig::default()
            },
            radar_channels: self.radar_channels,
            fused_channels: self.fused_channels,
            head_hidden: self.head_hidden,
            resnet: ResNetConfig { channels: self.decoder_channels, blocks: self.decoder_blocks },
            radar_max_points: self.radar_max_points,
            use_radar: self.use_radar,
            use_long: self.use_long,
            use_short: self.use_short,
            random_mask: self.random_mask,
            shared_head: self.shared_head,
            fused_decoders: self.fused_decoders,
            temporal_fusion: self.temporal_fusion,
            loss_weights: self.loss_weights,
            class_weights: None,
            depth_loss_weight: self.depth_loss_weight,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            adam: AdamConfig { lr: self.lr, min_lr_ratio: self.min_lr_ratio, clip_norm: self.clip_norm, ..AdamConfig::default() },
            steps: self.steps,
            batch_size: self.batch_size,
            flip_aug: self.flip_aug,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..=1.0).contains(&self.min_lr_ratio) || self.clip_norm < 0.0 {
            return bad("lr must be positive, min_lr_ratio in [0, 1], clip_norm non-negative");
        }
        if self.log_every == 0 {
            return bad("log_every must be positive");
        }
        if self.frames_per_episode <= self.history {
            return bad("frames_per_episode must exceed history");
        }
        self.sim_config()?;
        self.model_config(teocc_core::SemanticLabelSet::desk().num_classes())?;
        Ok(())
    }
}
