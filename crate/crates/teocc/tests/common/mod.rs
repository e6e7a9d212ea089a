#![allow(dead_code)]

use std::path::Path;

use teocc::harness::{generate_episodes, Dataset};
use teocc::TrainConfig;
use teocc_core::scenesim::Episode;

/// 8x8x4 grid, two small cameras, a few steps of training.
pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        x_range: [-3.2, 3.2],
        y_range: [-3.2, 3.2],
        z_range: [-0.8, 2.4],
        voxel_size: 0.8,
        frames_per_episode: 4,
        num_cameras: 2,
        image_height: 12,
        image_width: 16,
        num_cars: 0,
        num_pedestrians: 1,
        num_buildings: 0,
        num_barriers: 1,
        history: 2,
        encoder_channels: [4, 4, 3],
        depth_bins: 4,
        depth_range: [0.5, 6.5],
        radar_channels: 3,
        fused_channels: 5,
        head_hidden: 5,
        decoder_channels: [3, 4, 4],
        decoder_blocks: 1,
        radar_max_points: 8,
        steps: 4,
        batch_size: 2,
        eval_every: 2,
        log_every: 1,
        val_episodes: 1,
        seed: 7,
        ..TrainConfig::default()
    }
}

pub fn tiny_episodes(count: usize) -> Vec<Episode> {
    generate_episodes(&tiny_config(), count, 100).unwrap()
}

pub fn tiny_dataset() -> Dataset {
    Dataset::split(tiny_episodes(3), 1).unwrap()
}

pub fn write_config(cfg: &TrainConfig, path: &Path) {
    std::fs::write(path, cfg.to_toml()).unwrap();
}
