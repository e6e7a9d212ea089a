use super::*;
use crate::camnet::LiftGeometry;
use crate::gradcheck;
use crate::params::ParamId;
use crate::scenesim::{generate_episode, SimConfig};

pub(crate) fn tiny_grid() -> GridSpec {
    GridSpec::cubic([-3.2, 3.2], [-3.2, 3.2], [-0.8, 2.4], 0.8).unwrap()
}

pub(crate) fn tiny_config() -> ModelConfig {
    ModelConfig {
        grid: tiny_grid(),
        history: 2,
        encoder: EncoderConfig { channels: [4, 4, 3], depth_bins: 4, depth_range: [0.5, 6.5], ..Default::default() },
        radar_channels: 3,
        fused_channels: 5,
        head_hidden: 5,
        resnet: ResNetConfig { channels: [3, 4, 4], blocks: 1 },
        ..ModelConfig::default()
    }
}

pub(crate) fn tiny_sim(frames: usize) -> SimConfig {
    SimConfig {
        grid: tiny_grid(),
        num_frames: frames,
        ego_speed: [1.0, 2.0],
        num_cars: 1,
        num_pedestrians: 1,
        num_buildings: 0,
        num_barriers: 1,
        car_size: [2.0, 1.2, 1.2],
        barrier_size: [1.2, 0.4, 0.8],
        num_cameras: 2,
        image_height: 12,
        image_width: 16,
        radar_max_range: 10.0,
        ..SimConfig::default()
    }
}

/// A tiny model together with its lift geometry and samples.
pub(crate) fn tiny_setup(config: ModelConfig, seed: u64) -> (Model, LiftGeometry, Vec<Sample>) {
    let ep = generate_episode(&tiny_sim(config.history + 3), seed).unwrap();
    let samples = (config.history..ep.frames.len()).map(|t| Sample::from_episode(&ep, t, &config).unwrap()).collect();
    let model = Model::new(config, seed).unwrap();
    let geo = model.lift_geometry(&ep.cameras);
    (model, geo, samples)
}

fn no_te(config: ModelConfig) -> ModelConfig {
    ModelConfig { use_long: false, use_short: false, ..config }
}

fn loss_values(model: &Model, geo: &LiftGeometry, s: &Sample, mask: Option<MaskChoice>, flip: &[Axis]) -> [Option<f64>; 4] {
    let mut g = Graph::new();
    let o = model.forward_train(&mut g, geo, s, mask, flip).unwrap();
    [Some(o.total), Some(o.main), o.long, o.short].map(|v| v.map(|v| g.value(v).item()))
}

#[test]
fn config_validation() {
    assert!(tiny_config().validate().is_ok());
    assert!(ModelConfig::default().validate().is_ok());
    assert!(matches!(ModelConfig { history: 1, ..tiny_config() }.validate(), Err(Error::NoValidMask(1))));
    assert!(no_te(ModelConfig { history: 0, temporal_fusion: false, ..tiny_config() }).validate().is_ok());
    assert!(ModelConfig { fused_decoders: true, use_short: false, ..tiny_config() }.validate().is_err());
    assert!(ModelConfig { class_weights: Some(vec![1.0; 3]), ..tiny_config() }.validate().is_err());
    assert!(ModelConfig { num_classes: 1, ..tiny_config() }.validate().is_err());
}

#[test]
fn sample_from_episode_layout() {
    let cfg = tiny_config();
    let ep = generate_episode(&tiny_sim(5), 1).unwrap();
    assert!(matches!(Sample::from_episode(&ep, 1, &cfg), Err(Error::InsufficientFrames { .. })));
    assert!(Sample::from_episode(&ep, 5, &cfg).is_err());
    let s = Sample::from_episode(&ep, 4, &cfg).unwrap();
    assert_eq!(s.history(), 2);
    assert_eq!((s.images.len(), s.radar.len(), s.labels.len()), (3, 3, 3));
    assert_eq!(s.current_labels(), &ep.frames[4].gt_occupancy);
    assert_eq!(s.poses[0], ep.frames[2].ego_pose);
    assert_eq!(s.labels[0], ep.labels_in_frame(2, 4));
    assert_eq!(s.depth_targets.len(), 2);
    let (fh, fw) = cfg.encoder.feature_dims(12, 16);
    for t in &s.depth_targets {
        assert_eq!(t.len(), fh * fw);
        assert!(t.iter().all(|&b| b == IGNORE_LABEL || (b as usize) < cfg.encoder.depth_bins));
    }
}

#[test]
fn te_params_exist_only_when_enabled() {
    let full = Model::new(tiny_config(), 0).unwrap();
    let base = Model::new(no_te(tiny_config()), 0).unwrap();
    for group in TE_GROUPS {
        assert!(base.store.group_ids(group).is_empty());
    }
    assert!(!full.store.group_ids(GROUP_DECODER_LONG).is_empty());
    assert!(!full.store.group_ids(GROUP_FUSION_SHORT).is_empty());
    assert!(full.store.group_ids(GROUP_AUX_HEAD).is_empty());
    let aux = Model::new(ModelConfig { shared_head: false, ..tiny_config() }, 0).unwrap();
    assert!(!aux.store.group_ids(GROUP_AUX_HEAD).is_empty());
}

#[test]
fn main_branch_init_does_not_depend_on_te() {
    let full = Model::new(tiny_config(), 7).unwrap();
    let base = Model::new(no_te(tiny_config()), 7).unwrap();
    for (_, p) in base.store.iter() {
        let id = full.store.find(&p.name).unwrap();
        assert_eq!(full.store.get(id), &p.value, "{}", p.name);
    }
}

#[test]
fn disabled_te_gives_main_loss_only() {
    let (model, geo, samples) = tiny_setup(no_te(tiny_config()), 2);
    let [total, main, long, short] = loss_values(&model, &geo, &samples[0], None, &[]);
    assert_eq!((long, short), (None, None));
    assert_eq!(total.unwrap().to_bits(), main.unwrap().to_bits());
}

#[test]
fn total_is_weighted_sum_of_terms() {
    let cfg = ModelConfig { loss_weights: [1.0, 0.5, 2.0], ..tiny_config() };
    let (model, geo, samples) = tiny_setup(cfg, 3);
    let [total, main, long, short] = loss_values(&model, &geo, &samples[0], MaskChoice::new(2, 1).ok(), &[]);
    let expect = main.unwrap() + 0.5 * long.unwrap() + 2.0 * short.unwrap();
    assert!((total.unwrap() - expect).abs() < 1e-12);
}

#[test]
fn forward_is_deterministic() {
    let (a, geo, samples) = tiny_setup(tiny_config(), 4);
    let (b, _, _) = tiny_setup(tiny_config(), 4);
    let m = MaskChoice::new(2, 1).ok();
    assert_eq!(loss_values(&a, &geo, &samples[1], m, &[Axis::Y]), loss_values(&b, &geo, &samples[1], m, &[Axis::Y]));
    assert_eq!(a.infer(&geo, &samples[0]).unwrap(), b.infer(&geo, &samples[0]).unwrap());
}

#[test]
fn double_flip_is_identity() {
    let (model, geo, samples) = tiny_setup(tiny_config(), 5);
    let m = MaskChoice::new(2, 1).ok();
    let plain = loss_values(&model, &geo, &samples[0], m, &[]);
    for a in [Axis::X, Axis::Y] {
        let twice = loss_values(&model, &geo, &samples[0], m, &[a, a]);
        for (p, t) in plain.iter().zip(&twice) {
            assert!((p.unwrap() - t.unwrap()).abs() < 1e-12);
        }
    }
    assert_ne!(loss_values(&model, &geo, &samples[0], m, &[Axis::X]), plain);
}

#[test]
fn flip_mirrors_targets_with_features() {
    // With every conv reduced to its centre tap and no radar, the network
    // is flip-equivariant, so flipping inputs and labels together leaves
    // the main loss unchanged.
    let cfg = ModelConfig { use_radar: false, ..no_te(tiny_config()) };
    let (mut model, geo, samples) = tiny_setup(cfg, 6);
    let ids: Vec<ParamId> = [GROUP_FUSION_MAIN].iter().flat_map(|g| model.store.group_ids(g)).collect();
    for id in ids {
        let t = model.store.get_mut(id);
        if t.shape().len() == 5 {
            let k = t.shape()[2..].iter().product::<usize>();
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                if i % k != k / 2 {
                    *v = 0.0;
                }
            }
        }
    }
    let plain = loss_values(&model, &geo, &samples[0], None, &[]);
    let flipped = loss_values(&model, &geo, &samples[0], None, &[Axis::X, Axis::Y]);
    assert!((plain[1].unwrap() - flipped[1].unwrap()).abs() < 1e-9);
}

#[test]
fn encoder_receives_gradient_from_temporal_losses() {
    let (model, geo, samples) = tiny_setup(tiny_config(), 8);
    for pick in [0, 1] {
        let mut g = Graph::new();
        let o = model.forward_train(&mut g, &geo, &samples[0], MaskChoice::new(2, 1).ok(), &[]).unwrap();
        let loss = [o.long, o.short][pick].unwrap();
        let gr = g.backward(loss);
        let enc: f64 = model.store.group_ids(GROUP_ENCODER).iter().filter_map(|&id| gr.param(id)).map(|t| t.max_abs()).fold(0.0, f64::max);
        assert!(enc > 0.0);
        let head: f64 = model.store.group_ids(GROUP_HEAD).iter().filter_map(|&id| gr.param(id)).map(|t| t.max_abs()).fold(0.0, f64::max);
        assert!(head > 0.0, "shared head must learn from the temporal losses");
        let main_fusion = model.store.group_ids(GROUP_FUSION_MAIN).iter().filter_map(|&id| gr.param(id)).count();
        assert_eq!(main_fusion, 0);
    }
}

#[test]
fn main_loss_gradient_skips_te_parameters() {
    let (model, geo, samples) = tiny_setup(tiny_config(), 9);
    let mut g = Graph::new();
    let o = model.forward_train(&mut g, &geo, &samples[0], MaskChoice::new(2, 1).ok(), &[]).unwrap();
    let gr = g.backward(o.main);
    for group in TE_GROUPS {
        assert!(model.store.group_ids(group).iter().all(|&id| gr.param(id).is_none()));
    }
}

#[test]
fn inference_ignores_te_parameters() {
    let (mut model, geo, samples) = tiny_setup(tiny_config(), 10);
    let before = model.infer(&geo, &samples[0]).unwrap();
    let te: Vec<ParamId> = TE_GROUPS.iter().flat_map(|g| model.store.group_ids(g)).collect();
    assert!(!te.is_empty());
    for id in te {
        model.store.get_mut(id).fill(f64::NAN);
    }
    assert_eq!(model.infer(&geo, &samples[0]).unwrap(), before);
}

#[test]
fn removing_te_branch_keeps_predictions_bit_identical() {
    let (full, geo, samples) = tiny_setup(tiny_config(), 11);
    let mut base = Model::new(no_te(tiny_config()), 99).unwrap();
    let main: Vec<(String, Tensor)> = base.store.iter().map(|(_, p)| p.name.clone()).map(|n| {
        let v = full.store.get(full.store.find(&n).unwrap()).clone();
        (n, v)
    }).collect();
    base.load_values(main.iter().map(|(n, t)| (n.as_str(), t.clone()))).unwrap();
    for s in &samples {
        let a = full.infer(&geo, s).unwrap();
        let b = base.infer(&geo, s).unwrap();
        assert!(a.logits.data().iter().zip(b.logits.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn load_values_checks_names_and_shapes() {
    let mut m = Model::new(tiny_config(), 0).unwrap();
    let all: Vec<(String, Tensor)> = m.store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
    assert!(matches!(m.load_values(all[1..].iter().map(|(n, t)| (n.as_str(), t.clone()))), Err(Error::MissingParam(_))));
    let mut bad = all.clone();
    bad[0].1 = Tensor::zeros(&[1]);
    assert!(matches!(m.load_values(bad.iter().map(|(n, t)| (n.as_str(), t.clone()))), Err(Error::SpecMismatch(_))));
    assert!(m.load_values([("nope", Tensor::zeros(&[1]))]).is_err());
    assert!(m.load_values(all.iter().map(|(n, t)| (n.as_str(), t.clone()))).is_ok());
}

#[test]
fn fused_decoders_report_one_temporal_loss() {
    let (model, geo, samples) = tiny_setup(ModelConfig { fused_decoders: true, ..tiny_config() }, 12);
    let [total, main, long, short] = loss_values(&model, &geo, &samples[0], MaskChoice::new(2, 1).ok(), &[]);
    assert!(short.is_none());
    assert!((total.unwrap() - main.unwrap() - long.unwrap()).abs() < 1e-12);
}

#[test]
fn depth_loss_adds_when_weighted() {
    let (model, geo, samples) = tiny_setup(ModelConfig { depth_loss_weight: 0.5, ..no_te(tiny_config()) }, 13);
    let mut g = Graph::new();
    let o = model.forward_train(&mut g, &geo, &samples[0], None, &[]).unwrap();
    let d = g.value(o.depth.unwrap()).item();
    assert!(d > 0.0);
    assert!((g.value(o.total).item() - g.value(o.main).item() - 0.5 * d).abs() < 1e-12);
}

#[test]
fn full_objective_gradients_match_finite_differences() {
    let (mut model, geo, samples) = tiny_setup(tiny_config(), 14);
    let cfg = model.config.clone();
    let params = model.params.clone();
    // Offset biases so no ReLU sits exactly on its kink.
    let ids: Vec<ParamId> = model.store.iter().filter(|(_, p)| p.name.ends_with("bias") || p.name.ends_with("beta")).map(|(id, _)| id).collect();
    for (k, id) in ids.into_iter().enumerate() {
        model.store.get_mut(id).data_mut().iter_mut().enumerate().for_each(|(i, v)| *v += 0.05 * (((k + i) % 5) as f64 - 2.0) + 0.01);
    }
    let sample = samples[0].clone();
    let r = gradcheck::check(
        &mut model.store,
        |g, s| {
            let m = Model { config: cfg.clone(), store: s.clone(), params: params.clone() };
            let o = m.forward_train(g, &geo, &sample, MaskChoice::new(2, 1).ok(), &[Axis::X])?;
            Ok(o.total)
        },
        // Many voxels sit near a ReLU kink; a wide step straddles some.
        1e-7,
        2,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-3, "{:?}", r);
}
