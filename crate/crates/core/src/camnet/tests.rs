use super::*;
use crate::gradcheck;
use crate::grid::{flip_grid, Axis};
use crate::pose::EgoPose;
use crate::scenesim::{generate_episode, SimConfig};
use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};

fn rand_tensor(shape: &[usize], rng: &mut crate::Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn small_spec() -> GridSpec {
    GridSpec::cubic([-4.0, 4.0], [-4.0, 4.0], [-0.8, 2.4], 0.8).unwrap()
}

fn front_camera(h: usize, w: usize) -> CameraModel {
    CameraModel::looking(0.0, 0.2, [0.0, 0.0, 1.6], h, w, 1.6)
}

#[test]
fn encoder_default_shapes() {
    let cfg = EncoderConfig::default();
    let mut store = ParamStore::new();
    let mut rng = crate::Rng::seed_from_u64(0);
    let p = EncoderParams::init(&mut store, "encoder", &cfg, &mut rng);
    let cam = front_camera(32, 64);
    let data = (0..2 * 32 * 64).map(|i| (i % 7) as f32).collect();
    let img = CameraImage { height: 32, width: 64, data };
    let (f, d) = encode_image(&store, &p, &cfg, &cam, &img).unwrap();
    assert_eq!(f.tensor.shape(), &[32, 8, 16]);
    assert_eq!(d.probs.shape(), &[16, 8, 16]);
    assert_eq!(d.bins.len(), 16);
    assert!(d.bins.windows(2).all(|w| w[0] < w[1]));
    let n = 8 * 16;
    for p in 0..n {
        let s: f64 = (0..16).map(|b| d.probs.data()[b * n + p]).sum();
        assert!((s - 1.0).abs() < 1e-5);
        assert!((0..16).all(|b| d.probs.data()[b * n + p] >= 0.0));
    }
}

#[test]
fn encoder_rejects_wrong_image_size() {
    let cfg = EncoderConfig::default();
    let mut store = ParamStore::new();
    let p = EncoderParams::init(&mut store, "encoder", &cfg, &mut crate::Rng::seed_from_u64(0));
    let img = CameraImage { height: 16, width: 64, data: vec![0.0; 2 * 16 * 64] };
    assert!(encode_image(&store, &p, &cfg, &front_camera(32, 64), &img).is_err());
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let cfg = EncoderConfig { channels: [3, 4, 4], depth_bins: 3, ..Default::default() };
    let mut rng = crate::Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let p = EncoderParams::init(&mut store, "encoder", &cfg, &mut rng);
    let x = store.add("input", "image", rand_tensor(&[2, 6, 7], &mut rng));
    let wf = rand_tensor(&[4, 2, 2], &mut rng);
    let wp = rand_tensor(&[3, 2, 2], &mut rng);
    let r = gradcheck::check(
        &mut store,
        |g, s| {
            let xv = g.param(s, x);
            let e = encode_image_graph(g, s, &p, xv)?;
            let a = g.dot(e.features, wf.clone())?;
            let b = g.dot(e.depth_probs, wp.clone())?;
            g.add(a, b)
        },
        gradcheck::DEFAULT_EPS,
        12,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-4, "{:?}", r);
}

/// Oracle: scalar loop over (bin, pixel) with the point computed directly.
fn brute_splat(feat: &Tensor, probs: &Tensor, cam: &CameraModel, stride: usize, bins: &[f64], spec: &GridSpec) -> Vec<f64> {
    let (c, h, w) = (feat.shape()[0], feat.shape()[1], feat.shape()[2]);
    let nv = spec.num_voxels();
    let mut out = vec![0.0; c * nv];
    for (d, &depth) in bins.iter().enumerate() {
        for i in 0..h {
            for j in 0..w {
                let u = stride as f64 * j as f64 + (stride as f64 - 1.0) / 2.0;
                let v = stride as f64 * i as f64 + (stride as f64 - 1.0) / 2.0;
                let ray = cam.ray_ego(u, v);
                let o = cam.origin_ego();
                let pt = [o[0] + depth * ray[0], o[1] + depth * ray[1], o[2] + depth * ray[2]];
                let Some(idx) = spec.voxel_index(pt) else { continue };
                let vox = spec.flat_index(idx);
                for ch in 0..c {
                    out[ch * nv + vox] += probs.data()[(d * h + i) * w + j] * feat.data()[(ch * h + i) * w + j];
                }
            }
        }
    }
    out
}

fn softmax0(t: &Tensor) -> Tensor {
    let k = t.shape()[0];
    let n = t.inner_len();
    let mut out = t.clone();
    for p in 0..n {
        let s: f64 = (0..k).map(|c| libm::exp(t.data()[c * n + p])).sum();
        for c in 0..k {
            out.data_mut()[c * n + p] = libm::exp(t.data()[c * n + p]) / s;
        }
    }
    out
}

#[test]
fn lift_splat_matches_scalar_loop() {
    let spec = small_spec();
    let cam = front_camera(16, 24);
    let bins = [1.5, 2.5, 3.5, 4.5];
    let mut rng = crate::Rng::seed_from_u64(3);
    let feat = ImageFeatureMap { tensor: rand_tensor(&[3, 4, 6], &mut rng) };
    let depth = DepthDistribution { bins: bins.to_vec(), probs: softmax0(&rand_tensor(&[4, 4, 6], &mut rng)) };
    let v = lift_splat(&feat, &depth, &cam, 4, &spec).unwrap();
    let oracle = brute_splat(&feat.tensor, &depth.probs, &cam, 4, &bins, &spec);
    assert!(oracle.iter().any(|&x| x != 0.0));
    for (a, b) in v.tensor.data().iter().zip(&oracle) {
        assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
    }
}

#[test]
fn single_mass_lands_in_one_voxel() {
    let spec = small_spec();
    let cam = front_camera(4, 4);
    let bins = [1.5, 2.5, 3.5];
    let mut feat = Tensor::zeros(&[2, 1, 1]);
    feat.data_mut().copy_from_slice(&[0.7, -1.3]);
    let mut probs = Tensor::zeros(&[3, 1, 1]);
    probs.data_mut()[1] = 1.0;
    let v = lift_splat(&ImageFeatureMap { tensor: feat }, &DepthDistribution { bins: bins.to_vec(), probs }, &cam, 4, &spec)
        .unwrap();
    let idx = spec.voxel_index(point_at(&cam, 1.5, 1.5, 2.5)).unwrap();
    let nv = spec.num_voxels();
    let f = spec.flat_index(idx);
    for (i, &x) in v.tensor.data().iter().enumerate() {
        let expect = if i == f { 0.7 } else if i == nv + f { -1.3 } else { 0.0 };
        assert_eq!(x, expect);
    }
}

#[test]
fn splat_conserves_in_grid_mass() {
    let spec = small_spec();
    let cam = front_camera(24, 32);
    let bins: Vec<f64> = (0..6).map(|i| 1.0 + 1.3 * i as f64).collect();
    let mut rng = crate::Rng::seed_from_u64(5);
    let feat = rand_tensor(&[2, 6, 8], &mut rng);
    let probs = softmax0(&rand_tensor(&[6, 6, 8], &mut rng));
    let table = splat_table(&cam, (6, 8), 4, &bins, &spec);
    let mut expect = [0.0; 2];
    for d in 0..6 {
        for p in 0..48 {
            if table.voxel[d * 48 + p].is_some() {
                for (c, e) in expect.iter_mut().enumerate() {
                    *e += probs.data()[d * 48 + p] * feat.data()[c * 48 + p];
                }
            }
        }
    }
    let v = lift_splat(&ImageFeatureMap { tensor: feat }, &DepthDistribution { bins, probs }, &cam, 4, &spec).unwrap();
    let nv = spec.num_voxels();
    for (c, e) in expect.iter().enumerate() {
        let got: f64 = v.tensor.data()[c * nv..(c + 1) * nv].iter().sum();
        assert!((got - e).abs() <= 1e-5 * e.abs().max(1.0));
    }
}

fn lifts_for(cams: &[CameraModel], spec: &GridSpec, rng: &mut crate::Rng) -> Vec<VoxelFeatureGrid> {
    let bins = [1.5, 3.0, 4.5];
    cams.iter()
        .map(|cam| {
            let feat = ImageFeatureMap { tensor: rand_tensor(&[2, 3, 4], rng) };
            let depth = DepthDistribution { bins: bins.to_vec(), probs: softmax0(&rand_tensor(&[3, 3, 4], rng)) };
            lift_splat(&feat, &depth, cam, 4, spec).unwrap()
        })
        .collect()
}

#[test]
fn multi_view_is_sum_of_cameras() {
    let spec = small_spec();
    let mut rng = crate::Rng::seed_from_u64(8);
    let cams = SimConfig { image_height: 12, image_width: 16, ..SimConfig::default() }.camera_rig();
    let lifts = lifts_for(&cams, &spec, &mut rng);
    assert_eq!(multi_view_lift(&lifts[..1]).unwrap(), lifts[0]);
    let doubled = multi_view_lift(&[lifts[0].clone(), lifts[0].clone()]).unwrap();
    for (a, b) in doubled.tensor.data().iter().zip(lifts[0].tensor.data()) {
        assert_eq!(*a, 2.0 * b);
    }
    let all = multi_view_lift(&lifts).unwrap();
    for i in 0..all.tensor.numel() {
        let mut s = 0.0;
        for l in &lifts {
            s += l.tensor.data()[i];
        }
        assert!((all.tensor.data()[i] - s).abs() < 1e-12);
    }
    let other = VoxelFeatureGrid::zeros(GridSpec::desk(), 2);
    assert!(multi_view_lift(&[lifts[0].clone(), other]).is_err());
}

fn random_grid(spec: &GridSpec, c: usize, rng: &mut crate::Rng) -> VoxelFeatureGrid {
    let [x, y, z] = spec.dims();
    VoxelFeatureGrid::new(spec.clone(), rand_tensor(&[c, x, y, z], rng)).unwrap()
}

#[test]
fn identity_warp_is_exact() {
    let spec = small_spec();
    let v = random_grid(&spec, 3, &mut crate::Rng::seed_from_u64(1));
    let p = EgoPose::from_yaw(0.4, [2.0, -1.0, 0.0], 3);
    assert_eq!(warp_to_current(&v, &p, &p).unwrap(), v);
}

#[test]
fn one_voxel_translation_shifts_grid() {
    let spec = small_spec();
    let v = random_grid(&spec, 2, &mut crate::Rng::seed_from_u64(2));
    let src = EgoPose::identity();
    let cur = EgoPose::from_yaw(0.0, [0.8, 0.0, 0.0], 1);
    let w = warp_to_current(&v, &src, &cur).unwrap();
    let [nx, ny, nz] = spec.dims();
    for c in 0..2 {
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    let expect = if x + 1 < nx { v.at(c, [x + 1, y, z]) } else { 0.0 };
                    assert_eq!(w.at(c, [x, y, z]), expect);
                }
            }
        }
    }
}

#[test]
fn warp_round_trip_on_smooth_field() {
    let spec = GridSpec::cubic([-8.0, 8.0], [-8.0, 8.0], [-0.8, 2.4], 0.4).unwrap();
    let [nx, ny, nz] = spec.dims();
    let mut t = Tensor::zeros(&[1, nx, ny, nz]);
    for f in 0..spec.num_voxels() {
        let p = spec.voxel_center(spec.unflatten(f));
        t.data_mut()[f] = libm::sin(0.4 * p[0]) * libm::cos(0.3 * p[1]) + 0.2 * p[2];
    }
    let v = VoxelFeatureGrid::new(spec.clone(), t).unwrap();
    let a = EgoPose::identity();
    let b = EgoPose::from_yaw(0.12, [0.53, -0.31, 0.0], 1);
    let back = warp_to_current(&warp_to_current(&v, &a, &b).unwrap(), &b, &a).unwrap();
    let margin = 4;
    let mut worst: f64 = 0.0;
    for x in margin..nx - margin {
        for y in margin..ny - margin {
            for z in 0..nz {
                worst = worst.max((back.at(0, [x, y, z]) - v.at(0, [x, y, z])).abs());
            }
        }
    }
    assert!(worst < 0.1, "{}", worst);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn warp_commutes_with_flip_for_identity_pose(seed in any::<u64>(), yaw in -3.0f64..3.0, axis in 0usize..2) {
        let spec = small_spec();
        let v = random_grid(&spec, 2, &mut crate::Rng::seed_from_u64(seed));
        let p = EgoPose::from_yaw(yaw, [0.3, 0.1, 0.0], 0);
        let ax = if axis == 0 { Axis::X } else { Axis::Y };
        let a = warp_to_current(&flip_grid(&v, ax).unwrap(), &p, &p).unwrap();
        let b = flip_grid(&warp_to_current(&v, &p, &p).unwrap(), ax).unwrap();
        prop_assert_eq!(a, b);
    }
}

fn tiny_encoder() -> (EncoderConfig, ParamStore, EncoderParams) {
    let cfg = EncoderConfig { channels: [4, 4, 4], depth_bins: 4, depth_range: [1.0, 9.0], ..Default::default() };
    let mut store = ParamStore::new();
    let p = EncoderParams::init(&mut store, "encoder", &cfg, &mut crate::Rng::seed_from_u64(4));
    (cfg, store, p)
}

#[test]
fn temporal_sequence_stationary_ego_equals_per_frame_lifts() {
    let sim = SimConfig { num_frames: 4, ego_speed: [0.0, 0.0], ego_yaw_rate: [0.0, 0.0], image_height: 16, image_width: 24, ..SimConfig::default() };
    let ep = generate_episode(&sim, 3).unwrap();
    let (cfg, store, p) = tiny_encoder();
    let geo = LiftGeometry::new(&ep.cameras, &cfg, ep.spec());
    let frames: Vec<(&[CameraImage], EgoPose)> = ep.frames.iter().map(|f| (f.images.as_slice(), f.ego_pose)).collect();
    for n in 0..=3 {
        let mut g = Graph::new();
        let seq = build_temporal_sequence(&mut g, &store, &p, &cfg, &geo, ep.spec(), &frames, n).unwrap();
        assert_eq!(seq.len(), n + 1);
        for (i, v) in seq.iter().enumerate() {
            let mut g2 = Graph::new();
            let lone = lift_frame(&mut g2, &store, &p, &cfg, &geo, &ep.frames[3 - n + i].images, None).unwrap();
            assert_eq!(g.value(*v), g2.value(lone));
            assert_eq!(g.shape(*v)[1..], ep.spec().dims());
        }
    }
    let mut g = Graph::new();
    assert!(matches!(
        build_temporal_sequence(&mut g, &store, &p, &cfg, &geo, ep.spec(), &frames, 4),
        Err(Error::InsufficientFrames { .. })
    ));
}

fn one_hot(labels: &crate::OccupancyLabelGrid, classes: usize) -> VoxelFeatureGrid {
    let [x, y, z] = labels.spec.dims();
    let n = labels.labels.len();
    let mut t = Tensor::zeros(&[classes - 1, x, y, z]);
    for (i, &l) in labels.labels.iter().enumerate() {
        if l > 1 {
            t.data_mut()[(l as usize - 1) * n + i] = 1.0;
        }
    }
    VoxelFeatureGrid::new(labels.spec.clone(), t).unwrap()
}

fn cosine(a: &Tensor, b: &Tensor) -> f64 {
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    let na: f64 = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn alignment_improves_static_scene_similarity() {
    let sim = SimConfig { num_frames: 3, num_cars: 0, num_pedestrians: 0, ego_speed: [2.0, 3.0], ..SimConfig::default() };
    for seed in 0..3 {
        let ep = generate_episode(&sim, seed).unwrap();
        let prev = one_hot(&ep.frames[1].gt_occupancy, 6);
        let cur = one_hot(&ep.frames[2].gt_occupancy, 6);
        let warped = warp_to_current(&prev, &ep.frames[1].ego_pose, &ep.frames[2].ego_pose).unwrap();
        let aligned = cosine(&warped.tensor, &cur.tensor);
        let raw = cosine(&prev.tensor, &cur.tensor);
        assert!(aligned > raw, "seed {}: aligned {} raw {}", seed, aligned, raw);
    }
}

#[test]
fn lift_chain_gradients_match_finite_differences() {
    let spec = small_spec();
    let cfg = EncoderConfig { channels: [2, 3, 3], depth_bins: 3, depth_range: [1.0, 7.0], ..Default::default() };
    let cam = front_camera(8, 12);
    let mut rng = crate::Rng::seed_from_u64(21);
    let mut store = ParamStore::new();
    let p = EncoderParams::init(&mut store, "encoder", &cfg, &mut rng);
    let x = store.add("input", "image", rand_tensor(&[2, 8, 12], &mut rng));
    let table = Arc::new(splat_table(&cam, cfg.feature_dims(8, 12), cfg.total_stride(), &cfg.bin_depths(), &spec));
    let [nx, ny, nz] = spec.dims();
    let readout = rand_tensor(&[3, nx, ny, nz], &mut rng);
    let r = gradcheck::check(
        &mut store,
        |g, s| {
            let xv = g.param(s, x);
            let e = encode_image_graph(g, s, &p, xv)?;
            let v = g.splat(e.features, e.depth_probs, table.clone())?;
            g.dot(v, readout.clone())
        },
        gradcheck::DEFAULT_EPS,
        10,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-4, "{:?}", r);
}
