use super::*;
use crate::gradcheck;
use crate::scenesim::RadarPoint;
use alloc::vec;
use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};

fn pt(x: f32, y: f32, z: f32, v: f32) -> RadarPoint {
    RadarPoint { position: [x, y, z], radial_velocity: v, intensity: 0.5 }
}

fn random_cloud(n: usize, rng: &mut crate::Rng) -> RadarPointCloud {
    RadarPointCloud {
        points: (0..n)
            .map(|_| RadarPoint {
                position: [rng.random_range(-11.0..11.0), rng.random_range(-11.0..11.0), rng.random_range(-1.0..2.6)],
                radial_velocity: rng.random_range(-3.0..3.0),
                intensity: rng.random_range(0.0..1.0),
            })
            .collect(),
    }
}

fn store_with(channels: usize, seed: u64) -> (ParamStore, RadarParams) {
    let mut store = ParamStore::new();
    let p = RadarParams::init(&mut store, "radar", channels, &mut crate::Rng::seed_from_u64(seed));
    (store, p)
}

#[test]
fn single_point_single_cell() {
    let spec = GridSpec::desk();
    let cloud = RadarPointCloud { points: vec![pt(0.1, -0.3, 0.5, 1.0)] };
    let buf = voxelize_radar(&cloud, &spec, 8, &mut crate::Rng::seed_from_u64(0));
    assert_eq!(buf.cells, vec![[25, 24, 3]]);
    assert_eq!(buf.counts, vec![1]);
    let c = spec.voxel_center([25, 24, 3]);
    let f = buf.point(0, 0);
    assert!((f[5] - (0.1f32 as f64 - c[0])).abs() < 1e-12);
    assert_eq!(f[3], 1.0);
}

#[test]
fn truncates_at_max_points() {
    let spec = GridSpec::desk();
    let cloud = RadarPointCloud { points: vec![pt(0.1, 0.1, 0.1, 0.0), pt(0.2, 0.1, 0.1, 1.0), pt(0.3, 0.1, 0.1, 2.0)] };
    let buf = voxelize_radar(&cloud, &spec, 2, &mut crate::Rng::seed_from_u64(5));
    assert_eq!(buf.num_cells(), 1);
    assert_eq!(buf.counts, vec![2]);
    assert_eq!(buf.features.len(), 2 * AUGMENTED_FEATURES);
}

#[test]
fn out_of_range_points_dropped() {
    let spec = GridSpec::desk();
    let cloud = RadarPointCloud { points: vec![pt(10.0, 0.0, 0.0, 0.0), pt(0.0, 0.0, 5.0, 0.0)] };
    let buf = voxelize_radar(&cloud, &spec, 8, &mut crate::Rng::seed_from_u64(0));
    assert_eq!(buf.num_cells(), 0);
}

#[test]
fn occupied_cells_match_binning_loop() {
    let spec = GridSpec::desk();
    let mut rng = crate::Rng::seed_from_u64(9);
    for _ in 0..20 {
        let cloud = random_cloud(60, &mut rng);
        let buf = voxelize_radar(&cloud, &spec, 4, &mut rng);
        let mut expect: Vec<([usize; 3], usize)> = Vec::new();
        for p in &cloud.points {
            let q = p.position.map(f64::from);
            let mut idx = [0usize; 3];
            let mut inside = true;
            for a in 0..3 {
                let f = libm::floor((q[a] - spec.range(a)[0]) / spec.voxel_size()[a]);
                inside &= f >= 0.0 && f < spec.dims()[a] as f64;
                idx[a] = f.max(0.0) as usize;
            }
            if !inside {
                continue;
            }
            match expect.iter_mut().find(|(c, _)| *c == idx) {
                Some((_, n)) => *n += 1,
                None => expect.push((idx, 1)),
            }
        }
        expect.sort();
        let got: Vec<([usize; 3], usize)> = buf.cells.iter().copied().zip(buf.counts.iter().map(|&c| c)).collect();
        let capped: Vec<([usize; 3], usize)> = expect.iter().map(|&(c, n)| (c, n.min(4))).collect();
        assert_eq!(got, capped);
    }
}

#[test]
fn zero_weights_give_zero_features() {
    let spec = GridSpec::desk();
    let (mut store, p) = store_with(4, 0);
    store.get_mut(p.weight).fill(0.0);
    let buf = voxelize_radar(&random_cloud(30, &mut crate::Rng::seed_from_u64(1)), &spec, 8, &mut crate::Rng::seed_from_u64(2));
    assert!(featurize_cells(&store, &p, &buf).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn single_point_cell_matches_direct_evaluation() {
    let spec = GridSpec::desk();
    let (store, p) = store_with(5, 3);
    let cloud = RadarPointCloud { points: vec![pt(1.3, -2.1, 0.7, -0.4)] };
    let buf = voxelize_radar(&cloud, &spec, 8, &mut crate::Rng::seed_from_u64(0));
    let out = featurize_cells(&store, &p, &buf).unwrap();
    let w = store.get(p.weight).data();
    let b = store.get(p.bias).data();
    let x = buf.point(0, 0);
    for o in 0..5 {
        let z: f64 = b[o] + (0..AUGMENTED_FEATURES).map(|i| w[o * AUGMENTED_FEATURES + i] * x[i]).sum::<f64>();
        assert!((out.data()[o] - z.max(0.0)).abs() < 1e-12);
    }
}

#[test]
fn scatter_matches_loop_and_rejects_duplicates() {
    let spec = GridSpec::desk();
    let mut rng = crate::Rng::seed_from_u64(4);
    let buf = voxelize_radar(&random_cloud(40, &mut rng), &spec, 8, &mut rng);
    let n = buf.num_cells();
    let feats = Tensor::from_vec(&[n, 3], (0..3 * n).map(|i| i as f64 + 1.0).collect()).unwrap();
    let grid = scatter_to_grid(&feats, &buf.cells, &spec).unwrap();
    let mut expect = vec![0.0; 3 * spec.num_voxels()];
    for (i, c) in buf.cells.iter().enumerate() {
        for ch in 0..3 {
            expect[ch * spec.num_voxels() + spec.flat_index(*c)] = feats.data()[i * 3 + ch];
        }
    }
    assert_eq!(grid.tensor.data(), &expect[..]);
    let nnz = (0..spec.num_voxels()).filter(|&v| (0..3).any(|c| grid.tensor.data()[c * spec.num_voxels() + v] != 0.0)).count();
    assert!(nnz <= n);
    let dup = Tensor::zeros(&[2, 3]);
    assert!(matches!(scatter_to_grid(&dup, &[[1, 1, 1], [1, 1, 1]], &spec), Err(crate::Error::DuplicateCell(_))));
}

#[test]
fn one_cell_grid_nonzero_only_there() {
    let spec = GridSpec::desk();
    let feats = Tensor::from_vec(&[1, 2], vec![2.0, 3.0]).unwrap();
    let g = scatter_to_grid(&feats, &[[3, 4, 5]], &spec).unwrap();
    for (i, &v) in g.tensor.data().iter().enumerate() {
        let f = spec.flat_index([3, 4, 5]);
        let expect = if i == f { 2.0 } else if i == spec.num_voxels() + f { 3.0 } else { 0.0 };
        assert_eq!(v, expect);
    }
}

#[test]
fn empty_cloud_gives_zero_grid() {
    let spec = GridSpec::desk();
    let (store, p) = store_with(6, 0);
    let g = encode_radar(&store, &p, &RadarPointCloud::default(), &spec, 8, &mut crate::Rng::seed_from_u64(0)).unwrap();
    assert_eq!(g.channels(), 6);
    assert!(g.tensor.data().iter().all(|&v| v == 0.0));
}

#[test]
fn featurize_gradients_match_finite_differences() {
    let spec = GridSpec::desk();
    let mut rng = crate::Rng::seed_from_u64(17);
    let buf = voxelize_radar(&random_cloud(40, &mut rng), &spec, 3, &mut rng);
    let (mut store, p) = store_with(4, 6);
    store.get_mut(p.bias).data_mut().iter_mut().for_each(|b| *b = 0.3);
    let readout = Tensor::from_vec(&[buf.num_cells(), 4], (0..buf.num_cells() * 4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let r = gradcheck::check(
        &mut store,
        |g, s| {
            let c = featurize_cells_graph(g, s, &p, &buf)?;
            g.dot(c, readout.clone())
        },
        gradcheck::DEFAULT_EPS,
        32,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-4, "{:?}", r);
}

#[test]
fn flipped_buffer_matches_voxelizing_mirrored_cloud() {
    let spec = GridSpec::desk();
    let mut rng = crate::Rng::seed_from_u64(2);
    let cloud = random_cloud(50, &mut rng);
    let (store, p) = store_with(4, 1);
    for axis in 0..2 {
        let mut mirrored = cloud.clone();
        for q in &mut mirrored.points {
            q.position[axis] = -q.position[axis];
        }
        let a = voxelize_radar(&cloud, &spec, 8, &mut crate::Rng::seed_from_u64(0)).flipped(&spec, axis);
        let b = voxelize_radar(&mirrored, &spec, 8, &mut crate::Rng::seed_from_u64(0));
        assert_eq!(a.cells, b.cells);
        let fa = featurize_cells(&store, &p, &a).unwrap();
        let fb = featurize_cells(&store, &p, &b).unwrap();
        for (x, y) in fa.data().iter().zip(fb.data()) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn pipeline_is_permutation_invariant(seed in any::<u64>(), shuffle in any::<u64>()) {
        let spec = GridSpec::desk();
        let mut rng = crate::Rng::seed_from_u64(seed);
        let cloud = random_cloud(40, &mut rng);
        let mut permuted = cloud.clone();
        use rand::seq::SliceRandom;
        permuted.points.shuffle(&mut crate::Rng::seed_from_u64(shuffle));
        let (store, p) = store_with(4, seed);
        let a = encode_radar(&store, &p, &cloud, &spec, 64, &mut crate::Rng::seed_from_u64(1)).unwrap();
        let b = encode_radar(&store, &p, &permuted, &spec, 64, &mut crate::Rng::seed_from_u64(2)).unwrap();
        prop_assert_eq!(a, b);
    }
}
