//! Pillar-style radar encoder on the occupancy grid: points are binned per
//! voxel, encoded by a shared linear layer, max-pooled per cell, and
//! scattered back into a dense feature volume.

use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::grid::{GridSpec, VoxelFeatureGrid};
use crate::params::{he_normal, ParamId, ParamStore};
use crate::scenesim::RadarPointCloud;
use crate::tensor::Tensor;

/// x, y, z, radial velocity, intensity, offsets from the cell center.
pub const AUGMENTED_FEATURES: usize = 8;

pub const DEFAULT_MAX_POINTS: usize = 8;

/// Radar points binned into occupied grid cells.
#[derive(Clone, Debug, PartialEq)]
pub struct PillarBuffer {
    pub dims: [usize; 3],
    pub max_points: usize,
    /// Occupied cells in increasing flat-index order.
    pub cells: Vec<[usize; 3]>,
    pub counts: Vec<usize>,
    /// `(cells, max_points, AUGMENTED_FEATURES)`; unused slots are zero.
    pub features: Vec<f64>,
}

impl PillarBuffer {
    pub fn empty(spec: &GridSpec, max_points: usize) -> Self {
        Self { dims: spec.dims(), max_points, cells: Vec::new(), counts: Vec::new(), features: Vec::new() }
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn flat_cells(&self) -> Vec<usize> {
        let [_, ny, nz] = self.dims;
        self.cells.iter().map(|c| (c[0] * ny + c[1]) * nz + c[2]).collect()
    }

    pub fn point(&self, cell: usize, slot: usize) -> &[f64] {
        let at = (cell * self.max_points + slot) * AUGMENTED_FEATURES;
        &self.features[at..at + AUGMENTED_FEATURES]
    }

    /// Kept points stacked row-wise plus segment offsets per cell.
    pub fn stacked(&self) -> (Tensor, Vec<usize>) {
        let mut rows = Vec::with_capacity(self.counts.iter().sum::<usize>() * AUGMENTED_FEATURES);
        let mut offsets = Vec::with_capacity(self.cells.len() + 1);
        offsets.push(0);
        for (c, &n) in self.counts.iter().enumerate() {
            for s in 0..n {
                rows.extend_from_slice(self.point(c, s));
            }
            offsets.push(offsets[c] + n);
        }
        let n = offsets[self.cells.len()];
        (Tensor::from_vec(&[n, AUGMENTED_FEATURES], rows).expect("row layout"), offsets)
    }

    /// Mirrors cell indices and x/y-dependent features along `axis`.
    pub fn flipped(&self, spec: &GridSpec, axis: usize) -> Self {
        let mid = 0.5 * (spec.range(axis)[0] + spec.range(axis)[1]);
        let mut out = self.clone();
        for c in &mut out.cells {
            c[axis] = self.dims[axis] - 1 - c[axis];
        }
        for (c, &n) in self.counts.iter().enumerate() {
            for s in 0..n {
                let at = (c * self.max_points + s) * AUGMENTED_FEATURES;
                let p = &mut out.features[at..at + AUGMENTED_FEATURES];
                p[axis] = 2.0 * mid - p[axis];
                p[5 + axis] = -p[5 + axis];
            }
        }
        let mut order: Vec<usize> = (0..out.cells.len()).collect();
        let [_, ny, nz] = self.dims;
        order.sort_by_key(|&i| (out.cells[i][0] * ny + out.cells[i][1]) * nz + out.cells[i][2]);
        let row = self.max_points * AUGMENTED_FEATURES;
        Self {
            dims: self.dims,
            max_points: self.max_points,
            cells: order.iter().map(|&i| out.cells[i]).collect(),
            counts: order.iter().map(|&i| out.counts[i]).collect(),
            features: order.iter().flat_map(|&i| out.features[i * row..(i + 1) * row].iter().copied()).collect(),
        }
    }
}

/// Bins points by voxel. Points are visited in a seeded random order and
/// each cell keeps the first `max_points` it receives.
pub fn voxelize_radar(cloud: &RadarPointCloud, spec: &GridSpec, max_points: usize, rng: &mut crate::Rng) -> PillarBuffer {
    let mut order: Vec<usize> = (0..cloud.len()).collect();
    order.shuffle(rng);
    let mut binned: Vec<(usize, [usize; 3], usize)> = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        let p = cloud.points[i].position.map(f64::from);
        if let Some(idx) = spec.voxel_index(p) {
            binned.push((spec.flat_index(idx), idx, rank));
        }
    }
    binned.sort_unstable_by_key(|&(flat, _, rank)| (flat, rank));
    let mut buf = PillarBuffer::empty(spec, max_points);
    let mut last = usize::MAX;
    for (flat, idx, rank) in binned {
        if flat != last {
            buf.cells.push(idx);
            buf.counts.push(0);
            buf.features.extend(core::iter::repeat_n(0.0, max_points * AUGMENTED_FEATURES));
            last = flat;
        }
        let c = buf.cells.len() - 1;
        if buf.counts[c] == max_points {
            continue;
        }
        let pt = &cloud.points[order[rank]];
        let pos = pt.position.map(f64::from);
        let center = spec.voxel_center(idx);
        let at = (c * max_points + buf.counts[c]) * AUGMENTED_FEATURES;
        buf.features[at..at + AUGMENTED_FEATURES].copy_from_slice(&[
            pos[0],
            pos[1],
            pos[2],
            pt.radial_velocity as f64,
            pt.intensity as f64,
            pos[0] - center[0],
            pos[1] - center[1],
            pos[2] - center[2],
        ]);
        buf.counts[c] += 1;
    }
    buf
}

#[derive(Clone, Debug, PartialEq)]
pub struct RadarParams {
    /// `(C_r, AUGMENTED_FEATURES)`.
    pub weight: ParamId,
    pub bias: ParamId,
}

impl RadarParams {
    pub fn init(store: &mut ParamStore, group: &str, channels: usize, rng: &mut crate::Rng) -> Self {
        Self {
            weight: store.add(group, "pfn.weight", he_normal(&[channels, AUGMENTED_FEATURES], AUGMENTED_FEATURES, rng)),
            bias: store.add(group, "pfn.bias", Tensor::zeros(&[channels])),
        }
    }

    pub fn channels(&self, store: &ParamStore) -> usize {
        store.get(self.weight).shape()[0]
    }
}

/// Per-cell features `(cells, C_r)` on the tape.
pub fn featurize_cells_graph(g: &mut Graph, store: &ParamStore, params: &RadarParams, buf: &PillarBuffer) -> Result<Var> {
    let (rows, offsets) = buf.stacked();
    let x = g.input(rows);
    let w = g.param(store, params.weight);
    let b = g.param(store, params.bias);
    let h = g.row_linear(x, w, b)?;
    let h = g.relu(h);
    g.segment_max(h, &offsets)
}

pub fn featurize_cells(store: &ParamStore, params: &RadarParams, buf: &PillarBuffer) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = featurize_cells_graph(&mut g, store, params, buf)?;
    Ok(g.value(v).clone())
}

/// Dense `(C_r, nx, ny, nz)` radar features on the tape.
pub fn radar_grid_graph(g: &mut Graph, store: &ParamStore, params: &RadarParams, buf: &PillarBuffer) -> Result<Var> {
    if buf.cells.is_empty() {
        let [nx, ny, nz] = buf.dims;
        return Ok(g.input(Tensor::zeros(&[params.channels(store), nx, ny, nz])));
    }
    let cells = featurize_cells_graph(g, store, params, buf)?;
    g.scatter_cells(cells, Arc::new(buf.flat_cells()), buf.dims)
}

/// Writes each cell's feature row into a zero grid. Rejects repeated cells.
pub fn scatter_to_grid(features: &Tensor, cells: &[[usize; 3]], spec: &GridSpec) -> Result<VoxelFeatureGrid> {
    let fs = features.shape();
    if fs.len() != 2 || fs[0] != cells.len() {
        return Err(shape_err("scatter_to_grid", alloc::format!("{:?} features for {} cells", fs, cells.len())));
    }
    let dims = spec.dims();
    if let Some(c) = cells.iter().find(|c| (0..3).any(|a| c[a] >= dims[a])) {
        return Err(shape_err("scatter_to_grid", alloc::format!("cell {:?} outside {:?}", c, dims)));
    }
    let flat: Vec<usize> = cells.iter().map(|&c| spec.flat_index(c)).collect();
    let mut g = Graph::new();
    let x = g.input(features.clone());
    let y = g.scatter_cells(x, Arc::new(flat), dims)?;
    VoxelFeatureGrid::new(spec.clone(), g.value(y).clone())
}

/// Full radar branch without a tape: voxelize, featurize, scatter.
pub fn encode_radar(
    store: &ParamStore,
    params: &RadarParams,
    cloud: &RadarPointCloud,
    spec: &GridSpec,
    max_points: usize,
    rng: &mut crate::Rng,
) -> Result<VoxelFeatureGrid> {
    let buf = voxelize_radar(cloud, spec, max_points, rng);
    let mut g = Graph::new();
    let v = radar_grid_graph(&mut g, store, params, &buf)?;
    VoxelFeatureGrid::new(spec.clone(), g.value(v).clone())
}

#[cfg(test)]
mod tests;
