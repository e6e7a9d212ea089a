//! Voxel-grid geometry, semantic labels and the dense grid containers.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Divisibility tolerance for grid extents, in meters.
const EXTENT_TOL: f64 = 1e-9;

/// Axis-aligned voxel volume in the ego frame.
///
/// Voxels are half-open intervals `[min + i*size, min + (i+1)*size)`, so a
/// point on the max boundary of an axis lies outside the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridSpecRepr", into = "GridSpecRepr")]
pub struct GridSpec {
    ranges: [[f64; 2]; 3],
    voxel_size: [f64; 3],
    dims: [usize; 3],
}

#[derive(Serialize, Deserialize)]
struct GridSpecRepr {
    x_range: [f64; 2],
    y_range: [f64; 2],
    z_range: [f64; 2],
    voxel_size: [f64; 3],
}

impl TryFrom<GridSpecRepr> for GridSpec {
    type Error = Error;

    fn try_from(r: GridSpecRepr) -> Result<Self> {
        make_grid_spec(r.x_range, r.y_range, r.z_range, r.voxel_size)
    }
}

impl From<GridSpec> for GridSpecRepr {
    fn from(g: GridSpec) -> Self {
        Self {
            x_range: g.ranges[0],
            y_range: g.ranges[1],
            z_range: g.ranges[2],
            voxel_size: g.voxel_size,
        }
    }
}

/// Builds a grid whose dims are the extent divided by the voxel size.
///
/// Every extent must be an integer multiple of its voxel size to within
/// 1e-9 m.
pub fn make_grid_spec(
    x_range: [f64; 2],
    y_range: [f64; 2],
    z_range: [f64; 2],
    voxel_size: [f64; 3],
) -> Result<GridSpec> {
    let ranges = [x_range, y_range, z_range];
    let mut dims = [0usize; 3];
    for axis in 0..3 {
        let [lo, hi] = ranges[axis];
        let vs = voxel_size[axis];
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(Error::InvalidGrid(format!(
                "axis {} range [{}, {}] is empty",
                AXIS_NAMES[axis], lo, hi
            )));
        }
        if !(vs.is_finite() && vs > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "axis {} voxel size {} must be positive",
                AXIS_NAMES[axis], vs
            )));
        }
        let cells = (hi - lo) / vs;
        let rounded = libm::round(cells);
        if rounded < 1.0 || libm::fabs(cells - rounded) * vs > EXTENT_TOL {
            return Err(Error::InvalidGrid(format!(
                "axis {} extent {} m is not a multiple of voxel size {} m ({} cells)",
                AXIS_NAMES[axis],
                hi - lo,
                vs,
                cells
            )));
        }
        dims[axis] = rounded as usize;
    }
    Ok(GridSpec { ranges, voxel_size, dims })
}

const AXIS_NAMES: [&str; 3] = ["x", "y", "z"];

impl GridSpec {
    /// Grid with the same voxel size on every axis.
    pub fn cubic(
        x_range: [f64; 2],
        y_range: [f64; 2],
        z_range: [f64; 2],
        voxel: f64,
    ) -> Result<Self> {
        make_grid_spec(x_range, y_range, z_range, [voxel; 3])
    }

    /// The full-scale benchmark grid: 80 m x 80 m x 6.4 m at 0.4 m.
    pub fn occ3d() -> Self {
        make_grid_spec([-40.0, 40.0], [-40.0, 40.0], [-1.0, 5.4], [0.4; 3])
            .expect("static grid is valid")
    }

    /// Desk-scale default grid, 50 x 50 x 8 voxels of 0.4 m.
    pub fn desk() -> Self {
        make_grid_spec([-10.0, 10.0], [-10.0, 10.0], [-0.8, 2.4], [0.4; 3])
            .expect("static grid is valid")
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    pub fn range(&self, axis: usize) -> [f64; 2] {
        self.ranges[axis]
    }

    pub fn min(&self) -> [f64; 3] {
        [self.ranges[0][0], self.ranges[1][0], self.ranges[2][0]]
    }

    /// Index of the voxel containing `point`, or `None` outside the grid.
    pub fn voxel_index(&self, point: [f64; 3]) -> Option<[usize; 3]> {
        let mut idx = [0usize; 3];
        for axis in 0..3 {
            let f = libm::floor((point[axis] - self.ranges[axis][0]) / self.voxel_size[axis]);
            if !(f >= 0.0 && f < self.dims[axis] as f64) {
                return None;
            }
            idx[axis] = f as usize;
        }
        Some(idx)
    }

    pub fn voxel_center(&self, idx: [usize; 3]) -> [f64; 3] {
        let mut c = [0.0; 3];
        for axis in 0..3 {
            c[axis] = self.ranges[axis][0] + (idx[axis] as f64 + 0.5) * self.voxel_size[axis];
        }
        c
    }

    /// Continuous voxel coordinate of a point; voxel centers sit on integers.
    pub fn continuous_index(&self, point: [f64; 3]) -> [f64; 3] {
        let mut c = [0.0; 3];
        for axis in 0..3 {
            c[axis] = (point[axis] - self.ranges[axis][0]) / self.voxel_size[axis] - 0.5;
        }
        c
    }

    pub fn flat_index(&self, idx: [usize; 3]) -> usize {
        (idx[0] * self.dims[1] + idx[1]) * self.dims[2] + idx[2]
    }

    pub fn unflatten(&self, flat: usize) -> [usize; 3] {
        let z = flat % self.dims[2];
        let y = (flat / self.dims[2]) % self.dims[1];
        let x = flat / (self.dims[1] * self.dims[2]);
        [x, y, z]
    }

    /// Grid with voxels `stride` times larger; dims round up, so the range
    /// may extend past the original max.
    pub fn coarsened(&self, stride: usize) -> Self {
        let mut ranges = self.ranges;
        let mut voxel_size = self.voxel_size;
        let mut dims = self.dims;
        for axis in 0..3 {
            dims[axis] = self.dims[axis].div_ceil(stride);
            voxel_size[axis] = self.voxel_size[axis] * stride as f64;
            ranges[axis][1] = ranges[axis][0] + dims[axis] as f64 * voxel_size[axis];
        }
        Self { ranges, voxel_size, dims }
    }

    pub fn ensure_same(&self, other: &GridSpec) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::SpecMismatch(format!("{:?} vs {:?}", self.dims, other.dims)))
        }
    }
}

/// Class vocabulary; index 0 is always `free`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct SemanticLabelSet {
    names: Vec<String>,
}

impl SemanticLabelSet {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::InvalidLabels("need at least two classes".into()));
        }
        if names[0] != "free" {
            return Err(Error::InvalidLabels(format!(
                "class 0 must be \"free\", got {:?}",
                names[0]
            )));
        }
        if names.len() > u8::MAX as usize + 1 {
            return Err(Error::InvalidLabels("at most 256 classes".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::InvalidLabels(format!("duplicate class name {:?}", n)));
            }
        }
        Ok(Self { names })
    }

    /// free, ground, building, barrier, car, pedestrian.
    pub fn desk() -> Self {
        Self::new(
            ["free", "ground", "building", "barrier", "car", "pedestrian"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        )
        .expect("static label set is valid")
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Option<u8> {
        self.names.iter().position(|n| n == name).map(|i| i as u8)
    }
}

impl TryFrom<Vec<String>> for SemanticLabelSet {
    type Error = Error;
    fn try_from(v: Vec<String>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<SemanticLabelSet> for Vec<String> {
    fn from(s: SemanticLabelSet) -> Self {
        s.names
    }
}

pub const FREE: u8 = 0;

/// Per-voxel class ids in C order over `(nx, ny, nz)`.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyLabelGrid {
    pub spec: GridSpec,
    pub labels: Vec<u8>,
}

impl OccupancyLabelGrid {
    pub fn new(spec: GridSpec, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != spec.num_voxels() {
            return Err(Error::ShapeMismatch {
                op: "OccupancyLabelGrid::new",
                detail: format!("{} labels for {} voxels", labels.len(), spec.num_voxels()),
            });
        }
        Ok(Self { spec, labels })
    }

    pub fn filled(spec: GridSpec, label: u8) -> Self {
        let n = spec.num_voxels();
        Self { spec, labels: alloc::vec![label; n] }
    }

    pub fn get(&self, idx: [usize; 3]) -> u8 {
        self.labels[self.spec.flat_index(idx)]
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l as usize >= num_classes) {
            Some(&l) => Err(Error::LabelOutOfRange { label: l as usize, num_classes }),
            None => Ok(()),
        }
    }

    pub fn occupied_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != FREE).count()
    }
}

/// Dense `(channels, nx, ny, nz)` feature volume.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelFeatureGrid {
    pub spec: GridSpec,
    pub tensor: Tensor,
}

impl VoxelFeatureGrid {
    pub fn new(spec: GridSpec, tensor: Tensor) -> Result<Self> {
        let d = spec.dims();
        let s = tensor.shape();
        if s.len() != 4 || s[1] != d[0] || s[2] != d[1] || s[3] != d[2] {
            return Err(Error::ShapeMismatch {
                op: "VoxelFeatureGrid::new",
                detail: format!("tensor {:?} on grid {:?}", s, d),
            });
        }
        if !tensor.is_finite() {
            return Err(Error::ShapeMismatch {
                op: "VoxelFeatureGrid::new",
                detail: "non-finite feature value".into(),
            });
        }
        Ok(Self { spec, tensor })
    }

    pub fn zeros(spec: GridSpec, channels: usize) -> Self {
        let d = spec.dims();
        let tensor = Tensor::zeros(&[channels, d[0], d[1], d[2]]);
        Self { spec, tensor }
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn at(&self, c: usize, idx: [usize; 3]) -> f64 {
        self.tensor.data()[c * self.spec.num_voxels() + self.spec.flat_index(idx)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    fn horizontal(self) -> Result<usize> {
        match self {
            Axis::Z => Err(Error::InvalidFlipAxis("z")),
            a => Ok(a.index()),
        }
    }
}

/// Reverses a C-order `(channels, d0, d1, d2)` buffer along spatial `axis`.
pub(crate) fn flip_buffer<T: Copy>(data: &[T], dims: [usize; 3], axis: usize) -> Vec<T> {
    let vox = dims[0] * dims[1] * dims[2];
    let channels = if vox == 0 { 0 } else { data.len() / vox };
    let mut out = Vec::with_capacity(data.len());
    for c in 0..channels {
        let base = c * vox;
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                for z in 0..dims[2] {
                    let mut s = [x, y, z];
                    s[axis] = dims[axis] - 1 - s[axis];
                    out.push(data[base + (s[0] * dims[1] + s[1]) * dims[2] + s[2]]);
                }
            }
        }
    }
    out
}

/// Horizontal mirroring in voxel space.
pub trait Flip: Sized {
    fn flipped(&self, axis: Axis) -> Result<Self>;
}

impl Flip for OccupancyLabelGrid {
    fn flipped(&self, axis: Axis) -> Result<Self> {
        let a = axis.horizontal()?;
        Ok(Self { spec: self.spec.clone(), labels: flip_buffer(&self.labels, self.spec.dims(), a) })
    }
}

impl Flip for VoxelFeatureGrid {
    fn flipped(&self, axis: Axis) -> Result<Self> {
        let a = axis.horizontal()?;
        let data = flip_buffer(self.tensor.data(), self.spec.dims(), a);
        Ok(Self {
            spec: self.spec.clone(),
            tensor: Tensor::from_vec(self.tensor.shape(), data)?,
        })
    }
}

/// Mirrors a label or feature grid along x or y; z is rejected.
pub fn flip_grid<G: Flip>(grid: &G, axis: Axis) -> Result<G> {
    grid.flipped(axis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::{Rng, SeedableRng};

    #[test]
    fn occ3d_grid_dims() {
        assert_eq!(GridSpec::occ3d().dims(), [200, 200, 16]);
        assert_eq!(GridSpec::desk().dims(), [50, 50, 8]);
    }

    #[test]
    fn non_divisible_extent_rejected() {
        let err = make_grid_spec([0.0, 1.0], [0.0, 1.0], [0.0, 1.0], [0.3; 3]).unwrap_err();
        assert!(matches!(err, Error::InvalidGrid(ref m) if m.contains("not a multiple")));
    }

    #[test]
    fn empty_range_and_bad_voxel_rejected() {
        assert!(make_grid_spec([1.0, 1.0], [0.0, 1.0], [0.0, 1.0], [0.5; 3]).is_err());
        assert!(make_grid_spec([0.0, 1.0], [0.0, 1.0], [0.0, 1.0], [0.5, 0.0, 0.5]).is_err());
    }

    #[test]
    fn voxel_index_examples() {
        let g = GridSpec::desk();
        assert_eq!(g.voxel_index([0.0, 0.0, 0.0]), Some([25, 25, 2]));
        assert_eq!(g.voxel_index([10.0, 0.0, 0.0]), None);
        assert_eq!(g.voxel_index([-10.0, -10.0, -0.8]), Some([0, 0, 0]));
        assert_eq!(g.voxel_index([0.0, 0.0, -5.0]), None);
    }

    #[test]
    fn voxel_index_matches_scalar_loop() {
        let g = GridSpec::desk();
        let mut rng = crate::Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let p = [
                rng.random_range(-12.0..12.0),
                rng.random_range(-12.0..12.0),
                rng.random_range(-1.5..3.0),
            ];
            // Reference: walk voxel boundaries one by one.
            let mut expect = Some([0usize; 3]);
            for axis in 0..3 {
                let lo = g.range(axis)[0];
                let vs = g.voxel_size()[axis];
                let mut found = None;
                for i in 0..g.dims()[axis] {
                    let a = lo + i as f64 * vs;
                    if p[axis] >= a && p[axis] < a + vs {
                        found = Some(i);
                        break;
                    }
                }
                match (found, expect.as_mut()) {
                    (Some(i), Some(e)) => e[axis] = i,
                    _ => expect = None,
                }
            }
            assert_eq!(g.voxel_index(p), expect, "point {:?}", p);
        }
    }

    #[test]
    fn center_round_trip_within_half_voxel() {
        let g = GridSpec::desk();
        let mut rng = crate::Rng::seed_from_u64(3);
        for _ in 0..500 {
            let p = [
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
                rng.random_range(-0.8..2.4),
            ];
            let c = g.voxel_center(g.voxel_index(p).unwrap());
            for a in 0..3 {
                assert!((c[a] - p[a]).abs() <= 0.2 + 1e-12);
            }
        }
    }

    #[test]
    fn flip_reverses_row() {
        let g = make_grid_spec([0.0, 3.0], [0.0, 1.0], [0.0, 1.0], [1.0; 3]).unwrap();
        let l = OccupancyLabelGrid::new(g, vec![1, 2, 3]).unwrap();
        assert_eq!(flip_grid(&l, Axis::X).unwrap().labels, vec![3, 2, 1]);
        assert!(matches!(flip_grid(&l, Axis::Z), Err(Error::InvalidFlipAxis("z"))));
    }

    #[test]
    fn flip_is_involution_and_preserves_occupancy() {
        let g = make_grid_spec([0.0, 5.0], [0.0, 4.0], [0.0, 3.0], [1.0; 3]).unwrap();
        let mut rng = crate::Rng::seed_from_u64(11);
        let labels: Vec<u8> = (0..g.num_voxels()).map(|_| rng.random_range(0..4)).collect();
        let l = OccupancyLabelGrid::new(g.clone(), labels).unwrap();
        for axis in [Axis::X, Axis::Y] {
            let f = flip_grid(&l, axis).unwrap();
            assert_eq!(f.occupied_count(), l.occupied_count());
            assert_eq!(flip_grid(&f, axis).unwrap(), l);
        }
        let data: Vec<f64> = (0..2 * g.num_voxels()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v = VoxelFeatureGrid::new(g, Tensor::from_vec(&[2, 5, 4, 3], data).unwrap()).unwrap();
        let f = flip_grid(&v, Axis::Y).unwrap();
        assert_ne!(f, v);
        assert_eq!(flip_grid(&f, Axis::Y).unwrap(), v);
    }

    #[test]
    fn label_set_rules() {
        assert_eq!(SemanticLabelSet::desk().num_classes(), 6);
        assert!(SemanticLabelSet::new(vec!["free".into()]).is_err());
        assert!(SemanticLabelSet::new(vec!["car".into(), "free".into()]).is_err());
        assert!(SemanticLabelSet::new(vec!["free".into(), "car".into(), "car".into()]).is_err());
    }

    #[test]
    fn coarsened_uses_ceil() {
        let g = GridSpec::desk().coarsened(2).coarsened(2);
        assert_eq!(g.dims(), [13, 13, 2]);
    }
}
