//! Per-class IoU and mIoU over semantic occupancy grids.
//!
//! Classes whose union is empty are absent: they get no IoU and are left
//! out of the mean. The free class takes part like any other class.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::grid::OccupancyLabelGrid;

/// `counts[gt * k + pred]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn accumulate(&mut self, pred: &OccupancyLabelGrid, gt: &OccupancyLabelGrid) -> Result<()> {
        pred.spec.ensure_same(&gt.spec)?;
        pred.validate(self.num_classes)?;
        gt.validate(self.num_classes)?;
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            self.counts[g as usize * self.num_classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::LabelOutOfRange {
                label: other.num_classes,
                num_classes: self.num_classes,
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// IoU per class; `None` where the class appears in neither grid.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let k = self.num_classes;
        (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let gt_total: u64 = (0..k).map(|p| self.get(c, p)).sum();
                let pred_total: u64 = (0..k).map(|g| self.get(g, c)).sum();
                let union = gt_total + pred_total - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> f64 {
        mean_present(&self.per_class_iou())
    }
}

/// Mean over present classes; 0 when no class is present.
pub fn mean_present(ious: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = ious.iter().flatten().copied().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

pub fn per_class_iou(
    pred: &OccupancyLabelGrid,
    gt: &OccupancyLabelGrid,
    num_classes: usize,
) -> Result<Vec<Option<f64>>> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.accumulate(pred, gt)?;
    Ok(cm.per_class_iou())
}

pub fn miou(pred: &OccupancyLabelGrid, gt: &OccupancyLabelGrid, num_classes: usize) -> Result<f64> {
    Ok(mean_present(&per_class_iou(pred, gt, num_classes)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{flip_grid, make_grid_spec, Axis, GridSpec};
    use rand::{Rng, SeedableRng};

    fn grid(n: [usize; 3]) -> GridSpec {
        make_grid_spec([0.0, n[0] as f64], [0.0, n[1] as f64], [0.0, n[2] as f64], [1.0; 3]).unwrap()
    }

    fn random_grid(rng: &mut crate::Rng, spec: &GridSpec, k: u8) -> OccupancyLabelGrid {
        let l = (0..spec.num_voxels()).map(|_| rng.random_range(0..k)).collect();
        OccupancyLabelGrid::new(spec.clone(), l).unwrap()
    }

    #[test]
    fn two_voxel_case() {
        let s = grid([2, 1, 1]);
        let pred = OccupancyLabelGrid::new(s.clone(), vec![0, 1]).unwrap();
        let gt = OccupancyLabelGrid::new(s, vec![1, 1]).unwrap();
        let iou = per_class_iou(&pred, &gt, 2).unwrap();
        assert_eq!(iou, vec![Some(0.0), Some(0.5)]);
        assert_eq!(miou(&pred, &gt, 2).unwrap(), 0.25);
    }

    #[test]
    fn identity_gives_one() {
        let s = grid([4, 4, 2]);
        let mut rng = crate::Rng::seed_from_u64(5);
        let g = random_grid(&mut rng, &s, 6);
        assert!(per_class_iou(&g, &g, 6).unwrap().iter().flatten().all(|&v| v == 1.0));
        assert_eq!(miou(&g, &g, 6).unwrap(), 1.0);
    }

    #[test]
    fn absent_classes_excluded() {
        let s = grid([2, 1, 1]);
        let g = OccupancyLabelGrid::new(s, vec![0, 2]).unwrap();
        let iou = per_class_iou(&g, &g, 4).unwrap();
        assert_eq!(iou, vec![Some(1.0), None, Some(1.0), None]);
        assert_eq!(miou(&g, &g, 4).unwrap(), 1.0);
    }

    #[test]
    fn mismatched_inputs_rejected() {
        let a = OccupancyLabelGrid::filled(grid([2, 2, 1]), 0);
        let b = OccupancyLabelGrid::filled(grid([2, 1, 1]), 0);
        assert!(matches!(miou(&a, &b, 2), Err(Error::SpecMismatch(_))));
        let c = OccupancyLabelGrid::filled(grid([2, 2, 1]), 5);
        assert!(matches!(miou(&a, &c, 2), Err(Error::LabelOutOfRange { label: 5, .. })));
    }

    #[test]
    fn flip_symmetry() {
        let s = grid([6, 5, 3]);
        let mut rng = crate::Rng::seed_from_u64(9);
        for _ in 0..20 {
            let p = random_grid(&mut rng, &s, 4);
            let g = random_grid(&mut rng, &s, 4);
            let base = miou(&p, &g, 4).unwrap();
            for axis in [Axis::X, Axis::Y] {
                let f = miou(&flip_grid(&p, axis).unwrap(), &flip_grid(&g, axis).unwrap(), 4).unwrap();
                assert_eq!(f, base);
            }
        }
    }

    #[test]
    fn correcting_a_voxel_never_lowers_miou() {
        let s = grid([4, 4, 2]);
        let mut rng = crate::Rng::seed_from_u64(13);
        for _ in 0..200 {
            let mut p = random_grid(&mut rng, &s, 5);
            let g = random_grid(&mut rng, &s, 5);
            let wrong: Vec<usize> = (0..p.labels.len()).filter(|&i| p.labels[i] != g.labels[i]).collect();
            if wrong.is_empty() {
                continue;
            }
            let before = miou(&p, &g, 5).unwrap();
            let i = wrong[rng.random_range(0..wrong.len())];
            p.labels[i] = g.labels[i];
            assert!(miou(&p, &g, 5).unwrap() >= before - 1e-15);
        }
    }
}
