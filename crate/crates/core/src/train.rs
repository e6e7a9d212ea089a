//! One optimization step of the full objective.

use alloc::vec::Vec;

use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::camnet::LiftGeometry;
use crate::error::{Error, Result};
use crate::grid::Axis;
use crate::metrics::ConfusionMatrix;
use crate::model::{Model, Sample};
use crate::optim::{cosine_lr, Adam, AdamConfig};
use crate::params::ParamId;
use crate::tempenh::{select_mask_index, MaskChoice};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub adam: AdamConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub flip_aug: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self { adam: AdamConfig::default(), steps: 2000, batch_size: 2, flip_aug: true }
    }
}

/// Batch-mean loss terms of one step. Disabled terms are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f64,
    pub main: f64,
    pub long: f64,
    pub short: f64,
    pub depth: f64,
}

pub struct Trainer {
    pub model: Model,
    pub settings: TrainSettings,
    pub adam: Adam,
    pub rng: crate::Rng,
    pub step: usize,
}

/// Gradients of every parameter touched by the graph, summed over the
/// batch.
pub type ParamGrads = Vec<(ParamId, Tensor)>;

impl Trainer {
    pub fn new(model: Model, settings: TrainSettings, seed: u64) -> Self {
        let adam = Adam::new(settings.adam.clone());
        Self { model, settings, adam, rng: crate::Rng::seed_from_u64(seed), step: 0 }
    }

    /// Masked offset for one sample: random in `1..N` or fixed at 1.
    pub fn draw_mask(&mut self) -> Result<Option<MaskChoice>> {
        let cfg = &self.model.config;
        if !cfg.te_enabled() {
            return Ok(None);
        }
        if cfg.random_mask {
            select_mask_index(cfg.history, &mut self.rng).map(Some)
        } else {
            MaskChoice::new(cfg.history, 1).map(Some)
        }
    }

    pub fn draw_flip(&mut self) -> Vec<Axis> {
        if !self.settings.flip_aug {
            return Vec::new();
        }
        [Axis::X, Axis::Y].into_iter().filter(|_| self.rng.random_bool(0.5)).collect()
    }

    /// Forward and backward over `batch` without updating parameters.
    pub fn loss_and_grads(
        &self,
        geometry: &LiftGeometry,
        batch: &[(&Sample, Option<MaskChoice>, Vec<Axis>)],
    ) -> Result<(StepLosses, ParamGrads)> {
        if batch.is_empty() {
            return Err(Error::InvalidConfig("empty batch".into()));
        }
        let inv = 1.0 / batch.len() as f64;
        let mut losses = StepLosses::default();
        let mut grads: Vec<Option<Tensor>> = alloc::vec![None; self.model.store.len()];
        for (sample, mask, flip) in batch {
            let mut g = Graph::new();
            let out = self.model.forward_train(&mut g, geometry, sample, *mask, flip)?;
            let value = |v: Option<crate::autograd::Var>| v.map_or(0.0, |v| g.value(v).item() * inv);
            losses.total += value(Some(out.total));
            losses.main += value(Some(out.main));
            losses.long += value(out.long);
            losses.short += value(out.short);
            losses.depth += value(out.depth);
            let gr = g.backward(out.total);
            for (id, t) in gr.params() {
                match &mut grads[id.0] {
                    Some(acc) => acc.add_assign(t),
                    slot @ None => *slot = Some(t.clone()),
                }
            }
        }
        if !losses.total.is_finite() {
            return Err(Error::InvalidConfig("non-finite loss".into()));
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .filter_map(|(i, g)| {
                g.map(|mut t| {
                    t.scale_assign(inv);
                    (ParamId(i), t)
                })
            })
            .collect();
        Ok((losses, grads))
    }

    /// One update on `samples`: draws a mask and flips per sample, builds
    /// the objective, and applies Adam at the scheduled learning rate.
    pub fn train_step(&mut self, geometry: &LiftGeometry, samples: &[&Sample]) -> Result<StepLosses> {
        let mut batch = Vec::with_capacity(samples.len());
        for &s in samples {
            let mask = self.draw_mask()?;
            let flip = self.draw_flip();
            batch.push((s, mask, flip));
        }
        let (losses, grads) = self.loss_and_grads(geometry, &batch)?;
        let lr = cosine_lr(&self.settings.adam, self.step, self.settings.steps);
        self.adam.update(&mut self.model.store, &grads, lr);
        self.step += 1;
        Ok(losses)
    }
}

/// Pooled confusion counts of main-branch predictions over `samples`.
pub fn evaluate_samples(model: &Model, geometry: &LiftGeometry, samples: &[&Sample]) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.config.num_classes);
    for s in samples {
        let pred = model.infer(geometry, s)?;
        cm.accumulate(&pred.labels(), s.current_labels())?;
    }
    Ok(cm)
}
