use serde::{Deserialize, Serialize};

use super::infer::{infer, InferConfig, Prediction};
use super::sampling::{Batch, PatchSampler};
use super::split::{Pixel, SampleSplit};
use crate::autodiff::Graph;
use crate::data::HsiCube;
use crate::error::{Error, Result};
use crate::network::{CompactNet, Model};
use crate::nn::Ctx;
use crate::optim::{poly_lr, Sgd};
use crate::params::{GradientMap, ParamGroup, ParamStore};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub patch: usize,
    pub batch: usize,
    pub iters: usize,
    pub init_lr: f64,
    pub power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Validate every this many iterations (and after the last one).
    pub val_iters: usize,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            patch: 32,
            batch: 12,
            iters: 6000,
            init_lr: 0.1,
            power: 0.9,
            momentum: 0.9,
            weight_decay: 0.0003,
            val_iters: 100,
            grad_clip: 5.0,
            augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (f, v) in [
            ("train.patch", self.patch),
            ("train.batch", self.batch),
            ("train.iters", self.iters),
            ("train.val_iters", self.val_iters),
        ] {
            if v == 0 {
                return Err(Error::config(f, "must be positive"));
            }
        }
        if !(self.init_lr > 0.0 && self.init_lr.is_finite()) {
            return Err(Error::config("train.init_lr", "must be positive"));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return Err(Error::config("train.grad_clip", "must be finite and non-negative"));
        }
        if !(self.power > 0.0 && self.power.is_finite()) {
            return Err(Error::config("train.power", "must be positive"));
        }
        Ok(())
    }
}

/// Validation result at one iteration (1-based count of completed steps).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValPoint {
    pub iter: usize,
    pub oa: f64,
    pub loss: f64,
}

impl ValPoint {
    /// Higher accuracy wins, then lower loss; earlier points win full ties.
    pub fn beats(&self, other: &ValPoint) -> bool {
        self.oa > other.oa || (self.oa == other.oa && self.loss < other.loss)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
}

/// The compact network with the weights of its best validation point.
#[derive(Clone, Debug)]
pub struct TrainedModel<T> {
    pub net: CompactNet,
    pub store: ParamStore<T>,
    pub best: ValPoint,
    pub validations: Vec<ValPoint>,
    pub log: Vec<TrainLogEntry>,
}

/// Masked cross-entropy of one batch in train mode, with parameter
/// gradients. Running statistics in `store` are updated.
pub fn batch_loss<M: Model, T: Scalar>(
    model: &M,
    store: &mut ParamStore<T>,
    batch: &Batch<T>,
) -> Result<(f64, GradientMap<T>)> {
    let g = Graph::new();
    let mut cx = Ctx::train(&g, store);
    let x = g.constant(batch.x.clone());
    let loss = model.logits(&mut cx, x).masked_cross_entropy(&batch.labels)?;
    let value = loss.item().f64();
    Ok((value, loss.backward()))
}

/// Overall accuracy and mean negative log-likelihood of the dense
/// prediction over `pixels`.
pub fn evaluate_split<M: Model, T: Scalar>(
    model: &M,
    store: &ParamStore<T>,
    cube: &HsiCube,
    pixels: &[Pixel],
    cfg: &InferConfig,
) -> Result<(f64, f64, Prediction)> {
    if pixels.is_empty() {
        return Err(Error::Contract("cannot validate on an empty pixel set".into()));
    }
    let pred = infer(model, store, cube, cfg)?;
    let mut correct = 0usize;
    let mut nll = 0f64;
    for p in pixels {
        if pred.class_map[p.row * cube.width + p.col] == p.label {
            correct += 1;
        }
        nll -= pred.prob(p.label as usize - 1, p.row, p.col).max(1e-12).ln();
    }
    let n = pixels.len() as f64;
    Ok((correct as f64 / n, nll / n, pred))
}

/// SGD with poly decay on the train pixels, validating on the val pixels
/// every `cfg.val_iters` iterations and keeping the best weights.
pub fn train_compact<T: Scalar>(
    net: CompactNet,
    mut store: ParamStore<T>,
    cube: &HsiCube,
    split: &SampleSplit,
    cfg: &TrainConfig,
    infer_cfg: &InferConfig,
) -> Result<TrainedModel<T>> {
    cfg.validate()?;
    if let Some(grid) = net.fixed_grid() {
        if grid != (cfg.patch, cfg.patch) {
            return Err(Error::config(
                "train.patch",
                format!("{} does not match the attention grid {} × {}", cfg.patch, grid.0, grid.1),
            ));
        }
    }
    if split.val.is_empty() {
        return Err(Error::Contract("training needs a non-empty validation set".into()));
    }
    let mut sampler = PatchSampler::new(cube, &split.train, cfg.patch, cfg.batch, cfg.augment, cfg.seed)?;
    let mut sgd = Sgd::new(ParamGroup::Weight, cfg.momentum, cfg.weight_decay);
    let mut log = Vec::with_capacity(cfg.iters);
    let mut validations = Vec::new();
    let mut best: Option<(ValPoint, ParamStore<T>)> = None;
    for iter in 0..cfg.iters {
        let lr = poly_lr(iter, cfg.iters, cfg.init_lr, cfg.power);
        let batch = sampler.next_batch::<T>();
        let (loss, mut grads) = batch_loss(&net, &mut store, &batch)?;
        if !loss.is_finite() {
            log::error!(
                "training diverged at iteration {iter}: loss {loss}, lr {lr}; last losses {:?}",
                log.iter().rev().take(5).map(|e: &TrainLogEntry| e.loss).collect::<Vec<_>>()
            );
            return Err(Error::Diverged { iteration: iter, loss });
        }
        if cfg.grad_clip > 0.0 {
            grads.clip_norm(cfg.grad_clip);
        }
        sgd.step(&mut store, &grads, lr);
        log.push(TrainLogEntry { iter, loss, lr });
        let done = iter + 1;
        if done % cfg.val_iters == 0 || done == cfg.iters {
            let (oa, vloss, _) = evaluate_split(&net, &store, cube, &split.val, infer_cfg)?;
            let point = ValPoint {
                iter: done,
                oa,
                loss: vloss,
            };
            log::info!("iter {done}: train loss {loss:.4}, val OA {oa:.4}, val loss {vloss:.4}");
            validations.push(point);
            if best.as_ref().is_none_or(|(b, _)| point.beats(b)) {
                best = Some((point, store.clone()));
            }
        }
    }
    let (best, store) = best.expect("at least one validation");
    Ok(TrainedModel {
        net,
        store,
        best,
        validations,
        log,
    })
}
