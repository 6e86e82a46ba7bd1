//! Training: per-ray losses, exact gradients through the quadrature and the
//! network, Adam with milestone decay, and the epoch loop.

pub mod loss;
pub mod optim;

use std::io::Write;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use loss::{
    loss_and_weight_gradient, loss_child_depth, loss_child_free, loss_parent_depth, loss_terms,
    smooth_l1_prime, total_loss, LossConfig, LossTerms, RayTarget,
};
pub use optim::{Adam, MultiStepLr};

use crate::error::{Error, Result};
use crate::field::{
    merge_sorted, sample_child_segmented, sample_coarse_uniform, sample_fine, FieldModel,
    RenderResult, SamplingConfig, Tape,
};
use crate::geom::{ray_aabb_intersect, Ray, Vec3};
use crate::partition::ParentBlock;

/// Rays per forward/backward chunk.
const CHUNK_RAYS: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub milestones: Vec<usize>,
    pub decay: f64,
    pub batch_rays: usize,
    pub epochs: usize,
    /// Train on every n-th ray of the training scans.
    pub ray_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 4e-5,
            milestones: vec![5, 10, 20],
            decay: 0.1,
            batch_rays: 1024,
            epochs: 1,
            ray_stride: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || self.batch_rays == 0 || self.ray_stride == 0 {
            return Err(Error::Config(
                "train needs lr >= 0, batch_rays > 0 and ray_stride > 0".into(),
            ));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("milestones must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> MultiStepLr {
        MultiStepLr {
            base: self.lr,
            milestones: self.milestones.clone(),
            decay: self.decay,
        }
    }
}

/// A ray with its parent far bound and child segment resolved.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainRay {
    pub ray: Ray,
    pub target: RayTarget,
}

/// Resolves parent and child bounds. Rays that miss the parent box (or
/// leave it before `t0`) are dropped; the second value counts them.
pub fn prepare_training_rays(
    parent: &ParentBlock,
    rays: &[Ray],
    cfg: &LossConfig,
) -> (Vec<TrainRay>, usize) {
    let mut out = Vec::with_capacity(rays.len());
    let mut dropped = 0;
    for ray in rays {
        let Some(parent_hit) = ray_aabb_intersect(ray, &parent.aabb) else {
            dropped += 1;
            continue;
        };
        if parent_hit.t_exit <= cfg.t0 {
            dropped += 1;
            continue;
        }
        let segment = ray
            .child_index
            .and_then(|k| parent.children.iter().find(|c| c.child_id == k))
            .and_then(|c| ray_aabb_intersect(ray, &c.aabb));
        out.push(TrainRay {
            ray: *ray,
            target: RayTarget {
                depth: ray.depth,
                far: parent_hit.t_exit,
                segment,
            },
        });
    }
    (out, dropped)
}

/// Deterministic seed derivation (SplitMix64 finalizer over the inputs).
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h = h.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

/// Coarse (child-segmented) plus fine sample depths for a set of rays.
pub fn sample_training_depths(
    model: &FieldModel,
    rays: &[TrainRay],
    sampling: &SamplingConfig,
    loss: &LossConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f64>> {
    let coarse: Vec<Vec<f64>> = rays
        .iter()
        .map(|r| {
            let parent = r.target.parent_interval(loss);
            match r.target.inflated_segment(loss) {
                Some(seg) => sample_child_segmented(
                    &parent,
                    &seg,
                    sampling.n_coarse,
                    sampling.lambda_in,
                    Some(&mut *rng),
                ),
                None => sample_coarse_uniform(&parent, sampling.n_coarse, Some(&mut *rng)),
            }
        })
        .collect();
    if sampling.n_fine == 0 {
        return coarse;
    }
    let points: Vec<Vec3> = rays
        .iter()
        .zip(&coarse)
        .flat_map(|(r, ts)| ts.iter().map(move |&t| r.ray.at(t)))
        .collect();
    let sigma = model.sigma_batch(&points);
    let mut at = 0;
    coarse
        .into_iter()
        .map(|ts| {
            let n = ts.len();
            let render = RenderResult::from_sigma(ts, sigma[at..at + n].to_vec());
            at += n;
            let fine = sample_fine(&render, sampling.n_fine, Some(&mut *rng));
            let mut fine = fine;
            fine.sort_by(f64::total_cmp);
            merge_sorted(&render.t, &fine)
        })
        .collect()
}

/// Mean loss terms of a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchLoss {
    pub terms: LossTerms,
    pub total: f64,
    pub unassigned: usize,
}

fn chunk_loss_and_gradient(
    model: &FieldModel,
    rays: &[TrainRay],
    depths: &[Vec<f64>],
    cfg: &LossConfig,
) -> (LossTerms, f64, usize, Vec<f64>) {
    let points: Vec<Vec3> = rays
        .iter()
        .zip(depths)
        .flat_map(|(r, ts)| ts.iter().map(move |&t| r.ray.at(t)))
        .collect();
    let mut tape = Tape::default();
    let sigma = model.sigma_batch_taped(&points, &mut tape);
    let mut d_sigma = Vec::with_capacity(sigma.len());
    let mut terms = LossTerms::default();
    let mut total = 0.0;
    let mut unassigned = 0;
    let mut at = 0;
    for (r, ts) in rays.iter().zip(depths) {
        let n = ts.len();
        let render = RenderResult::from_sigma(ts.clone(), sigma[at..at + n].to_vec());
        at += n;
        let (t, d_weight) = loss_and_weight_gradient(&render, &r.target, cfg);
        if r.target.segment.is_none() {
            unassigned += 1;
        }
        total += t.total(cfg);
        terms.add(&t);
        d_sigma.extend(render.sigma_gradient(&d_weight));
    }
    let mut grad = vec![0.0; model.params.len()];
    model.backward(&tape, &d_sigma, &mut grad);
    (terms, total, unassigned, grad)
}

/// Mean batch loss and its exact gradient. Sample depths are constants.
pub fn grad_total_loss(
    model: &FieldModel,
    rays: &[TrainRay],
    depths: &[Vec<f64>],
    cfg: &LossConfig,
) -> Result<(BatchLoss, Vec<f64>)> {
    assert_eq!(rays.len(), depths.len());
    if rays.is_empty() {
        return Ok((BatchLoss::default(), vec![0.0; model.params.len()]));
    }
    let parts: Vec<_> = rays
        .par_chunks(CHUNK_RAYS)
        .zip(depths.par_chunks(CHUNK_RAYS))
        .map(|(r, d)| chunk_loss_and_gradient(model, r, d, cfg))
        .collect();
    let scale = 1.0 / rays.len() as f64;
    let mut out = BatchLoss::default();
    let mut grad = vec![0.0; model.params.len()];
    for (terms, total, unassigned, g) in parts {
        out.terms.add(&terms);
        out.total += total;
        out.unassigned += unassigned;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    out.terms = out.terms.scaled(scale);
    out.total *= scale;
    grad.iter_mut().for_each(|g| *g *= scale);
    if !out.total.is_finite() {
        return Err(Error::Numeric(format!("batch loss is {}", out.total)));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("gradient entry {i} is not finite")));
    }
    Ok((out, grad))
}

/// Mean batch loss without gradients.
pub fn batch_loss(
    model: &FieldModel,
    rays: &[TrainRay],
    depths: &[Vec<f64>],
    cfg: &LossConfig,
) -> BatchLoss {
    let points: Vec<Vec3> = rays
        .iter()
        .zip(depths)
        .flat_map(|(r, ts)| ts.iter().map(move |&t| r.ray.at(t)))
        .collect();
    let sigma = model.sigma_batch(&points);
    let mut out = BatchLoss::default();
    let mut at = 0;
    for (r, ts) in rays.iter().zip(depths) {
        let n = ts.len();
        let render = RenderResult::from_sigma(ts.clone(), sigma[at..at + n].to_vec());
        at += n;
        let t = loss_terms(&render, &r.target, cfg);
        out.total += t.total(cfg);
        out.terms.add(&t);
        out.unassigned += usize::from(r.target.segment.is_none());
    }
    let scale = 1.0 / rays.len().max(1) as f64;
    out.terms = out.terms.scaled(scale);
    out.total *= scale;
    out
}

/// One row of the loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch: usize,
    pub pd: f64,
    pub cf: f64,
    pub cd: f64,
    pub total: f64,
    pub lr: f64,
}

/// Trains `model` for `cfg.epochs` epochs. `on_epoch` is called with epoch 0
/// before the first update and after every epoch, e.g. to write checkpoints.
#[allow(clippy::too_many_arguments)]
pub fn train(
    model: &mut FieldModel,
    rays: &[TrainRay],
    sampling: &SamplingConfig,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(usize, &FieldModel) -> Result<()>,
) -> Result<Vec<BatchRecord>> {
    model.check_finite()?;
    on_epoch(0, model)?;
    let schedule = cfg.schedule();
    let mut adam = Adam::new(model.params.len());
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..rays.len()).collect();
    for epoch in 1..=cfg.epochs {
        let lr = schedule.lr_at(epoch);
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[epoch as u64]));
        order.shuffle(&mut shuffle_rng);
        for (batch_idx, idx) in order.chunks(cfg.batch_rays).enumerate() {
            let batch: Vec<TrainRay> = idx.iter().map(|&i| rays[i]).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                seed,
                &[epoch as u64, batch_idx as u64, 1],
            ));
            let depths = sample_training_depths(model, &batch, sampling, loss_cfg, &mut rng);
            let (loss, grad) = grad_total_loss(model, &batch, &depths, loss_cfg)?;
            adam.step(&mut model.params, &grad, lr);
            model.check_finite()?;
            debug!(
                "epoch {epoch} batch {batch_idx}: total {:.4e} (pd {:.4e} cf {:.4e} cd {:.4e})",
                loss.total, loss.terms.pd, loss.terms.cf, loss.terms.cd
            );
            log.push(BatchRecord {
                epoch,
                batch: batch_idx,
                pd: loss.terms.pd,
                cf: loss.terms.cf,
                cd: loss.terms.cd,
                total: loss.total,
                lr,
            });
        }
        if let Some(mean) = epoch_mean(&log, epoch) {
            info!("epoch {epoch}: mean loss {mean:.4e} over {} rays", rays.len());
        }
        on_epoch(epoch, model)?;
    }
    Ok(log)
}

/// Mean total loss over the batches of one epoch.
pub fn epoch_mean(log: &[BatchRecord], epoch: usize) -> Option<f64> {
    let rows: Vec<f64> = log.iter().filter(|r| r.epoch == epoch).map(|r| r.total).collect();
    (!rows.is_empty()).then(|| rows.iter().sum::<f64>() / rows.len() as f64)
}

/// CSV with header `epoch,batch,pd,cf,cd,total,lr`.
pub fn write_loss_log(path: &Path, log: &[BatchRecord]) -> Result<()> {
    let mut out = String::from("epoch,batch,pd,cf,cd,total,lr\n");
    for r in log {
        out.push_str(&format!(
            "{},{},{:e},{:e},{:e},{:e},{:e}\n",
            r.epoch, r.batch, r.pd, r.cf, r.cd, r.total, r.lr
        ));
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
