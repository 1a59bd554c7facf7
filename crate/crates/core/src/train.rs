//! Mini-batch training and evaluation loops.
//!
//! Everything random here is a pure function of `(train.seed, step, slot)`, so
//! a run resumed from a checkpoint at step `s` continues exactly as the
//! uninterrupted run would have. Per-image gradients may be computed on
//! several threads; they are summed in batch order.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::TrainSection;
use crate::data::Sample;
use crate::detect::{evaluate_ap, ApReport, Detection, GroundTruthBox, AP_IOU};
use crate::error::{Error, Result};
use crate::model::{Detector, RfpOverride};
use crate::tensor::{Graph, ParamId, Real, Sgd, Tensor};

const AUGMENT_STREAM_SALT: u64 = 0x5851_f42d_4c95_7f2d;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// Steps completed after this update.
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub cls: f64,
    pub reg: f64,
    pub grad_norm: f64,
    pub num_pos: usize,
}

/// Warm-up, then tenfold drops at each `decay_at` fraction of the run.
pub fn lr_at(cfg: &TrainSection, step: u64) -> f64 {
    let mut lr = cfg.lr;
    if step < cfg.warmup {
        lr *= (step + 1) as f64 / cfg.warmup as f64;
    }
    for f in &cfg.decay_at {
        if step as f64 >= f * cfg.steps as f64 {
            lr *= 0.1;
        }
    }
    lr
}

/// Dataset order: one seeded permutation per epoch, consumed in slices of `batch`.
pub struct BatchOrder {
    n: usize,
    seed: u64,
    cache: HashMap<u64, Vec<usize>>,
}

impl BatchOrder {
    pub fn new(n: usize, seed: u64) -> Self {
        BatchOrder {
            n,
            seed,
            cache: HashMap::new(),
        }
    }

    /// Sample index at global position `pos` (= step·batch + slot).
    pub fn index(&mut self, pos: u64) -> usize {
        let epoch = pos / self.n as u64;
        let (n, seed) = (self.n, self.seed);
        let perm = self.cache.entry(epoch).or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(epoch);
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut rng);
            p
        });
        perm[(pos % self.n as u64) as usize]
    }
}

/// Random flip and shift for the sample at global position `pos`.
pub fn augment(sample: &Sample, cfg: &TrainSection, pos: u64) -> Sample {
    if !cfg.hflip && cfg.max_shift == 0 {
        return sample.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ AUGMENT_STREAM_SALT);
    rng.set_stream(pos);
    let mut s = if cfg.hflip && rng.random::<bool>() {
        sample.hflip()
    } else {
        sample.clone()
    };
    if cfg.max_shift > 0 {
        let m = cfg.max_shift as i64;
        let (dy, dx) = (rng.random_range(-m..=m), rng.random_range(-m..=m));
        s = s.shifted(dy as isize, dx as isize);
    }
    s
}

type ImageGrads<T> = (Vec<(ParamId, Tensor<T>)>, crate::detect::LossBreakdown);

fn image_grads<T: Real>(det: &Detector<T>, s: &Sample) -> Result<ImageGrads<T>> {
    let mut g = Graph::new();
    let (loss, parts) = det.loss(&mut g, &s.to_tensor(), &s.boxes)?;
    g.backward(loss)?;
    Ok((g.param_grads().map(|(id, t)| (id, t.clone())).collect(), parts))
}

/// Run optimiser steps `start..end`. `on_step` sees every completed step.
pub fn train_steps<T: Real>(
    det: &mut Detector<T>,
    samples: &[Sample],
    cfg: &TrainSection,
    start: u64,
    end: u64,
    mut on_step: impl FnMut(&StepRecord, &Detector<T>) -> Result<()>,
) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let mut order = BatchOrder::new(samples.len(), cfg.seed);
    for step in start..end {
        let batch: Vec<Sample> = (0..cfg.batch as u64)
            .map(|slot| {
                let pos = step * cfg.batch as u64 + slot;
                augment(&samples[order.index(pos)], cfg, pos)
            })
            .collect();
        let results: Vec<ImageGrads<T>> = batch.par_iter().map(|s| image_grads(det, s)).collect::<Result<_>>()?;

        det.store.zero_grads();
        let mut rec = StepRecord {
            step: step + 1,
            lr: lr_at(cfg, step),
            loss: 0.0,
            cls: 0.0,
            reg: 0.0,
            grad_norm: 0.0,
            num_pos: 0,
        };
        let inv = 1.0 / cfg.batch as f64;
        for (grads, parts) in &results {
            for (id, t) in grads {
                det.store.accumulate_grad(*id, t)?;
            }
            rec.loss += parts.total * inv;
            rec.cls += parts.cls * inv;
            rec.reg += parts.reg * inv;
            rec.num_pos += parts.num_pos;
        }
        det.store.scale_grads(T::from_f64_lossy(inv));
        let sq: f64 = det
            .store
            .iter()
            .filter_map(|(_, p)| p.grad.as_ref())
            .flat_map(|g| g.data().iter().map(|v| v.as_f64() * v.as_f64()))
            .sum();
        rec.grad_norm = sq.sqrt();
        if !rec.grad_norm.is_finite() || !rec.loss.is_finite() {
            return Err(Error::invariant(format!("training diverged at step {}", step + 1)));
        }
        if cfg.clip_norm > 0.0 && rec.grad_norm > cfg.clip_norm {
            det.store.scale_grads(T::from_f64_lossy(cfg.clip_norm / rec.grad_norm));
        }
        Sgd {
            lr: rec.lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        }
        .step(&mut det.store)?;
        on_step(&rec, det)?;
    }
    Ok(())
}

/// Ground-truth boxes of `samples`, image ids by position.
pub fn ground_truth(samples: &[Sample]) -> Vec<GroundTruthBox> {
    samples
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.boxes.iter().map(move |&bbox| GroundTruthBox { image_id: i, bbox }))
        .collect()
}

/// Detections for every sample (image id = position).
pub fn detect_all<T: Real>(det: &Detector<T>, samples: &[Sample], ov: RfpOverride) -> Result<Vec<Vec<Detection>>> {
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| det.detect(&s.to_tensor(), i, ov))
        .collect()
}

/// AP@0.5 of the detector on `samples`.
pub fn evaluate<T: Real>(det: &Detector<T>, samples: &[Sample], ov: RfpOverride) -> Result<ApReport> {
    let dets: Vec<Detection> = detect_all(det, samples, ov)?.into_iter().flatten().collect();
    evaluate_ap(&dets, &ground_truth(samples), AP_IOU)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule() {
        let cfg = TrainSection {
            lr: 1.0,
            warmup: 4,
            steps: 100,
            decay_at: vec![0.5, 0.9],
            ..TrainSection::default()
        };
        assert_eq!(lr_at(&cfg, 0), 0.25);
        assert_eq!(lr_at(&cfg, 3), 1.0);
        assert_eq!(lr_at(&cfg, 49), 1.0);
        assert!((lr_at(&cfg, 50) - 0.1).abs() < 1e-15);
        assert!((lr_at(&cfg, 95) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn every_epoch_is_a_permutation() {
        let mut o = BatchOrder::new(10, 3);
        for epoch in 0..3u64 {
            let mut seen: Vec<usize> = (0..10).map(|k| o.index(epoch * 10 + k)).collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..10).collect::<Vec<_>>());
        }
        let mut o2 = BatchOrder::new(10, 3);
        assert_eq!(o.index(17), o2.index(17));
    }
}
