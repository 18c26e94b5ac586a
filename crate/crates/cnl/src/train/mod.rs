//! Desk-scale SGD training: linear warmup into a stepped decay schedule,
//! per-image tapes evaluated in parallel, gradients reduced in index order so
//! runs are bitwise reproducible for a fixed seed at any thread count.

mod dataset;

pub use dataset::{generate_dataset, Dataset, DatasetSpec, Sample};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::NormMode;
use crate::backbone::Model;
use crate::error::{Error, Result};
use crate::export;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Epochs at which the learning rate steps down.
    pub milestones: Vec<usize>,
    /// Multiplier applied at each milestone. 0.1 by default (a 90% decay);
    /// set 0.9 for the literal multiply-by-0.9 reading of that phrase.
    pub decay_factor: f64,
    pub seed: u64,
    pub top_k: usize,
}

impl TrainConfig {
    /// The reference schedule: 110 epochs, 10 warmup, batch 64, base rate
    /// 0.01 stepping down at epochs 50/70/90.
    pub fn full_schedule() -> Self {
        TrainConfig {
            epochs: 110,
            warmup_epochs: 10,
            batch_size: 64,
            base_lr: 0.01,
            milestones: vec![50, 70, 90],
            decay_factor: 0.1,
            seed: 0,
            top_k: 5,
        }
    }

    /// Shrunk defaults with the same shape, sized for the toy backbone.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 8,
            warmup_epochs: 2,
            batch_size: 32,
            base_lr: 0.3,
            milestones: vec![6],
            decay_factor: 0.1,
            seed: 0,
            top_k: 2,
        }
    }

    /// Desk-shaped schedule scaled to an arbitrary epoch count: a quarter of
    /// the run (at most 10 epochs) warms up, and the rate steps down at
    /// three quarters when that leaves room.
    pub fn sized(epochs: usize) -> Self {
        let warmup = (epochs / 4).clamp(1, 10).min(epochs.saturating_sub(1).max(1));
        let milestone = epochs * 3 / 4;
        TrainConfig {
            epochs,
            warmup_epochs: warmup,
            milestones: if milestone > warmup && milestone < epochs { vec![milestone] } else { vec![] },
            ..TrainConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Validation("epochs and batch size must be >= 1".into()));
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return Err(Error::Validation(format!("bad base learning rate {}", self.base_lr)));
        }
        if !(self.decay_factor.is_finite() && self.decay_factor > 0.0) {
            return Err(Error::Validation(format!("bad decay factor {}", self.decay_factor)));
        }
        if !self.milestones.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Validation("milestones must be strictly increasing".into()));
        }
        if let Some(&last) = self.milestones.last() {
            if last >= self.epochs {
                return Err(Error::Validation("milestones must lie before the last epoch".into()));
            }
        }
        if let Some(&first) = self.milestones.first() {
            if self.warmup_epochs >= first {
                return Err(Error::Validation("warmup must end before the first milestone".into()));
            }
        }
        Ok(())
    }
}

/// Learning rate at an epoch: linear warmup from `base_lr / warmup_epochs`
/// up to `base_lr`, then multiplied by `decay_factor` per passed milestone.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::InvalidArgument(format!(
            "epoch {epoch} out of range for {} epochs",
            cfg.epochs
        )));
    }
    if epoch < cfg.warmup_epochs {
        return Ok(cfg.base_lr * (epoch + 1) as f64 / cfg.warmup_epochs as f64);
    }
    let passed = cfg.milestones.iter().filter(|&&m| epoch >= m).count() as i32;
    Ok(cfg.base_lr * cfg.decay_factor.powi(passed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub top1: f64,
    pub top_k: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub top_k: usize,
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let topk_header = format!("top{}", self.top_k);
        let header = ["epoch", "lr", "loss", "top1", topk_header.as_str()];
        let rows: Vec<Vec<String>> = self
            .epochs
            .iter()
            .map(|e| {
                vec![
                    e.epoch.to_string(),
                    format!("{}", e.lr),
                    format!("{}", e.loss),
                    format!("{}", e.top1),
                    format!("{}", e.top_k),
                ]
            })
            .collect();
        export::table_csv(&header, &rows)
    }

    pub fn final_train_top1(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.top1)
    }

    pub fn best_train_top1(&self) -> f64 {
        self.epochs.iter().map(|e| e.top1).fold(0.0, f64::max)
    }
}

/// Label ranks within the first `k` logits, ties broken by lower class index.
pub fn topk_hit(logits: &[f64], label: usize, k: usize) -> bool {
    let rank = logits
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > logits[label] || (v == logits[label] && i < label))
        .count();
    rank < k
}

/// Plain SGD: `p <- p - lr * grad`, and the gradient is left in each
/// tensor's grad slot.
pub fn sgd_step(params: &mut [&mut Tensor], grads: &[Vec<f64>], lr: f64) {
    assert_eq!(params.len(), grads.len());
    for (p, g) in params.iter_mut().zip(grads) {
        for (w, d) in p.data_mut().iter_mut().zip(g) {
            *w -= lr * d;
        }
        p.set_grad(Some(g.clone()));
    }
}

struct ImageResult {
    loss: f64,
    grads: Vec<Vec<f64>>,
    norm_stats: Vec<(Vec<f64>, Vec<f64>)>,
    top1: bool,
    top_k: bool,
}

fn train_image(model: &Model, sample: &Sample, top_k: usize) -> Result<ImageResult> {
    let mut tape = Tape::new();
    let image = sample.to_tensor();
    let pass = model.run_image(&mut tape, &image, NormMode::PerSample, false)?;
    let loss = tape.cross_entropy(pass.logits, &[sample.label])?;
    let loss_value = tape.value(loss)[0];
    let logits = tape.value(pass.logits).to_vec();
    tape.backward(loss)?;
    let grads = pass
        .param_vars
        .iter()
        .map(|&v| tape.grad(v).map_or_else(|| vec![0.0; tape.value(v).len()], <[f64]>::to_vec))
        .collect();
    let norm_stats = tape
        .batch_norm_stats_in_order()
        .into_iter()
        .map(|(m, v)| (m.to_vec(), v.to_vec()))
        .collect();
    Ok(ImageResult {
        loss: loss_value,
        grads,
        norm_stats,
        top1: topk_hit(&logits, sample.label, 1),
        top_k: topk_hit(&logits, sample.label, top_k),
    })
}

/// Train in place with the stepped-warmup schedule; per-epoch rows report
/// the running training loss and accuracy. Aborts with a diagnostic if the
/// loss leaves the finite range.
pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if cfg.top_k > model.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "top-{} requested with only {} classes",
            cfg.top_k,
            model.num_classes()
        )));
    }
    let mut report = TrainReport { top_k: cfg.top_k, epochs: Vec::with_capacity(cfg.epochs) };
    let mut indices: Vec<usize> = (0..data.train.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg, epoch)?;
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(1000 + epoch as u64);
        indices.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut top1_hits = 0usize;
        let mut topk_hits = 0usize;

        for (step, batch) in indices.chunks(cfg.batch_size).enumerate() {
            let results: Vec<ImageResult> = batch
                .par_iter()
                .map(|&i| train_image(model, &data.train[i], cfg.top_k))
                .collect::<Result<_>>()?;

            let inv = 1.0 / batch.len() as f64;
            let mut grad_sum: Option<Vec<Vec<f64>>> = None;
            let mut batch_loss = 0.0;
            // Fixed reduction order: image index within the batch.
            for r in &results {
                batch_loss += r.loss;
                top1_hits += usize::from(r.top1);
                topk_hits += usize::from(r.top_k);
                match &mut grad_sum {
                    None => grad_sum = Some(r.grads.clone()),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&r.grads) {
                            for (x, y) in a.iter_mut().zip(g) {
                                *x += y;
                            }
                        }
                    }
                }
                model.apply_norm_stats(&r.norm_stats)?;
            }
            batch_loss *= inv;
            loss_sum += batch_loss * batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Divergence { epoch, step, loss: batch_loss });
            }
            let mut grads = grad_sum.expect("non-empty batch");
            for g in &mut grads {
                for v in g.iter_mut() {
                    *v *= inv;
                }
            }
            sgd_step(&mut model.params_mut(), &grads, lr);
        }

        let n = data.train.len() as f64;
        report.epochs.push(EpochStats {
            epoch,
            lr,
            loss: loss_sum / n,
            top1: top1_hits as f64 / n,
            top_k: topk_hits as f64 / n,
        });
    }
    Ok(report)
}

/// Top-1 and top-k accuracy on a sample set, evaluated with per-sample
/// normalization statistics. `k` must not exceed the class count.
pub fn evaluate(model: &Model, samples: &[Sample], k: usize) -> Result<(f64, f64)> {
    if k > model.num_classes() || k == 0 {
        return Err(Error::InvalidArgument(format!(
            "top-{k} requested with {} classes",
            model.num_classes()
        )));
    }
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples to evaluate".into()));
    }
    let hits: Vec<(bool, bool)> = samples
        .par_iter()
        .map(|s| {
            let mut tape = Tape::new();
            let pass = model.run_image(&mut tape, &s.to_tensor(), NormMode::PerSample, false)?;
            let logits = tape.value(pass.logits);
            Ok((topk_hit(logits, s.label, 1), topk_hit(logits, s.label, k)))
        })
        .collect::<Result<_>>()?;
    let n = samples.len() as f64;
    let top1 = hits.iter().filter(|h| h.0).count() as f64 / n;
    let topk = hits.iter().filter(|h| h.1).count() as f64 / n;
    Ok((top1, topk))
}
