//! SGD with momentum, learning-rate schedules, and the two-phase training
//! procedure: vanilla warm-up for `E_wu` epochs, one SVD factorization at
//! the switch, then low-rank fine-tuning through epoch `E` on the same
//! schedule. Optimizer state resets at the switch (the momentum buffers
//! have the wrong shapes after factorization).

pub mod loss;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorize::{factorize_model, FactorizationPlan};
use crate::io::dataset::Dataset;
use crate::layers::{LayerKind, Mode};
use crate::numerics::Tensor;
use crate::zoo::{ArchMode, GradStore, ModelGraph, ModelInput};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    /// `init * factor^(#milestones <= epoch)`.
    Milestones {
        init: f64,
        factor: f64,
        epochs: Vec<u64>,
    },
    /// Linear ramp start -> peak across the first `warmup_epochs`, then
    /// milestone decays applied to `peak`.
    LinearWarmupThenMilestones {
        start: f64,
        peak: f64,
        warmup_epochs: u64,
        factor: f64,
        epochs: Vec<u64>,
    },
    /// Starts at `init`; the trainer multiplies by `factor` whenever the
    /// epoch loss stops improving.
    Plateau { init: f64, factor: f64 },
}

/// Scheduled learning rate at `epoch` (1-based). Plateau decays are applied
/// by the trainer on top of this value.
pub fn lr_at(schedule: &LrSchedule, epoch: u64) -> Result<f64> {
    if epoch == 0 {
        return Err(Error::Argument("epochs are 1-based".into()));
    }
    let lr = match schedule {
        LrSchedule::Milestones { init, factor, epochs } => {
            let decays = epochs.iter().filter(|&&m| m <= epoch).count() as i32;
            init * factor.powi(decays)
        }
        LrSchedule::LinearWarmupThenMilestones {
            start,
            peak,
            warmup_epochs,
            factor,
            epochs,
        } => {
            if epoch <= *warmup_epochs {
                if *warmup_epochs <= 1 {
                    *peak
                } else {
                    start + (peak - start) * (epoch - 1) as f64 / (*warmup_epochs - 1) as f64
                }
            } else {
                let decays = epochs.iter().filter(|&&m| m <= epoch).count() as i32;
                peak * factor.powi(decays)
            }
        }
        LrSchedule::Plateau { init, .. } => *init,
    };
    if lr <= 0.0 {
        return Err(Error::Argument(format!("schedule yields lr {lr} <= 0")));
    }
    Ok(lr)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: u64,
    pub warmup_epochs: u64,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub label_smoothing: Option<f64>,
    pub seed: u64,
    /// Restart the schedule from epoch 1 at the vanilla-to-hybrid switch.
    #[serde(default)]
    pub rewarm_at_switch: bool,
    /// Truncated-BPTT window for token-stream tasks.
    #[serde(default = "default_bptt")]
    pub bptt_window: usize,
}

fn default_bptt() -> usize {
    8
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} > epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        for (name, v) in [
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if self.batch_size == 0 || self.bptt_window == 0 {
            return Err(Error::Config("batch_size and bptt_window must be >= 1".into()));
        }
        Ok(())
    }
}

/// One SGD+momentum update on a flat parameter slice:
/// `v <- momentum v + g + wd theta; theta <- theta - lr v`.
pub fn sgd_update(
    theta: &mut [f64],
    grad: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    debug_assert_eq!(theta.len(), grad.len());
    debug_assert_eq!(theta.len(), velocity.len());
    for i in 0..theta.len() {
        velocity[i] = momentum * velocity[i] + grad[i] + weight_decay * theta[i];
        theta[i] -= lr * velocity[i];
    }
}

/// Momentum buffers aligned with a model's parameter slots.
pub struct Sgd {
    velocity: Vec<Vec<Option<Tensor>>>,
    /// Weight decay applies where true; normalization layers are exempt.
    decay_mask: Vec<bool>,
}

impl Sgd {
    pub fn new(model: &ModelGraph) -> Self {
        Sgd {
            velocity: model
                .layers
                .iter()
                .map(|l| vec![None; l.state.params.len()])
                .collect(),
            decay_mask: model
                .layers
                .iter()
                .map(|l| {
                    !matches!(
                        l.spec.kind,
                        LayerKind::BatchNorm { .. } | LayerKind::LayerNorm { .. }
                    )
                })
                .collect(),
        }
    }

    /// Applies one update over every trainable parameter in deterministic
    /// (layer, param) order.
    pub fn step(
        &mut self,
        model: &mut ModelGraph,
        grads: &GradStore,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) -> Result<()> {
        for (li, layer) in model.layers.iter_mut().enumerate() {
            let decay_here = self.decay_mask[li];
            for (pi, (name, theta)) in layer.state.params.iter_mut().enumerate() {
                if !crate::layers::is_trainable(name) {
                    continue;
                }
                let Some(g) = &grads.slots[li][pi] else {
                    continue;
                };
                if g.shape() != theta.shape() {
                    return Err(Error::Dimension(format!(
                        "gradient shape {:?} vs parameter {:?} for `{name}`",
                        g.shape(),
                        theta.shape()
                    )));
                }
                let v = self.velocity[li][pi].get_or_insert_with(|| Tensor::zeros(theta.shape()));
                let wd = if decay_here { weight_decay } else { 0.0 };
                sgd_update(theta.data_mut(), g.data(), v.data_mut(), lr, momentum, wd);
            }
        }
        Ok(())
    }
}

/// Scales all gradients so the global L2 norm is at most `bound`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut GradStore, bound: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > bound {
        grads.scale(bound / norm);
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub loss: f64,
    /// Accuracy for classification, perplexity for token streams.
    pub metric: f64,
    pub batches: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricsRow {
    pub epoch: u64,
    pub phase: ArchMode,
    pub lr: f64,
    pub loss: f64,
    pub metric: f64,
    pub param_count: u64,
    pub epoch_seconds: f64,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("epoch,phase,lr,loss,metric,param_count,epoch_seconds\n");
    for r in rows {
        let phase = match r.phase {
            ArchMode::Vanilla => "vanilla",
            ArchMode::Hybrid => "hybrid",
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch, phase, r.lr, r.loss, r.metric, r.param_count, r.epoch_seconds
        ));
    }
    out
}

/// One full pass over the dataset: seeded shuffle order for classification
/// batches, sequential truncated-BPTT windows for token streams.
pub fn train_epoch(
    model: &mut ModelGraph,
    data: &Dataset,
    config: &TrainConfig,
    epoch: u64,
    lr: f64,
    sgd: &mut Sgd,
) -> Result<EpochMetrics> {
    match data {
        Dataset::Classification { x, y, .. } => {
            let n = y.len();
            let mut order: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ epoch.wrapping_mul(0x9e37_79b9));
            order.shuffle(&mut rng);
            let mut total_loss = 0.0;
            let mut total_hits = 0.0;
            let mut batches = 0u64;
            for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
                let xb = gather_rows(x, chunk)?;
                let yb: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
                model.reset_sequence_state();
                let logits = model.forward(&ModelInput::Batch(xb), Mode::Train)?;
                let (l, grad) = loss::cross_entropy(&logits, &yb, config.label_smoothing)?;
                if !l.is_finite() {
                    return Err(Error::Train {
                        what: format!("non-finite loss {l}"),
                        batch: bi,
                    });
                }
                let mut grads = model.backward(&grad)?;
                if let Some(bound) = config.clip_norm {
                    clip_grad_norm(&mut grads, bound);
                }
                sgd.step(model, &grads, lr, config.momentum, config.weight_decay)?;
                total_loss += l * yb.len() as f64;
                total_hits += loss::accuracy(&logits, &yb) * yb.len() as f64;
                batches += 1;
            }
            Ok(EpochMetrics {
                loss: total_loss / n as f64,
                metric: total_hits / n as f64,
                batches,
            })
        }
        Dataset::Tokens { stream, .. } => {
            let w = config.bptt_window;
            if stream.len() < w + 1 {
                return Err(Error::Argument(format!(
                    "token stream of {} tokens is shorter than window {}",
                    stream.len(),
                    w
                )));
            }
            model.reset_sequence_state();
            let mut total_loss = 0.0;
            let mut tokens = 0usize;
            let mut batches = 0u64;
            let mut pos = 0usize;
            while pos + w < stream.len() {
                let input = stream[pos..pos + w].to_vec();
                let targets = stream[pos + 1..pos + w + 1].to_vec();
                let logits = model.forward(&ModelInput::Tokens(input), Mode::Train)?;
                let (l, grad) = loss::cross_entropy(&logits, &targets, config.label_smoothing)?;
                if !l.is_finite() {
                    return Err(Error::Train {
                        what: format!("non-finite loss {l}"),
                        batch: batches as usize,
                    });
                }
                let mut grads = model.backward(&grad)?;
                if let Some(bound) = config.clip_norm {
                    clip_grad_norm(&mut grads, bound);
                }
                sgd.step(model, &grads, lr, config.momentum, config.weight_decay)?;
                total_loss += l * w as f64;
                tokens += w;
                batches += 1;
                pos += w;
            }
            let mean = total_loss / tokens as f64;
            Ok(EpochMetrics {
                loss: mean,
                metric: loss::perplexity(mean),
                batches,
            })
        }
    }
}

fn gather_rows(x: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let per = x.len() / x.shape()[0];
    let mut shape = x.shape().to_vec();
    shape[0] = rows.len();
    let mut data = Vec::with_capacity(rows.len() * per);
    for &r in rows {
        data.extend_from_slice(&x.data()[r * per..(r + 1) * per]);
    }
    Tensor::new(shape, data)
}

pub struct TrainOutcome {
    pub model: ModelGraph,
    pub rows: Vec<MetricsRow>,
}

/// Full two-phase run: vanilla epochs `1..=E_wu`, one factorization, hybrid
/// epochs `E_wu+1..=E`. With `E_wu = 0` the random initialization is
/// factorized immediately (the low-rank-from-scratch baseline); with
/// `E_wu = E` the factorization happens after the last epoch and no
/// fine-tuning follows.
pub fn pufferfish_train(
    arch_id: &str,
    config: &TrainConfig,
    plan: &FactorizationPlan,
    data: &Dataset,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut model = crate::zoo::build_model(arch_id, ArchMode::Vanilla, None)?;
    model.init_params(config.seed);
    let mut sgd = Sgd::new(&model);
    let mut rows = Vec::new();
    let mut plateau_decays: i32 = 0;
    let mut prev_loss = f64::INFINITY;

    for epoch in 1..=config.epochs {
        if epoch == config.warmup_epochs + 1 {
            model = factorize_model(&model, plan)?;
            sgd = Sgd::new(&model);
        }
        let sched_epoch = if config.rewarm_at_switch && epoch > config.warmup_epochs {
            epoch - config.warmup_epochs
        } else {
            epoch
        };
        let mut lr = lr_at(&config.lr, sched_epoch)?;
        if let LrSchedule::Plateau { factor, .. } = config.lr {
            lr *= factor.powi(plateau_decays);
        }
        let start = Instant::now();
        let metrics = train_epoch(&mut model, data, config, epoch, lr, &mut sgd)?;
        if let LrSchedule::Plateau { .. } = config.lr {
            if metrics.loss >= prev_loss {
                plateau_decays += 1;
            }
            prev_loss = metrics.loss;
        }
        rows.push(MetricsRow {
            epoch,
            phase: model.mode,
            lr,
            loss: metrics.loss,
            metric: metrics.metric,
            param_count: model.param_count(),
            epoch_seconds: start.elapsed().as_secs_f64(),
        });
    }
    if config.warmup_epochs == config.epochs {
        model = factorize_model(&model, plan)?;
    }
    Ok(TrainOutcome { model, rows })
}

#[cfg(test)]
mod tests;
