use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{loss_and_grad, required_slots, ModelConfig, ModelError, ModelParams, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub init_lr: f64,
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Sentences per update.
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            peak_lr: 5e-4,
            warmup_steps: 200,
            init_lr: 1e-7,
            min_lr: 1e-9,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.01,
            epochs: 10,
            batch_size: 16,
            seed: 0,
            clip_norm: None,
        }
    }
}

/// Linear warmup from `init_lr` to `peak_lr`, then `peak_lr * sqrt(warmup / step)`,
/// floored at `min_lr`.
pub fn lr_at(cfg: &OptimConfig, step: usize) -> f64 {
    let warmup = cfg.warmup_steps.max(1);
    let lr = if step < warmup {
        cfg.init_lr + (cfg.peak_lr - cfg.init_lr) * step as f64 / warmup as f64
    } else {
        cfg.peak_lr * (warmup as f64 / step as f64).sqrt()
    };
    lr.max(cfg.min_lr)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub skipped: usize,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub params: ModelParams,
    pub report: TrainReport,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.blocks().iter().map(|b| vec![0.0; b.len()]).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    /// Decoupled weight decay.
    fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64, cfg: &OptimConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (((p, g), m), v) in params.blocks_mut().into_iter().zip(grads.blocks()).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
                p[i] -= lr * (update + cfg.weight_decay * p[i]);
            }
        }
    }
}

fn grad_norm(g: &ModelParams) -> f64 {
    g.blocks().iter().flat_map(|b| b.iter()).map(|x| x * x).sum::<f64>().sqrt()
}

/// Trains a freshly initialized model on `(input ids, target ids)` pairs with
/// CTC loss and Adam.
///
/// Pairs whose target cannot be aligned to the input (too long, or too many
/// adjacent repeats) or whose input exceeds `max_len` are skipped. Per-sample
/// gradients within a batch are computed in parallel and summed in index order,
/// so results do not depend on the thread count.
pub fn train(dataset: &[(Vec<usize>, Vec<usize>)], config: &ModelConfig, opt: &OptimConfig) -> Result<Trained> {
    let mut params = ModelParams::init(config, opt.seed)?;
    let usable: Vec<usize> = (0..dataset.len())
        .filter(|&i| {
            let (x, y) = &dataset[i];
            !x.is_empty() && x.len() <= config.max_len && required_slots(y) <= x.len()
        })
        .collect();
    let skipped = dataset.len() - usable.len();
    if skipped > 0 {
        log::info!("skipping {skipped} of {} training pairs that cannot be aligned", dataset.len());
    }
    if usable.is_empty() {
        return Err(ModelError::AllPairsSkipped);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed ^ 0x5eed_0f7a_1e00);
    let mut adam = Adam::new(&params);
    let mut order = usable;
    let mut epoch_losses = Vec::with_capacity(opt.epochs);
    let mut step = 0usize;
    let batch = opt.batch_size.max(1);
    for epoch in 0..opt.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(batch) {
            let results: Vec<(f64, ModelParams)> = chunk
                .par_iter()
                .map(|&i| loss_and_grad(&params, &dataset[i].0, &dataset[i].1))
                .collect::<Result<_>>()?;
            let mut grads = params.zeros_like();
            for (loss, g) in &results {
                loss_sum += loss;
                grads.accumulate(g);
            }
            grads.scale(1.0 / chunk.len() as f64);
            if let Some(max) = opt.clip_norm {
                let norm = grad_norm(&grads);
                if norm > max {
                    grads.scale(max / norm);
                }
            }
            adam.step(&mut params, &grads, lr_at(opt, step), opt);
            step += 1;
        }
        let mean = loss_sum / order.len() as f64;
        log::info!("epoch {}: mean loss {mean:.4}", epoch + 1);
        epoch_losses.push(mean);
    }
    Ok(Trained { params, report: TrainReport { epoch_losses, skipped, steps: step } })
}
