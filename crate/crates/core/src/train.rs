//! Toy training loop on the synthetic shapes.

use std::collections::HashMap;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{ShapeGenerator, SHAPE_SIZE};
use crate::error::{TensorError, VtError};
use crate::model::{ModelConfig, ModelGraph};
use crate::tensor::{BnMode, Tape, Tensor};

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Training samples are drawn from indices `0 .. pool`.
    pub pool: u64,
    /// Rescale the gradient when its global L2 norm exceeds this value.
    pub clip_norm: Option<f32>,
    /// Decay the learning rate to zero along a half cosine.
    pub cosine: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { steps: 2000, batch: 32, lr: 0.05, seed: 0, momentum: 0.9, weight_decay: 1e-4, pool: 4096, clip_norm: Some(5.0), cosine: true }
    }
}

/// SGD with Nesterov momentum: `v = m v + g`, `p -= lr (g + m v)`.
pub struct Sgd {
    lr: f32,
    momentum: f32,
    weight_decay: f32,
    velocity: HashMap<String, Tensor<f32>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32, weight_decay: f32) -> Self {
        Sgd { lr, momentum, weight_decay, velocity: HashMap::new() }
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }

    /// Apply one update with gradients multiplied by `scale`.
    pub fn step(&mut self, model: &mut ModelGraph<f32>, grads: &crate::tensor::Gradients<f32>, scale: f32) {
        let names: Vec<String> = model.param_names().cloned().collect();
        for name in names {
            let Ok(g) = grads.get(&name) else { continue };
            let p = model.param_mut(&name).expect("listed by model");
            let v = self.velocity.entry(name).or_insert_with(|| Tensor::zeros(p.shape()));
            let (m, lr, wd) = (self.momentum, self.lr, self.weight_decay);
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                let g = scale * gv + wd * *pv;
                *vv = m * *vv + g;
                *pv -= lr * (g + m * *vv);
            }
        }
    }
}

/// Train a fresh model built from `config` (seeded by `opts.seed`) and return
/// it with the per-step loss.
pub fn train_toy(config: &ModelConfig, opts: &TrainOptions) -> Result<(ModelGraph<f32>, Vec<f32>), VtError> {
    if config.input_size() != SHAPE_SIZE || config.num_classes != 3 {
        return Err(VtError::Config(format!(
            "toy training needs a {SHAPE_SIZE}x{SHAPE_SIZE}, 3-class model (got input {} and {} classes)",
            config.input_size(),
            config.num_classes
        )));
    }
    if opts.batch == 0 || opts.pool == 0 {
        return Err(VtError::Config("batch and pool must be positive".into()));
    }
    let mut model = ModelGraph::<f32>::build(config, opts.seed)?;
    let data = ShapeGenerator::new(opts.seed);
    let mut picker = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_ba7c);
    let mut sgd = Sgd::new(opts.lr, opts.momentum, opts.weight_decay);
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let idx: Vec<u64> = (0..opts.batch).map(|_| picker.random_range(0..opts.pool)).collect();
        let (images, labels) = data.batch(idx);
        let tape = Tape::new();
        let out = model.forward(&tape, &tape.constant(images), BnMode::Train)?;
        let loss = out.logits.cross_entropy(&labels).map_err(|e| match e {
            TensorError::NonFinite { .. } => VtError::Numerical(format!("loss is not finite at step {step}")),
            other => other.into(),
        })?;
        let value = loss.value().item();
        let grads = tape.gradients(&loss)?;
        let updates = out.bn_updates;
        drop(tape);
        model.apply_bn_updates(&updates);
        let norm = grads.iter().map(|(_, g)| g.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>()).sum::<f64>().sqrt();
        let scale = match opts.clip_norm {
            Some(c) if norm > c as f64 => (c as f64 / norm) as f32,
            _ => 1.0,
        };
        if opts.cosine {
            let t = step as f64 / opts.steps as f64;
            sgd.set_lr((opts.lr as f64 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())) as f32);
        }
        sgd.step(&mut model, &grads, scale);
        debug!("step {step}: gradient norm {norm:.4}");
        if step % 100 == 0 {
            info!("step {step}: loss {value:.4}");
        } else {
            debug!("step {step}: loss {value:.4}");
        }
        losses.push(value);
    }
    Ok((model, losses))
}

/// Eval-mode accuracy on samples `0 .. n` of the generator.
pub fn accuracy(model: &ModelGraph<f32>, data: &ShapeGenerator, n: u64) -> Result<f64, VtError> {
    let mut correct = 0usize;
    let mut start = 0;
    while start < n {
        let end = (start + 64).min(n);
        let (images, labels) = data.batch(start..end);
        let logits = model.predict(&images)?;
        let k = logits.shape()[1];
        for (row, &l) in logits.data().chunks(k).zip(&labels) {
            let best = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            correct += usize::from(best == l);
        }
        start = end;
    }
    Ok(correct as f64 / n as f64)
}

/// Mean of the first `head` losses and of the last `tail` losses.
pub fn loss_summary(losses: &[f32], head: usize, tail: usize) -> Option<(f64, f64)> {
    if losses.is_empty() {
        return None;
    }
    let mean = |s: &[f32]| s.iter().map(|&v| v as f64).sum::<f64>() / s.len() as f64;
    let head = &losses[..head.clamp(1, losses.len())];
    let tail = &losses[losses.len() - tail.clamp(1, losses.len())..];
    Some((mean(head), mean(tail)))
}
