use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Model, ModelError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Peak learning rate.
    pub learning_rate: f64,
    /// Windows per optimizer step.
    pub batch_size: usize,
    /// Token budget; the step count is `ceil(total_tokens / (batch_size * context))`.
    pub total_tokens: u64,
    pub warmup_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Decoupled decay, applied to matrices only.
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Validate every this many steps (and after the last step).
    pub eval_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 8,
            total_tokens: 1 << 20,
            warmup_fraction: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: 1.0,
            seed: 0,
            eval_interval: 50,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidTrainConfig(m.to_string()));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad("warmup_fraction must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.grad_clip <= 0.0 || self.adam_eps <= 0.0 || self.weight_decay < 0.0 {
            return bad("grad_clip and adam_eps must be positive, weight_decay non-negative");
        }
        if self.eval_interval == 0 {
            return bad("eval_interval must be positive");
        }
        Ok(())
    }

    pub fn total_steps(&self, context_length: usize) -> usize {
        let per_step = (self.batch_size * context_length) as u64;
        self.total_tokens.div_ceil(per_step) as usize
    }
}

/// Linear warmup to `peak` over the first `round(warmup_fraction * total)`
/// steps, then cosine decay reaching zero at step `total` (steps are 1-based).
pub fn learning_rate_at(step: usize, total: usize, peak: f64, warmup_fraction: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let step = step.clamp(1, total);
    let warmup = (warmup_fraction * total as f64).round() as usize;
    if step <= warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total == warmup {
        return peak;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Training compute in FLOPs, `6 N D`.
pub fn flops_estimate(n_params: usize, tokens: u64) -> f64 {
    6.0 * n_params as f64 * tokens as f64
}

/// Concatenate `eos doc0 eos doc1 ...` and cut it into windows of
/// `context + 1` tokens with stride `context`. A trailing remainder of at
/// least two tokens becomes a shorter final window.
pub fn pack_windows(docs: &[Vec<u32>], eos: u32, context: usize) -> Vec<Vec<u32>> {
    let mut stream = Vec::with_capacity(docs.iter().map(|d| d.len() + 1).sum());
    for d in docs {
        stream.push(eos);
        stream.extend_from_slice(d);
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < stream.len() {
        let end = (start + context + 1).min(stream.len());
        out.push(stream[start..end].to_vec());
        start += context;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub tokens: u64,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub steps: usize,
    pub tokens_seen: u64,
    pub history: Vec<LossRecord>,
}

/// Token-weighted mean loss over `windows`.
pub fn evaluate_loss(model: &Model<f32>, windows: &[Vec<u32>]) -> Result<f64, ModelError> {
    let (mut total, mut count) = (0.0, 0usize);
    for w in windows {
        let n = w.len() - 1;
        total += model.window_loss(w)? * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(ModelError::TooShort(0));
    }
    Ok(total / count as f64)
}

/// AdamW with global-norm clipping over shuffled windows. `on_step` sees
/// every record as it is produced.
pub fn train_model(
    model: &mut Model<f32>,
    train: &[Vec<u32>],
    val: &[Vec<u32>],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<TrainOutcome, ModelError> {
    cfg.validate()?;
    let ctx = model.config.context_length;
    let steps = cfg.total_steps(ctx);
    if steps == 0 {
        return Ok(TrainOutcome {
            steps: 0,
            tokens_seen: 0,
            history: Vec::new(),
        });
    }
    if train.is_empty() {
        return Err(ModelError::CorpusTooSmall {
            tokens: 0,
            needed: 2,
        });
    }
    if let Some(w) = train
        .iter()
        .chain(val)
        .find(|w| w.len() < 2 || w.len() > ctx + 1)
    {
        return Err(ModelError::InvalidTrainConfig(format!(
            "window of {} tokens does not fit context {ctx}",
            w.len()
        )));
    }

    let n = model.params.len();
    let decay_mask: Vec<bool> = {
        let mut mask = vec![false; n];
        for (_, off, shape) in model.layout.tensors() {
            if shape.len() == 2 {
                let len: usize = shape.iter().product();
                mask[*off..off + len].fill(true);
            }
        }
        mask
    };
    let mut m = vec![0f32; n];
    let mut v = vec![0f32; n];
    let mut grads = vec![0f32; n];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut tokens_seen = 0u64;
    let mut history = Vec::with_capacity(steps);

    for step in 1..=steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&train[order[cursor]]);
            cursor += 1;
        }
        let predicted: usize = batch.iter().map(|w| w.len() - 1).sum();
        let scale = 1.0 / predicted as f32;
        grads.fill(0.0);
        let mut loss = 0.0;
        for w in &batch {
            loss += model.loss_and_grad(w, scale, &mut grads)? * (w.len() - 1) as f64;
        }
        loss /= predicted as f64;
        tokens_seen += predicted as u64;

        let norm = grads
            .iter()
            .map(|&g| (g as f64) * (g as f64))
            .sum::<f64>()
            .sqrt();
        let clip = if norm > cfg.grad_clip {
            (cfg.grad_clip / norm) as f32
        } else {
            1.0
        };
        let lr = learning_rate_at(step, steps, cfg.learning_rate, cfg.warmup_fraction);
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let bc1 = 1.0 - cfg.beta1.powi(step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(step as i32);
        let (lr32, eps, wd) = (lr as f32, cfg.adam_eps as f32, cfg.weight_decay as f32);
        let (bc1, bc2) = (bc1 as f32, bc2 as f32);
        for i in 0..n {
            let g = grads[i] * clip;
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
            let decay = if decay_mask[i] {
                wd * model.params[i]
            } else {
                0.0
            };
            model.params[i] -= lr32 * (update + decay);
        }

        let val_loss = if !val.is_empty() && (step % cfg.eval_interval == 0 || step == steps) {
            Some(evaluate_loss(model, val)?)
        } else {
            None
        };
        let record = LossRecord {
            step,
            tokens: tokens_seen,
            learning_rate: lr,
            train_loss: loss,
            val_loss,
        };
        on_step(&record);
        history.push(record);
    }
    Ok(TrainOutcome {
        steps,
        tokens_seen,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn cfg(vocab: usize, ctx: usize) -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            n_heads: 2,
            n_kv_groups: 1,
            model_dim: 16,
            head_dim: 8,
            ffn_dim: 24,
            vocab_size: vocab,
            context_length: ctx,
        }
    }

    #[test]
    fn schedule_shape() {
        let total = 100;
        assert!((learning_rate_at(1, total, 1.0, 0.1) - 0.1).abs() < 1e-12);
        assert!((learning_rate_at(10, total, 1.0, 0.1) - 1.0).abs() < 1e-12);
        assert!(learning_rate_at(total, total, 1.0, 0.1).abs() < 1e-12);
        let mid = learning_rate_at(55, total, 1.0, 0.1);
        assert!((mid - 0.5).abs() < 1e-12);
        for s in 10..total {
            assert!(
                learning_rate_at(s + 1, total, 1.0, 0.1) <= learning_rate_at(s, total, 1.0, 0.1)
            );
        }
        assert_eq!(learning_rate_at(1, 0, 1.0, 0.1), 0.0);
    }

    #[test]
    fn packing_covers_stream() {
        let docs = vec![vec![1, 2, 3], vec![4, 5]];
        let w = pack_windows(&docs, 9, 3);
        assert_eq!(w, vec![vec![9, 1, 2, 3], vec![3, 9, 4, 5]]);
        let w = pack_windows(&docs, 9, 4);
        assert_eq!(w, vec![vec![9, 1, 2, 3, 9], vec![9, 4, 5]]);
        assert!(pack_windows(&[], 9, 4).is_empty());
    }

    #[test]
    fn zero_budget_leaves_model_untouched() {
        let mut model = Model::<f32>::init(cfg(7, 8), 3).unwrap();
        let before = model.params.clone();
        let windows = pack_windows(&[vec![1, 2, 3, 4, 5]], 6, 8);
        let c = TrainConfig {
            total_tokens: 0,
            ..TrainConfig::default()
        };
        let out = train_model(&mut model, &windows, &[], &c, |_| {}).unwrap();
        assert_eq!(out.steps, 0);
        assert_eq!(model.params, before);
    }

    #[test]
    fn training_is_deterministic_and_learns_a_cycle() {
        let docs: Vec<Vec<u32>> = (0..16)
            .map(|_| (0..24).map(|i| (i % 5) as u32).collect())
            .collect();
        let windows = pack_windows(&docs, 5, 16);
        let c = TrainConfig {
            learning_rate: 1e-2,
            batch_size: 4,
            total_tokens: 16 * 4 * 150,
            seed: 1,
            eval_interval: 50,
            ..TrainConfig::default()
        };
        let run = || {
            let mut model = Model::<f32>::init(cfg(6, 16), 11).unwrap();
            let out = train_model(&mut model, &windows, &windows[..2], &c, |_| {}).unwrap();
            (model, out)
        };
        let (m1, o1) = run();
        let (m2, o2) = run();
        assert_eq!(m1.params, m2.params);
        assert_eq!(o1, o2);
        assert_eq!(o1.steps, 150);
        let first = o1.history[0].train_loss;
        let last = o1.history.last().unwrap();
        assert!(first > 1.5, "{first}");
        assert!(last.val_loss.unwrap() < 0.3, "{last:?}");
    }

    #[test]
    fn flops_is_six_nd() {
        assert_eq!(flops_estimate(1000, 20), 120_000.0);
    }
}
