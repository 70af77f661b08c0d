//! Mini-batch training with Adam, linear warmup and linear decay.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::encode::encode_segments;
use super::model::TransformerLm;
use super::{LmError, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Decoupled weight decay applied to matrices and embeddings.
    pub weight_decay: f64,
    /// Fraction of `total_steps` spent warming up linearly from 0.
    pub warmup_proportion: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
    /// Seeds batch shuffling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            weight_decay: 0.01,
            warmup_proportion: 0.1,
            batch_size: 8,
            total_steps: 1000,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_grad_norm: Some(1.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LmError> {
        let bad = |m: &str| Err(LmError::TrainConfig(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("weight decay must be non-negative");
        }
        if !(self.warmup_proportion > 0.0 && self.warmup_proportion < 1.0) {
            return bad("warmup proportion must lie in (0, 1)");
        }
        if self.batch_size == 0 || self.total_steps == 0 {
            return bad("batch size and step count must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad("adam epsilon must be positive");
        }
        if matches!(self.max_grad_norm, Some(c) if c.is_nan() || c <= 0.0) {
            return bad("gradient clip must be positive");
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        ((self.warmup_proportion * self.total_steps as f64).ceil() as usize).max(1)
    }
}

/// Learning rate used for the update at `step` (0-based).
pub fn learning_rate_at(cfg: &TrainConfig, step: usize) -> f64 {
    let warm = cfg.warmup_steps();
    if step < warm {
        cfg.learning_rate * (step + 1) as f64 / warm as f64
    } else {
        let remaining = cfg.total_steps.saturating_sub(step) as f64;
        let span = cfg.total_steps.saturating_sub(warm).max(1) as f64;
        cfg.learning_rate * remaining / span
    }
}

/// One encoded training sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingExample {
    pub tokens: Vec<u16>,
    pub mask: Vec<bool>,
}

impl TrainingExample {
    /// Encodes `BOS prefix [SEP context SEP] continuation`, with loss only on
    /// the query document's bytes.
    ///
    /// Sequences longer than `max_positions` lose the tail of the context
    /// first, then the tail of the continuation, then the tail of the prefix.
    pub fn from_segments(
        prefix: &str,
        context: Option<&str>,
        continuation: &str,
        max_positions: usize,
    ) -> Self {
        let budget = max_positions.saturating_sub(1);
        let prefix = truncate_bytes(prefix, budget);
        let rest = budget - prefix.len();
        let context = context.filter(|c| !c.is_empty()).and_then(|c| {
            let room = rest.checked_sub(continuation.len() + 2)?;
            (room > 0).then(|| truncate_bytes(c, room))
        });
        let used = context.map_or(0, |c| c.len() + 2);
        let continuation = truncate_bytes(continuation, rest.saturating_sub(used));
        let enc = encode_segments(prefix, context, continuation);
        TrainingExample {
            tokens: enc.tokens,
            mask: enc.mask,
        }
    }

    pub fn scored_positions(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

fn truncate_bytes(s: &str, max: usize) -> &str {
    if s.len() <= max {
        return s;
    }
    let mut end = max;
    while !s.is_char_boundary(end) {
        end -= 1;
    }
    &s[..end]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    /// Mean negative log-likelihood per scored token in the batch.
    pub loss: f64,
    pub learning_rate: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }
}

/// Mean per-token loss and its gradient over a batch.
///
/// Sequences are processed in parallel and their gradients summed in input
/// order, so the result is deterministic.
pub fn batch_loss<T: Scalar>(
    model: &TransformerLm<T>,
    batch: &[&TrainingExample],
) -> Result<(f64, Vec<T>), LmError> {
    let count: usize = batch.iter().map(|ex| ex.scored_positions()).sum();
    let scale = if count == 0 {
        T::zero()
    } else {
        T::one() / T::of(count as f64)
    };
    let parts: Vec<Result<(T, Vec<T>), LmError>> = batch
        .par_iter()
        .map(|ex| {
            let mut g = vec![T::zero(); model.param_count()];
            let nll = model.accumulate_gradient(&ex.tokens, &ex.mask, scale, &mut g)?;
            Ok((nll, g))
        })
        .collect();
    let mut grad = vec![T::zero(); model.param_count()];
    let mut nll = 0.0;
    for part in parts {
        let (n, g) = part?;
        nll += n.as_f64();
        for (d, s) in grad.iter_mut().zip(g) {
            *d += s;
        }
    }
    let loss = if count == 0 { 0.0 } else { nll / count as f64 };
    Ok((loss, grad))
}

/// Mean negative log-likelihood per scored token over `data`.
pub fn evaluate<T: Scalar>(model: &TransformerLm<T>, data: &[TrainingExample]) -> Result<f64, LmError> {
    let parts: Vec<Result<(f64, usize), LmError>> = data
        .par_iter()
        .map(|ex| {
            let lp = model.sequence_logprob(&ex.tokens, &ex.mask)?;
            Ok((-lp, ex.scored_positions()))
        })
        .collect();
    let (mut nll, mut count) = (0.0, 0usize);
    for p in parts {
        let (a, b) = p?;
        nll += a;
        count += b;
    }
    Ok(if count == 0 { 0.0 } else { nll / count as f64 })
}

/// Trains `model` in place and returns the per-step loss curve.
///
/// `on_step` sees each step's record as it completes.
pub fn train<T, F>(
    model: &mut TransformerLm<T>,
    data: &[TrainingExample],
    cfg: &TrainConfig,
    mut on_step: F,
) -> Result<TrainReport, LmError>
where
    T: Scalar,
    F: FnMut(&StepRecord),
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(LmError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;

    let n = model.param_count();
    let decay: Vec<bool> = {
        let mut d = vec![false; n];
        for slot in model.layout().slots() {
            d[slot.range()].fill(slot.decay);
        }
        d
    };
    let mut m = vec![T::zero(); n];
    let mut v = vec![T::zero(); n];
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let eps = T::of(cfg.epsilon);
    let mut report = TrainReport::default();

    for step in 0..cfg.total_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(data.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&data[order[cursor]]);
            cursor += 1;
        }
        let (loss, mut grad) = batch_loss(model, &batch)?;
        if !loss.is_finite() {
            return Err(LmError::Diverged { step, loss });
        }
        let grad_norm = grad.iter().map(|g| g.as_f64().powi(2)).sum::<f64>().sqrt();
        if !grad_norm.is_finite() {
            return Err(LmError::Diverged { step, loss });
        }
        if let Some(clip) = cfg.max_grad_norm {
            if grad_norm > clip {
                let s = T::of(clip / grad_norm);
                grad.iter_mut().for_each(|g| *g *= s);
            }
        }

        let lr = learning_rate_at(cfg, step);
        let t = (step + 1) as i32;
        let bc1 = T::of(1.0 - cfg.beta1.powi(t));
        let bc2 = T::of(1.0 - cfg.beta2.powi(t));
        let lr_t = T::of(lr);
        let wd = T::of(cfg.weight_decay);
        let params = model.params_mut();
        for i in 0..n {
            let g = grad[i];
            m[i] = b1 * m[i] + (T::one() - b1) * g;
            v[i] = b2 * v[i] + (T::one() - b2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            let mut update = mhat / (vhat.sqrt() + eps);
            if decay[i] {
                update += wd * params[i];
            }
            params[i] -= lr_t * update;
        }
        if !model.is_finite() {
            return Err(LmError::Diverged { step, loss });
        }
        let rec = StepRecord {
            step,
            loss,
            learning_rate: lr,
            grad_norm,
        };
        on_step(&rec);
        report.steps.push(rec);
    }
    Ok(report)
}
