//! Analytic gradients against central finite differences.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::TransformerLm;
use super::train::{batch_loss, TrainingExample};
use super::{LmError, Scalar};

/// Below this magnitude both gradients are treated as zero when forming the
/// relative error.
const ZERO_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct GradMismatch {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_relative_error: f64,
    /// Parameter index holding `max_relative_error`.
    pub worst_index: usize,
    /// Every sampled parameter whose relative error exceeds the tolerance.
    pub mismatches: Vec<GradMismatch>,
    /// Analytic gradient of every sampled parameter, for inspection.
    pub analytic: Vec<(usize, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// `|a − n| / max(|a|, |n|)`, or 0 when both are below [`ZERO_FLOOR`].
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < ZERO_FLOOR {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Compares backpropagated gradients of the mean per-token loss on `batch`
/// with central differences `(L(θ+ε) − L(θ−ε)) / 2ε` at `samples` randomly
/// chosen parameters. Runs in f64 regardless of the model's precision.
pub fn gradient_check<T: Scalar>(
    model: &TransformerLm<T>,
    batch: &[TrainingExample],
    epsilon: f64,
    samples: usize,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport, LmError> {
    let mut wide: TransformerLm<f64> = model.cast();
    let refs: Vec<&TrainingExample> = batch.iter().collect();
    let (_, grad) = batch_loss(&wide, &refs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = wide.param_count();
    let mut picks = sample(&mut rng, n, samples.min(n)).into_vec();
    picks.sort_unstable();

    let mut report = GradCheckReport {
        checked: picks.len(),
        max_relative_error: 0.0,
        worst_index: picks.first().copied().unwrap_or(0),
        mismatches: Vec::new(),
        analytic: Vec::with_capacity(picks.len()),
    };
    for idx in picks {
        let original = wide.params()[idx];
        wide.params_mut()[idx] = original + epsilon;
        let (plus, _) = batch_loss(&wide, &refs)?;
        wide.params_mut()[idx] = original - epsilon;
        let (minus, _) = batch_loss(&wide, &refs)?;
        wide.params_mut()[idx] = original;

        let numeric = (plus - minus) / (2.0 * epsilon);
        let analytic = grad[idx];
        let rel = relative_error(analytic, numeric);
        report.analytic.push((idx, analytic));
        if rel > report.max_relative_error {
            report.max_relative_error = rel;
            report.worst_index = idx;
        }
        if rel > tolerance {
            report.mismatches.push(GradMismatch {
                index: idx,
                analytic,
                numeric,
                relative_error: rel,
            });
        }
    }
    Ok(report)
}
