use crate::lm::{encode_segments, LmError, Scalar, TransformerLm};

use super::{codes, ScoreError, ScoreRequest, Scorer, SegmentScores};

/// Every byte has probability 1/256. Gives closed-form perplexities for
/// end-to-end checks of the harness.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformByteScorer;

impl Scorer for UniformByteScorer {
    fn model_name(&self) -> String {
        "uniform-byte".into()
    }

    fn max_context_bytes(&self) -> u64 {
        1 << 20
    }

    fn score(&self, request: &ScoreRequest) -> Result<SegmentScores, ScoreError> {
        if request.prefix.is_empty() {
            return Err(ScoreError::new(codes::INVALID, "empty prefix"));
        }
        let per_byte = 256f64.ln();
        let (p, c) = (request.prefix.len(), request.continuation.len());
        Ok(SegmentScores {
            prefix_lp: 0.0 - per_byte * p as f64,
            cont_lp: 0.0 - per_byte * c as f64,
            prefix_tokens: p as u64,
            cont_tokens: c as u64,
        })
    }
}

/// The built-in byte-level transformer behind the scorer contract.
///
/// The prefix is scored in its own pass over `BOS prefix`; the continuation
/// in a second pass over `BOS prefix [SEP context SEP] continuation`.
/// Streams longer than the model's context are scored in sliding windows.
#[derive(Debug, Clone)]
pub struct ModelScorer<T> {
    model: TransformerLm<T>,
    name: String,
}

impl<T: Scalar> ModelScorer<T> {
    pub fn new(model: TransformerLm<T>, name: impl Into<String>) -> Self {
        ModelScorer {
            model,
            name: name.into(),
        }
    }

    pub fn model(&self) -> &TransformerLm<T> {
        &self.model
    }
}

fn lm_error(e: LmError) -> ScoreError {
    ScoreError::new(codes::SCORER, e.to_string())
}

impl<T: Scalar> Scorer for ModelScorer<T> {
    fn model_name(&self) -> String {
        self.name.clone()
    }

    fn max_context_bytes(&self) -> u64 {
        (self.model.config().max_positions / 2) as u64
    }

    fn score(&self, request: &ScoreRequest) -> Result<SegmentScores, ScoreError> {
        if request.prefix.is_empty() {
            return Err(ScoreError::new(codes::INVALID, "empty prefix"));
        }
        let head = encode_segments(&request.prefix, None, "");
        let prefix_lp = self
            .model
            .sequence_logprob_windowed(&head.tokens, &head.mask)
            .map_err(lm_error)?;
        let cont_lp = if request.continuation.is_empty() {
            0.0
        } else {
            let context = request.context.as_deref().filter(|c| !c.is_empty());
            let full = encode_segments(&request.prefix, context, &request.continuation);
            let mut mask = full.mask;
            // prefix positions were scored above
            mask[1..=full.prefix_len].fill(false);
            self.model
                .sequence_logprob_windowed(&full.tokens, &mask)
                .map_err(lm_error)?
        };
        Ok(SegmentScores {
            prefix_lp,
            cont_lp,
            prefix_tokens: request.prefix.len() as u64,
            cont_tokens: request.continuation.len() as u64,
        })
    }
}
