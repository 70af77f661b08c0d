//! Runners for the model, scoring and protocol properties, returning the
//! measured quantity so both the test suites and the acceptance report can
//! apply their thresholds.

use std::io::{BufReader, Cursor};
use std::path::PathBuf;

use rand::Rng;

use epimem::corpus::Document;
use epimem::lm::{evaluate, gradient_check, train, GradCheckReport, ModelConfig, TrainConfig, TrainingExample, TransformerLm, VOCAB_SIZE};
use epimem::protocol::{serve, ScoreRequest, Scorer, UniformByteScorer};
use epimem::scoring::{contextual_logprob, run_eval, ContextPolicy, ContextSource, EvalConfig, KSetting, NoContext};

use super::{base_time, rng, text, SOURCES};

pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn lm_config(embed: usize, heads: usize, layers: usize, max_positions: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        embed,
        heads,
        layers,
        vocab_size: VOCAB_SIZE,
        max_positions,
        seed,
    }
}

/// An untrained model small enough for fast scoring.
pub fn toy_model(seed: u64) -> TransformerLm<f64> {
    TransformerLm::new(lm_config(16, 2, 1, 512, seed)).unwrap()
}

/// Documents with between `min_s` and `max_s` sentences, none empty.
pub fn docs(seed: u64, n: usize, min_s: usize, max_s: usize) -> Vec<Document> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            Document::new(
                format!("d{i:03}"),
                SOURCES[i % SOURCES.len()],
                base_time(),
                text(&mut r, min_s, max_s, 60),
            )
        })
        .collect()
}

/// Returns the same context for every document.
pub struct Always(pub String);

impl ContextSource for Always {
    fn context_for(&self, _: &Document, _: usize) -> Option<&str> {
        Some(&self.0)
    }
}

/// Largest relative error of pooled uniform-scorer perplexity against
/// 256^(Σbytes/Σwords) over `sets` random document sets, each scored at
/// woc, k=1 and k=3 with a context present.
pub fn closed_form_run(seed: u64, sets: usize) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for s in 0..sets {
        let n = r.random_range(1..=40);
        let docs = docs(seed * 1000 + s as u64, n, 1, 6);
        let ctx = Always(text(&mut r, 1, 4, 40));
        let cfg = EvalConfig {
            ks: vec![KSetting::Woc, KSetting::K(1), KSetting::K(3)],
            ..Default::default()
        };
        let report = run_eval(&docs, &ctx, &UniformByteScorer, &cfg).unwrap();
        let bytes: usize = docs.iter().map(|d| d.text.len()).sum();
        let words: usize = docs.iter().map(|d| d.word_count()).sum();
        let want = 256f64.powf(bytes as f64 / words as f64);
        for cell in &report.cells {
            let got = cell.perplexity.unwrap();
            worst = worst.max((got - want).abs() / want);
        }
    }
    worst
}

#[derive(Debug, Clone, Copy)]
pub struct PrefixInvariance {
    /// Largest spread of prefix log-probability across contexts, any doc.
    pub prefix_spread: f64,
    /// Documents whose continuation log-probability takes at least two
    /// distinct values across the contexts.
    pub docs_varying: usize,
    pub docs: usize,
}

pub fn prefix_invariance_run(seed: u64, n_docs: usize, n_contexts: usize) -> PrefixInvariance {
    let scorer = epimem::ModelScorer64::new(toy_model(seed), "toy");
    let docs = docs(seed, n_docs, 2, 5);
    let mut r = rng(seed ^ 0x5eed);
    let contexts: Vec<String> = (0..n_contexts).map(|_| text(&mut r, 1, 4, 40)).collect();
    let mut out = PrefixInvariance {
        prefix_spread: 0.0,
        docs_varying: 0,
        docs: n_docs,
    };
    for d in &docs {
        let scores: Vec<_> = contexts
            .iter()
            .map(|c| contextual_logprob(&scorer, d, Some(c), KSetting::K(1)).unwrap())
            .collect();
        let p0 = scores[0].prefix_lp;
        for s in &scores {
            out.prefix_spread = out.prefix_spread.max((s.prefix_lp - p0).abs());
        }
        if scores.iter().any(|s| s.cont_lp != scores[0].cont_lp) {
            out.docs_varying += 1;
        }
    }
    out
}

/// Largest absolute difference, per document and per cell, between the
/// retrieved policy (a context always offered) and no context, at `k`
/// values at or above every document's sentence count.
pub fn degenerate_k_run(seed: u64) -> f64 {
    let scorer = epimem::ModelScorer64::new(toy_model(seed), "toy");
    let docs = docs(seed, 30, 1, 3);
    let ks = vec![KSetting::K(3), KSetting::K(5), KSetting::K(50)];
    let with = EvalConfig {
        ks: ks.clone(),
        policy: ContextPolicy::Retrieved,
        ..Default::default()
    };
    let without = EvalConfig {
        ks,
        policy: ContextPolicy::None,
        ..Default::default()
    };
    let ctx = Always("Storm hit the coast. Rain fell all night.".into());
    let a = run_eval(&docs, &ctx, &scorer, &with).unwrap();
    let b = run_eval(&docs, &NoContext, &scorer, &without).unwrap();
    assert_eq!(a.records.len(), b.records.len());
    let mut worst: f64 = 0.0;
    for (x, y) in a.records.iter().zip(&b.records) {
        assert_eq!(x.score.doc_id, y.score.doc_id);
        worst = worst.max((x.score.total() - y.score.total()).abs());
    }
    for (x, y) in a.cells.iter().zip(&b.cells) {
        worst = worst.max((x.perplexity.unwrap() - y.perplexity.unwrap()).abs());
    }
    worst
}

fn grad_batch() -> Vec<TrainingExample> {
    vec![
        TrainingExample::from_segments("Oil price rose.", Some("Gas fell."), " Talks ended.", 48),
        TrainingExample::from_segments("Storm hit.", None, " Rain.", 48),
    ]
}

/// Gradient check of the E=8/H=2/L=2 model in f64 over 150 parameters.
pub fn grad_check_run(epsilon: f64) -> GradCheckReport {
    let model: TransformerLm<f64> = TransformerLm::new(lm_config(8, 2, 2, 48, 21)).unwrap();
    gradient_check(&model, &grad_batch(), epsilon, 150, 1e-4, 1).unwrap()
}

fn overfit_batch() -> Vec<TrainingExample> {
    [
        "Oil prices rose on Monday.",
        "The court ruled on the tax case.",
        "Storm hit the north coast.",
        "Talks on trade resumed.",
    ]
    .iter()
    .map(|s| TrainingExample::from_segments(s, None, "", 64))
    .collect()
}

/// Per-token perplexity of E=32/H=2/L=2 on a single batch after `steps`
/// steps of training on that batch alone.
pub fn overfit_run(steps: usize) -> f64 {
    let data = overfit_batch();
    let mut model: TransformerLm<f32> = TransformerLm::new(lm_config(32, 2, 2, 64, 5)).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        weight_decay: 0.0,
        batch_size: data.len(),
        total_steps: steps,
        ..Default::default()
    };
    train(&mut model, &data, &cfg, |_| {}).unwrap();
    evaluate(&model, &data).unwrap().exp()
}

/// Whether a zero-learning-rate run leaves every parameter bit-identical.
pub fn zero_lr_run(steps: usize) -> bool {
    let data = overfit_batch();
    let mut model: TransformerLm<f32> = TransformerLm::new(lm_config(32, 2, 2, 64, 5)).unwrap();
    let before: Vec<u32> = model.params().iter().map(|p| p.to_bits()).collect();
    let cfg = TrainConfig {
        learning_rate: 0.0,
        batch_size: data.len(),
        total_steps: steps,
        ..Default::default()
    };
    train(&mut model, &data, &cfg, |_| {}).unwrap();
    model.params().iter().map(|p| p.to_bits()).eq(before)
}

/// `n` protocol fixtures: woc-style, split, and context-bearing requests.
pub fn protocol_fixtures(seed: u64, n: usize) -> Vec<ScoreRequest> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let doc = text(&mut r, 1, 4, 50);
            let (prefix, cont) = epimem::scoring::split_at_sentence(&doc, r.random_range(1..=3));
            let context = (i % 3 == 0).then(|| text(&mut r, 1, 3, 30));
            ScoreRequest {
                id: format!("f{i:02}"),
                prefix: prefix.to_string(),
                context,
                continuation: cont.to_string(),
            }
        })
        .collect()
}

/// Largest difference between direct scoring and `remote` over the
/// fixtures, or an error describing the first request that failed.
pub fn protocol_equivalence(direct: &dyn Scorer, remote: &dyn Scorer, fixtures: &[ScoreRequest]) -> Result<f64, String> {
    let got = remote.score_batch(fixtures);
    let mut worst: f64 = 0.0;
    for (req, res) in fixtures.iter().zip(got) {
        let want = direct.score(req).map_err(|e| format!("{}: direct {e}", req.id))?;
        let res = res.map_err(|e| format!("{}: remote {e}", req.id))?;
        if res.prefix_tokens != want.prefix_tokens || res.cont_tokens != want.cont_tokens {
            return Err(format!("{}: token counts differ", req.id));
        }
        worst = worst
            .max((res.prefix_lp - want.prefix_lp).abs())
            .max((res.cont_lp - want.cont_lp).abs());
    }
    Ok(worst)
}

/// Replays the golden request transcript through `serve` with the uniform
/// scorer and compares the output byte for byte.
pub fn golden_transcript() -> Result<(), String> {
    let dir = fixtures_dir().join("protocol");
    let requests = std::fs::read(dir.join("golden_requests.jsonl")).map_err(|e| e.to_string())?;
    let expected = std::fs::read_to_string(dir.join("golden_uniform_responses.jsonl")).map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    serve(&UniformByteScorer, BufReader::new(Cursor::new(requests)), &mut out).map_err(|e| e.to_string())?;
    let got = String::from_utf8(out).map_err(|e| e.to_string())?;
    if got == expected {
        return Ok(());
    }
    let line = got
        .lines()
        .zip(expected.lines())
        .position(|(a, b)| a != b)
        .map_or(got.lines().count().min(expected.lines().count()), |i| i);
    Err(format!("transcript differs at line {}", line + 1))
}
