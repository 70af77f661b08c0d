//! Context-insertion scoring and word-normalized perplexity.
//!
//! A document is split after its first `k` sentences. The prefix is scored
//! on its own; the continuation is scored conditioned on the prefix and a
//! context document inserted between the two. Perplexity pools
//! log-probabilities over the corpus and divides by word count.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::corpus::{sentence_spans, Document};
use crate::index::{IndexError, InvertedIndex};
use crate::protocol::{fmt_f64, ScoreError, ScoreRequest, Scorer, SegmentScores};
use crate::retrieval::{make_query, ContextPair};

/// Requests handed to the scorer at once during an evaluation.
pub const EVAL_CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("document {0:?} has no words")]
    ZeroWords(String),
    #[error("document {doc_id:?}: {error}")]
    Scorer { doc_id: String, error: ScoreError },
    #[error("cannot compute perplexity of an empty score list")]
    Empty,
    #[error("invalid eval config: {0}")]
    Config(String),
    #[error("context document {0:?} not found in memory")]
    Unresolved(String),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A report column: no context at all, or context after `k` sentences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum KSetting {
    Woc,
    K(usize),
}

impl fmt::Display for KSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KSetting::Woc => f.write_str("woc"),
            KSetting::K(k) => write!(f, "k={k}"),
        }
    }
}

impl FromStr for KSetting {
    type Err = String;

    /// Accepts `woc`, `3` or `k=3`.
    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("woc") {
            return Ok(KSetting::Woc);
        }
        let digits = s.strip_prefix("k=").unwrap_or(s);
        match digits.parse::<usize>() {
            Ok(0) => Err("k must be >= 1".into()),
            Ok(k) => Ok(KSetting::K(k)),
            Err(_) => Err(format!("expected woc or a positive integer, got {s:?}")),
        }
    }
}

/// Parses a comma-separated list such as `woc,1,2,5`.
pub fn parse_ks(list: &str) -> Result<Vec<KSetting>, String> {
    list.split(',').map(str::parse).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ContextPolicy {
    /// The filtered retrieval result from the pair file.
    Retrieved,
    None,
    /// The top hit from an unrelated memory, unfiltered.
    Irrelevant,
}

impl ContextPolicy {
    pub fn name(self) -> &'static str {
        match self {
            ContextPolicy::Retrieved => "retrieved",
            ContextPolicy::None => "none",
            ContextPolicy::Irrelevant => "irrelevant",
        }
    }
}

impl fmt::Display for ContextPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ContextPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "retrieved" => Ok(ContextPolicy::Retrieved),
            "none" => Ok(ContextPolicy::None),
            "irrelevant" => Ok(ContextPolicy::Irrelevant),
            other => Err(format!("unknown policy {other:?}: use retrieved, none or irrelevant")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub ks: Vec<KSetting>,
    pub policy: ContextPolicy,
    /// Context bytes admitted before truncation. The scorer's own limit
    /// applies as well.
    pub context_budget: usize,
    /// Largest tolerated fraction of failed documents.
    pub max_failure_rate: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: vec![KSetting::Woc, KSetting::K(1), KSetting::K(2), KSetting::K(5)],
            policy: ContextPolicy::Retrieved,
            context_budget: 1 << 20,
            max_failure_rate: 0.01,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), ScoringError> {
        if self.ks.is_empty() {
            return Err(ScoringError::Config("no k values".into()));
        }
        if self.ks.contains(&KSetting::K(0)) {
            return Err(ScoringError::Config("k must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.max_failure_rate) {
            return Err(ScoringError::Config("max failure rate must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DocScore {
    pub doc_id: String,
    pub prefix_lp: f64,
    pub cont_lp: f64,
    pub words: usize,
    pub bytes: usize,
    pub context_used: bool,
}

impl DocScore {
    pub fn total(&self) -> f64 {
        self.prefix_lp + self.cont_lp
    }
}

/// Splits `text` after its first `k` sentences. Both halves are substrings
/// of `text` and concatenate back to it. With `k` at or above the sentence
/// count the continuation is empty.
pub fn split_at_sentence(text: &str, k: usize) -> (&str, &str) {
    let spans = sentence_spans(text);
    if k == 0 {
        return ("", text);
    }
    if k >= spans.len() {
        return (text, "");
    }
    text.split_at(spans[k - 1].end)
}

/// The longest leading run of whole sentences of `text` that fits in
/// `budget` bytes. Falls back to a word boundary, then a character
/// boundary, when even the first sentence is too long.
pub fn truncate_context(text: &str, budget: usize) -> &str {
    if text.len() <= budget {
        return text;
    }
    if budget == 0 {
        return "";
    }
    if let Some(end) = sentence_spans(text)
        .iter()
        .map(|s| s.end)
        .take_while(|&end| end <= budget)
        .last()
    {
        return &text[..end];
    }
    let mut cut = budget;
    while !text.is_char_boundary(cut) {
        cut -= 1;
    }
    let head = &text[..cut];
    match head.rfind(char::is_whitespace) {
        Some(ws) if !head[..ws].trim_end().is_empty() => head[..ws].trim_end(),
        _ => head,
    }
}

/// The scorer request for one document, plus whether context went in.
pub fn build_request(
    doc: &Document,
    context: Option<&str>,
    k: KSetting,
    budget: usize,
) -> (ScoreRequest, bool) {
    let (prefix, continuation) = match k {
        KSetting::Woc => (doc.text.as_str(), ""),
        KSetting::K(k) => split_at_sentence(&doc.text, k),
    };
    let context = match k {
        KSetting::K(_) if !continuation.is_empty() => context
            .map(|c| truncate_context(c, budget))
            .filter(|c| !c.is_empty()),
        _ => None,
    };
    let used = context.is_some();
    let request = ScoreRequest {
        id: doc.id.clone(),
        prefix: prefix.to_string(),
        context: context.map(str::to_string),
        continuation: continuation.to_string(),
    };
    (request, used)
}

fn doc_score(doc: &Document, used: bool, scores: SegmentScores) -> Result<DocScore, ScoreError> {
    if scores.prefix_lp > 0.0 || scores.cont_lp > 0.0 {
        return Err(ScoreError::new(
            crate::protocol::codes::SCORER,
            "scorer returned a positive log-probability",
        ));
    }
    Ok(DocScore {
        doc_id: doc.id.clone(),
        prefix_lp: scores.prefix_lp,
        cont_lp: scores.cont_lp,
        words: doc.word_count(),
        bytes: doc.text.len(),
        context_used: used,
    })
}

/// Scores one document with `context` inserted after its first `k`
/// sentences. The prefix is scored without the context.
pub fn contextual_logprob<S: Scorer + ?Sized>(
    scorer: &S,
    doc: &Document,
    context: Option<&str>,
    k: KSetting,
) -> Result<DocScore, ScoringError> {
    if doc.word_count() == 0 {
        return Err(ScoringError::ZeroWords(doc.id.clone()));
    }
    let budget = scorer.max_context_bytes().try_into().unwrap_or(usize::MAX);
    let (request, used) = build_request(doc, context, k, budget);
    scorer
        .score(&request)
        .and_then(|s| doc_score(doc, used, s))
        .map_err(|error| ScoringError::Scorer {
            doc_id: doc.id.clone(),
            error,
        })
}

/// `exp(−Σ log-prob / Σ words)` over every score.
pub fn corpus_perplexity(scores: &[DocScore]) -> Result<f64, ScoringError> {
    if scores.is_empty() {
        return Err(ScoringError::Empty);
    }
    let lp: f64 = scores.iter().map(DocScore::total).sum();
    let words: usize = scores.iter().map(|s| s.words).sum();
    Ok((-lp / words as f64).exp())
}

/// Supplies the context document for a query document at a given `k`.
pub trait ContextSource: Sync {
    fn context_for(&self, doc: &Document, k: usize) -> Option<&str>;
}

pub struct NoContext;

impl ContextSource for NoContext {
    fn context_for(&self, _: &Document, _: usize) -> Option<&str> {
        None
    }
}

/// Contexts from a pair file. Queries without a pair get no context.
#[derive(Debug, Clone, Default)]
pub struct PairContexts {
    retrieved: HashMap<(String, usize), String>,
    texts: HashMap<String, String>,
}

impl PairContexts {
    /// Fails if a pair names a memory document that `memory` lacks.
    pub fn new<'a, I>(pairs: &[ContextPair], memory: I) -> Result<Self, ScoringError>
    where
        I: IntoIterator<Item = &'a Document>,
    {
        let mut texts: HashMap<String, String> = memory
            .into_iter()
            .map(|d| (d.id.clone(), d.text.clone()))
            .collect();
        let mut retrieved = HashMap::new();
        for p in pairs {
            if let Some(id) = &p.retrieved_id {
                if !texts.contains_key(id) {
                    return Err(ScoringError::Unresolved(id.clone()));
                }
                retrieved.insert((p.query_id.clone(), p.k), id.clone());
            }
        }
        let wanted: std::collections::HashSet<&String> = retrieved.values().collect();
        texts.retain(|id, _| wanted.contains(id));
        Ok(PairContexts { retrieved, texts })
    }
}

impl ContextSource for PairContexts {
    fn context_for(&self, doc: &Document, k: usize) -> Option<&str> {
        let id = self.retrieved.get(&(doc.id.clone(), k))?;
        self.texts.get(id).map(String::as_str)
    }
}

/// The unfiltered top hit of the first-`k`-sentence query in another
/// memory, typically one from a different domain than the queries.
pub struct TopHitContexts<'a> {
    index: &'a InvertedIndex,
    texts: HashMap<&'a str, &'a str>,
}

impl<'a> TopHitContexts<'a> {
    pub fn new<I>(index: &'a InvertedIndex, memory: I) -> Self
    where
        I: IntoIterator<Item = &'a Document>,
    {
        TopHitContexts {
            index,
            texts: memory
                .into_iter()
                .map(|d| (d.id.as_str(), d.text.as_str()))
                .collect(),
        }
    }
}

impl ContextSource for TopHitContexts<'_> {
    fn context_for(&self, doc: &Document, k: usize) -> Option<&str> {
        let hits = self
            .index
            .search_excluding(&make_query(&doc.text, k), 1, Some(&doc.id))
            .ok()?;
        let top = hits.first()?;
        self.texts.get(top.doc_id.as_str()).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreRecord {
    #[serde(flatten)]
    pub score: DocScore,
    pub k: KSetting,
}

impl Serialize for KSetting {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            KSetting::Woc => s.serialize_str("woc"),
            KSetting::K(k) => s.serialize_u64(*k as u64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Failure {
    pub doc_id: String,
    pub k: KSetting,
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub k: KSetting,
    /// `None` when every document failed.
    pub perplexity: Option<f64>,
    pub scored: usize,
    pub failed: usize,
    /// Scored documents that actually received context.
    pub with_context: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub policy: ContextPolicy,
    pub model: String,
    pub cells: Vec<Cell>,
    pub records: Vec<ScoreRecord>,
    pub failures: Vec<Failure>,
    /// Documents left out because they contain no words.
    pub skipped: Vec<String>,
}

impl EvalReport {
    /// Failed documents over attempted documents, across all cells.
    pub fn failure_rate(&self) -> f64 {
        let attempted = self.records.len() + self.failures.len();
        if attempted == 0 {
            0.0
        } else {
            self.failures.len() as f64 / attempted as f64
        }
    }

    pub fn cell(&self, k: KSetting) -> Option<&Cell> {
        self.cells.iter().find(|c| c.k == k)
    }

    /// One JSON object per scored document and cell.
    pub fn write_scores<W: Write>(&self, mut sink: W) -> std::io::Result<()> {
        for r in &self.records {
            let k = match r.k {
                KSetting::Woc => "\"woc\"".to_string(),
                KSetting::K(k) => k.to_string(),
            };
            writeln!(
                sink,
                "{{\"doc_id\":{},\"policy\":\"{}\",\"k\":{k},\"prefix_lp\":{},\"cont_lp\":{},\"words\":{},\"bytes\":{}}}",
                serde_json::to_string(&r.score.doc_id).expect("string serializes"),
                self.policy,
                fmt_f64(r.score.prefix_lp),
                fmt_f64(r.score.cont_lp),
                r.score.words,
                r.score.bytes
            )?;
        }
        sink.flush()
    }
}

/// Scores every document under every `k` setting and pools perplexities.
///
/// Documents without words are skipped. Scorer failures are recorded per
/// document and leave the affected cell computed over the remainder.
pub fn run_eval<S: Scorer + ?Sized>(
    docs: &[Document],
    contexts: &dyn ContextSource,
    scorer: &S,
    cfg: &EvalConfig,
) -> Result<EvalReport, ScoringError> {
    cfg.validate()?;
    let budget = cfg
        .context_budget
        .min(scorer.max_context_bytes().try_into().unwrap_or(usize::MAX));
    let (scorable, empty): (Vec<&Document>, Vec<&Document>) =
        docs.iter().partition(|d| d.word_count() > 0);
    let mut report = EvalReport {
        policy: cfg.policy,
        model: scorer.model_name(),
        cells: Vec::with_capacity(cfg.ks.len()),
        records: Vec::new(),
        failures: Vec::new(),
        skipped: empty.iter().map(|d| d.id.clone()).collect(),
    };
    for &k in &cfg.ks {
        let mut scores = Vec::with_capacity(scorable.len());
        let mut failed = 0;
        for chunk in scorable.chunks(EVAL_CHUNK) {
            let built: Vec<(ScoreRequest, bool)> = chunk
                .iter()
                .map(|d| {
                    let ctx = match k {
                        KSetting::K(k) => contexts.context_for(d, k),
                        KSetting::Woc => None,
                    };
                    build_request(d, ctx, k, budget)
                })
                .collect();
            let requests: Vec<ScoreRequest> = built.iter().map(|(r, _)| r.clone()).collect();
            let results = scorer.score_batch(&requests);
            for ((doc, (_, used)), result) in chunk.iter().zip(&built).zip(results) {
                match result.and_then(|s| doc_score(doc, *used, s)) {
                    Ok(score) => scores.push(score),
                    Err(e) => {
                        failed += 1;
                        report.failures.push(Failure {
                            doc_id: doc.id.clone(),
                            k,
                            code: e.code,
                            message: e.message,
                        });
                    }
                }
            }
        }
        report.cells.push(Cell {
            k,
            perplexity: corpus_perplexity(&scores).ok(),
            scored: scores.len(),
            failed,
            with_context: scores.iter().filter(|s| s.context_used).count(),
        });
        report
            .records
            .extend(scores.into_iter().map(|score| ScoreRecord { score, k }));
    }
    Ok(report)
}

/// A plain-text table, one row per report:
///
/// ```text
/// Policy     | woc   | k=1   | k=2
/// retrieved  | 35.15 | 29.29 | 30.54
/// ```
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut columns: Vec<KSetting> = Vec::new();
    for r in reports {
        for c in &r.cells {
            if !columns.contains(&c.k) {
                columns.push(c.k);
            }
        }
    }
    let mut rows: Vec<Vec<String>> = vec![std::iter::once("Policy".to_string())
        .chain(columns.iter().map(KSetting::to_string))
        .collect()];
    for r in reports {
        let mut row = vec![r.policy.name().to_string()];
        for k in &columns {
            row.push(match r.cell(*k).and_then(|c| c.perplexity) {
                Some(p) => format_ppl(p),
                None => "-".into(),
            });
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..=columns.len())
        .map(|i| rows.iter().map(|r| r[i].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in rows {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        out.push_str(cells.join(" | ").trim_end());
        out.push('\n');
    }
    out
}

fn format_ppl(p: f64) -> String {
    if p.abs() >= 1e6 {
        format!("{p:.1}")
    } else {
        format!("{p:.2}")
    }
}
