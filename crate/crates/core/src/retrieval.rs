//! Episodic-memory access policy: first-k-sentence queries, candidate
//! filtering and the query/retrieved pair corpus.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use chrono::{DateTime, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{bow_cosine, sentence_spans, Document, TermCounts};
use crate::index::{IndexError, InvertedIndex, ScoredHit};

pub const DEFAULT_KS: [usize; 3] = [1, 2, 5];
pub const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("invalid retrieval config: {0}")]
    Config(String),
    #[error("split boundaries must satisfy t1 < t2")]
    Boundaries,
    #[error("unresolvable document id {0:?}")]
    Unresolved(String),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("pair file line {line}: {message}")]
    PairFile { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    /// Number of leading sentences forming the query.
    pub k: usize,
    pub top_n: usize,
    pub window_days: u32,
    /// κ: a candidate qualifies only if its cosine is at most κ·α.
    pub cosine_factor: f64,
    /// Require the context to come from a different source than the query.
    pub distinct_source: bool,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            k: 1,
            top_n: 20,
            window_days: 14,
            cosine_factor: 0.6,
            distinct_source: true,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if self.k == 0 {
            return Err(RetrievalError::Config("k must be >= 1".into()));
        }
        if self.top_n == 0 {
            return Err(RetrievalError::Config("top_n must be >= 1".into()));
        }
        if self.window_days == 0 {
            return Err(RetrievalError::Config("window_days must be > 0".into()));
        }
        if !(self.cosine_factor > 0.0 && self.cosine_factor <= 1.0) {
            return Err(RetrievalError::Config(format!(
                "cosine factor must lie in (0, 1], got {}",
                self.cosine_factor
            )));
        }
        Ok(())
    }

    pub fn window_seconds(&self) -> i64 {
        i64::from(self.window_days) * 86_400
    }
}

/// A query document and the memory document chosen as its context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextPair {
    pub query_id: String,
    pub retrieved_id: Option<String>,
    /// Largest cosine between the query and any candidate, before filtering.
    pub alpha: f64,
    #[serde(rename = "cosine")]
    pub selected_cosine: Option<f64>,
    #[serde(rename = "rank")]
    pub selected_rank: Option<usize>,
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnpairedReason {
    NoHits,
    FilteredAll,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unpaired {
    pub query_id: String,
    pub reason: UnpairedReason,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairSet {
    pub pairs: Vec<ContextPair>,
    pub unpaired: Vec<Unpaired>,
}

/// The first `min(k, sentence count)` sentences of `text`, joined by spaces.
pub fn make_query(text: &str, k: usize) -> String {
    let spans = sentence_spans(text);
    spans
        .into_iter()
        .take(k)
        .map(|r| &text[r])
        .collect::<Vec<_>>()
        .join(" ")
}

/// Chooses the best-ranked hit passing the source, recency and
/// near-duplicate filters.
///
/// α is taken over every hit, including ones the other filters reject.
pub fn select_context(
    query: &Document,
    query_terms: &TermCounts,
    hits: &[ScoredHit],
    index: &InvertedIndex,
    cfg: &RetrievalConfig,
) -> Result<ContextPair, RetrievalError> {
    let mut cosines = Vec::with_capacity(hits.len());
    for h in hits {
        let meta = index
            .meta(&h.doc_id)
            .ok_or_else(|| RetrievalError::Unresolved(h.doc_id.clone()))?;
        cosines.push(bow_cosine(query_terms, &meta.term_counts));
    }
    let alpha = cosines.iter().copied().fold(0.0, f64::max);
    let threshold = cfg.cosine_factor * alpha;
    let window = cfg.window_seconds();
    let chosen = hits.iter().zip(&cosines).find(|(h, &cos)| {
        let meta = index.meta(&h.doc_id).expect("resolved above");
        let age = (query.timestamp - meta.timestamp).num_seconds();
        let other_source = !cfg.distinct_source || meta.source != query.source;
        other_source && age > 0 && age <= window && cos <= threshold && h.doc_id != query.id
    });
    Ok(ContextPair {
        query_id: query.id.clone(),
        retrieved_id: chosen.map(|(h, _)| h.doc_id.clone()),
        alpha,
        selected_cosine: chosen.map(|(_, &c)| c),
        selected_rank: chosen.map(|(h, _)| h.rank),
        k: cfg.k,
    })
}

/// Retrieves and selects a context for every query document, in input order.
///
/// The query document itself is excluded from its own candidate list when
/// the memory also indexes it.
pub fn build_pairs(
    queries: &[Document],
    memory: &InvertedIndex,
    cfg: &RetrievalConfig,
) -> Result<PairSet, RetrievalError> {
    cfg.validate()?;
    let outcomes: Vec<Result<(ContextPair, bool), RetrievalError>> = queries
        .par_iter()
        .map(|q| {
            let hits =
                memory.search_excluding(&make_query(&q.text, cfg.k), cfg.top_n, Some(&q.id))?;
            let pair = select_context(q, &q.term_counts(), &hits, memory, cfg)?;
            Ok((pair, hits.is_empty()))
        })
        .collect();
    let mut set = PairSet::default();
    for outcome in outcomes {
        let (pair, no_hits) = outcome?;
        if pair.retrieved_id.is_some() {
            set.pairs.push(pair);
        } else {
            let reason = if no_hits {
                UnpairedReason::NoHits
            } else {
                UnpairedReason::FilteredAll
            };
            set.unpaired.push(Unpaired {
                query_id: pair.query_id,
                reason,
            });
        }
    }
    Ok(set)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<ContextPair>,
    pub dev: Vec<ContextPair>,
    pub test: Vec<ContextPair>,
}

/// Partitions pairs by query timestamp: `< t1`, `[t1, t2)`, `>= t2`.
pub fn split_by_timestamp<F>(
    pairs: &[ContextPair],
    timestamp_of: F,
    t1: DateTime<Utc>,
    t2: DateTime<Utc>,
) -> Result<Splits, RetrievalError>
where
    F: Fn(&str) -> Option<DateTime<Utc>>,
{
    if t1 >= t2 {
        return Err(RetrievalError::Boundaries);
    }
    let mut out = Splits::default();
    for p in pairs {
        let ts = timestamp_of(&p.query_id)
            .ok_or_else(|| RetrievalError::Unresolved(p.query_id.clone()))?;
        let bucket = if ts < t1 {
            &mut out.train
        } else if ts < t2 {
            &mut out.dev
        } else {
            &mut out.test
        };
        bucket.push(p.clone());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QualityStats {
    pub pairs: usize,
    pub mean_cosine: f64,
    /// 20 equal-width bins over [0, 1]; 1.0 falls in the last bin.
    pub histogram: [usize; HISTOGRAM_BINS],
    pub unpaired: usize,
    /// selected rank → number of pairs.
    pub rank_distribution: BTreeMap<usize, usize>,
}

/// Recomputes each pair's cosine from the documents and summarizes.
pub fn pair_quality_stats<'a, F>(
    pairs: &[ContextPair],
    unpaired: usize,
    lookup: F,
) -> Result<QualityStats, RetrievalError>
where
    F: Fn(&str) -> Option<&'a TermCounts>,
{
    let mut histogram = [0usize; HISTOGRAM_BINS];
    let mut rank_distribution = BTreeMap::new();
    let mut total = 0.0;
    let mut counted = 0usize;
    for p in pairs {
        let q = lookup(&p.query_id).ok_or_else(|| RetrievalError::Unresolved(p.query_id.clone()))?;
        let Some(rid) = &p.retrieved_id else { continue };
        let r = lookup(rid).ok_or_else(|| RetrievalError::Unresolved(rid.clone()))?;
        let c = bow_cosine(q, r);
        total += c;
        counted += 1;
        histogram[((c * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1)] += 1;
        if let Some(rank) = p.selected_rank {
            *rank_distribution.entry(rank).or_insert(0) += 1;
        }
    }
    Ok(QualityStats {
        pairs: counted,
        mean_cosine: if counted == 0 { 0.0 } else { total / counted as f64 },
        histogram,
        unpaired,
        rank_distribution,
    })
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    query_id: String,
    retrieved_id: String,
    alpha: f64,
    cosine: f64,
    rank: usize,
    k: usize,
}

/// One JSON object per line: `{"query_id","retrieved_id","alpha","cosine","rank","k"}`.
/// Pairs without a retrieved document are skipped.
pub fn write_pairs<W: Write>(mut sink: W, pairs: &[ContextPair]) -> std::io::Result<()> {
    for p in pairs {
        let (Some(rid), Some(cos), Some(rank)) =
            (&p.retrieved_id, p.selected_cosine, p.selected_rank)
        else {
            continue;
        };
        let rec = PairRecord {
            query_id: p.query_id.clone(),
            retrieved_id: rid.clone(),
            alpha: p.alpha,
            cosine: cos,
            rank,
            k: p.k,
        };
        serde_json::to_writer(&mut sink, &rec)?;
        sink.write_all(b"\n")?;
    }
    sink.flush()
}

pub fn read_pairs<R: BufRead>(source: R) -> Result<Vec<ContextPair>, RetrievalError> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PairRecord = serde_json::from_str(&line).map_err(|e| RetrievalError::PairFile {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(ContextPair {
            query_id: rec.query_id,
            retrieved_id: Some(rec.retrieved_id),
            alpha: rec.alpha,
            selected_cosine: Some(rec.cosine),
            selected_rank: Some(rec.rank),
            k: rec.k,
        });
    }
    Ok(out)
}

/// One JSON object per line: `{"query_id","reason"}`.
pub fn write_unpaired<W: Write>(mut sink: W, unpaired: &[Unpaired]) -> std::io::Result<()> {
    for u in unpaired {
        serde_json::to_writer(&mut sink, u)?;
        sink.write_all(b"\n")?;
    }
    sink.flush()
}
