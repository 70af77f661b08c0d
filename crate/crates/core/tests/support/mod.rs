//! Random fixtures and independent oracles shared by the integration and
//! acceptance suites.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use epimem::corpus::Document;
use epimem::index::InvertedIndex;
use epimem::retrieval::{make_query, select_context, ContextPair, RetrievalConfig};

pub const WORDS: &[&str] = &[
    "oil", "price", "market", "rose", "fell", "bank", "rate", "storm", "vote", "court", "deal",
    "china", "trade", "union", "strike", "rain", "police", "fire", "north", "south", "talks",
    "minister", "budget", "tax", "energy", "gas", "school", "league", "game", "win", "loss",
    "export", "coast", "flood", "peace", "army", "health", "virus", "stock", "index",
];

pub const SOURCES: &[&str] = &["nyt", "xin", "apw"];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn base_time() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2005, 3, 1, 0, 0, 0).unwrap()
}

/// A capitalized sentence of `n` words ending in a period.
pub fn sentence<R: Rng + ?Sized>(rng: &mut R, n: usize, vocab: usize) -> String {
    let words: Vec<&str> = (0..n.max(1))
        .map(|_| WORDS[rng.random_range(0..vocab.min(WORDS.len()))])
        .collect();
    let mut s = words.join(" ");
    s[..1].make_ascii_uppercase();
    s.push('.');
    s
}

/// Text with between `min_sentences` and `max_sentences` sentences and at
/// most `max_tokens` words overall.
pub fn text(rng: &mut impl Rng, min_sentences: usize, max_sentences: usize, max_tokens: usize) -> String {
    let count = rng.random_range(min_sentences..=max_sentences);
    let per = (max_tokens / count.max(1)).max(1);
    (0..count)
        .map(|_| {
            let n = rng.random_range(1..=per.min(12));
            sentence(rng, n, WORDS.len())
        })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn document(rng: &mut impl Rng, id: String, max_sentences: usize, max_tokens: usize) -> Document {
    let days = rng.random_range(0..40i64);
    let secs = if rng.random_bool(0.3) { 0 } else { rng.random_range(0..86_400i64) };
    Document::new(
        id,
        SOURCES[rng.random_range(0..SOURCES.len())],
        base_time() + Duration::days(days) + Duration::seconds(secs),
        text(rng, 1, max_sentences, max_tokens),
    )
}

pub fn corpus(rng: &mut impl Rng, n: usize, max_tokens: usize) -> Vec<Document> {
    (0..n)
        .map(|i| document(rng, format!("d{i:03}"), 5, max_tokens))
        .collect()
}

/// Lowercased alphanumeric runs.
pub fn tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            cur.extend(c.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

pub fn counts(text: &str) -> BTreeMap<String, u64> {
    let mut m = BTreeMap::new();
    for t in tokens(text) {
        *m.entry(t).or_insert(0) += 1;
    }
    m
}

pub fn cosine(a: &BTreeMap<String, u64>, b: &BTreeMap<String, u64>) -> f64 {
    let dot: u64 = a.iter().map(|(t, x)| x * b.get(t).copied().unwrap_or(0)).sum();
    let na: u64 = a.values().map(|x| x * x).sum();
    let nb: u64 = b.values().map(|x| x * x).sum();
    if na == 0 || nb == 0 {
        return 0.0;
    }
    dot as f64 / ((na as f64).sqrt() * (nb as f64).sqrt())
}

/// Scores every document with the classic TF-IDF formula, keeps positive
/// scores, sorts by score then id and returns the first `top_n`.
pub fn brute_force_search(docs: &[Document], query: &str, top_n: usize) -> Vec<(String, f64)> {
    let doc_tokens: Vec<Vec<String>> = docs.iter().map(|d| tokens(&d.text)).collect();
    let n = docs.len() as f64;
    let mut unique: Vec<String> = Vec::new();
    for t in tokens(query) {
        if !unique.contains(&t) {
            unique.push(t);
        }
    }
    let mut scored = Vec::new();
    for (d, toks) in docs.iter().zip(&doc_tokens) {
        if unique.is_empty() || toks.is_empty() {
            continue;
        }
        let mut sum = 0.0;
        let mut matched = 0;
        for t in &unique {
            let tf = toks.iter().filter(|x| *x == t).count();
            if tf == 0 {
                continue;
            }
            matched += 1;
            let df = doc_tokens.iter().filter(|ts| ts.contains(t)).count() as f64;
            let idf = 1.0 + (n / (df + 1.0)).ln();
            sum += (tf as f64).sqrt() * idf * idf;
        }
        let coord = matched as f64 / unique.len() as f64;
        let score = coord * sum / (toks.len() as f64).sqrt();
        if score > 0.0 {
            scored.push((d.id.clone(), score));
        }
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(top_n);
    scored
}

/// Re-sorts runs of scores within `tol` of each other by id, so lists that
/// differ only by rounding in tied scores compare equal.
pub fn canonical(mut hits: Vec<(String, f64)>, tol: f64) -> Vec<(String, f64)> {
    let mut i = 0;
    while i < hits.len() {
        let mut j = i + 1;
        while j < hits.len() && (hits[i].1 - hits[j].1).abs() <= tol {
            j += 1;
        }
        hits[i..j].sort_by(|a, b| a.0.cmp(&b.0));
        i = j;
    }
    hits
}

/// The three admission conditions for a candidate context.
pub struct FilterRule {
    pub kappa: f64,
    pub window_seconds: i64,
    pub distinct_source: bool,
}

#[derive(Debug, Default, Clone, Copy)]
pub struct FilterVerdict {
    /// Decided without touching the rounding band around κ·α.
    pub clear: bool,
}

/// Checks a selection against the candidate list in rank order.
///
/// Returns `Err` on any violation: a selected document failing a
/// condition, an earlier candidate passing all of them, or a missing
/// selection while some candidate qualifies. Candidates within `tol` of
/// the cosine threshold are treated as undecidable and skipped.
pub fn check_selection(
    query: &Document,
    candidates: &[&Document],
    pair: &ContextPair,
    rule: &FilterRule,
    tol: f64,
) -> Result<FilterVerdict, String> {
    let q = counts(&query.text);
    let cos: Vec<f64> = candidates.iter().map(|c| cosine(&q, &counts(&c.text))).collect();
    let alpha = cos.iter().copied().fold(0.0, f64::max);
    if (alpha - pair.alpha).abs() > 1e-12 {
        return Err(format!("alpha {} != oracle {alpha}", pair.alpha));
    }
    let threshold = rule.kappa * alpha;
    let mut verdict = FilterVerdict { clear: true };
    let passes = |i: usize, verdict: &mut FilterVerdict| -> Option<bool> {
        let c = candidates[i];
        let age = (query.timestamp - c.timestamp).num_seconds();
        let others = !rule.distinct_source || c.source != query.source;
        let timely = age > 0 && age <= rule.window_seconds;
        if !(others && timely) {
            return Some(false);
        }
        if (cos[i] - threshold).abs() <= tol {
            verdict.clear = false;
            return None;
        }
        Some(cos[i] < threshold)
    };
    let selected = pair
        .retrieved_id
        .as_ref()
        .map(|id| candidates.iter().position(|c| &c.id == id).ok_or(format!("{id} not a candidate")))
        .transpose()?;
    let upto = selected.unwrap_or(candidates.len());
    for (i, c) in candidates.iter().enumerate().take(upto) {
        if passes(i, &mut verdict) == Some(true) {
            return Err(format!(
                "candidate {} at rank {} qualifies but {:?} was chosen",
                c.id,
                i + 1,
                pair.retrieved_id
            ));
        }
    }
    if let Some(s) = selected {
        let c = candidates[s];
        if rule.distinct_source && c.source == query.source {
            return Err(format!("{} shares the query source", c.id));
        }
        let age = (query.timestamp - c.timestamp).num_seconds();
        if !(age > 0 && age <= rule.window_seconds) {
            return Err(format!("{} is {age} s older than the query", c.id));
        }
        if cos[s] > threshold + 1e-12 {
            return Err(format!("{} cosine {} above κ·α {threshold}", c.id, cos[s]));
        }
        if pair.selected_rank != Some(s + 1) {
            return Err(format!("rank {:?} != {}", pair.selected_rank, s + 1));
        }
    }
    Ok(verdict)
}

/// Ids of a list of documents, in order.
pub fn ids(docs: &[Document]) -> BTreeSet<String> {
    docs.iter().map(|d| d.id.clone()).collect()
}

/// Compares `search` against [`brute_force_search`]. Scores at each rank
/// must agree within 1e-9, every returned document must carry its own
/// oracle score, and ids must match except inside a near-tie at the cut.
pub fn check_search(index: &InvertedIndex, docs: &[Document], query: &str, top_n: usize) -> Result<(), String> {
    let got: Vec<(String, f64)> = index
        .search(query, top_n)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|h| (h.doc_id, h.score))
        .collect();
    let all = brute_force_search(docs, query, docs.len());
    let want = canonical(all.iter().take(top_n).cloned().collect(), 1e-12);
    if got.len() != want.len() {
        return Err(format!("query {query:?}: {} hits, oracle {}", got.len(), want.len()));
    }
    for (g, w) in got.iter().zip(&want) {
        if (g.1 - w.1).abs() > 1e-9 {
            return Err(format!("query {query:?}: {} {} vs oracle {} {}", g.0, g.1, w.0, w.1));
        }
        match all.iter().find(|h| h.0 == g.0) {
            Some(own) if (g.1 - own.1).abs() <= 1e-9 => {}
            _ => return Err(format!("query {query:?}: {} score {} disagrees with oracle", g.0, g.1)),
        }
    }
    let cut = want.last().map_or(0.0, |h| h.1);
    for (g, w) in canonical(got, 1e-12).iter().zip(&want) {
        if (g.1 - cut).abs() > 1e-9 && g.0 != w.0 {
            return Err(format!("query {query:?}: order {} vs oracle {}", g.0, w.0));
        }
    }
    Ok(())
}

/// Random index-oracle instances: `corpora` corpora with `queries` queries each.
pub fn index_oracle_run(seed: u64, corpora: usize, queries: usize) -> Result<usize, String> {
    let mut r = rng(seed);
    let mut checked = 0;
    for _ in 0..corpora {
        let n = r.random_range(1..=100);
        let docs = corpus(&mut r, n, 60);
        let index = InvertedIndex::build(&docs).map_err(|e| e.to_string())?;
        for _ in 0..queries {
            let q = text(&mut r, 1, 2, 8);
            check_search(&index, &docs, &q, 20)?;
            check_search(&index, &docs, &q, n)?;
            checked += 1;
        }
    }
    Ok(checked)
}

#[derive(Debug, Default, Clone, Copy)]
pub struct FilterTally {
    pub instances: usize,
    pub selected: usize,
    pub unpaired: usize,
    /// Instances with a candidate inside the rounding band around κ·α.
    pub unclear: usize,
}

/// A randomized (query, candidate set) instance: a small memory whose
/// timestamps cluster around the query so window edges are hit exactly.
pub fn filter_instance(r: &mut impl Rng) -> (Document, Vec<Document>, RetrievalConfig) {
    let window_days = r.random_range(1..=20u32);
    let w = i64::from(window_days) * 86_400;
    let qt = base_time() + Duration::days(40);
    let vocab = r.random_range(4..=WORDS.len());
    let doc = |r: &mut dyn rand::RngCore, id: String, t| {
        let n = r.random_range(1..=4);
        let text = (0..n)
            .map(|_| {
                let len = r.random_range(1..=8);
                sentence(r, len, vocab)
            })
            .collect::<Vec<_>>()
            .join(" ");
        Document::new(id, SOURCES[r.random_range(0..SOURCES.len())], t, text)
    };
    let query = doc(r, "q".into(), qt);
    let n = r.random_range(1..=30);
    let memory = (0..n)
        .map(|i| {
            let offset = match r.random_range(0..8) {
                0 => w,
                1 => w + 1,
                2 => 0,
                3 => -1,
                4 => 1,
                5 => w - 1,
                _ => r.random_range(-86_400..w + 5 * 86_400),
            };
            let t = qt - Duration::seconds(offset);
            if r.random_bool(0.1) {
                Document::new(format!("m{i:02}"), SOURCES[r.random_range(0..SOURCES.len())], t, query.text.clone())
            } else {
                doc(r, format!("m{i:02}"), t)
            }
        })
        .collect();
    let cfg = RetrievalConfig {
        k: r.random_range(1..=3),
        top_n: r.random_range(1..=25),
        window_days,
        cosine_factor: if r.random_bool(0.5) { 0.6 } else { r.random_range(0.05..=1.0) },
        distinct_source: r.random_bool(0.8),
    };
    (query, memory, cfg)
}

/// Runs `count` filter instances through the real retrieval path and
/// checks every selection against [`check_selection`].
pub fn filter_run(seed: u64, count: usize) -> Result<FilterTally, String> {
    let mut r = rng(seed);
    let mut tally = FilterTally::default();
    for i in 0..count {
        let (query, memory, cfg) = filter_instance(&mut r);
        let index = InvertedIndex::build(&memory).map_err(|e| e.to_string())?;
        let hits = index
            .search_excluding(&make_query(&query.text, cfg.k), cfg.top_n, Some(&query.id))
            .map_err(|e| e.to_string())?;
        let pair = select_context(&query, &query.term_counts(), &hits, &index, &cfg).map_err(|e| e.to_string())?;
        let candidates: Vec<&Document> = hits
            .iter()
            .map(|h| memory.iter().find(|d| d.id == h.doc_id).expect("hit from memory"))
            .collect();
        let rule = FilterRule {
            kappa: cfg.cosine_factor,
            window_seconds: cfg.window_seconds(),
            distinct_source: cfg.distinct_source,
        };
        let verdict = check_selection(&query, &candidates, &pair, &rule, 1e-12)
            .map_err(|e| format!("instance {i}: {e}"))?;
        tally.instances += 1;
        if pair.retrieved_id.is_some() {
            tally.selected += 1;
        } else {
            tally.unpaired += 1;
        }
        if !verdict.clear {
            tally.unclear += 1;
        }
    }
    Ok(tally)
}

pub mod checks;
