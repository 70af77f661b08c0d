//! Inverted index over the memory corpus with classic TF-IDF ranking.
//!
//! A document `d` is scored against query `q` as
//!
//! ```text
//! coord(q, d) · Σ_{t ∈ unique(q)} √tf(t, d) · idf(t)² · norm(d)
//! idf(t)  = 1 + ln(N / (df(t) + 1))
//! norm(d) = 1 / √(token count of d)
//! coord   = matched unique query terms / unique query terms
//! ```
//!
//! The query norm is omitted; it is constant for a query and cannot change
//! the ranking.

use std::collections::HashMap;
use std::io::{Read, Write};

use chrono::{DateTime, Utc};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{ir_tokenize, term_counts, Document, TermCounts};

const MAGIC: &[u8; 4] = b"EPIX";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("index is empty and cannot be queried")]
    Empty,
    #[error("top_n must be at least 1")]
    ZeroTopN,
    #[error("duplicate document id {0:?}")]
    DuplicateId(String),
    #[error("not an index file (bad magic)")]
    BadMagic,
    #[error("index format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u8, expected: u8 },
    #[error("index payload is corrupt: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-document data kept alongside the postings.
#[derive(Debug, Clone, PartialEq)]
pub struct DocMeta {
    pub id: String,
    pub source: String,
    pub timestamp: DateTime<Utc>,
    pub term_counts: TermCounts,
    pub token_count: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Posting {
    /// Ordinal of the document; ordinals follow ascending doc id.
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredHit {
    pub doc_id: String,
    pub score: f64,
    pub rank: usize,
}

/// Immutable after construction; safe to share between threads.
#[derive(Debug, Clone, Default)]
pub struct InvertedIndex {
    postings: HashMap<String, Vec<Posting>>,
    norms: Vec<f64>,
    meta: Vec<DocMeta>,
    by_id: HashMap<String, u32>,
}

impl InvertedIndex {
    pub fn build<'a, I>(docs: I) -> Result<Self, IndexError>
    where
        I: IntoIterator<Item = &'a Document>,
    {
        let mut metas = Vec::new();
        for doc in docs {
            let tokens = ir_tokenize(&doc.text);
            metas.push(DocMeta {
                id: doc.id.clone(),
                source: doc.source.clone(),
                timestamp: doc.timestamp,
                token_count: tokens.len() as u32,
                term_counts: term_counts(&tokens),
            });
        }
        Self::from_meta(metas)
    }

    fn from_meta(mut metas: Vec<DocMeta>) -> Result<Self, IndexError> {
        metas.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = metas.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(IndexError::DuplicateId(w[0].id.clone()));
        }
        let mut postings: HashMap<String, Vec<Posting>> = HashMap::new();
        let mut norms = Vec::with_capacity(metas.len());
        let mut by_id = HashMap::with_capacity(metas.len());
        for (ord, m) in metas.iter().enumerate() {
            let ord = ord as u32;
            for (term, &tf) in &m.term_counts {
                postings
                    .entry(term.clone())
                    .or_default()
                    .push(Posting { doc: ord, tf });
            }
            norms.push(if m.token_count == 0 {
                0.0
            } else {
                1.0 / f64::from(m.token_count).sqrt()
            });
            by_id.insert(m.id.clone(), ord);
        }
        Ok(InvertedIndex {
            postings,
            norms,
            meta: metas,
            by_id,
        })
    }

    pub fn doc_count(&self) -> usize {
        self.meta.len()
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map_or(&[], Vec::as_slice)
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.postings.keys().map(String::as_str)
    }

    /// Length norm `1/√|d|` of the document with the given ordinal.
    pub fn norm(&self, ordinal: u32) -> f64 {
        self.norms[ordinal as usize]
    }

    pub fn meta(&self, doc_id: &str) -> Option<&DocMeta> {
        self.by_id.get(doc_id).map(|&o| &self.meta[o as usize])
    }

    pub fn documents(&self) -> &[DocMeta] {
        &self.meta
    }

    pub fn idf(&self, term: &str) -> Result<f64, IndexError> {
        if self.meta.is_empty() {
            return Err(IndexError::Empty);
        }
        Ok(idf(self.doc_count(), self.doc_freq(term)))
    }

    /// Top `top_n` documents for `query_text`, best first.
    ///
    /// Only documents sharing at least one term with the query are returned.
    /// Ties on score are broken by ascending doc id.
    pub fn search(&self, query_text: &str, top_n: usize) -> Result<Vec<ScoredHit>, IndexError> {
        self.search_excluding(query_text, top_n, None)
    }

    /// Like [`search`](Self::search) but never returns `exclude`.
    pub fn search_excluding(
        &self,
        query_text: &str,
        top_n: usize,
        exclude: Option<&str>,
    ) -> Result<Vec<ScoredHit>, IndexError> {
        if top_n == 0 {
            return Err(IndexError::ZeroTopN);
        }
        if self.meta.is_empty() {
            return Err(IndexError::Empty);
        }
        let terms = unique_in_order(ir_tokenize(query_text));
        if terms.is_empty() {
            return Ok(Vec::new());
        }
        let n = self.doc_count();
        let mut acc: HashMap<u32, (f64, u32)> = HashMap::new();
        for term in &terms {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            let w = idf(n, list.len()).powi(2);
            for p in list {
                let e = acc.entry(p.doc).or_insert((0.0, 0));
                e.0 += f64::from(p.tf).sqrt() * w;
                e.1 += 1;
            }
        }
        let excluded = exclude.and_then(|id| self.by_id.get(id).copied());
        let unique = terms.len() as f64;
        let mut scored: Vec<(u32, f64)> = acc
            .into_iter()
            .filter(|(doc, _)| Some(*doc) != excluded)
            .map(|(doc, (sum, matched))| {
                let coord = f64::from(matched) / unique;
                (doc, coord * sum * self.norms[doc as usize])
            })
            .filter(|&(_, s)| s > 0.0)
            .collect();
        // ordinals follow doc id order, so comparing them is the id tie-break
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(top_n);
        Ok(scored
            .into_iter()
            .enumerate()
            .map(|(i, (doc, score))| ScoredHit {
                doc_id: self.meta[doc as usize].id.clone(),
                score,
                rank: i + 1,
            })
            .collect())
    }

    /// Writes the versioned, checksummed single-file form of the index.
    pub fn save<W: Write>(&self, mut sink: W) -> Result<(), IndexError> {
        let mut payload = Vec::new();
        put_u64(&mut payload, self.meta.len() as u64);
        for m in &self.meta {
            put_str(&mut payload, &m.id);
            put_str(&mut payload, &m.source);
            put_u64(&mut payload, m.timestamp.timestamp() as u64);
            payload.extend_from_slice(&m.timestamp.timestamp_subsec_nanos().to_le_bytes());
            payload.extend_from_slice(&m.token_count.to_le_bytes());
            let mut terms: Vec<_> = m.term_counts.iter().collect();
            terms.sort();
            put_u64(&mut payload, terms.len() as u64);
            for (t, c) in terms {
                put_str(&mut payload, t);
                payload.extend_from_slice(&c.to_le_bytes());
            }
        }
        sink.write_all(MAGIC)?;
        sink.write_all(&[FORMAT_VERSION])?;
        sink.write_all(&(payload.len() as u64).to_le_bytes())?;
        sink.write_all(&payload)?;
        sink.write_all(&Sha256::digest(&payload))?;
        sink.flush()?;
        Ok(())
    }

    pub fn load<R: Read>(mut source: R) -> Result<Self, IndexError> {
        let mut bytes = Vec::new();
        source.read_to_end(&mut bytes)?;
        if bytes.len() < 5 || &bytes[..4] != MAGIC {
            return Err(IndexError::BadMagic);
        }
        if bytes[4] != FORMAT_VERSION {
            return Err(IndexError::VersionMismatch {
                found: bytes[4],
                expected: FORMAT_VERSION,
            });
        }
        let mut cur = Cursor::new(&bytes[5..]);
        let len = cur.u64()? as usize;
        let payload = cur.take(len)?;
        let digest = cur.take(32)?;
        if !cur.is_empty() {
            return Err(IndexError::Corrupt("trailing bytes".into()));
        }
        if Sha256::digest(payload).as_slice() != digest {
            return Err(IndexError::Corrupt("checksum mismatch".into()));
        }
        let mut cur = Cursor::new(payload);
        let n = cur.u64()? as usize;
        let mut metas = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let id = cur.string()?;
            let source = cur.string()?;
            let secs = cur.u64()? as i64;
            let nanos = cur.u32()?;
            let timestamp = DateTime::from_timestamp(secs, nanos)
                .ok_or_else(|| IndexError::Corrupt("timestamp out of range".into()))?;
            let token_count = cur.u32()?;
            let n_terms = cur.u64()? as usize;
            let mut tc = TermCounts::with_capacity(n_terms.min(1 << 16));
            for _ in 0..n_terms {
                let t = cur.string()?;
                tc.insert(t, cur.u32()?);
            }
            metas.push(DocMeta {
                id,
                source,
                timestamp,
                term_counts: tc,
                token_count,
            });
        }
        Self::from_meta(metas)
    }
}

/// `1 + ln(N / (df + 1))`.
pub fn idf(doc_count: usize, doc_freq: usize) -> f64 {
    1.0 + (doc_count as f64 / (doc_freq as f64 + 1.0)).ln()
}

fn unique_in_order(tokens: Vec<String>) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    tokens.into_iter().filter(|t| seen.insert(t.clone())).collect()
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Cursor { buf }
    }

    fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], IndexError> {
        if self.buf.len() < n {
            return Err(IndexError::Corrupt("truncated payload".into()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u64(&mut self) -> Result<u64, IndexError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, IndexError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, IndexError> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| IndexError::Corrupt("invalid utf-8".into()))
    }
}
