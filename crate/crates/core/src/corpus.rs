//! Timestamped news corpora: parsing, sentence segmentation, IR tokenization
//! and bag-of-words cosine similarity.

use std::collections::{HashMap, HashSet};
use std::io::BufRead;
use std::ops::Range;

use chrono::{DateTime, NaiveDate, NaiveDateTime, Utc};
use serde::Deserialize;
use thiserror::Error;

/// Term → occurrence count.
pub type TermCounts = HashMap<String, u32>;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: missing required field `{field}`")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: unparseable timestamp {value:?}")]
    Timestamp { line: usize, value: String },
    #[error("line {line}: duplicate document id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: empty source")]
    EmptySource { line: usize },
    #[error("line {line}: document {id:?} has empty text")]
    EmptyText { line: usize, id: String },
    #[error("line {line}: {source}")]
    Io {
        line: usize,
        #[source]
        source: std::io::Error,
    },
}

impl CorpusError {
    /// 1-based line number the error refers to.
    pub fn line(&self) -> usize {
        match self {
            CorpusError::Malformed { line, .. }
            | CorpusError::MissingField { line, .. }
            | CorpusError::Timestamp { line, .. }
            | CorpusError::DuplicateId { line, .. }
            | CorpusError::EmptySource { line }
            | CorpusError::EmptyText { line, .. }
            | CorpusError::Io { line, .. } => *line,
        }
    }
}

/// A source-attributed, timestamped news article.
#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub id: String,
    pub source: String,
    pub timestamp: DateTime<Utc>,
    pub text: String,
}

impl Document {
    pub fn new(
        id: impl Into<String>,
        source: impl Into<String>,
        timestamp: DateTime<Utc>,
        text: impl Into<String>,
    ) -> Self {
        Document {
            id: id.into(),
            source: source.into(),
            timestamp,
            text: text.into(),
        }
    }

    pub fn word_count(&self) -> usize {
        word_count(&self.text)
    }

    pub fn term_counts(&self) -> TermCounts {
        term_counts(&ir_tokenize(&self.text))
    }
}

/// Per-document derived views used by retrieval and scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedDocument {
    pub doc_id: String,
    pub sentences: Vec<String>,
    pub ir_tokens: Vec<String>,
    pub term_counts: TermCounts,
    pub byte_length: usize,
    pub word_count: usize,
}

impl TokenizedDocument {
    pub fn new(doc: &Document) -> Self {
        let ir_tokens = ir_tokenize(&doc.text);
        TokenizedDocument {
            doc_id: doc.id.clone(),
            sentences: split_sentences(&doc.text),
            term_counts: term_counts(&ir_tokens),
            ir_tokens,
            byte_length: doc.text.len(),
            word_count: word_count(&doc.text),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ParseOptions {
    /// Admit documents whose text has no non-whitespace character.
    pub allow_empty_text: bool,
}

#[derive(Deserialize)]
struct RawRecord {
    id: Option<String>,
    source: Option<String>,
    timestamp: Option<String>,
    text: Option<String>,
    title: Option<String>,
}

/// Lazily parses a newline-delimited JSON corpus.
///
/// Yields documents in file order. After the first error the iterator keeps
/// going, so callers that want fail-fast semantics should stop at the first
/// `Err`.
pub fn parse_corpus<R: BufRead>(reader: R, options: ParseOptions) -> CorpusReader<R> {
    CorpusReader {
        reader,
        options,
        line: 0,
        seen: HashSet::new(),
        buf: String::new(),
    }
}

/// Reads a whole corpus, failing on the first invalid record.
pub fn read_corpus<R: BufRead>(
    reader: R,
    options: ParseOptions,
) -> Result<Vec<Document>, CorpusError> {
    parse_corpus(reader, options).collect()
}

pub struct CorpusReader<R> {
    reader: R,
    options: ParseOptions,
    line: usize,
    seen: HashSet<String>,
    buf: String,
}

impl<R: BufRead> Iterator for CorpusReader<R> {
    type Item = Result<Document, CorpusError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.buf.clear();
            self.line += 1;
            match self.reader.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(source) => {
                    return Some(Err(CorpusError::Io {
                        line: self.line,
                        source,
                    }))
                }
            }
            if self.buf.trim().is_empty() {
                continue;
            }
            let line = self.line;
            return Some(self.parse_record(line));
        }
    }
}

impl<R: BufRead> CorpusReader<R> {
    fn parse_record(&mut self, line: usize) -> Result<Document, CorpusError> {
        let raw: RawRecord =
            serde_json::from_str(self.buf.trim_end()).map_err(|e| CorpusError::Malformed {
                line,
                message: e.to_string(),
            })?;
        let id = raw.id.ok_or(CorpusError::MissingField { line, field: "id" })?;
        let source = raw.source.ok_or(CorpusError::MissingField {
            line,
            field: "source",
        })?;
        let ts = raw.timestamp.ok_or(CorpusError::MissingField {
            line,
            field: "timestamp",
        })?;
        let body = raw
            .text
            .ok_or(CorpusError::MissingField { line, field: "text" })?;
        if source.trim().is_empty() {
            return Err(CorpusError::EmptySource { line });
        }
        let timestamp =
            parse_timestamp(&ts).ok_or(CorpusError::Timestamp { line, value: ts })?;
        let text = match raw.title {
            Some(title) if !title.is_empty() => format!("{title}\n{body}"),
            _ => body,
        };
        if !self.options.allow_empty_text && text.trim().is_empty() {
            return Err(CorpusError::EmptyText { line, id });
        }
        if !self.seen.insert(id.clone()) {
            return Err(CorpusError::DuplicateId { line, id });
        }
        Ok(Document {
            id,
            source,
            timestamp,
            text,
        })
    }
}

/// Parses an ISO-8601 date (midnight UTC) or datetime. Datetimes without an
/// offset are taken as UTC.
pub fn parse_timestamp(value: &str) -> Option<DateTime<Utc>> {
    let value = value.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(value) {
        return Some(dt.with_timezone(&Utc));
    }
    if let Ok(naive) = NaiveDateTime::parse_from_str(value, "%Y-%m-%dT%H:%M:%S%.f") {
        return Some(naive.and_utc());
    }
    if let Ok(date) = NaiveDate::parse_from_str(value, "%Y-%m-%d") {
        return date.and_hms_opt(0, 0, 0).map(|d| d.and_utc());
    }
    None
}

/// Tokens that end in a period without ending a sentence. Compared
/// case-sensitively against the whitespace-delimited word carrying the
/// period.
pub const ABBREVIATIONS: &[&str] = &[
    "Mr.", "Mrs.", "Ms.", "Dr.", "U.S.", "St.", "vs.", "Jan.", "Feb.", "Mar.", "Apr.", "Jun.",
    "Jul.", "Aug.", "Sep.", "Sept.", "Oct.", "Nov.", "Dec.",
];

const CLOSERS: &[char] = &['"', '\'', '\u{201d}', '\u{2019}', ')', ']'];
const OPENERS: &[char] = &['"', '\'', '\u{201c}', '\u{2018}', '(', '['];

/// Byte ranges of the sentences in `text`, trimmed of surrounding whitespace.
///
/// A boundary is a `.`, `!` or `?` (optionally followed by closing quotes or
/// brackets) followed by whitespace and then an uppercase letter or digit
/// (optionally behind opening quotes or brackets). A period ending one of
/// [`ABBREVIATIONS`] is never a boundary.
pub fn sentence_spans(text: &str) -> Vec<Range<usize>> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut spans = Vec::new();
    let mut start = 0usize;
    let mut i = 0usize;
    while i < chars.len() {
        let (_, c) = chars[i];
        if matches!(c, '.' | '!' | '?') {
            let mut end = i + 1;
            while end < chars.len() && CLOSERS.contains(&chars[end].1) {
                end += 1;
            }
            let mut next = end;
            while next < chars.len() && chars[next].1.is_whitespace() {
                next += 1;
            }
            let mut look = next;
            while look < chars.len() && OPENERS.contains(&chars[look].1) {
                look += 1;
            }
            let boundary = next > end
                && look < chars.len()
                && (chars[look].1.is_uppercase() || chars[look].1.is_ascii_digit())
                && !(c == '.' && ends_with_abbreviation(text, chars[i].0 + 1));
            if boundary {
                let end_byte = byte_at(&chars, end, text.len());
                push_trimmed(&mut spans, text, start..end_byte);
                start = byte_at(&chars, next, text.len());
                i = next;
                continue;
            }
        }
        i += 1;
    }
    push_trimmed(&mut spans, text, start..text.len());
    spans
}

fn byte_at(chars: &[(usize, char)], idx: usize, len: usize) -> usize {
    chars.get(idx).map_or(len, |&(b, _)| b)
}

fn ends_with_abbreviation(text: &str, end: usize) -> bool {
    let head = &text[..end];
    let word_start = head
        .char_indices()
        .rev()
        .find(|(_, c)| c.is_whitespace())
        .map_or(0, |(b, c)| b + c.len_utf8());
    let word = head[word_start..].trim_start_matches(OPENERS);
    ABBREVIATIONS.contains(&word)
}

fn push_trimmed(spans: &mut Vec<Range<usize>>, text: &str, range: Range<usize>) {
    let slice = &text[range.clone()];
    let lead = slice.len() - slice.trim_start().len();
    let trimmed = slice.trim();
    if !trimmed.is_empty() {
        let s = range.start + lead;
        spans.push(s..s + trimmed.len());
    }
}

/// Splits `text` into sentences; see [`sentence_spans`] for the rule.
pub fn split_sentences(text: &str) -> Vec<String> {
    sentence_spans(text)
        .into_iter()
        .map(|r| text[r].to_string())
        .collect()
}

/// Lowercased maximal runs of alphanumeric characters.
pub fn ir_tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn term_counts<S: AsRef<str>>(tokens: &[S]) -> TermCounts {
    let mut counts = TermCounts::new();
    for t in tokens {
        *counts.entry(t.as_ref().to_string()).or_insert(0) += 1;
    }
    counts
}

/// Number of whitespace-delimited words.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Cosine similarity of raw term-frequency vectors.
///
/// Dot product and squared norms are accumulated as integers, so the result
/// does not depend on map iteration order and is exactly symmetric.
pub fn bow_cosine(a: &TermCounts, b: &TermCounts) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let dot: u64 = small
        .iter()
        .filter_map(|(t, &x)| large.get(t).map(|&y| u64::from(x) * u64::from(y)))
        .sum();
    if dot == 0 {
        return 0.0;
    }
    let sq = |m: &TermCounts| m.values().map(|&x| u64::from(x) * u64::from(x)).sum::<u64>();
    let (na, nb) = (sq(a) as f64, sq(b) as f64);
    (dot as f64 / (na * nb).sqrt()).min(1.0)
}
