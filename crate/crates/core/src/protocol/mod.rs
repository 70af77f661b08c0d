//! Scorer-agnostic wire contract.
//!
//! Every message is one UTF-8 JSON object per line:
//!
//! ```text
//! handshake  {"v":1,"model":string,"max_context_bytes":int}
//! request    {"id":string,"prefix":string,"context":string|null,"continuation":string}
//! response   {"id":string,"prefix_lp":number,"cont_lp":number,"prefix_tokens":int,"cont_tokens":int}
//!         or {"id":string,"error":{"code":string,"message":string}}
//! ```
//!
//! The server sends the handshake first, then exactly one response per
//! request, in request order. Log-probabilities are natural logs written with
//! 17 significant digits.

mod client;
mod scorers;
mod server;

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use client::{
    connect_and_score, ClientError, ClientOptions, Connection, RemoteScorer, Transport,
};
pub use scorers::{ModelScorer, UniformByteScorer};
pub use server::{serve, serve_tcp};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Handshake {
    pub v: u32,
    pub model: String,
    pub max_context_bytes: u64,
}

impl Handshake {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("handshake serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub id: String,
    pub prefix: String,
    pub context: Option<String>,
    pub continuation: String,
}

impl ScoreRequest {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("request serializes")
    }
}

/// Log-probabilities of the two scored segments of one request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentScores {
    pub prefix_lp: f64,
    pub cont_lp: f64,
    pub prefix_tokens: u64,
    pub cont_tokens: u64,
}

/// A per-request failure. `code` is one of the wire error codes.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{code}: {message}")]
pub struct ScoreError {
    pub code: String,
    pub message: String,
}

impl ScoreError {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        ScoreError {
            code: code.to_string(),
            message: message.into(),
        }
    }
}

pub mod codes {
    pub const MALFORMED: &str = "malformed";
    pub const INVALID: &str = "invalid";
    pub const DUPLICATE_ID: &str = "duplicate_id";
    pub const OVERFLOW: &str = "overflow";
    pub const SCORER: &str = "scorer";
    pub const TIMEOUT: &str = "timeout";
    pub const CONNECTION: &str = "connection";
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreResponse {
    pub id: String,
    pub result: Result<SegmentScores, ScoreError>,
}

impl ScoreResponse {
    /// Serializes with log-probabilities in `{:.16e}` form so every f64
    /// survives the round trip exactly.
    pub fn to_line(&self) -> String {
        let id = serde_json::to_string(&self.id).expect("string serializes");
        match &self.result {
            Ok(s) => {
                let mut out = String::with_capacity(128);
                write!(
                    out,
                    "{{\"id\":{id},\"prefix_lp\":{},\"cont_lp\":{},\"prefix_tokens\":{},\"cont_tokens\":{}}}",
                    fmt_f64(s.prefix_lp),
                    fmt_f64(s.cont_lp),
                    s.prefix_tokens,
                    s.cont_tokens
                )
                .unwrap();
                out
            }
            Err(e) => format!(
                "{{\"id\":{id},\"error\":{}}}",
                serde_json::to_string(e).expect("error serializes")
            ),
        }
    }

    pub fn parse(line: &str) -> Result<Self, String> {
        #[derive(Deserialize)]
        struct Raw {
            id: String,
            prefix_lp: Option<f64>,
            cont_lp: Option<f64>,
            prefix_tokens: Option<u64>,
            cont_tokens: Option<u64>,
            error: Option<ScoreError>,
        }
        let raw: Raw = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let result = match (raw.error, raw.prefix_lp, raw.cont_lp) {
            (Some(e), None, None) => Err(e),
            (None, Some(p), Some(c)) => {
                if !(p.is_finite() && c.is_finite()) {
                    return Err("non-finite log-probability".into());
                }
                Ok(SegmentScores {
                    prefix_lp: p,
                    cont_lp: c,
                    prefix_tokens: raw.prefix_tokens.ok_or("missing prefix_tokens")?,
                    cont_tokens: raw.cont_tokens.ok_or("missing cont_tokens")?,
                })
            }
            _ => return Err("response must carry either log-probabilities or an error".into()),
        };
        Ok(ScoreResponse { id: raw.id, result })
    }
}

/// 17 significant digits in exponent form, a valid JSON number.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Anything that can score `(prefix, context, continuation)` requests.
///
/// Implementations own tokenization. The prefix must be scored without
/// seeing the context; context tokens are never scored.
pub trait Scorer: Send + Sync {
    fn model_name(&self) -> String;

    /// Largest context (in bytes) the scorer accepts without truncation.
    fn max_context_bytes(&self) -> u64;

    fn score(&self, request: &ScoreRequest) -> Result<SegmentScores, ScoreError>;

    /// Scores many requests; results are in request order.
    fn score_batch(&self, requests: &[ScoreRequest]) -> Vec<Result<SegmentScores, ScoreError>> {
        requests.par_iter().map(|r| self.score(r)).collect()
    }

    fn handshake(&self) -> Handshake {
        Handshake {
            v: PROTOCOL_VERSION,
            model: self.model_name(),
            max_context_bytes: self.max_context_bytes(),
        }
    }
}
