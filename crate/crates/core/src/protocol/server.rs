use std::collections::HashSet;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::TcpListener;
use std::sync::Arc;
use std::thread;

use serde::Deserialize;

use super::{codes, ScoreError, ScoreRequest, ScoreResponse, Scorer};

/// Serves one connection until the reader reaches end of input.
///
/// Writes the handshake, then one response line per request line. Bad
/// requests get error responses; they never end the loop.
pub fn serve<S, R, W>(scorer: &S, reader: R, mut writer: W) -> io::Result<()>
where
    S: Scorer + ?Sized,
    R: BufRead,
    W: Write,
{
    writeln!(writer, "{}", scorer.handshake().to_line())?;
    writer.flush()?;
    let mut seen = HashSet::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = respond(scorer, &line, &mut seen);
        writeln!(writer, "{}", response.to_line())?;
        writer.flush()?;
    }
    Ok(())
}

fn respond<S: Scorer + ?Sized>(scorer: &S, line: &str, seen: &mut HashSet<String>) -> ScoreResponse {
    let request: ScoreRequest = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(e) => {
            return ScoreResponse {
                id: salvage_id(line),
                result: Err(ScoreError::new(codes::MALFORMED, e.to_string())),
            }
        }
    };
    let id = request.id.clone();
    if !seen.insert(id.clone()) {
        return ScoreResponse {
            id,
            result: Err(ScoreError::new(codes::DUPLICATE_ID, "request id already used")),
        };
    }
    if request.prefix.is_empty() {
        return ScoreResponse {
            id,
            result: Err(ScoreError::new(codes::INVALID, "empty prefix")),
        };
    }
    let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| scorer.score(&request)))
        .unwrap_or_else(|_| Err(ScoreError::new(codes::SCORER, "scorer panicked")));
    ScoreResponse { id, result }
}

fn salvage_id(line: &str) -> String {
    #[derive(Deserialize)]
    struct IdOnly {
        id: String,
    }
    serde_json::from_str::<IdOnly>(line)
        .map(|r| r.id)
        .unwrap_or_default()
}

/// Accepts connections forever, serving each on its own thread.
pub fn serve_tcp(scorer: Arc<dyn Scorer>, listener: TcpListener) -> io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let scorer = Arc::clone(&scorer);
        thread::spawn(move || {
            let reader = match stream.try_clone() {
                Ok(s) => BufReader::new(s),
                Err(_) => return,
            };
            let _ = serve(scorer.as_ref(), reader, BufWriter::new(stream));
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{Handshake, SegmentScores, UniformByteScorer};

    fn run(input: &str) -> Vec<String> {
        let mut out = Vec::new();
        serve(&UniformByteScorer, input.as_bytes(), &mut out).unwrap();
        String::from_utf8(out).unwrap().lines().map(str::to_string).collect()
    }

    #[test]
    fn handshake_comes_first_even_without_requests() {
        let lines = run("");
        assert_eq!(lines.len(), 1);
        let h: Handshake = serde_json::from_str(&lines[0]).unwrap();
        assert_eq!(h.v, 1);
        assert_eq!(h.model, "uniform-byte");
    }

    #[test]
    fn malformed_line_does_not_stop_the_loop() {
        let input = concat!(
            "{not json\n",
            r#"{"id":"x","prefix":3}"#,
            "\n",
            r#"{"id":"ok","prefix":"ab","context":null,"continuation":"c"}"#,
            "\n"
        );
        let lines = run(input);
        assert_eq!(lines.len(), 4);
        let r1 = ScoreResponse::parse(&lines[1]).unwrap();
        assert_eq!(r1.result.unwrap_err().code, "malformed");
        let r2 = ScoreResponse::parse(&lines[2]).unwrap();
        assert_eq!(r2.id, "x");
        assert_eq!(r2.result.unwrap_err().code, "malformed");
        let r3 = ScoreResponse::parse(&lines[3]).unwrap();
        assert_eq!(r3.id, "ok");
        assert!(r3.result.is_ok());
    }

    #[test]
    fn duplicate_and_invalid_requests() {
        let input = concat!(
            r#"{"id":"a","prefix":"ab","context":null,"continuation":""}"#,
            "\n",
            r#"{"id":"a","prefix":"ab","context":null,"continuation":""}"#,
            "\n",
            r#"{"id":"b","prefix":"","context":null,"continuation":"x"}"#,
            "\n"
        );
        let lines = run(input);
        assert!(ScoreResponse::parse(&lines[1]).unwrap().result.is_ok());
        assert_eq!(
            ScoreResponse::parse(&lines[2]).unwrap().result.unwrap_err().code,
            "duplicate_id"
        );
        assert_eq!(
            ScoreResponse::parse(&lines[3]).unwrap().result.unwrap_err().code,
            "invalid"
        );
    }

    struct Flaky;

    impl Scorer for Flaky {
        fn model_name(&self) -> String {
            "flaky".into()
        }
        fn max_context_bytes(&self) -> u64 {
            10
        }
        fn score(&self, request: &ScoreRequest) -> Result<SegmentScores, ScoreError> {
            if request.prefix == "boom" {
                panic!("scorer crashed");
            }
            UniformByteScorer.score(request)
        }
    }

    #[test]
    fn scorer_crash_is_contained_to_one_request() {
        let input = concat!(
            r#"{"id":"1","prefix":"boom","context":null,"continuation":""}"#,
            "\n",
            r#"{"id":"2","prefix":"fine","context":null,"continuation":""}"#,
            "\n"
        );
        let mut out = Vec::new();
        serve(&Flaky, input.as_bytes(), &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(
            ScoreResponse::parse(lines[1]).unwrap().result.unwrap_err().code,
            "scorer"
        );
        assert!(ScoreResponse::parse(lines[2]).unwrap().result.is_ok());
    }
}
