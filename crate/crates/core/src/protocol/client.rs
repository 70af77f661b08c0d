use std::collections::HashSet;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use thiserror::Error;

use super::{
    codes, Handshake, ScoreError, ScoreRequest, ScoreResponse, Scorer, SegmentScores,
    PROTOCOL_VERSION,
};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("peer speaks protocol version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("bad handshake: {0}")]
    Handshake(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("bad transport spec {0:?}: expected cmd:<command> or tcp:<host:port>")]
    Transport(String),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClientOptions {
    /// Longest wait for any single response.
    pub timeout: Duration,
    /// Requests in flight before the client waits for a response.
    pub window: usize,
}

impl Default for ClientOptions {
    fn default() -> Self {
        ClientOptions {
            timeout: Duration::from_secs(120),
            window: 16,
        }
    }
}

/// Where an external scorer lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Transport {
    /// A child process speaking over its standard streams.
    Command(String),
    Tcp(String),
}

impl Transport {
    /// Parses `cmd:<command line>` or `tcp:<host:port>`.
    pub fn parse(spec: &str) -> Result<Self, ClientError> {
        if let Some(cmd) = spec.strip_prefix("cmd:") {
            if cmd.trim().is_empty() {
                return Err(ClientError::Transport(spec.into()));
            }
            Ok(Transport::Command(cmd.into()))
        } else if let Some(addr) = spec.strip_prefix("tcp:") {
            if addr.is_empty() {
                return Err(ClientError::Transport(spec.into()));
            }
            Ok(Transport::Tcp(addr.into()))
        } else {
            Err(ClientError::Transport(spec.into()))
        }
    }

    pub fn connect(&self, options: ClientOptions) -> Result<Connection, ClientError> {
        match self {
            Transport::Command(cmd) => Connection::spawn(cmd, options),
            Transport::Tcp(addr) => Connection::tcp(addr, options),
        }
    }
}

/// One pipelined request stream to a scorer.
pub struct Connection {
    handshake: Handshake,
    writer: Box<dyn Write + Send>,
    lines: Receiver<io::Result<String>>,
    child: Option<Child>,
    options: ClientOptions,
    dead: bool,
}

impl std::fmt::Debug for Connection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Connection")
            .field("handshake", &self.handshake)
            .field("dead", &self.dead)
            .finish_non_exhaustive()
    }
}

impl Connection {
    /// Wraps an already-open byte stream pair and reads the handshake.
    pub fn from_streams<R, W>(reader: R, writer: W, options: ClientOptions) -> Result<Self, ClientError>
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        Self::with_child(reader, writer, None, options)
    }

    fn with_child<R, W>(
        reader: R,
        writer: W,
        child: Option<Child>,
        options: ClientOptions,
    ) -> Result<Self, ClientError>
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(reader).lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });
        let mut conn = Connection {
            handshake: Handshake {
                v: 0,
                model: String::new(),
                max_context_bytes: 0,
            },
            writer: Box::new(BufWriter::new(writer)),
            lines: rx,
            child,
            options,
            dead: false,
        };
        let first = match conn.lines.recv_timeout(options.timeout) {
            Ok(Ok(line)) => line,
            Ok(Err(e)) => return Err(e.into()),
            Err(RecvTimeoutError::Timeout) => {
                return Err(ClientError::Handshake("no handshake before timeout".into()))
            }
            Err(RecvTimeoutError::Disconnected) => {
                return Err(ClientError::Handshake("peer closed before handshake".into()))
            }
        };
        let handshake: Handshake =
            serde_json::from_str(&first).map_err(|e| ClientError::Handshake(e.to_string()))?;
        if handshake.v != PROTOCOL_VERSION {
            return Err(ClientError::VersionMismatch {
                found: handshake.v,
                expected: PROTOCOL_VERSION,
            });
        }
        if handshake.max_context_bytes == 0 {
            return Err(ClientError::Handshake("max_context_bytes must be positive".into()));
        }
        conn.handshake = handshake;
        Ok(conn)
    }

    /// Launches `command` (split on whitespace) and talks over its stdio.
    pub fn spawn(command: &str, options: ClientOptions) -> Result<Self, ClientError> {
        let mut parts = command.split_whitespace();
        let program = parts
            .next()
            .ok_or_else(|| ClientError::Transport(command.into()))?;
        let mut child = Command::new(program)
            .args(parts)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Self::with_child(stdout, stdin, Some(child), options)
    }

    pub fn tcp(addr: &str, options: ClientOptions) -> Result<Self, ClientError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let reader = stream.try_clone()?;
        Self::from_streams(reader, stream, options)
    }

    pub fn handshake(&self) -> &Handshake {
        &self.handshake
    }

    /// False once a timeout or transport failure has been seen.
    pub fn is_alive(&self) -> bool {
        !self.dead
    }

    /// Sends every request, keeping at most `window` in flight, and returns
    /// one result per request in request order.
    ///
    /// Per-request scorer errors come back as `Err` entries. A timeout or a
    /// lost connection fails every outstanding request and leaves the
    /// connection dead. A response that does not match the oldest
    /// outstanding id is a protocol error.
    pub fn score_all(
        &mut self,
        requests: &[ScoreRequest],
    ) -> Result<Vec<Result<SegmentScores, ScoreError>>, ClientError> {
        let mut ids = HashSet::with_capacity(requests.len());
        for r in requests {
            if !ids.insert(r.id.as_str()) {
                return Err(ClientError::Protocol(format!("duplicate request id {:?}", r.id)));
            }
        }
        let mut out: Vec<Result<SegmentScores, ScoreError>> = Vec::with_capacity(requests.len());
        if self.dead {
            out.extend(requests.iter().map(|_| Err(lost("connection is closed"))));
            return Ok(out);
        }
        let window = self.options.window.max(1);
        let mut sent = 0;
        while out.len() < requests.len() {
            let before = sent;
            while sent < requests.len() && sent - out.len() < window {
                if writeln!(self.writer, "{}", requests[sent].to_line()).is_err() {
                    break;
                }
                sent += 1;
            }
            if (sent > before && self.writer.flush().is_err()) || sent == out.len() {
                self.dead = true;
                let rest = requests.len() - out.len();
                out.extend((0..rest).map(|_| Err(lost("write failed"))));
                break;
            }
            let expected = &requests[out.len()].id;
            match self.lines.recv_timeout(self.options.timeout) {
                Ok(Ok(line)) => {
                    let resp = ScoreResponse::parse(&line).map_err(|e| {
                        self.dead = true;
                        ClientError::Protocol(format!("unparseable response: {e}"))
                    })?;
                    if &resp.id != expected {
                        self.dead = true;
                        let why = if ids.contains(resp.id.as_str()) {
                            "out of order"
                        } else {
                            "unknown"
                        };
                        return Err(ClientError::Protocol(format!(
                            "{why} response id {:?}, expected {expected:?}",
                            resp.id
                        )));
                    }
                    out.push(resp.result);
                }
                Ok(Err(_)) | Err(RecvTimeoutError::Disconnected) => {
                    self.dead = true;
                    let rest = requests.len() - out.len();
                    out.extend((0..rest).map(|_| Err(lost("connection lost"))));
                }
                Err(RecvTimeoutError::Timeout) => {
                    self.dead = true;
                    let in_flight = sent - out.len();
                    let unsent = requests.len() - sent;
                    let msg = format!("no response within {:?}", self.options.timeout);
                    out.extend((0..in_flight).map(|_| Err(ScoreError::new(codes::TIMEOUT, msg.clone()))));
                    out.extend((0..unsent).map(|_| Err(lost("connection timed out"))));
                }
            }
        }
        Ok(out)
    }
}

fn lost(why: &str) -> ScoreError {
    ScoreError::new(codes::CONNECTION, why)
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// Opens one connection and scores `requests` over it.
pub fn connect_and_score(
    transport: &Transport,
    requests: &[ScoreRequest],
    options: ClientOptions,
) -> Result<Vec<Result<SegmentScores, ScoreError>>, ClientError> {
    transport.connect(options)?.score_all(requests)
}

/// An external scorer behind one or more connections, usable anywhere a
/// local [`Scorer`] is.
///
/// Request ids are generated here, so callers may reuse ids freely.
#[derive(Debug)]
pub struct RemoteScorer {
    connections: Vec<Mutex<Connection>>,
    handshake: Handshake,
    next_id: AtomicU64,
}

impl RemoteScorer {
    pub fn connect(
        transport: &Transport,
        connections: usize,
        options: ClientOptions,
    ) -> Result<Self, ClientError> {
        let conns = (0..connections.max(1))
            .map(|_| transport.connect(options))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::from_connections(conns))
    }

    /// Panics if `connections` is empty.
    pub fn from_connections(connections: Vec<Connection>) -> Self {
        let handshake = connections
            .first()
            .expect("at least one connection")
            .handshake()
            .clone();
        RemoteScorer {
            connections: connections.into_iter().map(Mutex::new).collect(),
            handshake,
            next_id: AtomicU64::new(0),
        }
    }

    fn run_on(&self, conn: &Mutex<Connection>, requests: &[ScoreRequest]) -> Vec<Result<SegmentScores, ScoreError>> {
        let tagged: Vec<ScoreRequest> = requests
            .iter()
            .map(|r| ScoreRequest {
                id: self.next_id.fetch_add(1, Ordering::Relaxed).to_string(),
                ..r.clone()
            })
            .collect();
        let mut conn = conn.lock().unwrap_or_else(|p| p.into_inner());
        match conn.score_all(&tagged) {
            Ok(results) => results,
            Err(e) => requests.iter().map(|_| Err(lost(&e.to_string()))).collect(),
        }
    }
}

impl Scorer for RemoteScorer {
    fn model_name(&self) -> String {
        self.handshake.model.clone()
    }

    fn max_context_bytes(&self) -> u64 {
        self.handshake.max_context_bytes
    }

    fn score(&self, request: &ScoreRequest) -> Result<SegmentScores, ScoreError> {
        self.score_batch(std::slice::from_ref(request))
            .pop()
            .expect("one result per request")
    }

    fn score_batch(&self, requests: &[ScoreRequest]) -> Vec<Result<SegmentScores, ScoreError>> {
        if requests.is_empty() {
            return Vec::new();
        }
        let chunk = requests.len().div_ceil(self.connections.len());
        thread::scope(|s| {
            let handles: Vec<_> = requests
                .chunks(chunk)
                .zip(&self.connections)
                .map(|(part, conn)| s.spawn(move || self.run_on(conn, part)))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("client thread panicked"))
                .collect()
        })
    }
}
