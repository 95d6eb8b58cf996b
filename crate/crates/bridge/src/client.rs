//! Client side of protocol v1.

use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::str::FromStr;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use seqmc_core::energy::{LogitRow, Scorer};
use seqmc_core::seq::{MaskedView, Vocab};

use crate::error::BridgeError;
use crate::protocol::{decode, encode, Message, PROTOCOL_VERSION};

/// Where a scorer server lives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    /// `host:port`
    Tcp(String),
    /// A child process spoken to over its stdin and stdout.
    Command { program: String, args: Vec<String> },
}

impl FromStr for Endpoint {
    type Err = BridgeError;

    /// `tcp://host:port` or `cmd:program arg ...` (split on whitespace).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(addr) = s.strip_prefix("tcp://") {
            if addr.is_empty() {
                return Err(BridgeError::Request("empty tcp address".into()));
            }
            return Ok(Endpoint::Tcp(addr.to_string()));
        }
        if let Some(cmd) = s.strip_prefix("cmd:") {
            let mut parts = cmd.split_whitespace().map(String::from);
            let program = parts
                .next()
                .ok_or_else(|| BridgeError::Request("empty command".into()))?;
            return Ok(Endpoint::Command {
                program,
                args: parts.collect(),
            });
        }
        Err(BridgeError::Request(format!(
            "endpoint {s:?} is neither tcp://host:port nor cmd:program"
        )))
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Tcp(addr) => write!(f, "tcp://{addr}"),
            Endpoint::Command { program, args } => {
                write!(f, "cmd:{program}")?;
                for a in args {
                    write!(f, " {a}")?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClientConfig {
    pub connect_timeout: Duration,
    /// Per-message read timeout.
    pub io_timeout: Duration,
    /// Extra attempts after the first, each on a fresh connection.
    pub retries: u32,
    /// Delay before the first retry; doubles each time.
    pub backoff: Duration,
    /// Requests in flight at once.
    pub window: usize,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            connect_timeout: Duration::from_secs(5),
            io_timeout: Duration::from_secs(30),
            retries: 3,
            backoff: Duration::from_millis(100),
            window: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub vocab_size: u32,
    pub mask_id: u32,
    pub max_length: usize,
    pub name: String,
}

impl ModelInfo {
    /// Whether the server's mask id takes a slot inside its vocabulary.
    fn mask_inside(&self) -> bool {
        self.mask_id < self.vocab_size
    }

    /// Size of the local vocabulary: the server's minus its mask token.
    pub fn local_vocab_size(&self) -> u32 {
        self.vocab_size - self.mask_inside() as u32
    }

    pub fn to_server_id(&self, local: u32) -> u32 {
        if self.mask_inside() && local >= self.mask_id {
            local + 1
        } else {
            local
        }
    }

    fn row_to_local(&self, mut row: Vec<f64>) -> Vec<f64> {
        if self.mask_inside() {
            row.remove(self.mask_id as usize);
        }
        row
    }
}

/// One live connection: a writer plus a background thread feeding lines.
pub struct Connection {
    lines: Receiver<std::io::Result<String>>,
    writer: Box<dyn Write + Send>,
    stream: Option<TcpStream>,
    child: Option<Child>,
    io_timeout: Duration,
}

fn spawn_reader<R: Read + Send + 'static>(source: R) -> Receiver<std::io::Result<String>> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let mut reader = BufReader::new(source);
        loop {
            let mut line = String::new();
            match reader.read_line(&mut line) {
                Ok(0) => break,
                Ok(_) => {
                    if tx.send(Ok(line)).is_err() {
                        break;
                    }
                }
                Err(e) => {
                    let _ = tx.send(Err(e));
                    break;
                }
            }
        }
    });
    rx
}

impl Connection {
    pub fn open(endpoint: &Endpoint, config: &ClientConfig) -> Result<Self, BridgeError> {
        let fail = |reason: String| BridgeError::Connect {
            endpoint: endpoint.to_string(),
            reason,
        };
        match endpoint {
            Endpoint::Tcp(addr) => {
                let addrs: Vec<_> = addr
                    .to_socket_addrs()
                    .map_err(|e| fail(e.to_string()))?
                    .collect();
                let mut last = String::from("address resolved to nothing");
                for a in addrs {
                    match TcpStream::connect_timeout(&a, config.connect_timeout) {
                        Ok(stream) => {
                            stream.set_nodelay(true).ok();
                            let read = stream.try_clone().map_err(|e| fail(e.to_string()))?;
                            let write = stream.try_clone().map_err(|e| fail(e.to_string()))?;
                            return Ok(Connection {
                                lines: spawn_reader(read),
                                writer: Box::new(write),
                                stream: Some(stream),
                                child: None,
                                io_timeout: config.io_timeout,
                            });
                        }
                        Err(e) => last = e.to_string(),
                    }
                }
                Err(fail(last))
            }
            Endpoint::Command { program, args } => {
                let mut child = Command::new(program)
                    .args(args)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(|e| fail(e.to_string()))?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                Ok(Connection {
                    lines: spawn_reader(stdout),
                    writer: Box::new(stdin),
                    stream: None,
                    child: Some(child),
                    io_timeout: config.io_timeout,
                })
            }
        }
    }

    pub fn send(&mut self, msg: &Message) -> Result<(), BridgeError> {
        let mut line = encode(msg)?;
        line.push('\n');
        self.writer.write_all(line.as_bytes())?;
        self.writer.flush()?;
        Ok(())
    }

    pub fn recv(&mut self) -> Result<Message, BridgeError> {
        match self.lines.recv_timeout(self.io_timeout) {
            Ok(Ok(line)) => decode(&line),
            Ok(Err(e)) => Err(e.into()),
            Err(RecvTimeoutError::Timeout) => Err(BridgeError::Timeout(self.io_timeout)),
            Err(RecvTimeoutError::Disconnected) => Err(BridgeError::Closed),
        }
    }

    /// Sends `hello` and validates the reply.
    pub fn handshake(&mut self) -> Result<ModelInfo, BridgeError> {
        self.send(&Message::Hello {
            protocol_version: PROTOCOL_VERSION,
        })?;
        match self.recv()? {
            Message::Info {
                vocab_size,
                mask_id,
                max_length,
                name,
                protocol_version,
            } => {
                let server = protocol_version.unwrap_or(PROTOCOL_VERSION);
                if server != PROTOCOL_VERSION {
                    return Err(BridgeError::VersionMismatch {
                        server,
                        client: PROTOCOL_VERSION,
                    });
                }
                let info = ModelInfo {
                    vocab_size,
                    mask_id,
                    max_length,
                    name,
                };
                if vocab_size < 2 || info.local_vocab_size() < 2 {
                    return Err(BridgeError::Malformed(format!(
                        "vocabulary of {vocab_size} with mask id {mask_id} leaves fewer than 2 tokens"
                    )));
                }
                if max_length == 0 {
                    return Err(BridgeError::Malformed("max_length is 0".into()));
                }
                Ok(info)
            }
            Message::Hello { protocol_version } if protocol_version != PROTOCOL_VERSION => {
                Err(BridgeError::VersionMismatch {
                    server: protocol_version,
                    client: PROTOCOL_VERSION,
                })
            }
            Message::Error { message, .. } => Err(BridgeError::Server(message)),
            other => Err(BridgeError::Malformed(format!("expected info, got {other:?}"))),
        }
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(s) = &self.stream {
            let _ = s.shutdown(std::net::Shutdown::Both);
        }
        if let Some(c) = &mut self.child {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

/// Connects and performs the handshake once.
pub fn handshake(endpoint: &Endpoint, config: &ClientConfig) -> Result<ModelInfo, BridgeError> {
    Connection::open(endpoint, config)?.handshake()
}

struct Link {
    conn: Option<Connection>,
    next_id: u64,
}

/// A [`Scorer`] backed by a protocol v1 server.
///
/// Token ids are local: when the server's mask id lies inside its
/// vocabulary, that id is removed and the ids above it shift down by one.
pub struct RemoteScorer {
    endpoint: Endpoint,
    config: ClientConfig,
    info: ModelInfo,
    link: Mutex<Link>,
}

struct Pending {
    tokens: Vec<u32>,
    masked: Vec<usize>,
}

impl RemoteScorer {
    pub fn connect(endpoint: Endpoint, config: ClientConfig) -> Result<Self, BridgeError> {
        if config.window == 0 {
            return Err(BridgeError::Request("window must be at least 1".into()));
        }
        let mut conn = Connection::open(&endpoint, &config)?;
        let info = conn.handshake()?;
        Ok(RemoteScorer {
            endpoint,
            config,
            info,
            link: Mutex::new(Link {
                conn: Some(conn),
                next_id: 0,
            }),
        })
    }

    pub fn info(&self) -> &ModelInfo {
        &self.info
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    /// Rows for each masked position of `view`, paired with the position.
    pub fn remote_logits(&self, view: &MaskedView<'_>) -> Result<Vec<(usize, LogitRow)>, BridgeError> {
        let rows = self.request(std::slice::from_ref(view))?.pop().unwrap_or_default();
        Ok(view.masked().iter().copied().zip(rows).collect())
    }

    fn encode_view(&self, view: &MaskedView<'_>) -> Result<Pending, BridgeError> {
        let len = view.base().len();
        if len > self.info.max_length {
            return Err(BridgeError::Request(format!(
                "sequence of length {len} exceeds server maximum {}",
                self.info.max_length
            )));
        }
        if view.base().vocab().size() != self.info.local_vocab_size() {
            return Err(BridgeError::Request(format!(
                "sequence vocabulary {} differs from server's {}",
                view.base().vocab().size(),
                self.info.local_vocab_size()
            )));
        }
        let tokens = (0..len)
            .map(|t| {
                if view.is_masked(t) {
                    self.info.mask_id
                } else {
                    self.info.to_server_id(view.base().get(t))
                }
            })
            .collect();
        Ok(Pending {
            tokens,
            masked: view.masked().to_vec(),
        })
    }

    fn request(&self, views: &[MaskedView<'_>]) -> Result<Vec<Vec<LogitRow>>, BridgeError> {
        let pending = views
            .iter()
            .map(|v| self.encode_view(v))
            .collect::<Result<Vec<_>, _>>()?;
        let mut link = self.link.lock().unwrap_or_else(|e| e.into_inner());
        let mut attempt = 0u32;
        loop {
            let result = self.exchange(&mut link, &pending);
            match result {
                Ok(rows) => return Ok(rows),
                Err(e) => {
                    // the stream may be out of step; never reuse it
                    link.conn = None;
                    if !e.is_transient() {
                        return Err(e);
                    }
                    if attempt >= self.config.retries {
                        return Err(BridgeError::Exhausted {
                            attempts: attempt + 1,
                            last: Box::new(e),
                        });
                    }
                    thread::sleep(self.config.backoff.saturating_mul(1 << attempt.min(16)));
                    attempt += 1;
                }
            }
        }
    }

    fn exchange(&self, link: &mut Link, pending: &[Pending]) -> Result<Vec<Vec<LogitRow>>, BridgeError> {
        if link.conn.is_none() {
            let mut conn = Connection::open(&self.endpoint, &self.config)?;
            let info = conn.handshake()?;
            if info != self.info {
                return Err(BridgeError::Malformed(format!(
                    "server changed its model across reconnect: {info:?}"
                )));
            }
            link.conn = Some(conn);
        }
        let first_id = link.next_id;
        link.next_id += pending.len() as u64;
        let conn = link.conn.as_mut().expect("connected");

        let mut out = Vec::with_capacity(pending.len());
        let mut sent = 0;
        for (i, p) in pending.iter().enumerate() {
            while sent < pending.len() && sent < i + self.config.window {
                let q = &pending[sent];
                conn.send(&Message::Logits {
                    id: first_id + sent as u64,
                    tokens: q.tokens.clone(),
                    masked: q.masked.clone(),
                })?;
                sent += 1;
            }
            let id = first_id + i as u64;
            match conn.recv()? {
                Message::Rows { id: got, rows } if got == id => out.push(self.check_rows(rows, p)?),
                Message::Rows { id: got, .. } => {
                    return Err(BridgeError::Malformed(format!("response id {got}, expected {id}")))
                }
                Message::Error { message, .. } => return Err(BridgeError::Server(message)),
                other => return Err(BridgeError::Malformed(format!("expected rows, got {other:?}"))),
            }
        }
        Ok(out)
    }

    fn check_rows(&self, rows: Vec<Vec<f64>>, p: &Pending) -> Result<Vec<LogitRow>, BridgeError> {
        if rows.len() != p.masked.len() {
            return Err(BridgeError::Malformed(format!(
                "{} rows for {} masked positions",
                rows.len(),
                p.masked.len()
            )));
        }
        rows.into_iter()
            .map(|r| {
                if r.len() != self.info.vocab_size as usize {
                    return Err(BridgeError::Malformed(format!(
                        "row of {} entries, vocabulary has {}",
                        r.len(),
                        self.info.vocab_size
                    )));
                }
                LogitRow::new(self.info.row_to_local(r)).map_err(|e| BridgeError::Malformed(e.to_string()))
            })
            .collect()
    }
}

impl Scorer for RemoteScorer {
    fn vocab(&self) -> Vocab {
        Vocab::new(self.info.local_vocab_size()).expect("checked at handshake")
    }

    fn max_length(&self) -> usize {
        self.info.max_length
    }

    fn logits(&self, view: &MaskedView<'_>) -> seqmc_core::Result<Vec<LogitRow>> {
        Ok(self.request(std::slice::from_ref(view))?.pop().unwrap_or_default())
    }

    fn logits_batch(&self, views: &[MaskedView<'_>]) -> seqmc_core::Result<Vec<Vec<LogitRow>>> {
        Ok(self.request(views)?)
    }
}
