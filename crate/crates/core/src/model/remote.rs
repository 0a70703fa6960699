//! Client side of the logit-server protocol.
//!
//! Newline-delimited JSON over a byte stream. The server speaks first:
//!
//! ```text
//! {"protocol":1,"vocab_size":V,"bos":id,"eos":id,"fingerprint":"<64 hex>"}
//! ```
//!
//! then answers each `{"id":n,"context":[...]}` with `{"id":n,"logits":[...]}`
//! or `{"id":n,"error":"..."}`. Responses are matched by id, so a server may
//! answer pipelined requests in any order.

use std::collections::HashMap;
use std::fmt;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::str::FromStr;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{check_context, LanguageModel, LogitVector, ModelFingerprint, TokenId, Vocab};
use crate::error::{Error, Result};

pub const PROTOCOL_VERSION: u32 = 1;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Handshake {
    pub protocol: u32,
    pub vocab_size: usize,
    pub bos: TokenId,
    pub eos: TokenId,
    pub fingerprint: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub context: Vec<TokenId>,
}

#[derive(Serialize)]
pub struct LogitsResponse<'a> {
    pub id: &'a serde_json::Value,
    pub logits: &'a [f64],
}

#[derive(Serialize)]
pub struct ErrorResponse<'a> {
    pub id: &'a serde_json::Value,
    pub error: &'a str,
}

#[derive(Deserialize)]
struct ResponseFrame {
    id: Option<serde_json::Value>,
    logits: Option<Vec<f64>>,
    error: Option<String>,
}

/// Where a logit server lives.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Endpoint {
    /// `tcp:host:port` (or bare `host:port`).
    Tcp(String),
    /// `cmd:program arg...`, spoken to over the child's stdin/stdout.
    Command(Vec<String>),
}

impl FromStr for Endpoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(cmd) = s.strip_prefix("cmd:") {
            let argv: Vec<String> = cmd.split_whitespace().map(String::from).collect();
            if argv.is_empty() {
                return Err(Error::Config("empty command endpoint".into()));
            }
            return Ok(Endpoint::Command(argv));
        }
        let addr = s.strip_prefix("tcp:").unwrap_or(s);
        if !addr.contains(':') {
            return Err(Error::Config(format!(
                "endpoint {s:?} is neither tcp:host:port nor cmd:program"
            )));
        }
        Ok(Endpoint::Tcp(addr.to_string()))
    }
}

impl TryFrom<String> for Endpoint {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Endpoint> for String {
    fn from(e: Endpoint) -> String {
        e.to_string()
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Tcp(a) => write!(f, "tcp:{a}"),
            Endpoint::Command(argv) => write!(f, "cmd:{}", argv.join(" ")),
        }
    }
}

struct Connection {
    writer: Box<dyn Write + Send>,
    lines: Receiver<io::Result<String>>,
    next_id: u64,
    pending: HashMap<u64, std::result::Result<LogitVector, String>>,
    timeout: Duration,
    child: Option<Child>,
    socket: Option<TcpStream>,
}

impl Drop for Connection {
    fn drop(&mut self) {
        // the reader thread holds a clone of the socket; shutting down
        // closes the connection and unblocks it
        if let Some(sock) = self.socket.take() {
            let _ = sock.shutdown(std::net::Shutdown::Both);
        }
        if let Some(child) = self.child.as_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// A model whose logits come from a logit server.
pub struct RemoteModel {
    vocab: Vocab,
    fingerprint: ModelFingerprint,
    conn: Mutex<Connection>,
}

impl fmt::Debug for RemoteModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RemoteModel")
            .field("vocab_size", &self.vocab.size())
            .field("fingerprint", &self.fingerprint)
            .finish()
    }
}

fn quote(frame: &str) -> String {
    const MAX: usize = 200;
    if frame.len() <= MAX {
        format!("{frame:?}")
    } else {
        let mut end = MAX;
        while !frame.is_char_boundary(end) {
            end -= 1;
        }
        format!("{:?}...", &frame[..end])
    }
}

impl RemoteModel {
    pub fn connect(endpoint: &Endpoint, timeout: Duration) -> Result<Self> {
        match endpoint {
            Endpoint::Tcp(addr) => {
                let stream = TcpStream::connect(addr)
                    .map_err(|e| Error::Connection(format!("cannot connect to {addr}: {e}")))?;
                stream.set_nodelay(true).ok();
                let reader = stream.try_clone()?;
                let handle = stream.try_clone()?;
                let mut model = Self::from_io(reader, stream, timeout)?;
                model.conn.get_mut().unwrap().socket = Some(handle);
                Ok(model)
            }
            Endpoint::Command(argv) => {
                let mut child = Command::new(&argv[0])
                    .args(&argv[1..])
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .spawn()
                    .map_err(|e| Error::Connection(format!("cannot spawn {:?}: {e}", argv[0])))?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                let mut model = Self::from_io(stdout, stdin, timeout)?;
                model.conn.get_mut().unwrap().child = Some(child);
                Ok(model)
            }
        }
    }

    /// Speak the protocol over an arbitrary byte-stream pair.
    pub fn from_io<R, W>(reader: R, writer: W, timeout: Duration) -> Result<Self>
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut reader = BufReader::new(reader);
            loop {
                let mut line = String::new();
                match reader.read_line(&mut line) {
                    Ok(0) => {
                        let _ = tx.send(Err(io::Error::new(
                            io::ErrorKind::UnexpectedEof,
                            "server closed the connection",
                        )));
                        return;
                    }
                    Ok(_) => {
                        if tx.send(Ok(line)).is_err() {
                            return;
                        }
                    }
                    Err(e) => {
                        let _ = tx.send(Err(e));
                        return;
                    }
                }
            }
        });
        let mut conn = Connection {
            writer: Box::new(writer),
            lines: rx,
            next_id: 0,
            pending: HashMap::new(),
            timeout,
            child: None,
            socket: None,
        };
        let line = conn.recv_line()?;
        let hs: Handshake = serde_json::from_str(line.trim_end()).map_err(|e| {
            Error::Connection(format!("malformed handshake {}: {e}", quote(line.trim_end())))
        })?;
        if hs.protocol != PROTOCOL_VERSION {
            return Err(Error::Connection(format!(
                "unsupported protocol version {} in handshake {}",
                hs.protocol,
                quote(line.trim_end())
            )));
        }
        let vocab = Vocab::opaque(hs.vocab_size, hs.bos, hs.eos)
            .map_err(|e| Error::Connection(format!("bad handshake {}: {e}", quote(line.trim_end()))))?;
        let fingerprint = ModelFingerprint::from_hex(&hs.fingerprint)
            .map_err(|e| Error::Connection(format!("bad handshake {}: {e}", quote(line.trim_end()))))?;
        Ok(Self {
            vocab,
            fingerprint,
            conn: Mutex::new(conn),
        })
    }

    /// Attach a local symbol table; it must agree with the handshake.
    pub fn with_vocab(mut self, vocab: Vocab) -> Result<Self> {
        if vocab.size() != self.vocab.size() {
            return Err(Error::Connection(format!(
                "vocabulary size mismatch: server announced {}, local vocabulary has {}",
                self.vocab.size(),
                vocab.size()
            )));
        }
        if vocab.bos() != self.vocab.bos() || vocab.eos() != self.vocab.eos() {
            return Err(Error::Connection(format!(
                "bos/eos mismatch: server announced {}/{}, local vocabulary has {}/{}",
                self.vocab.bos(),
                self.vocab.eos(),
                vocab.bos(),
                vocab.eos()
            )));
        }
        self.vocab = vocab;
        Ok(self)
    }

    /// Pipeline several requests, then collect the answers in request order.
    pub fn next_logits_many(&self, contexts: &[&[TokenId]]) -> Result<Vec<LogitVector>> {
        for ctx in contexts {
            check_context(&self.vocab, ctx)?;
        }
        let mut conn = self.conn.lock().unwrap();
        let mut ids = Vec::with_capacity(contexts.len());
        for ctx in contexts {
            ids.push(conn.send(ctx)?);
        }
        conn.writer.flush()?;
        ids.into_iter()
            .map(|id| conn.await_id(id, self.vocab.size()))
            .collect()
    }
}

impl Connection {
    fn recv_line(&mut self) -> Result<String> {
        match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(line)) => Ok(line),
            Ok(Err(e)) => Err(Error::Connection(format!("read failed: {e}"))),
            Err(RecvTimeoutError::Timeout) => Err(Error::Connection(format!(
                "no response within {:?}",
                self.timeout
            ))),
            Err(RecvTimeoutError::Disconnected) => {
                Err(Error::Connection("connection reader stopped".into()))
            }
        }
    }

    fn send(&mut self, context: &[TokenId]) -> Result<u64> {
        let id = self.next_id;
        self.next_id += 1;
        let mut line = serde_json::to_vec(&Request {
            id,
            context: context.to_vec(),
        })?;
        line.push(b'\n');
        self.writer
            .write_all(&line)
            .map_err(|e| Error::Connection(format!("write failed: {e}")))?;
        Ok(id)
    }

    fn await_id(&mut self, id: u64, vocab_size: usize) -> Result<LogitVector> {
        loop {
            if let Some(resp) = self.pending.remove(&id) {
                return resp.map_err(|msg| Error::Model(format!("server error for request {id}: {msg}")));
            }
            let line = self.recv_line()?;
            let frame = line.trim_end();
            if frame.is_empty() {
                continue;
            }
            let parsed: ResponseFrame = serde_json::from_str(frame)
                .map_err(|e| Error::Connection(format!("malformed frame {}: {e}", quote(frame))))?;
            let rid = parsed.id.as_ref().and_then(|v| v.as_u64()).ok_or_else(|| {
                Error::Connection(format!(
                    "frame without a usable id {}{}",
                    quote(frame),
                    parsed
                        .error
                        .as_deref()
                        .map(|e| format!(" (server error: {e})"))
                        .unwrap_or_default()
                ))
            })?;
            let value = match (parsed.logits, parsed.error) {
                (Some(logits), None) => {
                    if logits.len() != vocab_size {
                        return Err(Error::Connection(format!(
                            "expected {vocab_size} logits, received {} in frame {}",
                            logits.len(),
                            quote(frame)
                        )));
                    }
                    Ok(logits)
                }
                (None, Some(err)) => Err(err),
                _ => {
                    return Err(Error::Connection(format!(
                        "frame must carry exactly one of logits/error: {}",
                        quote(frame)
                    )))
                }
            };
            self.pending.insert(rid, value);
        }
    }
}

impl LanguageModel for RemoteModel {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn fingerprint(&self) -> ModelFingerprint {
        self.fingerprint
    }

    fn next_logits(&self, context: &[TokenId]) -> Result<LogitVector> {
        check_context(&self.vocab, context)?;
        let mut conn = self.conn.lock().unwrap();
        let id = conn.send(context)?;
        conn.writer.flush()?;
        conn.await_id(id, self.vocab.size())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_parsing() {
        assert_eq!(
            "tcp:127.0.0.1:9".parse::<Endpoint>().unwrap(),
            Endpoint::Tcp("127.0.0.1:9".into())
        );
        assert_eq!(
            "localhost:9".parse::<Endpoint>().unwrap(),
            Endpoint::Tcp("localhost:9".into())
        );
        assert_eq!(
            "cmd:srv --stdio".parse::<Endpoint>().unwrap(),
            Endpoint::Command(vec!["srv".into(), "--stdio".into()])
        );
        assert!("cmd:".parse::<Endpoint>().is_err());
        assert!("nonsense".parse::<Endpoint>().is_err());
    }

    #[test]
    fn handshake_field_order_is_fixed() {
        let hs = Handshake {
            protocol: 1,
            vocab_size: 4,
            bos: 0,
            eos: 1,
            fingerprint: "ab".repeat(32),
        };
        let s = serde_json::to_string(&hs).unwrap();
        assert!(s.starts_with(r#"{"protocol":1,"vocab_size":4,"bos":0,"eos":1,"fingerprint":""#));
    }

    #[test]
    fn malformed_handshake_is_quoted() {
        let input = b"{\"protocol\":1,\"vocab\n".to_vec();
        let err = RemoteModel::from_io(io::Cursor::new(input), io::sink(), Duration::from_secs(1))
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("malformed handshake"), "{msg}");
        assert!(msg.contains("vocab"), "{msg}");
    }
}
