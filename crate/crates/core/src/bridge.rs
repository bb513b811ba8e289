//! Client side of the line-delimited JSON protocol spoken by out-of-process
//! model hosts (image encoders and vision-language responders).
//!
//! On connect the host sends a hello frame:
//!
//! ```text
//! {"hello":{"protocol":1,"model":"<name>","dim":768,"system_turn":false}}
//! ```
//!
//! Every request is one line, `{"op":"ping"|"embed"|"respond","id":<n>,"payload":{...}}`,
//! answered by exactly one line carrying the same id and either a `reply`
//! object such as `{"vector":[...]}` or an `error` object
//! `{"code":"...","message":"..."}`.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::context::PromptContext;
use crate::embedding::EmbeddingVector;

pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("bridge did not answer within {0:?}")]
    Timeout(Duration),
    #[error("bridge closed the connection")]
    Closed,
    #[error("protocol violation: {reason} (frame: {frame})")]
    Protocol { reason: String, frame: String },
    #[error("bridge error {code}: {message}")]
    Remote { code: String, message: String },
    #[error("bridge connection is unusable after an earlier failure")]
    Poisoned,
    #[error("bridge i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl BridgeError {
    fn protocol(reason: impl Into<String>, frame: impl Into<String>) -> Self {
        BridgeError::Protocol {
            reason: reason.into(),
            frame: frame.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hello {
    pub protocol: u32,
    pub model: String,
    pub dim: usize,
    #[serde(default)]
    pub system_turn: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Op {
    Ping,
    Embed,
    Respond,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub op: Op,
    pub id: u64,
    #[serde(default)]
    pub payload: Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Reply {
    Pong { pong: bool },
    Vector { vector: Vec<f32> },
    Text { text: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply: Option<Reply>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HelloFrame {
    pub hello: Hello,
}

/// Payload of a `respond` request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RespondPayload {
    pub context: PromptContext,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
}

enum Line {
    Data(String),
    Eof,
    Failed(std::io::Error),
}

/// One connection to a bridge host. Requests are strictly sequential.
pub struct BridgeClient {
    writer: Box<dyn Write + Send>,
    lines: Receiver<Line>,
    child: Option<Child>,
    hello: Hello,
    next_id: u64,
    timeout: Duration,
    poisoned: bool,
}

impl std::fmt::Debug for BridgeClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BridgeClient")
            .field("hello", &self.hello)
            .field("next_id", &self.next_id)
            .field("timeout", &self.timeout)
            .field("poisoned", &self.poisoned)
            .finish()
    }
}

impl BridgeClient {
    /// Starts `program args...` as a child process speaking the protocol on
    /// its standard streams.
    pub fn spawn(program: &str, args: &[String], timeout: Duration) -> Result<Self, BridgeError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin: ChildStdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut client = Self::from_streams(Box::new(stdin), BufReader::new(stdout), timeout);
        client.child = Some(child);
        client.handshake()
    }

    /// Splits a command line on whitespace and spawns it.
    pub fn spawn_command_line(cmd: &str, timeout: Duration) -> Result<Self, BridgeError> {
        let mut parts = cmd.split_whitespace().map(str::to_owned);
        let program = parts
            .next()
            .ok_or_else(|| BridgeError::protocol("empty bridge command", cmd))?;
        let args: Vec<String> = parts.collect();
        Self::spawn(&program, &args, timeout)
    }

    pub fn connect_tcp(addr: &str, timeout: Duration) -> Result<Self, BridgeError> {
        let stream = TcpStream::connect(addr)?;
        let reader = BufReader::new(stream.try_clone()?);
        Self::from_streams(Box::new(stream), reader, timeout).handshake()
    }

    fn from_streams<R: BufRead + Send + 'static>(writer: Box<dyn Write + Send>, reader: R, timeout: Duration) -> Self {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in reader.lines() {
                let msg = match line {
                    Ok(l) => Line::Data(l),
                    Err(e) => {
                        let _ = tx.send(Line::Failed(e));
                        return;
                    }
                };
                if tx.send(msg).is_err() {
                    return;
                }
            }
            let _ = tx.send(Line::Eof);
        });
        Self {
            writer,
            lines: rx,
            child: None,
            hello: Hello {
                protocol: PROTOCOL_VERSION,
                model: String::new(),
                dim: 0,
                system_turn: false,
            },
            next_id: 1,
            timeout,
            poisoned: false,
        }
    }

    fn handshake(mut self) -> Result<Self, BridgeError> {
        let line = self.read_line()?;
        let frame: HelloFrame = serde_json::from_str(&line)
            .map_err(|e| BridgeError::protocol(format!("expected hello frame: {e}"), &line))?;
        if frame.hello.protocol != PROTOCOL_VERSION {
            return Err(BridgeError::protocol(
                format!("unsupported protocol version {}", frame.hello.protocol),
                line,
            ));
        }
        self.hello = frame.hello;
        Ok(self)
    }

    pub fn hello(&self) -> &Hello {
        &self.hello
    }

    pub fn set_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
    }

    fn read_line(&mut self) -> Result<String, BridgeError> {
        match self.lines.recv_timeout(self.timeout) {
            Ok(Line::Data(l)) => Ok(l),
            Ok(Line::Eof) | Err(RecvTimeoutError::Disconnected) => {
                self.poisoned = true;
                Err(BridgeError::Closed)
            }
            Ok(Line::Failed(e)) => {
                self.poisoned = true;
                Err(BridgeError::Io(e))
            }
            Err(RecvTimeoutError::Timeout) => {
                // A late reply would be mistaken for the next request's.
                self.poisoned = true;
                Err(BridgeError::Timeout(self.timeout))
            }
        }
    }

    /// Sends one request and waits for its reply.
    pub fn request(&mut self, op: Op, payload: Value) -> Result<Reply, BridgeError> {
        if self.poisoned {
            return Err(BridgeError::Poisoned);
        }
        let id = self.next_id;
        self.next_id += 1;
        let mut line = serde_json::to_string(&Request { op, id, payload }).expect("request serializes");
        line.push('\n');
        if let Err(e) = self.writer.write_all(line.as_bytes()).and_then(|_| self.writer.flush()) {
            self.poisoned = true;
            return Err(e.into());
        }

        let frame = self.read_line()?;
        let resp: Response = match serde_json::from_str(&frame) {
            Ok(r) => r,
            Err(e) => {
                self.poisoned = true;
                return Err(BridgeError::protocol(format!("unparseable frame: {e}"), frame));
            }
        };
        if resp.id != id {
            self.poisoned = true;
            return Err(BridgeError::protocol(format!("expected reply to id {id}"), frame));
        }
        match (resp.reply, resp.error) {
            (Some(reply), None) => Ok(reply),
            (None, Some(err)) => Err(BridgeError::Remote {
                code: err.code,
                message: err.message,
            }),
            _ => Err(BridgeError::protocol("frame must carry exactly one of reply/error", frame)),
        }
    }

    pub fn ping(&mut self) -> Result<(), BridgeError> {
        match self.request(Op::Ping, Value::Null)? {
            Reply::Pong { pong: true } => Ok(()),
            other => Err(BridgeError::protocol("expected pong", format!("{other:?}"))),
        }
    }

    pub fn embed(&mut self, image_ref: &str) -> Result<EmbeddingVector, BridgeError> {
        let reply = self.request(Op::Embed, serde_json::json!({ "image_ref": image_ref }))?;
        let vector = match reply {
            Reply::Vector { vector } => vector,
            other => return Err(BridgeError::protocol("expected vector reply", format!("{other:?}"))),
        };
        if vector.len() != self.hello.dim {
            return Err(BridgeError::protocol(
                format!("vector has {} components, hello announced {}", vector.len(), self.hello.dim),
                format!("{vector:?}"),
            ));
        }
        EmbeddingVector::new(vector).map_err(|e| BridgeError::protocol(e.to_string(), image_ref))
    }

    /// Sends a prompt context; the system prompt is attached only when the
    /// host announced support for a system turn.
    pub fn respond(&mut self, context: &PromptContext, system: Option<&str>) -> Result<String, BridgeError> {
        let payload = RespondPayload {
            context: context.clone(),
            system: system.filter(|_| self.hello.system_turn).map(str::to_owned),
        };
        let reply = self.request(Op::Respond, serde_json::to_value(payload).expect("payload serializes"))?;
        match reply {
            Reply::Text { text } => Ok(text),
            other => Err(BridgeError::protocol("expected text reply", format!("{other:?}"))),
        }
    }

    /// Sends a pre-serialized payload verbatim. Used to exercise host-side
    /// validation.
    pub fn respond_raw(&mut self, payload: Value) -> Result<String, BridgeError> {
        match self.request(Op::Respond, payload)? {
            Reply::Text { text } => Ok(text),
            other => Err(BridgeError::protocol("expected text reply", format!("{other:?}"))),
        }
    }
}

impl Drop for BridgeClient {
    fn drop(&mut self) {
        if let Some(mut child) = self.child.take() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}
