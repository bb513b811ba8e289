//! Deterministic bridge host for tests and dry runs.
//!
//! Speaks the line-delimited JSON protocol on stdin/stdout. Embeddings are
//! derived from a hash of the image file's bytes. Answers are a fixed string
//! unless a per-image script or label voting is enabled.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::{self, BufRead, Write};
use std::path::PathBuf;
use std::thread;
use std::time::Duration;

use clap::Parser;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use ragdetect::bridge::{Hello, HelloFrame, Op, Request, RespondPayload, PROTOCOL_VERSION};
use ragdetect::context::Turn;
use ragdetect::label::Label;

#[derive(Parser, Debug)]
#[command(about = "Stub model host speaking the bridge protocol on stdio")]
struct Args {
    #[arg(long, default_value_t = 768)]
    dim: usize,
    #[arg(long, default_value = "stub")]
    model: String,
    /// Fixed answer text for `respond`.
    #[arg(long, default_value = "real")]
    answer: String,
    /// JSON object mapping query image refs to answer text.
    #[arg(long)]
    script: Option<PathBuf>,
    /// Answer with the majority label of the in-context examples.
    #[arg(long)]
    vote: bool,
    /// Reply to every request with a line that is not JSON.
    #[arg(long)]
    malformed: bool,
    /// Reply with a mismatched request id.
    #[arg(long)]
    wrong_id: bool,
    /// Sleep before every reply.
    #[arg(long, default_value_t = 0)]
    delay_ms: u64,
    /// Announce support for a system turn.
    #[arg(long)]
    system_turn: bool,
    /// Append every received request line to this file.
    #[arg(long)]
    log: Option<PathBuf>,
}

fn embed_bytes(bytes: &[u8], dim: usize) -> Vec<f32> {
    let digest = Sha256::digest(bytes);
    let seed: [u8; 32] = digest.into();
    let mut rng = ChaCha8Rng::from_seed(seed);
    (0..dim)
        .map(|_| {
            let x: f64 = StandardNormal.sample(&mut rng);
            x as f32
        })
        .collect()
}

fn error(code: &str, message: impl Into<String>) -> Result<Value, Value> {
    Err(json!({ "code": code, "message": message.into() }))
}

fn majority(turns: &[Turn]) -> &'static str {
    let (mut real, mut fake) = (0, 0);
    for t in turns {
        if let Turn::Text(s) = t {
            match s.rsplit(' ').next() {
                Some("real") => real += 1,
                Some("fake") => fake += 1,
                _ => {}
            }
        }
    }
    if fake > real {
        Label::Fake.word()
    } else {
        Label::Real.word()
    }
}

struct Host {
    args: Args,
    script: HashMap<String, String>,
}

impl Host {
    fn handle(&self, req: &Request) -> Result<Value, Value> {
        match req.op {
            Op::Ping => Ok(json!({ "pong": true })),
            Op::Embed => {
                let Some(path) = req.payload.get("image_ref").and_then(Value::as_str) else {
                    return error("bad-request", "embed needs image_ref");
                };
                match std::fs::read(path) {
                    Ok(bytes) => Ok(json!({ "vector": embed_bytes(&bytes, self.args.dim) })),
                    Err(e) => error("not-found", format!("{path}: {e}")),
                }
            }
            Op::Respond => {
                let payload: RespondPayload = match serde_json::from_value(req.payload.clone()) {
                    Ok(p) => p,
                    Err(e) => return error("bad-context", e.to_string()),
                };
                if let Err(e) = payload.context.validate() {
                    return error("bad-context", e.to_string());
                }
                let turns = payload.context.turns();
                let query = match &turns[turns.len() - 2] {
                    Turn::Image(r) => r.as_str(),
                    Turn::Text(_) => unreachable!("validated layout"),
                };
                let text = if let Some(answer) = self.script.get(query) {
                    answer.clone()
                } else if self.args.vote {
                    majority(&turns[1..turns.len() - 2]).to_string()
                } else {
                    self.args.answer.clone()
                };
                Ok(json!({ "text": text }))
            }
        }
    }
}

fn main() -> io::Result<()> {
    let args = Args::parse();
    let script = match &args.script {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?).map_err(io::Error::other)?,
        None => HashMap::new(),
    };
    let mut log = match &args.log {
        Some(p) => Some(OpenOptions::new().create(true).append(true).open(p)?),
        None => None,
    };
    let host = Host { args, script };

    let stdout = io::stdout();
    let mut out = stdout.lock();
    let hello = HelloFrame {
        hello: Hello {
            protocol: PROTOCOL_VERSION,
            model: host.args.model.clone(),
            dim: host.args.dim,
            system_turn: host.args.system_turn,
        },
    };
    writeln!(out, "{}", serde_json::to_string(&hello)?)?;
    out.flush()?;

    for line in io::stdin().lock().lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if let Some(f) = log.as_mut() {
            writeln!(f, "{line}")?;
        }
        if host.args.delay_ms > 0 {
            thread::sleep(Duration::from_millis(host.args.delay_ms));
        }
        if host.args.malformed {
            writeln!(out, "this is not json")?;
            out.flush()?;
            continue;
        }
        let frame = match serde_json::from_str::<Request>(&line) {
            Ok(req) => {
                let id = if host.args.wrong_id { req.id + 1000 } else { req.id };
                match host.handle(&req) {
                    Ok(reply) => json!({ "id": id, "reply": reply }),
                    Err(err) => json!({ "id": id, "error": err }),
                }
            }
            Err(e) => {
                let id = serde_json::from_str::<Value>(&line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(Value::as_u64))
                    .unwrap_or(0);
                json!({ "id": id, "error": { "code": "bad-request", "message": e.to_string() } })
            }
        };
        writeln!(out, "{frame}")?;
        out.flush()?;
    }
    Ok(())
}
