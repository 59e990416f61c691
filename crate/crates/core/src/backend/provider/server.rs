//! Provider side of the protocol: a generic connection loop plus two
//! handlers, a scripted mock and a server for the toy model.

use std::collections::VecDeque;
use std::io::{self, BufRead, BufReader, Write};
use std::net::TcpListener;
use std::thread::{self, JoinHandle};

use super::{to_line, ClientFrame, ServerFrame, PROTOCOL_VERSION};
use crate::backend::toy::ToyModel;
use crate::backend::{Backend, BackendError};

/// One reply to a `hidden` request.
#[derive(Clone, Debug, PartialEq)]
pub enum Reply {
    States {
        offsets: Vec<[usize; 2]>,
        states: Vec<Vec<f32>>,
    },
    Error(String),
    /// Sent verbatim (a newline is appended), for exercising bad frames.
    Raw(String),
}

pub trait Handler {
    fn model(&self) -> String;
    fn dim(&self) -> usize;
    fn max_seq_len(&self) -> usize;
    fn handle(&mut self, id: u64, text: &str) -> Reply;
}

/// Serves one connection until the peer closes it. Undecodable client
/// frames get an error frame; the connection stays open.
pub fn serve_connection<R: BufRead, W: Write, H: Handler>(mut reader: R, mut writer: W, handler: &mut H) -> io::Result<()> {
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Ok(());
        }
        let reply = match serde_json::from_str::<ClientFrame>(line.trim_end_matches(['\r', '\n'])) {
            Ok(ClientFrame::Hello { version }) if version == PROTOCOL_VERSION => to_line(&ServerFrame::Hello {
                version: PROTOCOL_VERSION,
                model: handler.model(),
                dim: handler.dim(),
                max_seq_len: handler.max_seq_len(),
            }),
            Ok(ClientFrame::Hello { version }) => to_line(&ServerFrame::Error {
                id: 0,
                message: format!("unsupported protocol version {version}"),
            }),
            Ok(ClientFrame::Hidden { id, text }) => match handler.handle(id, &text) {
                Reply::States { offsets, states } => to_line(&ServerFrame::Hidden { id, offsets, states }),
                Reply::Error(message) => to_line(&ServerFrame::Error { id, message }),
                Reply::Raw(mut raw) => {
                    raw.push('\n');
                    raw
                }
            },
            Err(e) => to_line(&ServerFrame::Error {
                id: salvage_id(&line),
                message: format!("malformed request: {e}"),
            }),
        };
        writer.write_all(reply.as_bytes())?;
        writer.flush()?;
    }
}

fn salvage_id(line: &str) -> u64 {
    serde_json::from_str::<serde_json::Value>(line)
        .ok()
        .and_then(|v| v.get("id").and_then(serde_json::Value::as_u64))
        .unwrap_or(0)
}

/// Accepts connections forever, one thread and one fresh handler each.
pub fn serve_tcp<H, F>(listener: TcpListener, make_handler: F) -> JoinHandle<()>
where
    H: Handler + Send + 'static,
    F: Fn() -> H + Send + Sync + 'static,
{
    thread::spawn(move || {
        let make_handler = std::sync::Arc::new(make_handler);
        for stream in listener.incoming() {
            let Ok(stream) = stream else { continue };
            let make_handler = make_handler.clone();
            thread::spawn(move || {
                let Ok(read_half) = stream.try_clone() else { return };
                let mut handler = make_handler();
                let _ = serve_connection(BufReader::new(read_half), stream, &mut handler);
            });
        }
    })
}

/// Replays scripted replies in order, then falls back to a fixed reply.
#[derive(Clone, Debug)]
pub struct MockProvider {
    pub dim: usize,
    pub max_seq_len: usize,
    pub script: VecDeque<Reply>,
    pub fallback: Reply,
    /// Texts received, in order.
    pub seen: Vec<String>,
}

impl MockProvider {
    pub fn new(dim: usize, fallback: Reply) -> Self {
        MockProvider {
            dim,
            max_seq_len: 4096,
            script: VecDeque::new(),
            fallback,
            seen: Vec::new(),
        }
    }

    pub fn then(mut self, reply: Reply) -> Self {
        self.script.push_back(reply);
        self
    }
}

impl Handler for MockProvider {
    fn model(&self) -> String {
        "mock".into()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn max_seq_len(&self) -> usize {
        self.max_seq_len
    }

    fn handle(&mut self, _id: u64, text: &str) -> Reply {
        self.seen.push(text.to_owned());
        self.script.pop_front().unwrap_or_else(|| self.fallback.clone())
    }
}

/// Serves the toy model's final-layer states over the protocol.
pub struct ToyProvider {
    model: ToyModel<f32>,
}

impl ToyProvider {
    pub fn new(model: ToyModel<f32>) -> Self {
        ToyProvider { model }
    }
}

impl Handler for ToyProvider {
    fn model(&self) -> String {
        format!("toy-d{}-l{}-seed{}", self.model.config().d_model, self.model.config().n_layers, self.model.config().seed)
    }

    fn dim(&self) -> usize {
        self.model.config().d_model
    }

    fn max_seq_len(&self) -> usize {
        self.model.config().max_seq_len
    }

    fn handle(&mut self, _id: u64, text: &str) -> Reply {
        match self.model.encode(text) {
            Ok((tokens, states)) => Reply::States {
                offsets: tokens.offsets.iter().map(|&(s, e)| [s, e]).collect(),
                states: (0..states.rows()).map(|r| states.row(r).to_vec()).collect(),
            },
            Err(e @ BackendError::SequenceTooLong { .. }) => Reply::Error(e.to_string()),
            Err(e) => Reply::Error(format!("toy model failed: {e}")),
        }
    }
}
