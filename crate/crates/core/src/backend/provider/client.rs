use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use super::{to_line, ClientFrame, ServerFrame, PROTOCOL_VERSION};
use crate::backend::{AttentionMode, Backend, BackendError, HiddenStates, Tokenization};
use crate::Scalar;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

/// What the provider declared in its handshake.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProviderInfo {
    pub model: String,
    pub dim: usize,
    pub max_seq_len: usize,
}

struct Connection {
    reader: BufReader<Box<dyn Read + Send>>,
    writer: Box<dyn Write + Send>,
}

impl Connection {
    fn send(&mut self, frame: &ClientFrame) -> Result<(), BackendError> {
        self.writer.write_all(to_line(frame).as_bytes()).map_err(io_error)?;
        self.writer.flush().map_err(io_error)
    }

    fn receive(&mut self) -> Result<ServerFrame, BackendError> {
        let mut line = String::new();
        let n = self.reader.read_line(&mut line).map_err(io_error)?;
        if n == 0 {
            return Err(BackendError::Protocol("provider closed the connection".into()));
        }
        serde_json::from_str(line.trim_end_matches(['\r', '\n']))
            .map_err(|e| BackendError::Protocol(format!("malformed frame: {e}")))
    }
}

fn io_error(e: io::Error) -> BackendError {
    match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => BackendError::Timeout,
        io::ErrorKind::InvalidData => BackendError::Protocol(format!("invalid UTF-8 in frame: {e}")),
        _ => BackendError::Protocol(format!("transport failure: {e}")),
    }
}

/// Client side of the provider protocol. Requests are serialised through a
/// mutex, so the client may be shared across threads.
pub struct ProviderClient {
    conn: Mutex<Connection>,
    info: ProviderInfo,
    next_id: AtomicU64,
}

impl ProviderClient {
    /// Connects over TCP to `host:port` and performs the handshake.
    pub fn connect(addr: &str, timeout: Duration) -> Result<Self, BackendError> {
        let sock = addr
            .to_socket_addrs()
            .map_err(|e| BackendError::Protocol(format!("cannot resolve provider address {addr:?}: {e}")))?
            .next()
            .ok_or_else(|| BackendError::Protocol(format!("provider address {addr:?} resolves to nothing")))?;
        let stream = TcpStream::connect_timeout(&sock, timeout)
            .map_err(|e| BackendError::Protocol(format!("cannot connect to provider at {addr}: {e}")))?;
        stream.set_read_timeout(Some(timeout))?;
        stream.set_write_timeout(Some(timeout))?;
        stream.set_nodelay(true)?;
        let reader = stream.try_clone()?;
        Self::handshake(Box::new(reader), Box::new(stream))
    }

    /// Performs the handshake over an arbitrary pair of streams (pipes, sockets).
    pub fn handshake(reader: Box<dyn Read + Send>, writer: Box<dyn Write + Send>) -> Result<Self, BackendError> {
        let mut conn = Connection {
            reader: BufReader::new(reader),
            writer,
        };
        conn.send(&ClientFrame::Hello {
            version: PROTOCOL_VERSION,
        })?;
        let info = match conn.receive()? {
            ServerFrame::Hello {
                version,
                model,
                dim,
                max_seq_len,
            } => {
                if version != PROTOCOL_VERSION {
                    return Err(BackendError::Protocol(format!("provider speaks version {version}")));
                }
                if dim == 0 {
                    return Err(BackendError::Protocol("provider declared dim 0".into()));
                }
                ProviderInfo { model, dim, max_seq_len }
            }
            other => return Err(BackendError::Protocol(format!("expected hello, got {other:?}"))),
        };
        Ok(ProviderClient {
            conn: Mutex::new(conn),
            info,
            next_id: AtomicU64::new(1),
        })
    }

    pub fn info(&self) -> &ProviderInfo {
        &self.info
    }

    /// Tokenization and final-layer states for `text`.
    pub fn hidden_states(&self, text: &str) -> Result<(Tokenization, HiddenStates<f32>), BackendError> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let mut conn = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        conn.send(&ClientFrame::Hidden {
            id,
            text: text.to_owned(),
        })?;
        match conn.receive()? {
            ServerFrame::Hidden {
                id: got,
                offsets,
                states,
            } => {
                if got != id {
                    return Err(BackendError::Protocol(format!("response id {got} for request {id}")));
                }
                self.check_response(text, offsets, states)
            }
            ServerFrame::Error { id: got, message } if got == id => Err(BackendError::Provider { id, message }),
            other => Err(BackendError::Protocol(format!("unexpected frame for request {id}: {other:?}"))),
        }
    }

    fn check_response(
        &self,
        text: &str,
        offsets: Vec<[usize; 2]>,
        states: Vec<Vec<f32>>,
    ) -> Result<(Tokenization, HiddenStates<f32>), BackendError> {
        if offsets.len() != states.len() {
            return Err(BackendError::Protocol(format!(
                "{} offsets but {} state rows",
                offsets.len(),
                states.len()
            )));
        }
        let mut prev_end = 0;
        for &[s, e] in &offsets {
            if s > e || s < prev_end || e > text.len() {
                return Err(BackendError::Protocol(format!(
                    "offset [{s}, {e}] is unsorted or outside the {}-byte text",
                    text.len()
                )));
            }
            prev_end = e;
        }
        let states = HiddenStates::from_rows(states, self.info.dim, AttentionMode::Causal)?;
        let tokens = Tokenization {
            token_ids: Vec::new(),
            offsets: offsets.into_iter().map(|[s, e]| (s, e)).collect(),
        };
        Ok((tokens, states))
    }
}

impl<S: Scalar> Backend<S> for ProviderClient {
    fn encode(&self, text: &str) -> Result<(Tokenization, HiddenStates<S>), BackendError> {
        let (tokens, states) = self.hidden_states(text)?;
        if states.rows() > self.info.max_seq_len {
            return Err(BackendError::SequenceTooLong {
                len: states.rows(),
                max: self.info.max_seq_len,
            });
        }
        let converted = states.as_slice().iter().map(|&v| S::of(f64::from(v))).collect();
        Ok((tokens, HiddenStates::from_flat(converted, self.info.dim, states.attention())))
    }

    fn dim(&self) -> usize {
        self.info.dim
    }

    fn max_seq_len(&self) -> usize {
        self.info.max_seq_len
    }
}
