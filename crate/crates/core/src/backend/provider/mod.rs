//! External activation providers, protocol version 1.
//!
//! Newline-delimited UTF-8 JSON frames over any byte stream:
//!
//! ```text
//! client: {"type":"hello","version":1}
//! server: {"type":"hello","version":1,"model":"<id>","dim":d,"max_seq_len":N}
//! client: {"type":"hidden","id":<u64>,"text":"<string>"}
//! server: {"type":"hidden","id":<u64>,"offsets":[[b0,e0],...],"states":[[f32,...],...]}
//!     or: {"type":"error","id":<u64>,"message":"<string>"}
//! ```
//!
//! Offsets are byte ranges into the request text; `states` has one row of
//! width `dim` per offset. A connection carries one request at a time.

mod client;
mod conformance;
mod server;

use serde::{Deserialize, Serialize};

pub use client::{ProviderClient, ProviderInfo, DEFAULT_TIMEOUT};
pub use conformance::{run_conformance, ConformanceCheck};
pub use server::{serve_connection, serve_tcp, Handler, MockProvider, Reply, ToyProvider};

pub const PROTOCOL_VERSION: u32 = 1;

/// Frames sent by the embedding side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientFrame {
    Hello { version: u32 },
    Hidden { id: u64, text: String },
}

/// Frames sent by the provider.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ServerFrame {
    Hello {
        version: u32,
        model: String,
        dim: usize,
        max_seq_len: usize,
    },
    Hidden {
        id: u64,
        offsets: Vec<[usize; 2]>,
        states: Vec<Vec<f32>>,
    },
    Error {
        id: u64,
        message: String,
    },
}

pub(crate) fn to_line<T: Serialize>(frame: &T) -> String {
    let mut s = serde_json::to_string(frame).expect("frames always serialize");
    s.push('\n');
    s
}
