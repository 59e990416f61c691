//! Frame-level checks any provider must pass.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::time::Duration;

use serde_json::Value;

/// Outcome of one conformance check.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConformanceCheck {
    pub name: &'static str,
    pub outcome: Result<(), String>,
}

struct Raw {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Raw {
    fn open(addr: &str, timeout: Duration) -> Result<Self, String> {
        let s = TcpStream::connect(addr).map_err(|e| format!("connect: {e}"))?;
        s.set_read_timeout(Some(timeout)).map_err(|e| e.to_string())?;
        let r = s.try_clone().map_err(|e| e.to_string())?;
        Ok(Raw {
            reader: BufReader::new(r),
            writer: s,
        })
    }

    fn round_trip(&mut self, line: &str) -> Result<Value, String> {
        self.writer
            .write_all(format!("{line}\n").as_bytes())
            .map_err(|e| format!("write: {e}"))?;
        let mut out = String::new();
        if self.reader.read_line(&mut out).map_err(|e| format!("read: {e}"))? == 0 {
            return Err("connection closed".into());
        }
        serde_json::from_str(&out).map_err(|e| format!("reply is not JSON: {e}"))
    }
}

fn field<'a>(v: &'a Value, key: &str) -> Result<&'a Value, String> {
    v.get(key).ok_or_else(|| format!("reply lacks `{key}`: {v}"))
}

fn check_hidden(v: &Value, id: u64, text: &str, dim: u64) -> Result<usize, String> {
    if field(v, "type")? != "hidden" || field(v, "id")?.as_u64() != Some(id) {
        return Err(format!("expected hidden frame for id {id}, got {v}"));
    }
    let offsets = field(v, "offsets")?.as_array().ok_or("offsets is not an array")?;
    let states = field(v, "states")?.as_array().ok_or("states is not an array")?;
    if offsets.len() != states.len() {
        return Err(format!("{} offsets vs {} rows", offsets.len(), states.len()));
    }
    let mut prev = 0;
    for o in offsets {
        let pair: Vec<u64> = o
            .as_array()
            .filter(|a| a.len() == 2)
            .and_then(|a| a.iter().map(Value::as_u64).collect())
            .ok_or_else(|| format!("bad offset {o}"))?;
        let (s, e) = (pair[0] as usize, pair[1] as usize);
        if s < prev || s > e || e > text.len() || !text.is_char_boundary(s) || !text.is_char_boundary(e) {
            return Err(format!("offset [{s}, {e}] is not a sorted byte range of the request text"));
        }
        prev = e;
    }
    for row in states {
        let row = row.as_array().ok_or("state row is not an array")?;
        if row.len() as u64 != dim || row.iter().any(|x| !x.is_number()) {
            return Err(format!("state row of length {} for dim {dim}", row.len()));
        }
    }
    Ok(offsets.len())
}

/// Runs every check against the provider at `addr`, each on a fresh
/// connection where the check needs one.
pub fn run_conformance(addr: &str, timeout: Duration) -> Vec<ConformanceCheck> {
    let mut checks = Vec::new();
    let mut dim = 0;
    let mut max_seq_len = 0;

    let handshake = (|| {
        let mut c = Raw::open(addr, timeout)?;
        let v = c.round_trip(r#"{"type":"hello","version":1}"#)?;
        if field(&v, "type")? != "hello" || field(&v, "version")?.as_u64() != Some(1) {
            return Err(format!("bad hello reply {v}"));
        }
        field(&v, "model")?.as_str().ok_or("model is not a string")?;
        dim = field(&v, "dim")?.as_u64().filter(|&d| d > 0).ok_or("dim must be positive")?;
        max_seq_len = field(&v, "max_seq_len")?.as_u64().ok_or("max_seq_len is not an integer")?;
        Ok(())
    })();
    let handshake_ok = handshake.is_ok();
    checks.push(ConformanceCheck {
        name: "handshake",
        outcome: handshake,
    });
    if !handshake_ok {
        return checks;
    }

    let mut session = |name: &'static str, body: &dyn Fn(&mut Raw) -> Result<(), String>| {
        let outcome = Raw::open(addr, timeout).and_then(|mut c| {
            c.round_trip(r#"{"type":"hello","version":1}"#)?;
            body(&mut c)
        });
        checks.push(ConformanceCheck { name, outcome });
    };

    session("single-character request", &|c| {
        let v = c.round_trip(r#"{"type":"hidden","id":1,"text":"a"}"#)?;
        let n = check_hidden(&v, 1, "a", dim)?;
        if n == 0 {
            return Err("no tokens for \"a\"".into());
        }
        Ok(())
    });

    session("multi-byte text offsets", &|c| {
        let text = "Café au lait, s'il vous plaît";
        let req = serde_json::json!({"type": "hidden", "id": 2, "text": text});
        let v = c.round_trip(&req.to_string())?;
        check_hidden(&v, 2, text, dim).map(|_| ())
    });

    session("malformed request keeps connection", &|c| {
        let v = c.round_trip("{not json")?;
        if field(&v, "type")? != "error" {
            return Err(format!("expected error frame, got {v}"));
        }
        let v = c.round_trip(r#"{"type":"hidden","id":3,"text":"still here"}"#)?;
        check_hidden(&v, 3, "still here", dim).map(|_| ())
    });

    session("oversized request keeps connection", &|c| {
        let long = vec!["word"; max_seq_len as usize * 4 + 8].join(" ");
        let req = serde_json::json!({"type": "hidden", "id": 4, "text": long});
        let v = c.round_trip(&req.to_string())?;
        if field(&v, "type")? != "error" || field(&v, "id")?.as_u64() != Some(4) {
            return Err(format!("expected error frame for id 4, got {v}"));
        }
        let v = c.round_trip(r#"{"type":"hidden","id":5,"text":"after"}"#)?;
        check_hidden(&v, 5, "after", dim).map(|_| ())
    });

    checks
}
