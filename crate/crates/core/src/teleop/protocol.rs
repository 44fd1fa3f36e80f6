//! Wire messages. One JSON object per line, one line per WebSocket text frame.

use serde::{Deserialize, Serialize};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordAction {
    Start,
    Stop,
    Discard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    /// End-effector target (m) and grip closure in `[0, 1]`.
    Target { x: f64, y: f64, grip: f64 },
    Record { action: RecordAction },
    Reset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateFrame {
    pub t: f64,
    pub leader: Vec<f64>,
    pub follower: Vec<f64>,
    pub tau_res_l: Vec<f64>,
    pub tau_res_f: Vec<f64>,
    pub object: [f64; 2],
    pub held: bool,
    pub recording: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Hello { version: u32 },
    State(StateFrame),
    Error { msg: String },
}

impl ServerMessage {
    pub fn hello() -> Self {
        ServerMessage::Hello {
            version: PROTOCOL_VERSION,
        }
    }

    pub fn error(msg: impl Into<String>) -> Self {
        ServerMessage::Error { msg: msg.into() }
    }

    /// The newline-terminated wire form.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("server messages serialize") + "\n"
    }
}

/// Parses one inbound line. The error string is meant for an error frame.
pub fn parse_client_line(line: &str) -> Result<ClientMessage, String> {
    let msg: ClientMessage = serde_json::from_str(line.trim()).map_err(|e| format!("bad message: {e}"))?;
    if let ClientMessage::Target { x, y, grip } = msg {
        if !(x.is_finite() && y.is_finite() && grip.is_finite()) {
            return Err("bad message: target values must be finite".into());
        }
        if !(0.0..=1.0).contains(&grip) {
            return Err(format!("bad message: grip {grip} outside [0, 1]"));
        }
    }
    Ok(msg)
}

/// Rounds to 1 µ-unit so frames print compactly and stably.
pub(crate) fn wire_round(v: f64) -> f64 {
    let r = (v * 1e6).round() / 1e6;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}
