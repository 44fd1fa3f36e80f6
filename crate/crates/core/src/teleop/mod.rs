//! Live teleoperation over WebSocket.

pub mod protocol;
pub mod server;
pub mod session;

pub use protocol::{parse_client_line, ClientMessage, RecordAction, ServerMessage, StateFrame, PROTOCOL_VERSION};
pub use server::{serve, spawn, DropOldest, Pacing, ServeOptions, ServerHandle, DEFAULT_PORT};
pub use session::TeleopSession;
