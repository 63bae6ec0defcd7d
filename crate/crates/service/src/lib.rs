//! Teaching sessions over a JSON message protocol.

#![allow(clippy::result_large_err)]

pub mod field;
pub mod protocol;
pub mod server;
pub mod service;
pub mod state;
pub mod telemetry;

pub use protocol::{parse_request, Request, Response};
pub use server::Server;
pub use service::{Client, Service};
pub use state::SessionState;
