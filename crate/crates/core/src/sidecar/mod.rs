//! Line-oriented control channel exposing the controller to external
//! training processes over stdio or TCP.

mod protocol;
mod server;

pub use protocol::{
    parse_request, EpochEnd, ErrorCode, Hello, Request, Response, Session, MAX_LINE_BYTES,
};
pub use server::{bind, run_session, serve_listener, serve_stdio, ServeOptions, SessionSummary};
