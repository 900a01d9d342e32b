//! Interactive conversational recommendation over a trained checkpoint.
//!
//! [`Engine`] does the model work synchronously; [`router`] exposes it over
//! JSON/HTTP with per-session serialization.

mod engine;
mod http;
mod link;
mod session;

pub use engine::{Engine, EngineOptions, Recommendation, TurnReply};
pub use http::{router, serve, AppState};
pub use link::EntityLinker;
pub use session::{Session, SessionStore, DEFAULT_TTL};

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("{0}")]
    BadRequest(String),
    #[error(transparent)]
    Model(#[from] c2crs_core::Error),
    #[error("worker failed: {0}")]
    Internal(String),
}
