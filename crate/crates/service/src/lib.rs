//! CLI drivers and the HTTP API for the reverse dictionary.

pub mod api;
pub mod cli;
pub mod config;
pub mod engine;

pub use api::{router, serve, AppState, QueryRequest};
pub use config::{Backend, CheckpointSpec, ServiceConfig, CONFIG_ENV};
pub use engine::{Engine, QueryError, QueryResponse, RankedWord};
