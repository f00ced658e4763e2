//! Command-line pipeline and websocket streaming service.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod protocol;
pub mod server;
pub mod session;

pub use error::{Result, ServiceError};
