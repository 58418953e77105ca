//! HTTP API, job queue and command line for the road redesign pipeline.

pub mod api;
pub mod cli;
pub mod error;
pub mod jobs;
pub mod pipeline;
pub mod workspace;

pub use error::GatewayError;
pub use workspace::Workspace;
