//! Command line, session store and HTTP API over the detection workbench.

pub mod api;
pub mod cli;
pub mod error;
pub mod ops;
pub mod session;

pub use error::{ServiceError, ServiceResult};
pub use session::Session;
