use std::fmt::Display;

use thiserror::Error;

/// A failed operation with a one-line reason.
#[derive(Debug, Error)]
#[error("{op}: {message}")]
pub struct CliError {
    pub op: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(op: &'static str, message: impl Display) -> Self {
        Self { op, message: message.to_string() }
    }
}

pub trait Context<T> {
    fn op(self, op: &'static str) -> Result<T, CliError>;
}

impl<T, E: Display> Context<T> for Result<T, E> {
    fn op(self, op: &'static str) -> Result<T, CliError> {
        self.map_err(|e| CliError::new(op, e))
    }
}
