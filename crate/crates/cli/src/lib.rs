//! Command implementations behind the `pads` binary.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod report;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Runtime(_) => 3,
        }
    }
}

impl From<pads_core::Error> for CliError {
    fn from(e: pads_core::Error) -> Self {
        match e {
            pads_core::Error::InvalidParam(_) | pads_core::Error::Unsupported(_) => Self::Config(e.to_string()),
            other => Self::Runtime(other.to_string()),
        }
    }
}
