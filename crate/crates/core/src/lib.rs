//! Session-level drift tracking for tool-using agents.

#![allow(clippy::needless_range_loop)]

pub mod analysis;
pub mod classify;
pub mod config;
pub mod error;
pub mod estimate;
pub mod eval;
pub mod linalg;
pub mod matrix_io;
pub mod monitor;
pub mod rules;
pub mod sim;
pub mod state;
pub mod trace;

pub use error::{Error, Result};
