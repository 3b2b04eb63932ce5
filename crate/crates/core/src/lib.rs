//! Vision transformer, token sparsifiers, the efficiency attack against them,
//! compute metrics and the token-budget defense.

pub mod attack;
mod binio;
pub mod data;
pub mod defense;
pub mod error;
pub mod metrics;
pub mod model;
pub mod sparsifiers;

pub use error::{CoreError, Result};
