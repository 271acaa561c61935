//! Case IO, scenario harness and report emission around `pmuvsi-core`.

pub mod error;
pub mod harness;
pub mod io;

pub use error::{HarnessError, Result};
