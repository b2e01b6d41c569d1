pub mod diagnostics;
pub mod error;
pub mod extension;
pub mod field;
pub mod fracops;
pub mod grid;
pub mod linalg;
pub mod par;
pub mod penalty;
pub mod scheduler;
pub mod transforms;

pub use error::{Error, Result};
