pub mod calibration;
pub mod constants;
pub mod error;
pub mod hardware;
pub mod nofu;
pub mod optim;
pub mod perf;
pub mod training;
pub mod twin;
pub mod unitary;

pub use error::{Error, ErrorCategory, Result};
