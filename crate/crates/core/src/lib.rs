pub mod cnn;
pub mod error;
pub mod fusion;
pub mod model;
pub mod objectives;
pub mod scheduler;
pub mod snn;
pub mod spike;
pub mod transformer;

pub use error::{CoreError, Result};
