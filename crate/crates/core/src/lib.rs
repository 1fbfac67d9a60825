pub mod bench;
pub mod channel;
pub mod compress;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod model;
pub mod model_io;
pub mod store;
pub mod tensor;

pub use error::{Error, Result};
