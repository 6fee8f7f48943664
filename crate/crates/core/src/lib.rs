pub mod adapt;
pub mod augment;
pub mod data;
pub mod error;
pub mod harness;
pub mod meta;
pub mod metrics;
pub mod models;
pub mod pretext;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
