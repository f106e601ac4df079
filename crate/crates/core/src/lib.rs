pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod harness;
pub mod imaging;
pub mod losses;
pub mod message;
pub mod message_codec;
pub mod metrics;
pub mod nn;
pub mod trainer;
pub mod transforms;

pub use error::{Result, StegoError};
