//! Federated LoRA fine-tuning simulator with Fisher-information curricula,
//! global aggregation layer selection and neuron-level sparse masks.

mod codec;
pub mod config;
pub mod curriculum;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod fisher;
pub mod gal;
pub mod lora;
pub mod mask;
pub mod numeric;

pub use error::{Error, Result};
