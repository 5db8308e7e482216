//! Decoder-only transformer: configuration, parameters, forward pass and
//! sampling.

mod config;
mod generate;
mod gpt;
mod params;

pub use config::ModelConfig;
pub use generate::{generate, Sampling};
pub use gpt::{CausalLm, ForwardPass, GptModel, Mode};
pub use params::ParamSet;
