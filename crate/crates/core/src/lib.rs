//! Toy discrete-frame video diffusion with dual-mask data use and an
//! entropy-scheduled curriculum.

pub mod config;
pub mod curriculum;
pub mod dfgn;
pub mod diffusion;
pub mod error;
pub mod masks;
pub mod metrics;
pub mod numcore;
pub mod pipeline;
pub mod spritegen;

pub use error::{Error, Result};
