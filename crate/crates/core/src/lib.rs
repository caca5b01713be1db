pub mod analysis;
pub mod chain_io;
pub mod config;
pub mod data;
pub mod error;
pub mod identify;
pub mod linalg;
pub mod lmm;
pub mod pipeline;
pub mod ppca;
pub mod report;
pub mod sampler;
pub mod simulate;
pub mod sv;
pub mod truncnorm;

pub use error::{DppcaError, Result};
