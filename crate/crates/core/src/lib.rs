pub mod autograd;
pub mod cli;
pub mod error;
pub mod evaluation;
pub mod gin;
pub mod iin;
pub mod image_model;
mod io_util;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod synthesis;
pub mod tensor;
pub mod training;

pub use error::{CrrnError, Result};
