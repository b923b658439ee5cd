pub mod autograd;
pub mod cli;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gpem;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod resize;
pub mod saim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
