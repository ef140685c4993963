pub mod augment;
pub mod distill;
pub mod dsp;
pub mod eval;
pub mod io;
pub mod vit;
pub mod error;
pub mod rng;
pub mod scalar;

pub use error::{AsitError, Result};
