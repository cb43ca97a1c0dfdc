pub mod datagen;
pub mod error;
pub mod federation;
pub mod harness;
pub mod losses;
pub mod model;
pub mod ntk;
pub mod projection;
pub mod rng;

pub use error::{Error, Result};
