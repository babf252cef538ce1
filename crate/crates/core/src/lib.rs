pub mod augment;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod mixing;
pub mod numerics;
pub mod segnet;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
