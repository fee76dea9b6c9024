pub mod chain;
pub mod checkpoint;
pub mod complexity;
pub mod data;
pub mod error;
pub mod eval;
pub mod expand;
pub mod losses;
pub mod modelzoo;
pub mod numerics;
pub mod params;
pub mod train;

pub use error::{Error, Result};
pub use params::ParamSet;
