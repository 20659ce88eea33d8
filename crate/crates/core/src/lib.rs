pub mod agro;
pub mod ccg;
pub mod error;
pub mod genmetrics;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod lp;
pub mod neuralgen;
pub mod probgen;
pub mod rng;
pub mod uncertainty;

pub use error::{Error, Result};
