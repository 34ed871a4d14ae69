pub mod certify;
pub mod error;
pub mod jacobian;
pub mod linalg;
pub mod netmodel;
pub mod powerflow;
pub mod retrieval;
pub mod rng;
pub mod sensitivity;
pub mod simkit;

pub use error::{Error, Result};
