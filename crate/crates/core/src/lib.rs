pub mod bspline;
pub mod dataset;
pub mod design;
pub mod error;
pub mod eval;
pub mod fit;
pub mod fpca;
pub mod gp_sim;
pub mod impute;
pub mod linalg;
pub mod mixed;
pub mod pipeline;
pub mod rng;
pub mod subsample;

pub use error::{Error, ErrorKind, Result};
