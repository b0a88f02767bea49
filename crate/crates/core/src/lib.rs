pub mod backbone;
pub mod baselines;
pub mod episodes;
pub mod error;
pub mod evaluator;
pub mod io;
pub mod modulation;
pub mod nn;
pub mod optim;
pub mod protonet;
pub mod rng;
pub mod trainer;
pub mod variational;

pub use error::{Error, Result};
