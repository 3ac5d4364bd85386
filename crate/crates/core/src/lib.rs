pub mod baselines;
pub mod bundle;
pub mod collection;
pub mod dataset;
pub mod ensemble;
pub mod env;
pub mod eval;
pub mod error;
pub mod features;
pub mod gmrf;
pub mod graph;
pub mod pipeline;
pub mod rng;
pub mod sparse;
pub mod split;
pub mod stats;

pub use error::{Error, ErrorKind, Result};
