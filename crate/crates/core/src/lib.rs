//! Context-guided capsule routing for multimodal machine translation.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod gradcheck;
pub mod inspect;
pub mod model;
pub mod multimodal;
pub mod oracle;
pub mod params;
pub mod plot;
pub mod rng;
pub mod routing;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
pub use params::{Bound, ParamId, ParamStore};
pub use tensor::{Graph, Mode, Tensor, Var};
