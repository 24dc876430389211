pub mod datasets;
pub mod error;
pub mod exactk;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod verify;
pub mod wl;

pub use error::{Error, Result};
pub use tensor::{Tensor, Tape, Var};
