pub mod bpe;
pub mod corpus;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod io;
pub mod metrics;
pub mod optim;
pub mod tensor;
pub mod textprep;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
