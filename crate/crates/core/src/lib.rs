// `!(x > 0.0)` is used deliberately so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod background;
pub mod baseline;
pub mod cli;
pub mod col;
pub mod dataio;
pub mod directional;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod optim;
pub mod pipeline;
pub mod wsod;

pub use error::{Error, Result};
