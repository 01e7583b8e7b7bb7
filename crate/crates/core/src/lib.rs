// `!(x > 0.0)` guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod checkpoint;
pub mod dualenc;
pub mod error;
pub mod glyph;
pub mod image;
pub mod prompts;
pub mod rng;
pub mod selection;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
