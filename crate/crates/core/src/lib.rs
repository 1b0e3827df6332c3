// Negated float comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datagen;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod layers;
pub mod model;
pub mod numcore;
pub mod objective;
pub mod prototypes;
pub mod temporal;

pub use error::{Error, Result};
