// `!(x > bound)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel_file;
pub mod detector;
pub mod error;
pub mod geometry;
pub mod lmmse;
pub mod projection;
pub mod sim;
pub mod system;

pub use error::{Error, Result};
