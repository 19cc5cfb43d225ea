//! Toy-scale transformer inference and compression toolkit.
//!
//! The float path is the reference; the integer path runs every stage on
//! integer codes with a requantization at each boundary.

pub mod compress;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod eval;
pub mod explore;
pub mod fixture;
pub mod kernels;
pub mod model;
pub mod quant;
pub mod train;

pub use error::{Error, Result};

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
