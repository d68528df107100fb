//! Multi-view geometry core for ground-prior feature lifting and
//! homologous-point consistency across collaborating UAV cameras.
// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod depth;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod homologous;
pub mod io;
pub mod mapping;
pub mod pipeline;
pub mod scene;
pub mod sweep;

pub use error::{Error, Result};
