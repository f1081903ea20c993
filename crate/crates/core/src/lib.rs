//! Background activation suppression (BAS) for weakly supervised object
//! localization and semantic segmentation, at desk scale.
//!
//! The crate bundles a small reverse-mode autodiff core ([`tensor`]), the
//! extractor / generator / activation-map-constraint network ([`model`]), its
//! objective terms ([`losses`]), a synthetic shapes dataset ([`synth`]), the
//! training loop ([`train`]), localization and segmentation metrics
//! ([`eval`]), and the mask-area exploration experiment ([`explore`]).

pub mod error;
pub mod eval;
pub mod explore;
pub mod losses;
pub mod maps;
pub mod model;
pub mod par;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use par::Execution;
pub use tensor::{Graph, Real, Tensor, Var};
