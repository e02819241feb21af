//! Symmetric diffeomorphic image registration driven by learned control
//! increments.
//!
//! The crate is organized bottom-up:
//!
//! * [`field`]: regular-grid scalar and vector fields
//! * [`deformation`]: warping, composition, Jacobians
//! * [`dynamics`]: homotopy map, Euler stepping, continuity residual,
//!   scaling-and-squaring
//! * [`autodiff`]: a small reverse-mode tape over dense tensors
//! * [`network`]: feature pyramid, gated increment block, symmetric cascade
//! * [`objectives`]: training losses and evaluation metrics
//! * [`pipeline`]: synthetic data, training, evaluation, file formats

// `!(x > 0.0)` is how argument checks reject NaN; kernels take their
// full geometry explicitly.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod autodiff;
pub mod deformation;
pub mod dynamics;
pub mod error;
pub mod field;
pub mod network;
pub mod objectives;
pub mod pipeline;

pub use deformation::{DeformationField, JacobianReport, LabelField};
pub use error::{Error, Result};
pub use field::{GridShape, ScalarField, VectorField};
