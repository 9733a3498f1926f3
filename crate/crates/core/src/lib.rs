//! Transient diffusion forward modelling and inversion. The matrix
//! exponential is applied through a rational approximant with poles shared by
//! all time channels, so one factorization per pole serves every channel, the
//! Jacobian products and the Gauss-Newton updates.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod forward;
pub mod inversion;
pub mod linalg;
pub mod lsqr;
pub mod mesh_assembly;
pub mod rba;
pub mod regularization;
pub mod reporting;
pub mod sensitivity;
pub mod shifted_solver;
pub mod synthetic_data;

pub use error::{Error, Result};
