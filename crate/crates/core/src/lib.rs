//! Zero-order SQP for Gaussian-process model predictive control.
//!
//! The crate solves the deterministic approximation of a GP-MPC problem, in
//! which the state mean is propagated through nominal dynamics plus a GP
//! residual and the state covariance through the linearized dynamics. Two
//! drivers are provided:
//!
//! * [`sqp::solve_zero_order`] drops the covariance Jacobian with respect to
//!   the mean trajectory, so covariances are propagated outside the QP and the
//!   QP keeps the size of a nominal MPC problem (cubic in the state dimension).
//! * [`sqp::solve_naive`] carries the symmetric covariance entries as extra
//!   states and solves the full, exact-Jacobian SQP (sixth power in the state
//!   dimension).
//!
//! Supporting modules implement exact GP inference ([`gp`]), the hanging-chain
//! model with a Gauss-Legendre integrator ([`dynamics`]), covariance
//! propagation and chance-constraint tightening ([`uncertainty`]) and the
//! structured interior-point QP solver ([`qp`]). [`benchmark`] builds the
//! hanging-chain OCPs, training data and closed-loop simulations.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod benchmark;
pub mod dynamics;
pub mod error;
pub mod gp;
pub mod linalg;
pub mod qp;
pub mod sqp;
pub mod uncertainty;

pub use error::{Error, Result};

pub use nalgebra::{DMatrix, DVector};
