//! Numerical certification of strong local optimality for Pontryagin
//! extremals via Hamiltonian flows from a horizontal Lagrangian manifold.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod builtins;
pub mod extremal;
pub mod flowsheet;
pub mod geometry;
pub mod ode;
pub mod perturb;
pub mod problem;
pub mod quadrature;
pub mod verify;
