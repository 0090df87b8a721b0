//! Numerical certification of strong local optimality for Pontryagin
//! extremals: configuration, pipeline orchestration and artifact output.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod app;
pub mod config;
pub mod output;
pub mod pipeline;
pub mod plot;
pub mod report;
