// `!(x > 0.0)` is used on purpose so NaN inputs take the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod cli;
pub mod estimation;
pub mod exec;
pub mod geometry;
pub mod linalg;
pub mod models;
pub mod rng;
pub mod verify;
