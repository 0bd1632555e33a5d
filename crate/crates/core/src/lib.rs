// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classify;
pub mod events;
pub mod experiment;
pub mod features;
pub mod geometry;
pub mod io;
pub mod seeds;
pub mod sim;
