// Negated comparisons deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod conic;
pub mod error;
pub mod harness;
pub mod model;
pub mod qnm;
pub mod region;
