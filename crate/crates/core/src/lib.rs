// NaN-rejecting comparisons are written as negations on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod activation;
pub mod error;
pub mod experiments;
pub mod forward;
pub mod grid;
pub mod linalg;
pub mod mollify;
pub mod operator;
pub mod regularize;
pub mod textfmt;
pub mod training;
pub mod verify;
