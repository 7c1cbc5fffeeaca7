#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod carbon;
pub mod config;
pub mod engine;
pub mod error;
pub mod hbm;
pub mod host;
pub mod model;
pub mod precision;
pub mod report;
pub mod trace;
