// Negated comparisons deliberately treat NaN as failing the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod asymptotics;
pub mod carrying;
pub mod characteristics;
pub mod cli;
pub mod config;
pub mod dynamics;
pub mod expr;
pub mod model;
pub mod ode;
pub mod par;
pub mod quad;
pub mod solve;
