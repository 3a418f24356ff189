// NaN-rejecting checks are written as negated comparisons.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod geometry;
pub mod components;
pub mod integrators;
pub mod systems;
pub mod models;
pub mod training;
pub mod evaluation;
