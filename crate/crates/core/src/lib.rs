// Negated comparisons are how NaN inputs get rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cda;
pub mod detect;
pub mod geometry;
pub mod metrics;
pub mod pipeline;
pub mod position;
pub mod refine;
pub mod scenario;
pub mod sdmap;
