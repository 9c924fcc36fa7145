//! Numeric kernels. Each forward has a matching hand-written backward used by
//! [`crate::graph::Graph`].

pub mod attention;
pub mod conv;
pub mod deform;
pub mod norm;
pub mod resample;
