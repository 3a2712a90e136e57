//! Planning, I/O bounds and simulated distributed execution of dense einsum
//! kernels.

pub mod cli;
pub mod distribution;
pub mod einsum;
pub mod executor;
pub mod planner;
pub mod redistribute;
pub mod soap;
pub mod suite;
pub mod tensor;
