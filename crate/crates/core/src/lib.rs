//! Fixed-step simulation of digital memcomputing machines (DMMs) on
//! planted 3-SAT, and the directed-percolation model of the
//! solvable-unsolvable transition they exhibit as the time step grows.

pub mod cli;
pub mod dmm;
pub mod dp;
pub mod fitting;
pub mod harness;
pub mod instances;
pub mod integrators;
pub mod seeds;
