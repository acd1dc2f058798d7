//! Sharding annotations, SPMD partitioning and a simulated device mesh for
//! static-shape tensor graphs.

pub mod corpus;
pub mod cost;
pub mod interp;
pub mod ir;
pub mod moe;
pub mod rng;
pub mod runtime;
pub mod sharding;
pub mod spmd;
pub mod verify;
