//! Sharding annotations, the annotation API and propagation.

mod api;
mod propagate;
mod types;

pub use api::{replicate, shard, split};
pub use propagate::{map_sharding, propagate, propagate_with_report, reshard_points, ReshardPoint};
pub use types::{DeviceAssignment, PartitionShape, Sharding};

use crate::ir::NodeId;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ShardingError {
    #[error("sharding has rank {sharding} but tensor has rank {tensor}")]
    RankMismatch { sharding: usize, tensor: usize },
    #[error("{requested} partitions requested but only {available} devices exist")]
    TooManyPartitions { requested: usize, available: usize },
    #[error("invalid device assignment: {0}")]
    InvalidAssignment(String),
    #[error("conflicting annotations at node %{node}: {detail}")]
    ConflictingAnnotations { node: NodeId, detail: String },
}
