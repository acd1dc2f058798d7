//! Lowering of annotated graphs to a single program run by every device.

mod builder;
mod einsum;
pub mod halo;
mod partition;
mod program;
mod windowed;

pub use partition::{partition_graph, partition_graph_with, PartitionError, PartitionOptions, DEFAULT_MEMORY_BUDGET};
pub use program::{
    Collective, CollectiveKind, EinsumLoop, InputBinding, LoopUse, OutputBinding, SpmdNode, SpmdNodeId, SpmdOp, SpmdProgram,
};
