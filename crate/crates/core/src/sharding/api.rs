use crate::ir::{Graph, NodeId};

use super::{DeviceAssignment, Sharding, ShardingError};

/// Marks `node` as replicated on every device.
pub fn replicate(graph: &mut Graph, node: NodeId) -> NodeId {
    graph.annotate(node, Sharding::Replicated);
    node
}

/// Partitions `node` along `dim` into `parts` pieces in natural device order.
pub fn split(graph: &mut Graph, node: NodeId, dim: usize, parts: usize, num_devices: usize) -> Result<NodeId, ShardingError> {
    let rank = graph.shape(node).rank();
    if dim >= rank {
        return Err(ShardingError::RankMismatch { sharding: dim + 1, tensor: rank });
    }
    if parts > num_devices {
        return Err(ShardingError::TooManyPartitions { requested: parts, available: num_devices });
    }
    if parts == 0 {
        return Err(ShardingError::InvalidAssignment("zero partitions".into()));
    }
    graph.annotate(node, Sharding::split(rank, dim, parts));
    Ok(node)
}

/// Attaches a general device assignment to `node`.
pub fn shard(graph: &mut Graph, node: NodeId, assignment: DeviceAssignment, num_devices: usize) -> Result<NodeId, ShardingError> {
    assignment.check()?;
    if assignment.num_tiles() > num_devices {
        return Err(ShardingError::TooManyPartitions { requested: assignment.num_tiles(), available: num_devices });
    }
    let s = Sharding::Tiled(assignment);
    s.validate_for(graph.shape(node))?;
    graph.annotate(node, s);
    Ok(node)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{GraphBuilder, Shape};

    #[test]
    fn split_then_refine() {
        let mut b = GraphBuilder::new();
        let x = b.parameter("x", [3, 16, 64]);
        let mut g = b.finish();
        split(&mut g, x, 1, 2, 8).unwrap();
        let per = g.node(x).sharding.as_ref().unwrap().per_device_shape(g.shape(x));
        assert_eq!(per, Shape::from([3, 8, 64]));
        shard(&mut g, x, DeviceAssignment::natural(vec![1, 2, 4]), 8).unwrap();
        let per = g.node(x).sharding.as_ref().unwrap().per_device_shape(g.shape(x));
        assert_eq!(per, Shape::from([3, 8, 16]));
    }

    #[test]
    fn replicate_keeps_full_shape() {
        let mut b = GraphBuilder::new();
        let x = b.parameter("x", [4, 4]);
        let mut g = b.finish();
        replicate(&mut g, x);
        assert_eq!(g.node(x).sharding.as_ref().unwrap().per_device_shape(g.shape(x)), Shape::from([4, 4]));
    }

    #[test]
    fn errors() {
        let mut b = GraphBuilder::new();
        let x = b.parameter("x", [4, 4]);
        let mut g = b.finish();
        assert!(matches!(split(&mut g, x, 2, 2, 4), Err(ShardingError::RankMismatch { .. })));
        assert!(matches!(split(&mut g, x, 0, 8, 4), Err(ShardingError::TooManyPartitions { .. })));
        assert!(matches!(shard(&mut g, x, DeviceAssignment::natural(vec![2]), 4), Err(ShardingError::RankMismatch { .. })));
    }
}
