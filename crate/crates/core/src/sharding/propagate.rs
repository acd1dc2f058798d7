//! Iterative forward/backward sharding propagation.

use crate::ir::{DimClass, EinsumSpec, Graph, NodeId, OpKind, Shape};

use super::{DeviceAssignment, Sharding, ShardingError};

/// A point where a node's sharding differs from what its operands imply.
#[derive(Clone, Debug, PartialEq)]
pub struct ReshardPoint {
    pub node: NodeId,
    pub from: Sharding,
    pub to: Sharding,
}

/// Re-expresses `src` (over dims named `src_letters`) for a tensor whose dims
/// are named `dst_letters`. Fails if a tiled letter has no destination.
pub fn map_sharding(src: &Sharding, src_letters: &[char], dst_letters: &[char]) -> Option<Sharding> {
    let a = match src {
        Sharding::Replicated => return Some(Sharding::Replicated),
        Sharding::Tiled(a) => a,
    };
    for (i, c) in src_letters.iter().enumerate() {
        if a.dims[i] > 1 && !dst_letters.contains(c) {
            return None;
        }
    }
    let count = |c: &char| src_letters.iter().position(|x| x == c).map_or(1, |p| a.dims[p]);
    let dims: Vec<usize> = dst_letters.iter().map(count).collect();
    if dims.iter().all(|&d| d == 1) {
        return Some(Sharding::Replicated);
    }
    let ids = crate::ir::IndexIter::new(&Shape(dims.clone()))
        .map(|coords| {
            let src_coords: Vec<usize> =
                src_letters.iter().map(|c| dst_letters.iter().position(|x| x == c).map_or(0, |p| coords[p])).collect();
            a.device_at(&src_coords)
        })
        .collect();
    Some(Sharding::Tiled(DeviceAssignment { dims, device_ids: ids }))
}

fn dim_letters(rank: usize) -> Vec<char> {
    (0..rank).map(|d| char::from(b'a' + d as u8)).collect()
}

/// Letter naming used to relate operand 0 and output dims of a non-einsum op,
/// or `None` when the op has no dim correspondence.
fn structural_letters(op: &OpKind, in_rank: usize, out_rank: usize) -> Option<(Vec<char>, Vec<char>)> {
    let inp = dim_letters(in_rank);
    match op {
        OpKind::Reduce { dims, .. } => {
            let out = (0..in_rank).filter(|d| !dims.contains(d)).map(|d| inp[d]).collect();
            Some((inp, out))
        }
        OpKind::OneHot { dim, .. } => {
            let mut out = inp.clone();
            out.insert(*dim, 'z');
            Some((inp, out))
        }
        OpKind::Convolution { .. } => {
            let mut out = inp.clone();
            out[1] = 'z';
            Some((inp, out))
        }
        OpKind::Reshape { .. } => None,
        _ if in_rank == out_rank => Some((inp.clone(), inp)),
        _ => None,
    }
}

/// Dims along which an op cannot stay tiled on operand 0.
fn blocked_dims(graph: &Graph, id: NodeId) -> Vec<usize> {
    let n = graph.node(id);
    match &n.op {
        OpKind::Cumsum { dim, .. } | OpKind::Softmax { dim } | OpKind::TopK { dim, .. } => vec![*dim],
        OpKind::Slice { stride, .. } => (0..stride.len()).filter(|&d| stride[d] != 1).collect(),
        OpKind::Pad { interior, .. } => (0..interior.len()).filter(|&d| interior[d] != 0).collect(),
        OpKind::DynamicSlice { sizes } => {
            let full = graph.shape(n.operands[0]).dims();
            (0..sizes.len()).filter(|&d| sizes[d] != full[d]).collect()
        }
        OpKind::Reduce { dims, .. } => dims.clone(),
        OpKind::Convolution { .. } => vec![1],
        _ => vec![],
    }
}

fn einsum_forward(spec: &EinsumSpec, l: Option<&Sharding>, r: Option<&Sharding>) -> Option<Sharding> {
    let tiled_letters = |s: &Sharding, letters: &[char]| -> Vec<char> { s.tiled_dims().into_iter().map(|d| letters[d]).collect() };
    let all_batch = |s: &Sharding, letters: &[char]| {
        let t = tiled_letters(s, letters);
        !t.is_empty() && t.iter().all(|&c| spec.classify(c) == Some(DimClass::Batch))
    };
    let sides = [(l, &spec.lhs), (r, &spec.rhs)];
    for (s, letters) in sides {
        if let Some(s) = s {
            if all_batch(s, letters) {
                return map_sharding(s, letters, &spec.out);
            }
        }
    }
    for (s, letters) in sides {
        if let Some(s) = s {
            if !s.is_replicated() {
                if let Some(m) = map_sharding(s, letters, &spec.out) {
                    return Some(m);
                }
            }
        }
    }
    if l.is_some() && r.is_some() {
        return Some(Sharding::Replicated);
    }
    None
}

/// Sharding implied for `id` by its operands' current shardings.
fn forward(graph: &Graph, id: NodeId, state: &[Option<Sharding>]) -> Option<Sharding> {
    let n = graph.node(id);
    let get = |o: NodeId| state[o].as_ref();
    match &n.op {
        OpKind::Parameter { .. } | OpKind::Constant { .. } | OpKind::Iota { .. } => None,
        OpKind::Elementwise(_) => {
            let full: Vec<NodeId> = n.operands.iter().copied().filter(|&o| graph.shape(o).rank() > 0).collect();
            if let Some(s) = full.iter().filter_map(|&o| get(o)).find(|s| !s.is_replicated()) {
                return Some(s.clone());
            }
            if full.iter().all(|&o| get(o).is_some()) {
                return Some(Sharding::Replicated);
            }
            None
        }
        OpKind::Einsum(spec) => einsum_forward(spec, get(n.operands[0]), get(n.operands[1])),
        OpKind::Reshape { shape } => {
            let s = get(n.operands[0])?;
            let in_shape = graph.shape(n.operands[0]);
            if s.is_replicated() {
                return Some(Sharding::Replicated);
            }
            if in_shape == shape {
                return Some(s.clone());
            }
            if s.single_tiled_dim() == Some(0) && shape.rank() > 0 && in_shape.rank() > 0 {
                let k = s.tiles_along(0);
                if let Sharding::Tiled(a) = s {
                    let mut dims = vec![1; shape.rank()];
                    dims[0] = k;
                    return Some(Sharding::Tiled(DeviceAssignment { dims, device_ids: a.device_ids.clone() }));
                }
            }
            Some(Sharding::Replicated)
        }
        op => {
            let s = get(n.operands[0])?;
            if s.tiled_dims().iter().any(|d| blocked_dims(graph, id).contains(d)) {
                return Some(Sharding::Replicated);
            }
            let (src, dst) = structural_letters(op, graph.shape(n.operands[0]).rank(), n.out_shape.rank())?;
            map_sharding(s, &src, &dst).or(Some(Sharding::Replicated))
        }
    }
}

/// Sharding suggested for operand `o` of `user` by the user's sharding.
fn backward(graph: &Graph, user: NodeId, o: NodeId, state: &[Option<Sharding>]) -> Option<Sharding> {
    let u = graph.node(user);
    let us = state[user].as_ref()?;
    let o_shape = graph.shape(o);
    match &u.op {
        OpKind::Elementwise(_) if o_shape == &u.out_shape => Some(us.clone()),
        OpKind::Einsum(spec) => {
            let letters = if u.operands[0] == o { &spec.lhs } else { &spec.rhs };
            map_sharding(us, &spec.out, letters)
        }
        OpKind::Pad { .. } | OpKind::Slice { .. } | OpKind::Reverse { .. } | OpKind::Softmax { .. } | OpKind::Cumsum { .. }
            if u.operands[0] == o =>
        {
            if us.tiled_dims().iter().any(|d| blocked_dims(graph, user).contains(d)) {
                return None;
            }
            Some(us.clone())
        }
        OpKind::Convolution { .. } if u.operands[0] == o => {
            let (src, dst) = structural_letters(&u.op, o_shape.rank(), u.out_shape.rank())?;
            map_sharding(us, &dst, &src)
        }
        _ => None,
    }
}

/// Propagates shardings until every node is annotated.
pub fn propagate(graph: &Graph, num_devices: usize) -> Result<Graph, ShardingError> {
    propagate_with_report(graph, num_devices).map(|(g, _)| g)
}

/// Like [`propagate`], also returning the points where data must be resharded.
pub fn propagate_with_report(graph: &Graph, num_devices: usize) -> Result<(Graph, Vec<ReshardPoint>), ShardingError> {
    let n = graph.len();
    let mut state: Vec<Option<Sharding>> = graph.nodes.iter().map(|n| n.sharding.clone()).collect();
    let mut strict: Vec<bool> = state.iter().map(Option::is_some).collect();
    for (i, s) in state.iter().enumerate() {
        if let Some(s) = s {
            s.validate_for(graph.shape(i))?;
            if s.num_tiles() > num_devices {
                return Err(ShardingError::TooManyPartitions { requested: s.num_tiles(), available: num_devices });
            }
        }
    }
    for (i, s) in state.iter_mut().enumerate() {
        if s.is_none() && graph.shape(i).rank() == 0 {
            *s = Some(Sharding::Replicated);
        }
    }
    let users = graph.users();

    loop {
        let mut changed = false;
        for i in 0..n {
            if state[i].is_some() {
                continue;
            }
            if let OpKind::Elementwise(_) = graph.node(i).op {
                check_conflict(graph, i, &state, &strict)?;
            }
            if let Some(s) = forward(graph, i, &state) {
                if let OpKind::Elementwise(_) = graph.node(i).op {
                    strict[i] = graph.node(i).operands.iter().any(|&o| strict[o] && state[o].as_ref() == Some(&s));
                }
                state[i] = Some(s);
                changed = true;
            }
        }
        for i in (0..n).rev() {
            if state[i].is_some() {
                continue;
            }
            let suggestion = users[i].iter().find_map(|&u| backward(graph, u, i, &state));
            if let Some(s) = suggestion {
                if s.validate_for(graph.shape(i)).is_ok() {
                    state[i] = Some(s);
                    changed = true;
                }
            }
        }
        if !changed {
            match state.iter().position(Option::is_none) {
                Some(i) => state[i] = Some(Sharding::Replicated),
                None => break,
            }
        }
    }

    let mut out = graph.clone();
    for (node, s) in out.nodes.iter_mut().zip(state) {
        node.sharding = s;
    }
    let report = reshard_points(&out);
    Ok((out, report))
}

fn check_conflict(graph: &Graph, id: NodeId, state: &[Option<Sharding>], strict: &[bool]) -> Result<(), ShardingError> {
    let mut seen: Option<(NodeId, &Sharding)> = None;
    for &o in &graph.node(id).operands {
        if !strict[o] || graph.shape(o).rank() == 0 {
            continue;
        }
        let Some(s) = state[o].as_ref() else { continue };
        if s.is_replicated() {
            continue;
        }
        match seen {
            None => seen = Some((o, s)),
            Some((p, ps)) if ps != s => {
                return Err(ShardingError::ConflictingAnnotations {
                    node: id,
                    detail: format!("operand %{p} is {ps} but operand %{o} is {s}"),
                });
            }
            _ => {}
        }
    }
    Ok(())
}

/// Nodes whose annotation differs from the sharding their operands imply.
pub fn reshard_points(graph: &Graph) -> Vec<ReshardPoint> {
    let state: Vec<Option<Sharding>> = graph.nodes.iter().map(|n| n.sharding.clone()).collect();
    let mut points = Vec::new();
    for node in &graph.nodes {
        let Some(to) = &node.sharding else { continue };
        if let Some(from) = forward(graph, node.id, &state) {
            if &from != to && !(from.is_replicated() && to.is_replicated()) {
                points.push(ReshardPoint { node: node.id, from, to: to.clone() });
            }
        }
    }
    points
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::GraphBuilder;

    #[test]
    fn gates_follow_inputs_on_g() {
        let mut b = GraphBuilder::new();
        let x = b.parameter("inputs", [4, 8, 6]);
        let wg = b.parameter("wg", [6, 4]);
        let gates = b.einsum("GSM,ME->GSE", x, wg);
        b.with_sharding(x, Sharding::split(3, 0, 4));
        b.with_sharding(wg, Sharding::Replicated);
        let g = propagate(&b.finish(), 4).unwrap();
        assert_eq!(g.node(gates).sharding, Some(Sharding::split(3, 0, 4)));
    }

    #[test]
    fn all_replicated_stays_replicated() {
        let mut b = GraphBuilder::new();
        let x = b.parameter("x", [4, 4]);
        let y = b.relu(x);
        let z = b.einsum("AB,BC->AC", y, x);
        b.reduce(z, crate::ir::ReduceOp::Add, vec![0]);
        b.with_sharding(x, Sharding::Replicated);
        let g = propagate(&b.finish(), 4).unwrap();
        assert!(g.nodes.iter().all(|n| n.sharding == Some(Sharding::Replicated)));
    }

    #[test]
    fn user_annotations_survive_and_reshard_is_reported() {
        let mut b = GraphBuilder::new();
        let comb = b.parameter("combine", [4, 8, 4, 2]);
        let x = b.parameter("inputs", [4, 8, 6]);
        let d = b.einsum("GSEC,GSM->EGCM", comb, x);
        b.with_sharding(comb, Sharding::split(4, 0, 4));
        b.with_sharding(x, Sharding::split(3, 0, 4));
        b.with_sharding(d, Sharding::split(4, 0, 4));
        let (g, report) = propagate_with_report(&b.finish(), 4).unwrap();
        assert_eq!(g.node(d).sharding, Some(Sharding::split(4, 0, 4)));
        assert_eq!(report.len(), 1);
        assert_eq!(report[0].node, d);
        assert_eq!(report[0].from, Sharding::split(4, 1, 4));
    }

    #[test]
    fn propagation_is_idempotent() {
        let mut b = GraphBuilder::new();
        let x = b.parameter("x", [8, 4]);
        let w = b.parameter("w", [4, 4]);
        let y = b.einsum("AB,BC->AC", x, w);
        let r = b.relu(y);
        b.reduce(r, crate::ir::ReduceOp::Max, vec![1]);
        b.with_sharding(x, Sharding::split(2, 0, 2));
        let once = propagate(&b.finish(), 2).unwrap();
        let twice = propagate(&once, 2).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn conflicting_strict_annotations() {
        let mut b = GraphBuilder::new();
        let x = b.parameter("x", [4, 4]);
        let y = b.parameter("y", [4, 4]);
        let rx = b.relu(x);
        let ry = b.exp(y);
        b.add(rx, ry);
        b.with_sharding(x, Sharding::split(2, 0, 2));
        b.with_sharding(y, Sharding::split(2, 1, 2));
        let err = propagate(&b.finish(), 2).unwrap_err();
        assert!(matches!(err, ShardingError::ConflictingAnnotations { node: 4, .. }));
    }

    #[test]
    fn map_sharding_transposes_grid() {
        let s = Sharding::Tiled(DeviceAssignment::natural(vec![2, 3]));
        let m = map_sharding(&s, &['a', 'b'], &['b', 'a']).unwrap();
        let a = m.assignment().unwrap();
        assert_eq!(a.dims, vec![3, 2]);
        assert_eq!(a.device_at(&[2, 1]), 5);
        assert!(map_sharding(&s, &['a', 'b'], &['a']).is_none());
    }
}
