use crate::ir::{Graph, NodeId, OpKind, ReduceOp, Shape};
use crate::sharding::{map_sharding, DeviceAssignment, Sharding};

use super::builder::ProgBuilder;
use super::halo::plan_realign;
use super::program::{Collective, InputBinding, OutputBinding, SpmdNodeId, SpmdProgram};

/// Default per-device memory budget for einsum operand replication.
pub const DEFAULT_MEMORY_BUDGET: usize = 64 << 20;

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionOptions {
    /// Bytes per device an einsum operand may occupy once replicated.
    pub memory_budget: usize,
    /// Allow halos wider than one neighbor's shard.
    pub allow_multi_hop: bool,
}

impl Default for PartitionOptions {
    fn default() -> Self {
        PartitionOptions { memory_budget: DEFAULT_MEMORY_BUDGET, allow_multi_hop: true }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PartitionError {
    #[error("node %{0} has no sharding; run propagation first")]
    NotAnnotated(NodeId),
    #[error("node %{node}: sharding spans {tiles} devices but the program targets {devices}")]
    PartitionCountMismatch { node: NodeId, tiles: usize, devices: usize },
    #[error("node %{node}: no partitioning rule for {op}")]
    UnsupportedOp { node: NodeId, op: String },
    #[error("node %{node}: halo of {halo} exceeds the neighbor shard of {shard}")]
    HaloExceedsNeighbor { node: NodeId, halo: usize, shard: usize },
    #[error("node %{node}: {detail}")]
    UnsupportedWindowConfig { node: NodeId, detail: String },
}

/// Lowers a fully annotated graph to one program run by all `num_devices` devices.
pub fn partition_graph(graph: &Graph, num_devices: usize) -> Result<SpmdProgram, PartitionError> {
    partition_graph_with(graph, num_devices, &PartitionOptions::default())
}

pub fn partition_graph_with(graph: &Graph, num_devices: usize, opts: &PartitionOptions) -> Result<SpmdProgram, PartitionError> {
    let mut shardings = Vec::with_capacity(graph.len());
    for n in &graph.nodes {
        let s = n.sharding.clone().ok_or(PartitionError::NotAnnotated(n.id))?;
        let s = if s.is_replicated() { Sharding::Replicated } else { s };
        if !s.is_replicated() && s.num_tiles() != num_devices {
            return Err(PartitionError::PartitionCountMismatch { node: n.id, tiles: s.num_tiles(), devices: num_devices });
        }
        shardings.push(s);
    }
    let mut p = Partitioner {
        g: graph,
        b: ProgBuilder::new(num_devices),
        opts: opts.clone(),
        shardings,
        vals: Vec::with_capacity(graph.len()),
        inputs: Vec::new(),
        zero: None,
    };
    for id in 0..graph.len() {
        p.b.origin = Some(id);
        let v = p.lower(id)?;
        p.vals.push(v);
    }
    let outputs = graph
        .roots()
        .into_iter()
        .map(|r| OutputBinding { graph_node: r, node: p.vals[r], full_shape: graph.shape(r).clone(), sharding: p.shardings[r].clone() })
        .collect();
    Ok(SpmdProgram { num_devices, nodes: p.b.into_nodes(), inputs: p.inputs, outputs })
}

pub(crate) struct Partitioner<'g> {
    pub g: &'g Graph,
    pub b: ProgBuilder,
    pub opts: PartitionOptions,
    pub shardings: Vec<Sharding>,
    pub vals: Vec<SpmdNodeId>,
    inputs: Vec<InputBinding>,
    zero: Option<SpmdNodeId>,
}

pub(crate) fn dim_letters(rank: usize) -> Vec<char> {
    (0..rank).map(|d| char::from(b'a' + d as u8)).collect()
}

impl Partitioner<'_> {
    pub fn per_device(&self, full: &Shape, s: &Sharding) -> Shape {
        s.per_device_shape(full)
    }

    pub fn zero_scalar(&mut self) -> SpmdNodeId {
        if let Some(z) = self.zero {
            return z;
        }
        let z = self.b.scalar(0.0);
        self.zero = Some(z);
        z
    }

    /// Start-index operands for a DynamicSlice that only varies along `dim`.
    pub fn starts_along(&mut self, rank: usize, dim: usize, start: SpmdNodeId) -> Vec<SpmdNodeId> {
        let z = self.zero_scalar();
        (0..rank).map(|d| if d == dim { start } else { z }).collect()
    }

    fn lower(&mut self, id: NodeId) -> Result<SpmdNodeId, PartitionError> {
        let node = self.g.node(id);
        let s_out = self.shardings[id].clone();
        let full = node.out_shape.clone();
        let per = self.per_device(&full, &s_out);
        match &node.op {
            OpKind::Parameter { name, .. } => {
                let v = self.b.local(OpKind::Parameter { name: name.clone(), shape: per }, vec![]);
                self.inputs.push(InputBinding { name: name.clone(), node: v, full_shape: full, sharding: s_out });
                Ok(v)
            }
            OpKind::Constant { .. } => {
                let c = self.b.local(node.op.clone(), vec![]);
                Ok(self.reshard(c, &full, &Sharding::Replicated, &s_out))
            }
            OpKind::Iota { dim, .. } => {
                let iota = self.b.local(OpKind::Iota { dim: *dim, shape: per.clone() }, vec![]);
                if s_out.tiles_along(*dim) == 1 {
                    return Ok(iota);
                }
                let p = per.dims()[*dim] as i64;
                let off = self.b.per_tile(&s_out, *dim, |t| t as i64 * p);
                Ok(self.b.ew(crate::ir::ElementwiseOp::Add, vec![iota, off]))
            }
            OpKind::Elementwise(_) => {
                let mut ops = Vec::new();
                for &o in &node.operands {
                    let v = self.vals[o];
                    let shape = self.g.shape(o).clone();
                    if shape.rank() == 0 {
                        ops.push(v);
                    } else {
                        let from = self.shardings[o].clone();
                        ops.push(self.reshard(v, &shape, &from, &s_out));
                    }
                }
                Ok(self.b.local(node.op.clone(), ops))
            }
            OpKind::Einsum(spec) => self.lower_einsum(id, spec),
            OpKind::Convolution { window } => self.lower_convolution(id, window),
            OpKind::Pad { .. } | OpKind::Slice { .. } | OpKind::Reverse { .. } => self.lower_format(id),
            OpKind::Reshape { .. } => self.lower_reshape(id),
            OpKind::Reduce { op, dims } => Ok(self.lower_reduce(id, *op, dims)),
            OpKind::Cumsum { .. } | OpKind::Softmax { .. } | OpKind::TopK { .. } | OpKind::OneHot { .. } | OpKind::DynamicSlice { .. } => {
                Ok(self.lower_structural(id))
            }
        }
    }

    /// Runs the op on the full (replicated) operands, then slices the result.
    fn lower_replicated(&mut self, id: NodeId) -> SpmdNodeId {
        let node = self.g.node(id);
        let mut ops = Vec::new();
        for &o in &node.operands {
            let shape = self.g.shape(o).clone();
            let from = self.shardings[o].clone();
            ops.push(self.reshard(self.vals[o], &shape, &from, &Sharding::Replicated));
        }
        let r = self.b.local(node.op.clone(), ops);
        let s_out = self.shardings[id].clone();
        self.reshard(r, &node.out_shape, &Sharding::Replicated, &s_out)
    }

    fn lower_structural(&mut self, id: NodeId) -> SpmdNodeId {
        let node = self.g.node(id);
        let s_out = self.shardings[id].clone();
        let x = node.operands[0];
        let in_shape = self.g.shape(x).clone();
        let in_rank = in_shape.rank();
        let out_letters = dim_letters(node.out_shape.rank());
        let (in_letters, blocked): (Vec<char>, Vec<usize>) = match &node.op {
            OpKind::OneHot { dim, .. } => {
                let mut l = out_letters.clone();
                l.remove(*dim);
                (l, vec![*dim])
            }
            OpKind::DynamicSlice { sizes } => {
                let blocked = (0..in_rank).filter(|&d| sizes[d] != in_shape.dims()[d]).collect();
                (out_letters.clone(), blocked)
            }
            OpKind::Cumsum { dim, .. } | OpKind::Softmax { dim } | OpKind::TopK { dim, .. } => (out_letters.clone(), vec![*dim]),
            _ => unreachable!(),
        };
        if s_out.tiled_dims().iter().any(|d| blocked.contains(d)) {
            return self.lower_replicated(id);
        }
        let Some(want) = map_sharding(&s_out, &out_letters, &in_letters) else {
            return self.lower_replicated(id);
        };
        let from = self.shardings[x].clone();
        let xv = self.reshard(self.vals[x], &in_shape, &from, &want);
        let mut ops = vec![xv];
        ops.extend(node.operands[1..].iter().map(|&o| self.vals[o]));
        let op = match &node.op {
            OpKind::DynamicSlice { .. } => OpKind::DynamicSlice { sizes: self.per_device(&node.out_shape, &s_out).0 },
            other => other.clone(),
        };
        self.b.local(op, ops)
    }

    fn lower_reduce(&mut self, id: NodeId, op: ReduceOp, dims: &[usize]) -> SpmdNodeId {
        let node = self.g.node(id);
        let x = node.operands[0];
        let full = self.g.shape(x).clone();
        let s_in = self.shardings[x].clone();
        let s_out = self.shardings[id].clone();
        let tiled = s_in.tiled_dims();
        let in_letters = dim_letters(full.rank());
        let out_letters: Vec<char> = (0..full.rank()).filter(|d| !dims.contains(d)).map(|d| in_letters[d]).collect();
        let local_op = OpKind::Reduce { op, dims: dims.to_vec() };
        if tiled.iter().all(|d| !dims.contains(d)) {
            let r = self.b.local(local_op, vec![self.vals[x]]);
            let natural = map_sharding(&s_in, &in_letters, &out_letters).expect("kept dims");
            return self.reshard(r, &node.out_shape, &natural, &s_out);
        }
        if tiled.iter().all(|d| dims.contains(d)) {
            let masked = self.b.mask_padding(self.vals[x], &s_in, &full, &tiled, op.identity());
            let r = self.b.local(local_op, vec![masked]);
            let all = vec![(0..self.b.num_devices).collect()];
            let sum = self.b.collective(Collective::AllReduce { op, groups: all }, r);
            return self.reshard(sum, &node.out_shape, &Sharding::Replicated, &s_out);
        }
        self.lower_replicated(id)
    }

    fn lower_reshape(&mut self, id: NodeId) -> Result<SpmdNodeId, PartitionError> {
        let node = self.g.node(id);
        let x = node.operands[0];
        let in_full = self.g.shape(x).clone();
        let out_full = node.out_shape.clone();
        let s_in = self.shardings[x].clone();
        let s_out = self.shardings[id].clone();
        if s_in.is_replicated() {
            let r = self.b.local(OpKind::Reshape { shape: out_full.clone() }, vec![self.vals[x]]);
            return Ok(self.reshard(r, &out_full, &Sharding::Replicated, &s_out));
        }
        let leading = |s: &Sharding| match s {
            Sharding::Tiled(a) if s.single_tiled_dim() == Some(0) => Some((a.dims[0], a.device_ids.clone())),
            _ => None,
        };
        match (leading(&s_in), leading(&s_out)) {
            (Some((k, ids_in)), Some((k2, ids_out))) if k == k2 && ids_in == ids_out => {
                let per_out = self.per_device(&out_full, &s_out);
                if in_full.dims()[0] == out_full.dims()[0] {
                    return Ok(self.b.local(OpKind::Reshape { shape: per_out }, vec![self.vals[x]]));
                }
                let per_in = self.per_device(&in_full, &s_in);
                let flat_in = per_in.num_elements();
                let flat_out = per_out.num_elements();
                let flat = self.b.local(OpKind::Reshape { shape: Shape(vec![flat_in]) }, vec![self.vals[x]]);
                let s1 = Sharding::Tiled(DeviceAssignment { dims: vec![k], device_ids: ids_in });
                let n = in_full.num_elements();
                let moved = self.realign(id, flat, &s1, 0, flat_in, flat_out, 0, n, n, 0.0)?;
                Ok(self.b.local(OpKind::Reshape { shape: per_out }, vec![moved]))
            }
            _ => Ok(self.lower_replicated(id)),
        }
    }

    /// Pad, Slice and Reverse: local work on untiled dims, realignment on tiled ones.
    fn lower_format(&mut self, id: NodeId) -> Result<SpmdNodeId, PartitionError> {
        let node = self.g.node(id);
        let x = node.operands[0];
        let in_full = self.g.shape(x).clone();
        let rank = in_full.rank();
        let s_in = self.shardings[x].clone();
        let s_out = self.shardings[id].clone();
        let tiled = s_in.tiled_dims();
        let unsupported = match &node.op {
            OpKind::Slice { stride, .. } => tiled.iter().any(|&d| stride[d] != 1),
            OpKind::Pad { interior, .. } => tiled.iter().any(|&d| interior[d] != 0),
            _ => false,
        };
        if unsupported {
            return Ok(self.lower_replicated(id));
        }
        let per_in = self.per_device(&in_full, &s_in);
        let is_tiled = |d: usize| tiled.contains(&d);

        let mut cur = self.vals[x];
        let mut cur_full = in_full.clone();
        match &node.op {
            OpKind::Pad { low, high, interior, value } => {
                let z = |v: &Vec<usize>| (0..rank).map(|d| if is_tiled(d) { 0 } else { v[d] }).collect::<Vec<_>>();
                let (l, h, i) = (z(low), z(high), z(interior));
                if l.iter().chain(&h).chain(&i).any(|&v| v != 0) {
                    cur = self.b.local(OpKind::Pad { low: l, high: h, interior: i, value: *value }, vec![cur]);
                }
                for d in 0..rank {
                    if !is_tiled(d) {
                        cur_full.0[d] = node.out_shape.dims()[d];
                    }
                }
                for &d in &tiled {
                    if low[d] == 0 && high[d] == 0 {
                        continue;
                    }
                    let n_out = node.out_shape.dims()[d];
                    cur = self.realign_dim(id, cur, &s_in, d, &cur_full, n_out, -(low[d] as i64), *value)?;
                    cur_full.0[d] = n_out;
                }
            }
            OpKind::Slice { start, limit, stride } => {
                let local_needed = (0..rank).any(|d| !is_tiled(d) && (start[d] != 0 || limit[d] != in_full.dims()[d] || stride[d] != 1));
                if local_needed {
                    let st = (0..rank).map(|d| if is_tiled(d) { 0 } else { start[d] }).collect();
                    let li = (0..rank).map(|d| if is_tiled(d) { per_in.dims()[d] } else { limit[d] }).collect();
                    let sr = (0..rank).map(|d| if is_tiled(d) { 1 } else { stride[d] }).collect();
                    cur = self.b.local(OpKind::Slice { start: st, limit: li, stride: sr }, vec![cur]);
                }
                for d in 0..rank {
                    if !is_tiled(d) {
                        cur_full.0[d] = node.out_shape.dims()[d];
                    }
                }
                for &d in &tiled {
                    let n_out = limit[d] - start[d];
                    if start[d] == 0 && n_out == in_full.dims()[d] {
                        continue;
                    }
                    cur = self.realign_dim(id, cur, &s_in, d, &cur_full, n_out, start[d] as i64, 0.0)?;
                    cur_full.0[d] = n_out;
                }
            }
            OpKind::Reverse { dims } => {
                let local: Vec<usize> = dims.iter().copied().filter(|&d| !is_tiled(d)).collect();
                if !local.is_empty() {
                    cur = self.b.local(OpKind::Reverse { dims: local }, vec![cur]);
                }
                for &d in dims.iter().filter(|&&d| is_tiled(d)) {
                    cur = self.reverse_dim(id, cur, &s_in, d, &cur_full)?;
                }
            }
            _ => unreachable!(),
        }
        Ok(self.reshard(cur, &node.out_shape, &s_in, &s_out))
    }

    fn reverse_dim(&mut self, id: NodeId, x: SpmdNodeId, s: &Sharding, d: usize, full: &Shape) -> Result<SpmdNodeId, PartitionError> {
        let a = s.assignment().expect("tiled").clone();
        let k = a.dims[d];
        let n = full.dims()[d];
        let p = n.div_ceil(k);
        let pairs = (0..self.b.num_devices)
            .map(|dev| {
                let mut c = a.tile_of(dev).expect("device in assignment");
                c[d] = k - 1 - c[d];
                (dev, a.device_at(&c))
            })
            .collect();
        let swapped = self.b.collective(Collective::CollectivePermute { pairs }, x);
        let flipped = self.b.local(OpKind::Reverse { dims: vec![d] }, vec![swapped]);
        let shift = (k * p - n) as i64;
        self.realign(id, flipped, s, d, p, p, shift, k * p, n, 0.0)
    }

    /// Realigns tiled dim `d` so output element `o` holds source `o + shift`,
    /// filling out-of-range sources with `fill`.
    #[allow(clippy::too_many_arguments)]
    fn realign_dim(
        &mut self,
        id: NodeId,
        x: SpmdNodeId,
        s: &Sharding,
        d: usize,
        full: &Shape,
        n_out: usize,
        shift: i64,
        fill: f32,
    ) -> Result<SpmdNodeId, PartitionError> {
        let k = s.tiles_along(d);
        let n_src = full.dims()[d];
        self.realign(id, x, s, d, n_src.div_ceil(k), n_out.div_ceil(k), shift, n_src, n_out, fill)
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn realign(
        &mut self,
        id: NodeId,
        x: SpmdNodeId,
        s: &Sharding,
        d: usize,
        per_in: usize,
        per_out: usize,
        shift: i64,
        n_src: usize,
        n_out: usize,
        fill: f32,
    ) -> Result<SpmdNodeId, PartitionError> {
        let k = s.tiles_along(d);
        let plan = plan_realign(d, per_in, per_out, shift, k);
        self.check_halo(id, plan.halo.max_left.max(plan.halo.max_right), per_in)?;
        let groups = s.assignment().expect("tiled").groups_along(d);
        let ext = self.b.collective(Collective::HaloExchange { dim: d, left: plan.halo.max_left, right: plan.halo.max_right, groups }, x);
        let start = self.b.per_tile(s, d, |t| plan.start(t));
        let mut sizes = self.b.shape(ext).0.clone();
        sizes[d] = per_out;
        let rank = sizes.len();
        let mut ops = vec![ext];
        ops.extend(self.starts_along(rank, d, start));
        let sliced = self.b.local(OpKind::DynamicSlice { sizes }, ops);
        let need_lo = shift < 0;
        let need_hi = n_out as i64 - 1 + shift >= n_src as i64;
        if !need_lo && !need_hi {
            return Ok(sliced);
        }
        let off = self.b.per_tile(s, d, |t| (t * per_out) as i64 + shift);
        Ok(self.b.mask_range(sliced, d, off, need_lo.then_some(0), need_hi.then_some(n_src as i64), fill))
    }

    pub(crate) fn check_halo(&self, id: NodeId, halo: usize, shard: usize) -> Result<(), PartitionError> {
        if !self.opts.allow_multi_hop && halo > shard {
            return Err(PartitionError::HaloExceedsNeighbor { node: id, halo, shard });
        }
        Ok(())
    }

    /// Converts a value of full shape `full` from sharding `from` to `to`.
    pub fn reshard(&mut self, x: SpmdNodeId, full: &Shape, from: &Sharding, to: &Sharding) -> SpmdNodeId {
        if from == to || (from.is_replicated() && to.is_replicated()) {
            return x;
        }
        if to.is_replicated() {
            return self.gather_all(x, full, from);
        }
        if from.is_replicated() {
            return self.slice_replicated(x, full, to);
        }
        if let (Some(dx), Some(dy)) = (from.single_tiled_dim(), to.single_tiled_dim()) {
            if from.tiles_along(dx) == to.tiles_along(dy) {
                return self.all_to_all(x, full, from, to, dx, dy);
            }
        }
        let r = self.gather_all(x, full, from);
        self.slice_replicated(r, full, to)
    }

    fn gather_all(&mut self, x: SpmdNodeId, full: &Shape, from: &Sharding) -> SpmdNodeId {
        let a = from.assignment().expect("tiled").clone();
        let mut cur = x;
        for d in from.tiled_dims() {
            cur = self.b.collective(Collective::AllGather { dim: d, groups: a.groups_along(d) }, cur);
        }
        let rank = full.rank();
        self.b.local(OpKind::Slice { start: vec![0; rank], limit: full.0.clone(), stride: vec![1; rank] }, vec![cur])
    }

    fn slice_replicated(&mut self, x: SpmdNodeId, full: &Shape, to: &Sharding) -> SpmdNodeId {
        let ps = to.partition_shape(full);
        let rank = full.rank();
        let high: Vec<usize> = (0..rank).map(|d| ps.padded_full_dims.dims()[d] - full.dims()[d]).collect();
        let padded = self.b.local(OpKind::Pad { low: vec![0; rank], high, interior: vec![0; rank], value: 0.0 }, vec![x]);
        let mut ops = vec![padded];
        for d in 0..rank {
            if to.tiles_along(d) > 1 {
                let p = ps.per_device_dims.dims()[d] as i64;
                ops.push(self.b.per_tile(to, d, |t| t as i64 * p));
            } else {
                ops.push(self.zero_scalar());
            }
        }
        self.b.local(OpKind::DynamicSlice { sizes: ps.per_device_dims.0 }, ops)
    }

    fn all_to_all(&mut self, x: SpmdNodeId, full: &Shape, from: &Sharding, to: &Sharding, dx: usize, dy: usize) -> SpmdNodeId {
        let a = from.assignment().expect("tiled").clone();
        let b = to.assignment().expect("tiled").clone();
        let rank = full.rank();
        if dx == dy {
            let pairs = (0..self.b.num_devices).map(|dev| (dev, b.device_at(&a.tile_of(dev).expect("device in assignment")))).collect();
            return self.b.collective(Collective::CollectivePermute { pairs }, x);
        }
        let k = a.dims[dx];
        let per_y = full.dims()[dy].div_ceil(k);
        let mut high = vec![0; rank];
        high[dy] = per_y * k - full.dims()[dy];
        let padded = self.b.local(OpKind::Pad { low: vec![0; rank], high, interior: vec![0; rank], value: 0.0 }, vec![x]);
        let groups = a.groups_along(dx);
        let exchanged = self.b.collective(Collective::AllToAll { split_dim: dy, concat_dim: dx, groups: groups.clone() }, padded);
        let mut limit = self.b.shape(exchanged).0.clone();
        limit[dx] = full.dims()[dx];
        let trimmed = self.b.local(OpKind::Slice { start: vec![0; rank], limit, stride: vec![1; rank] }, vec![exchanged]);
        // Member j of the group now holds tile j along dy.
        let mut pairs = Vec::new();
        let mut moved = false;
        for g in &groups {
            for (j, &dev) in g.iter().enumerate() {
                let mut c = vec![0; rank];
                c[dy] = j;
                let dest = b.device_at(&c);
                moved |= dest != dev;
                pairs.push((dev, dest));
            }
        }
        if !moved {
            return trimmed;
        }
        self.b.collective(Collective::CollectivePermute { pairs }, trimmed)
    }
}
