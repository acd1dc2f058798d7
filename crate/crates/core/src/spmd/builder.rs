use crate::ir::{infer_shape, CompareDir, ElementwiseOp, OpKind, Shape, TensorValue};
use crate::sharding::Sharding;

use super::program::{Collective, EinsumLoop, LoopUse, SpmdNode, SpmdNodeId, SpmdOp};

/// Appends SPMD instructions, inferring per-device shapes.
pub(crate) struct ProgBuilder {
    pub num_devices: usize,
    pub nodes: Vec<SpmdNode>,
    pub origin: Option<usize>,
    pid: Option<SpmdNodeId>,
}

impl ProgBuilder {
    pub fn new(num_devices: usize) -> Self {
        ProgBuilder { num_devices, nodes: Vec::new(), origin: None, pid: None }
    }

    pub fn shape(&self, id: SpmdNodeId) -> &Shape {
        &self.nodes[id].shape
    }

    fn push(&mut self, op: SpmdOp, operands: Vec<SpmdNodeId>, shape: Shape) -> SpmdNodeId {
        let id = self.nodes.len();
        self.nodes.push(SpmdNode { id, op, operands, shape, origin: self.origin });
        id
    }

    pub fn local(&mut self, op: OpKind, operands: Vec<SpmdNodeId>) -> SpmdNodeId {
        let shapes: Vec<Shape> = operands.iter().map(|&o| self.nodes[o].shape.clone()).collect();
        let shape = infer_shape(&op, &shapes).unwrap_or_else(|e| panic!("partitioner emitted invalid {}: {e}", op.name()));
        self.push(SpmdOp::Local(op), operands, shape)
    }

    pub fn collective(&mut self, c: Collective, x: SpmdNodeId) -> SpmdNodeId {
        let mut dims = self.shape(x).0.clone();
        match &c {
            Collective::AllReduce { .. } | Collective::CollectivePermute { .. } => {}
            Collective::AllGather { dim, groups } => dims[*dim] *= groups[0].len(),
            Collective::AllToAll { split_dim, concat_dim, groups } => {
                let g = groups[0].len();
                assert_eq!(dims[*split_dim] % g, 0, "all_to_all split dim not divisible");
                dims[*split_dim] /= g;
                dims[*concat_dim] *= g;
            }
            Collective::HaloExchange { dim, left, right, .. } => dims[*dim] += left + right,
        }
        self.push(SpmdOp::Collective(c), vec![x], Shape(dims))
    }

    pub fn einsum_loop(&mut self, l: EinsumLoop, stationary: SpmdNodeId, rotating: SpmdNodeId, position: SpmdNodeId) -> SpmdNodeId {
        let k = l.iterations();
        let mut st = self.shape(stationary).clone();
        let rot = self.shape(rotating).clone();
        if let LoopUse::Contract { stationary_dim } = l.usage {
            st.0[stationary_dim] = rot.dims()[l.rotate_dim];
        }
        let (lhs, rhs) = if l.stationary_is_lhs { (st, rot) } else { (rot, st) };
        let mut out = infer_shape(&OpKind::Einsum(l.spec.clone()), &[lhs, rhs]).expect("loop einsum shapes");
        if let LoopUse::Output { out_dim } = l.usage {
            out.0[out_dim] *= k;
        }
        self.push(SpmdOp::Loop(l), vec![stationary, rotating, position], out)
    }

    pub fn partition_id(&mut self) -> SpmdNodeId {
        if let Some(p) = self.pid {
            return p;
        }
        let p = self.push(SpmdOp::PartitionId, vec![], Shape::scalar());
        self.pid = Some(p);
        p
    }

    pub fn scalar(&mut self, v: f32) -> SpmdNodeId {
        self.local(OpKind::Constant { value: TensorValue::scalar(v) }, vec![])
    }

    pub fn ew(&mut self, e: ElementwiseOp, operands: Vec<SpmdNodeId>) -> SpmdNodeId {
        self.local(OpKind::Elementwise(e), operands)
    }

    /// Scalar holding `values[device]` on each device.
    pub fn per_device(&mut self, values: Vec<f32>) -> SpmdNodeId {
        assert_eq!(values.len(), self.num_devices);
        let n = values.len();
        let table = self.local(OpKind::Constant { value: TensorValue::new([n], values) }, vec![]);
        let pid = self.partition_id();
        let one = self.local(OpKind::DynamicSlice { sizes: vec![1] }, vec![table, pid]);
        self.local(OpKind::Reshape { shape: Shape::scalar() }, vec![one])
    }

    /// Scalar `f(tile)` where `tile` is the device's tile coordinate along `dim`.
    pub fn per_tile(&mut self, sharding: &Sharding, dim: usize, f: impl Fn(usize) -> i64) -> SpmdNodeId {
        let values = (0..self.num_devices)
            .map(|d| {
                let t = match sharding {
                    Sharding::Replicated => 0,
                    Sharding::Tiled(a) => a.tile_of(d).map_or(0, |c| c[dim]),
                };
                f(t) as f32
            })
            .collect();
        self.per_device(values)
    }

    /// Replaces elements whose global index along `dim` (local index plus
    /// `offset`) falls outside `[lo, hi)` with `fill`.
    pub fn mask_range(&mut self, x: SpmdNodeId, dim: usize, offset: SpmdNodeId, lo: Option<i64>, hi: Option<i64>, fill: f32) -> SpmdNodeId {
        if lo.is_none() && hi.is_none() {
            return x;
        }
        let shape = self.shape(x).clone();
        let iota = self.local(OpKind::Iota { dim, shape }, vec![]);
        let global = self.ew(ElementwiseOp::Add, vec![iota, offset]);
        let mut pred = None;
        if let Some(lo) = lo {
            let c = self.scalar(lo as f32);
            pred = Some(self.ew(ElementwiseOp::Compare(CompareDir::Ge), vec![global, c]));
        }
        if let Some(hi) = hi {
            let c = self.scalar(hi as f32);
            let p = self.ew(ElementwiseOp::Compare(CompareDir::Lt), vec![global, c]);
            pred = Some(match pred {
                Some(q) => self.ew(ElementwiseOp::Mul, vec![q, p]),
                None => p,
            });
        }
        let f = self.scalar(fill);
        self.ew(ElementwiseOp::Select, vec![pred.unwrap(), x, f])
    }

    /// Masks the uneven-split padding of `x` (sharded by `sharding` over
    /// `full`) along every padded dim.
    pub fn mask_padding(&mut self, x: SpmdNodeId, sharding: &Sharding, full: &Shape, dims: &[usize], fill: f32) -> SpmdNodeId {
        let ps = sharding.partition_shape(full);
        let mut cur = x;
        for &d in dims {
            if !ps.has_padding[d] {
                continue;
            }
            let p = ps.per_device_dims.dims()[d] as i64;
            let off = self.per_tile(sharding, d, |t| t as i64 * p);
            cur = self.mask_range(cur, d, off, None, Some(full.dims()[d] as i64), fill);
        }
        cur
    }

    pub fn into_nodes(self) -> Vec<SpmdNode> {
        self.nodes
    }
}
