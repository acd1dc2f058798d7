use crate::ir::{DimClass, EinsumSpec, NodeId, OpKind, ReduceOp, Shape};
use crate::sharding::{map_sharding, Sharding};

use super::partition::{PartitionError, Partitioner};
use super::program::{Collective, EinsumLoop, LoopUse, SpmdNodeId};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Role {
    Rep,
    Batch,
    Contract(char),
    Reduced,
    NonContract,
    Other,
}

fn role(s: &Sharding, letters: &[char], spec: &EinsumSpec) -> Role {
    if s.is_replicated() {
        return Role::Rep;
    }
    let Some(d) = s.single_tiled_dim() else { return Role::Other };
    let c = letters[d];
    match spec.classify(c) {
        Some(DimClass::Batch) => Role::Batch,
        Some(DimClass::Contracting) => Role::Contract(c),
        Some(DimClass::LhsReduced | DimClass::RhsReduced) => Role::Reduced,
        Some(DimClass::LhsNonContracting | DimClass::RhsNonContracting) => Role::NonContract,
        None => Role::Other,
    }
}

#[derive(Clone)]
struct Side {
    val: SpmdNodeId,
    full: Shape,
    s: Sharding,
    letters: Vec<char>,
}

impl Partitioner<'_> {
    pub(crate) fn lower_einsum(&mut self, id: NodeId, spec: &EinsumSpec) -> Result<SpmdNodeId, PartitionError> {
        let node = self.g.node(id);
        let side = |p: &Self, o: NodeId, letters: &[char]| Side {
            val: p.vals[o],
            full: p.g.shape(o).clone(),
            s: p.shardings[o].clone(),
            letters: letters.to_vec(),
        };
        let l = side(self, node.operands[0], &spec.lhs);
        let r = side(self, node.operands[1], &spec.rhs);
        let out_full = node.out_shape.clone();
        let s_out = self.shardings[id].clone();
        let (kl, kr) = (role(&l.s, &l.letters, spec), role(&r.s, &r.letters, spec));

        let (val, s_res) = match (kl, kr) {
            (Role::Batch, _) => self.einsum_driven(spec, &l, &r, true),
            (_, Role::Batch) => self.einsum_driven(spec, &r, &l, false),
            (Role::Contract(a), Role::Contract(b)) if a == b => self.einsum_contract(spec, &l, &r, true),
            (Role::Contract(_) | Role::Reduced, Role::Rep) => self.einsum_contract(spec, &l, &r, true),
            (Role::Rep, Role::Contract(_) | Role::Reduced) => self.einsum_contract(spec, &r, &l, false),
            (Role::NonContract, Role::Rep) | (Role::Rep, Role::NonContract) | (Role::Rep, Role::Rep) => {
                let v = self.b.local(OpKind::Einsum(spec.clone()), vec![l.val, r.val]);
                let driver = if kl == Role::Rep { &r } else { &l };
                (v, map_sharding(&driver.s, &driver.letters, &spec.out).unwrap_or(Sharding::Replicated))
            }
            (Role::NonContract, Role::NonContract) if map_sharding(&r.s, &r.letters, &spec.out).as_ref() == Some(&s_out) => {
                self.einsum_gather_or_loop(spec, &r, &l, false)
            }
            (Role::NonContract, Role::NonContract | Role::Contract(_)) => self.einsum_gather_or_loop(spec, &l, &r, true),
            (Role::Contract(_), Role::NonContract) => self.einsum_gather_or_loop(spec, &r, &l, false),
            _ => self.einsum_replicated(spec, &l, &r),
        };
        Ok(self.reshard(val, &out_full, &s_res, &s_out))
    }

    fn local_einsum(&mut self, spec: &EinsumSpec, a: SpmdNodeId, b: SpmdNodeId, a_is_lhs: bool) -> SpmdNodeId {
        let ops = if a_is_lhs { vec![a, b] } else { vec![b, a] };
        self.b.local(OpKind::Einsum(spec.clone()), ops)
    }

    fn einsum_replicated(&mut self, spec: &EinsumSpec, l: &Side, r: &Side) -> (SpmdNodeId, Sharding) {
        let lv = self.reshard(l.val, &l.full, &l.s, &Sharding::Replicated);
        let rv = self.reshard(r.val, &r.full, &r.s, &Sharding::Replicated);
        (self.local_einsum(spec, lv, rv, true), Sharding::Replicated)
    }

    /// Driver tiled on a batch letter: align the other operand and compute locally.
    fn einsum_driven(&mut self, spec: &EinsumSpec, x: &Side, o: &Side, x_is_lhs: bool) -> (SpmdNodeId, Sharding) {
        let target = map_sharding(&x.s, &x.letters, &o.letters).expect("batch letter present in both operands");
        let ov = self.reshard(o.val, &o.full, &o.s, &target);
        let v = self.local_einsum(spec, x.val, ov, x_is_lhs);
        (v, map_sharding(&x.s, &x.letters, &spec.out).expect("batch letter in output"))
    }

    /// Driver tiled on a summed letter: partial results are all-reduced.
    fn einsum_contract(&mut self, spec: &EinsumSpec, x: &Side, o: &Side, x_is_lhs: bool) -> (SpmdNodeId, Sharding) {
        let d = x.s.single_tiled_dim().expect("single tiled dim");
        let c = x.letters[d];
        let target =
            if o.letters.contains(&c) { map_sharding(&x.s, &x.letters, &o.letters).expect("letter present") } else { Sharding::Replicated };
        let ov = self.reshard(o.val, &o.full, &o.s, &target);
        let xm = self.b.mask_padding(x.val, &x.s, &x.full, &[d], 0.0);
        let om = match target.single_tiled_dim() {
            Some(od) => self.b.mask_padding(ov, &target, &o.full, &[od], 0.0),
            None => ov,
        };
        let partial = self.local_einsum(spec, xm, om, x_is_lhs);
        let all = vec![(0..self.b.num_devices).collect()];
        let sum = self.b.collective(Collective::AllReduce { op: ReduceOp::Add, groups: all }, partial);
        (sum, Sharding::Replicated)
    }

    /// Both operands tiled: replicate the rotating one if it fits, else loop.
    fn einsum_gather_or_loop(&mut self, spec: &EinsumSpec, st: &Side, ro: &Side, st_is_lhs: bool) -> (SpmdNodeId, Sharding) {
        let sd = st.s.single_tiled_dim().expect("single tiled dim");
        let rd = ro.s.single_tiled_dim().expect("single tiled dim");
        let k = ro.s.tiles_along(rd);
        if st.s.tiles_along(sd) != k {
            return self.einsum_replicated_sides(spec, st, ro, st_is_lhs);
        }
        let s_res = map_sharding(&st.s, &st.letters, &spec.out).expect("non-contracting letter in output");
        let rot_bytes = ro.full.num_elements() * std::mem::size_of::<f32>();
        if rot_bytes <= self.opts.memory_budget {
            let rv = self.reshard(ro.val, &ro.full, &ro.s, &Sharding::Replicated);
            return (self.local_einsum(spec, st.val, rv, st_is_lhs), s_res);
        }

        let c = ro.letters[rd];
        let a = ro.s.assignment().expect("tiled").clone();
        let rings = a.groups_along(rd);
        let mut pos = vec![0.0; self.b.num_devices];
        for ring in &rings {
            for (q, &dev) in ring.iter().enumerate() {
                pos[dev] = q as f32;
            }
        }
        let position = self.b.per_device(pos);
        let per_rot = self.b.shape(ro.val).dims()[rd];
        let (usage, stationary, rotating) = match spec.out.iter().position(|&x| x == c) {
            Some(out_dim) => (LoopUse::Output { out_dim }, st.val, ro.val),
            None => {
                let stationary_dim = st.letters.iter().position(|&x| x == c).expect("contracting letter");
                let rank = st.full.rank();
                let mut high = vec![0; rank];
                high[stationary_dim] = k * per_rot - st.full.dims()[stationary_dim];
                let padded = self.b.local(OpKind::Pad { low: vec![0; rank], high, interior: vec![0; rank], value: 0.0 }, vec![st.val]);
                let masked = self.b.mask_padding(ro.val, &ro.s, &ro.full, &[rd], 0.0);
                (LoopUse::Contract { stationary_dim }, padded, masked)
            }
        };
        let l = EinsumLoop { spec: spec.clone(), stationary_is_lhs: st_is_lhs, rotate_dim: rd, usage: usage.clone(), rings };
        let v = self.b.einsum_loop(l, stationary, rotating, position);
        let v = match usage {
            LoopUse::Output { out_dim } => {
                let rank = spec.out.len();
                let mut limit = self.b.shape(v).0.clone();
                limit[out_dim] = ro.full.dims()[rd];
                self.b.local(OpKind::Slice { start: vec![0; rank], limit, stride: vec![1; rank] }, vec![v])
            }
            LoopUse::Contract { .. } => v,
        };
        (v, s_res)
    }

    fn einsum_replicated_sides(&mut self, spec: &EinsumSpec, a: &Side, b: &Side, a_is_lhs: bool) -> (SpmdNodeId, Sharding) {
        if a_is_lhs {
            self.einsum_replicated(spec, a, b)
        } else {
            self.einsum_replicated(spec, b, a)
        }
    }
}
