//! Simulated mesh: runs one SPMD program on every device in lockstep.

pub mod collectives;

use std::collections::BTreeMap;
use std::sync::OnceLock;

use rayon::prelude::*;

use crate::interp::kernels::eval_op;
use crate::ir::{OpKind, Shape, TensorValue};
use crate::sharding::Sharding;
use crate::spmd::{Collective, EinsumLoop, LoopUse, SpmdNode, SpmdOp, SpmdProgram};

use collectives::{all_gather, all_reduce, all_to_all, collective_permute, halo_exchange};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RuntimeError {
    #[error("node %{node}: {detail}")]
    DeadlockDetected { node: usize, detail: String },
    #[error("node %{node}: device {device} expected shape {expected}, got {actual}")]
    ShapeMismatch { node: usize, device: usize, expected: Shape, actual: Shape },
    #[error("node %{node}: device {device} receives from more than one source")]
    DuplicateDestination { node: usize, device: usize },
    #[error("device {device} has no input '{name}'")]
    MissingInput { device: usize, name: String },
    #[error("program targets {program} devices but {given} were provided")]
    DeviceCount { program: usize, given: usize },
    #[error("node %{node}: {message}")]
    Op { node: usize, message: String },
}

/// Logical 2-D grid of devices, numbered row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeviceMesh {
    pub rows: usize,
    pub cols: usize,
    pub torus_wrap: bool,
}

impl DeviceMesh {
    pub fn new(rows: usize, cols: usize, torus_wrap: bool) -> Self {
        assert!(rows > 0 && cols > 0, "mesh dims must be positive");
        DeviceMesh { rows, cols, torus_wrap }
    }

    /// Ring of `d` devices.
    pub fn line(d: usize) -> Self {
        DeviceMesh::new(1, d, true)
    }

    /// Most square grid holding `d` devices.
    pub fn for_devices(d: usize) -> Self {
        let mut rows = (d as f64).sqrt() as usize;
        while rows > 1 && !d.is_multiple_of(rows) {
            rows -= 1;
        }
        DeviceMesh::new(rows.max(1), d / rows.max(1), true)
    }

    pub fn total_devices(&self) -> usize {
        self.rows * self.cols
    }

    pub fn coords(&self, device: usize) -> (usize, usize) {
        (device / self.cols, device % self.cols)
    }
}

/// Order in which devices execute local work between collectives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Schedule {
    #[default]
    Parallel,
    Sequential,
    Reverse,
}

/// Values held by one device after a run.
#[derive(Clone, Debug, PartialEq)]
pub struct DeviceState {
    pub device_id: usize,
    pub environment: BTreeMap<usize, TensorValue>,
}

fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let threads = std::env::var("SHARDIR_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).unwrap_or(0);
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("thread pool")
    })
}

/// Runs `program`; returns each device's program outputs in binding order.
pub fn run_spmd(
    program: &SpmdProgram,
    per_device_inputs: &[BTreeMap<String, TensorValue>],
    mesh: &DeviceMesh,
) -> Result<Vec<Vec<TensorValue>>, RuntimeError> {
    run_spmd_with(program, per_device_inputs, mesh, Schedule::Parallel)
}

pub fn run_spmd_with(
    program: &SpmdProgram,
    per_device_inputs: &[BTreeMap<String, TensorValue>],
    mesh: &DeviceMesh,
    schedule: Schedule,
) -> Result<Vec<Vec<TensorValue>>, RuntimeError> {
    let keep: Vec<usize> = program.outputs.iter().map(|o| o.node).collect();
    let states = execute(program, per_device_inputs, mesh, schedule, &keep)?;
    Ok(states.into_iter().map(|mut s| keep.iter().map(|k| s.environment.remove(k).expect("output kept")).collect()).collect())
}

/// Runs `program` and keeps every intermediate value.
pub fn run_spmd_trace(
    program: &SpmdProgram,
    per_device_inputs: &[BTreeMap<String, TensorValue>],
    mesh: &DeviceMesh,
) -> Result<Vec<DeviceState>, RuntimeError> {
    let all: Vec<usize> = (0..program.len()).collect();
    execute(program, per_device_inputs, mesh, Schedule::Parallel, &all)
}

fn execute(
    program: &SpmdProgram,
    inputs: &[BTreeMap<String, TensorValue>],
    mesh: &DeviceMesh,
    schedule: Schedule,
    keep: &[usize],
) -> Result<Vec<DeviceState>, RuntimeError> {
    let d = program.num_devices;
    if mesh.total_devices() != d {
        return Err(RuntimeError::DeviceCount { program: d, given: mesh.total_devices() });
    }
    if inputs.len() != d {
        return Err(RuntimeError::DeviceCount { program: d, given: inputs.len() });
    }
    let mut last_use = vec![0usize; program.len()];
    for n in &program.nodes {
        for &o in &n.operands {
            last_use[o] = n.id;
        }
    }
    for &k in keep {
        last_use[k] = usize::MAX;
    }

    // values[node][device]
    let mut values: Vec<Option<Vec<TensorValue>>> = vec![None; program.len()];
    for n in &program.nodes {
        let args: Vec<&Vec<TensorValue>> = n.operands.iter().map(|&o| values[o].as_ref().expect("operand live")).collect();
        let out = match &n.op {
            SpmdOp::Local(op) => run_local(n, op, &args, inputs, schedule)?,
            SpmdOp::PartitionId => (0..d).map(|dev| TensorValue::scalar(dev as f32)).collect(),
            SpmdOp::Collective(c) => run_collective(n.id, c, args[0], d)?,
            SpmdOp::Loop(l) => run_loop(n, l, args[0], args[1], args[2], schedule)?,
        };
        for (dev, v) in out.iter().enumerate() {
            if v.shape != n.shape {
                return Err(RuntimeError::ShapeMismatch { node: n.id, device: dev, expected: n.shape.clone(), actual: v.shape.clone() });
            }
        }
        values[n.id] = Some(out);
        for &o in &n.operands {
            if last_use[o] == n.id {
                values[o] = None;
            }
        }
    }

    let mut states: Vec<DeviceState> = (0..d).map(|dev| DeviceState { device_id: dev, environment: BTreeMap::new() }).collect();
    for &k in keep {
        if let Some(vs) = &values[k] {
            for (dev, v) in vs.iter().enumerate() {
                states[dev].environment.insert(k, v.clone());
            }
        }
    }
    Ok(states)
}

fn per_device<F>(d: usize, schedule: Schedule, f: F) -> Result<Vec<TensorValue>, RuntimeError>
where
    F: Fn(usize) -> Result<TensorValue, RuntimeError> + Sync + Send,
{
    match schedule {
        Schedule::Parallel => pool().install(|| (0..d).into_par_iter().map(&f).collect()),
        Schedule::Sequential => (0..d).map(f).collect(),
        Schedule::Reverse => {
            let mut out: Vec<TensorValue> = (0..d).rev().map(f).collect::<Result<_, _>>()?;
            out.reverse();
            Ok(out)
        }
    }
}

fn run_local(
    n: &SpmdNode,
    op: &OpKind,
    args: &[&Vec<TensorValue>],
    inputs: &[BTreeMap<String, TensorValue>],
    schedule: Schedule,
) -> Result<Vec<TensorValue>, RuntimeError> {
    per_device(inputs.len(), schedule, |dev| {
        if let OpKind::Parameter { name, shape } = op {
            let v = inputs[dev].get(name).ok_or_else(|| RuntimeError::MissingInput { device: dev, name: name.clone() })?;
            if &v.shape != shape {
                return Err(RuntimeError::ShapeMismatch { node: n.id, device: dev, expected: shape.clone(), actual: v.shape.clone() });
            }
            return Ok(v.clone());
        }
        let a: Vec<&TensorValue> = args.iter().map(|vs| &vs[dev]).collect();
        eval_op(op, &a).map_err(|message| RuntimeError::Op { node: n.id, message })
    })
}

fn check_groups(node: usize, groups: &[Vec<usize>], d: usize) -> Result<(), RuntimeError> {
    let mut seen = vec![false; d];
    for g in groups {
        for &dev in g {
            if dev >= d || seen[dev] {
                return Err(RuntimeError::DeadlockDetected { node, detail: format!("device {dev} is listed twice or outside the mesh") });
            }
            seen[dev] = true;
        }
    }
    if let Some(dev) = seen.iter().position(|s| !s) {
        return Err(RuntimeError::DeadlockDetected { node, detail: format!("device {dev} never joins the collective") });
    }
    Ok(())
}

fn run_collective(node: usize, c: &Collective, x: &[TensorValue], d: usize) -> Result<Vec<TensorValue>, RuntimeError> {
    let mut out: Vec<Option<TensorValue>> = vec![None; d];
    let groups = match c {
        Collective::AllReduce { groups, .. }
        | Collective::AllGather { groups, .. }
        | Collective::AllToAll { groups, .. }
        | Collective::HaloExchange { groups, .. } => groups,
        Collective::CollectivePermute { pairs } => {
            let refs: Vec<&TensorValue> = x.iter().collect();
            return collective_permute(node, pairs, &refs);
        }
    };
    check_groups(node, groups, d)?;
    for g in groups {
        let members: Vec<&TensorValue> = g.iter().map(|&dev| &x[dev]).collect();
        match c {
            Collective::AllReduce { op, .. } => {
                let mut order = g.clone();
                order.sort_unstable();
                let sorted: Vec<&TensorValue> = order.iter().map(|&dev| &x[dev]).collect();
                let r = all_reduce(node, *op, &sorted)?;
                for &dev in g {
                    out[dev] = Some(r.clone());
                }
            }
            Collective::AllGather { dim, .. } => {
                let r = all_gather(node, *dim, &members)?;
                for &dev in g {
                    out[dev] = Some(r.clone());
                }
            }
            Collective::AllToAll { split_dim, concat_dim, .. } => {
                for (dev, r) in g.iter().zip(all_to_all(node, *split_dim, *concat_dim, &members)?) {
                    out[*dev] = Some(r);
                }
            }
            Collective::HaloExchange { dim, left, right, .. } => {
                for (dev, r) in g.iter().zip(halo_exchange(node, *dim, *left, *right, &members)?) {
                    out[*dev] = Some(r);
                }
            }
            Collective::CollectivePermute { .. } => unreachable!(),
        }
    }
    Ok(out.into_iter().map(|v| v.expect("every device in a group")).collect())
}

fn run_loop(
    n: &SpmdNode,
    l: &EinsumLoop,
    stationary: &[TensorValue],
    rotating: &[TensorValue],
    position: &[TensorValue],
    schedule: Schedule,
) -> Result<Vec<TensorValue>, RuntimeError> {
    let d = stationary.len();
    let k = l.iterations();
    check_groups(n.id, &l.rings, d)?;
    let pairs = l.permute_pairs();
    let op = OpKind::Einsum(l.spec.clone());
    let mut acc: Vec<TensorValue> = (0..d).map(|_| TensorValue::zeros(n.shape.clone())).collect();
    let mut rot: Vec<TensorValue> = rotating.to_vec();
    for j in 0..k {
        let cur = &rot;
        let acc_ref = &acc;
        acc = per_device(d, schedule, |dev| {
            let tile = (position[dev].as_scalar() as usize + j) % k;
            let block = &cur[dev];
            let p = block.shape.dims()[l.rotate_dim];
            let st = match l.usage {
                LoopUse::Contract { stationary_dim } => {
                    let mut start = vec![0; stationary[dev].shape.rank()];
                    start[stationary_dim] = tile * p;
                    let mut extent = stationary[dev].shape.0.clone();
                    extent[stationary_dim] = p;
                    stationary[dev].slice_block(&start, &extent)
                }
                LoopUse::Output { .. } => stationary[dev].clone(),
            };
            let args = if l.stationary_is_lhs { [&st, block] } else { [block, &st] };
            let part = eval_op(&op, &args).map_err(|message| RuntimeError::Op { node: n.id, message })?;
            let mut a = acc_ref[dev].clone();
            match l.usage {
                LoopUse::Output { out_dim } => {
                    let mut start = vec![0; a.shape.rank()];
                    start[out_dim] = tile * part.shape.dims()[out_dim];
                    a.write_block(&start, &part);
                }
                LoopUse::Contract { .. } => {
                    for (x, y) in a.data.iter_mut().zip(&part.data) {
                        *x += *y;
                    }
                }
            }
            Ok(a)
        })?;
        if j + 1 < k {
            let refs: Vec<&TensorValue> = rot.iter().collect();
            rot = collective_permute(n.id, &pairs, &refs)?;
        }
    }
    Ok(acc)
}

/// Splits `value` into per-device shards, zero-padding uneven splits.
pub fn shard_tensor(value: &TensorValue, sharding: &Sharding, num_devices: usize) -> Vec<TensorValue> {
    let ps = sharding.partition_shape(&value.shape);
    if sharding.is_replicated() {
        return vec![value.clone(); num_devices];
    }
    let mut padded = TensorValue::zeros(ps.padded_full_dims.clone());
    padded.write_block(&vec![0; value.shape.rank()], value);
    (0..num_devices).map(|dev| padded.slice_block(&sharding.partition_offset(&value.shape, dev), ps.per_device_dims.dims())).collect()
}

/// Inverse of [`shard_tensor`]: stitches shards and strips padding.
pub fn reassemble(shards: &[TensorValue], full: &Shape, sharding: &Sharding) -> TensorValue {
    if sharding.is_replicated() {
        return shards[0].clone();
    }
    let ps = sharding.partition_shape(full);
    let mut padded = TensorValue::zeros(ps.padded_full_dims.clone());
    for (dev, s) in shards.iter().enumerate() {
        padded.write_block(&sharding.partition_offset(full, dev), s);
    }
    padded.slice_block(&vec![0; full.rank()], full.dims())
}

/// Shards named full inputs according to the program's input bindings.
pub fn shard_inputs(
    program: &SpmdProgram,
    full: &BTreeMap<String, TensorValue>,
) -> Result<Vec<BTreeMap<String, TensorValue>>, RuntimeError> {
    let d = program.num_devices;
    let mut out = vec![BTreeMap::new(); d];
    for b in &program.inputs {
        let v = full.get(&b.name).ok_or_else(|| RuntimeError::MissingInput { device: 0, name: b.name.clone() })?;
        if v.shape != b.full_shape {
            return Err(RuntimeError::ShapeMismatch { node: b.node, device: 0, expected: b.full_shape.clone(), actual: v.shape.clone() });
        }
        for (dev, s) in shard_tensor(v, &b.sharding, d).into_iter().enumerate() {
            out[dev].insert(b.name.clone(), s);
        }
    }
    Ok(out)
}

/// Shards inputs, runs the program and reassembles outputs keyed `%<graph node>`.
pub fn run_sharded(
    program: &SpmdProgram,
    full_inputs: &BTreeMap<String, TensorValue>,
    mesh: &DeviceMesh,
) -> Result<BTreeMap<String, TensorValue>, RuntimeError> {
    let inputs = shard_inputs(program, full_inputs)?;
    let per_device = run_spmd(program, &inputs, mesh)?;
    Ok(program
        .outputs
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let shards: Vec<TensorValue> = per_device.iter().map(|outs| outs[i].clone()).collect();
            (format!("%{}", b.graph_node), reassemble(&shards, &b.full_shape, &b.sharding))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sharding::DeviceAssignment;

    #[test]
    fn uneven_split_pads_last_shard() {
        let v = TensorValue::from_fn([15], |i| i[0] as f32 + 1.0);
        let s = Sharding::split(1, 0, 2);
        let shards = shard_tensor(&v, &s, 2);
        assert_eq!(shards[0].shape, Shape::new([8]));
        assert_eq!(shards[1].data[7], 0.0);
        assert_eq!(reassemble(&shards, &v.shape, &s), v);
    }

    #[test]
    fn replicated_reassembles_from_device_zero() {
        let v = TensorValue::from_fn([3], |i| i[0] as f32);
        let shards = shard_tensor(&v, &Sharding::Replicated, 4);
        assert_eq!(shards.len(), 4);
        assert_eq!(reassemble(&shards, &v.shape, &Sharding::Replicated), v);
    }

    #[test]
    fn assignment_shards_to_block_shape() {
        let v = TensorValue::from_fn([3, 16, 64], |i| (i[0] * 1000 + i[1] * 64 + i[2]) as f32);
        let s = Sharding::Tiled(DeviceAssignment::natural(vec![1, 2, 4]));
        let shards = shard_tensor(&v, &s, 8);
        assert_eq!(shards.len(), 8);
        assert!(shards.iter().all(|x| x.shape == Shape::new([3, 8, 16])));
        assert_eq!(reassemble(&shards, &v.shape, &s), v);
    }

    #[test]
    fn mesh_geometry() {
        let m = DeviceMesh::for_devices(8);
        assert_eq!((m.rows, m.cols), (2, 4));
        assert_eq!(m.coords(5), (1, 1));
        assert_eq!(DeviceMesh::line(3).total_devices(), 3);
    }
}
