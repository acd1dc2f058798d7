//! Partitioned-versus-reference equivalence checks.

use std::collections::BTreeMap;

use crate::interp::{evaluate, InterpError};
use crate::ir::{ElementwiseOp, Graph, IndexIter, OpKind, TensorValue};
use crate::rng::normal_tensor;
use crate::runtime::{run_sharded, DeviceMesh, RuntimeError};
use crate::sharding::{propagate, ShardingError};
use crate::spmd::{partition_graph_with, PartitionError, PartitionOptions, SpmdOp, SpmdProgram};

#[derive(Debug, thiserror::Error)]
pub enum VerifyError {
    #[error(transparent)]
    Sharding(#[from] ShardingError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Interp(#[from] InterpError),
}

/// `|a - b| / max(|b|, 1)`.
pub fn relative_error(actual: f32, expected: f32) -> f32 {
    if actual == expected {
        return 0.0;
    }
    let e = (actual - expected).abs() / expected.abs().max(1.0);
    if e.is_nan() {
        f32::INFINITY
    } else {
        e
    }
}

/// Largest element-wise relative error and where it occurs.
pub fn max_relative_error(actual: &TensorValue, expected: &TensorValue) -> (f32, Option<Vec<usize>>) {
    if actual.shape != expected.shape {
        return (f32::INFINITY, None);
    }
    let mut worst = (0.0f32, None);
    for (idx, (a, b)) in IndexIter::new(&expected.shape).zip(actual.data.iter().zip(&expected.data)) {
        let e = relative_error(*a, *b);
        if e > worst.0 || (worst.1.is_none() && e == f32::INFINITY) {
            worst = (e, Some(idx));
        }
    }
    worst
}

/// Seeded standard-normal values for every parameter.
pub fn random_inputs(graph: &Graph, seed: u64) -> BTreeMap<String, TensorValue> {
    graph
        .nodes
        .iter()
        .filter_map(|n| match &n.op {
            OpKind::Parameter { name, shape } => Some((name.clone(), normal_tensor(seed, name, shape))),
            _ => None,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorstElement {
    pub output: String,
    pub index: Vec<usize>,
    pub actual: f32,
    pub expected: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyReport {
    pub devices: usize,
    pub max_rel_error: f32,
    pub worst: Option<WorstElement>,
    pub program: SpmdProgram,
}

impl VerifyReport {
    pub fn passes(&self, tolerance: f32) -> bool {
        self.max_rel_error <= tolerance
    }
}

#[derive(Clone, Debug, Default)]
pub struct VerifyOptions {
    pub partition: PartitionOptions,
    pub mesh: Option<DeviceMesh>,
    /// Perturbs the partitioned program; used as a negative control.
    pub inject_fault: bool,
}

/// Propagates, partitions and runs `graph` on `devices` devices and compares
/// every root against the reference interpreter.
pub fn verify_graph(graph: &Graph, devices: usize, seed: u64, opts: &VerifyOptions) -> Result<VerifyReport, VerifyError> {
    let annotated = propagate(graph, devices)?;
    let mut program = partition_graph_with(&annotated, devices, &opts.partition)?;
    if opts.inject_fault {
        corrupt(&mut program);
    }
    let inputs = random_inputs(graph, seed);
    let expected = evaluate(graph, &inputs)?;
    let mesh = opts.mesh.unwrap_or_else(|| DeviceMesh::for_devices(devices));
    let actual = run_sharded(&program, &inputs, &mesh)?;

    let mut max = 0.0f32;
    let mut worst = None;
    for (name, exp) in &expected {
        let act = &actual[name];
        let (e, idx) = max_relative_error(act, exp);
        if e > max || (worst.is_none() && e > 0.0) {
            max = e;
            worst = idx.map(|index| WorstElement { output: name.clone(), actual: act.get(&index), expected: exp.get(&index), index });
        }
    }
    Ok(VerifyReport { devices, max_rel_error: max, worst, program })
}

/// Adds one to the first program output.
fn corrupt(program: &mut SpmdProgram) {
    let Some(out) = program.outputs.first().map(|o| o.node) else { return };
    let shape = program.nodes[out].shape.clone();
    let origin = program.nodes[out].origin;
    let one = program.nodes.len();
    program.nodes.push(crate::spmd::SpmdNode {
        id: one,
        op: SpmdOp::Local(OpKind::Constant { value: TensorValue::filled(shape.clone(), 1.0) }),
        operands: vec![],
        shape: shape.clone(),
        origin,
    });
    program.nodes.push(crate::spmd::SpmdNode {
        id: one + 1,
        op: SpmdOp::Local(OpKind::Elementwise(ElementwiseOp::Add)),
        operands: vec![out, one],
        shape,
        origin,
    });
    program.outputs[0].node = one + 1;
}
