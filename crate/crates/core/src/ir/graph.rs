use crate::sharding::Sharding;

use super::infer::infer_shape;
use super::op::{CompareDir, EinsumSpec, ElementwiseOp, OpKind, ReduceOp, TopKOutput, WindowDimConfig};
use super::shape::Shape;
use super::tensor::TensorValue;
use super::IrError;

pub type NodeId = usize;

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub op: OpKind,
    pub operands: Vec<NodeId>,
    pub out_shape: Shape,
    pub sharding: Option<Sharding>,
}

/// Dataflow graph in topological order; `nodes[i].id == i`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Graph {
    pub nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn shape(&self, id: NodeId) -> &Shape {
        &self.nodes[id].out_shape
    }

    /// Nodes with no users, in id order.
    pub fn roots(&self) -> Vec<NodeId> {
        let mut used = vec![false; self.nodes.len()];
        for n in &self.nodes {
            for &o in &n.operands {
                used[o] = true;
            }
        }
        (0..self.nodes.len()).filter(|&i| !used[i]).collect()
    }

    pub fn users(&self) -> Vec<Vec<NodeId>> {
        let mut users = vec![Vec::new(); self.nodes.len()];
        for n in &self.nodes {
            for &o in &n.operands {
                if !users[o].contains(&n.id) {
                    users[o].push(n.id);
                }
            }
        }
        users
    }

    pub fn parameters(&self) -> Vec<(NodeId, &str)> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                OpKind::Parameter { name, .. } => Some((n.id, name.as_str())),
                _ => None,
            })
            .collect()
    }

    /// Appends a node after inferring its shape.
    pub fn add(&mut self, op: OpKind, operands: Vec<NodeId>) -> Result<NodeId, IrError> {
        let id = self.nodes.len();
        for &o in &operands {
            if o >= id {
                return Err(IrError::BadOperand { node: id, operand: o });
            }
        }
        let shapes: Vec<Shape> = operands.iter().map(|&o| self.nodes[o].out_shape.clone()).collect();
        let out_shape = infer_shape(&op, &shapes).map_err(|e| IrError::at(id, e))?;
        self.nodes.push(Node { id, op, operands, out_shape, sharding: None });
        Ok(id)
    }

    pub fn annotate(&mut self, id: NodeId, sharding: Sharding) {
        self.nodes[id].sharding = Some(sharding);
    }
}

/// Convenience builder that panics on shape errors; meant for constructing
/// known-good graphs in code.
#[derive(Default)]
pub struct GraphBuilder {
    pub graph: Graph,
}

impl GraphBuilder {
    pub fn new() -> Self {
        GraphBuilder::default()
    }

    pub fn finish(self) -> Graph {
        self.graph
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.graph.shape(id).clone()
    }

    fn push(&mut self, op: OpKind, operands: Vec<NodeId>) -> NodeId {
        let name = op.name();
        self.graph.add(op, operands).unwrap_or_else(|e| panic!("GraphBuilder: invalid {name}: {e}"))
    }

    pub fn with_sharding(&mut self, id: NodeId, s: Sharding) -> NodeId {
        self.graph.annotate(id, s);
        id
    }

    pub fn parameter(&mut self, name: &str, shape: impl Into<Shape>) -> NodeId {
        self.push(OpKind::Parameter { name: name.to_string(), shape: shape.into() }, vec![])
    }

    pub fn constant(&mut self, value: TensorValue) -> NodeId {
        self.push(OpKind::Constant { value }, vec![])
    }

    pub fn scalar(&mut self, v: f32) -> NodeId {
        self.constant(TensorValue::scalar(v))
    }

    pub fn iota(&mut self, shape: impl Into<Shape>, dim: usize) -> NodeId {
        self.push(OpKind::Iota { dim, shape: shape.into() }, vec![])
    }

    pub fn elementwise(&mut self, op: ElementwiseOp, operands: Vec<NodeId>) -> NodeId {
        self.push(OpKind::Elementwise(op), operands)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.elementwise(ElementwiseOp::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.elementwise(ElementwiseOp::Sub, vec![a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.elementwise(ElementwiseOp::Mul, vec![a, b])
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.elementwise(ElementwiseOp::Div, vec![a, b])
    }

    pub fn max(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.elementwise(ElementwiseOp::Max, vec![a, b])
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.elementwise(ElementwiseOp::Exp, vec![a])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.elementwise(ElementwiseOp::Relu, vec![a])
    }

    pub fn compare(&mut self, dir: CompareDir, a: NodeId, b: NodeId) -> NodeId {
        self.elementwise(ElementwiseOp::Compare(dir), vec![a, b])
    }

    pub fn select(&mut self, pred: NodeId, t: NodeId, f: NodeId) -> NodeId {
        self.elementwise(ElementwiseOp::Select, vec![pred, t, f])
    }

    pub fn einsum(&mut self, spec: &str, lhs: NodeId, rhs: NodeId) -> NodeId {
        let spec = EinsumSpec::parse(spec).unwrap_or_else(|e| panic!("{e}"));
        self.push(OpKind::Einsum(spec), vec![lhs, rhs])
    }

    pub fn convolution(&mut self, input: NodeId, kernel: NodeId, window: Vec<WindowDimConfig>) -> NodeId {
        self.push(OpKind::Convolution { window }, vec![input, kernel])
    }

    pub fn pad(&mut self, x: NodeId, low: Vec<usize>, high: Vec<usize>, interior: Vec<usize>, value: f32) -> NodeId {
        self.push(OpKind::Pad { low, high, interior, value }, vec![x])
    }

    pub fn slice(&mut self, x: NodeId, start: Vec<usize>, limit: Vec<usize>, stride: Vec<usize>) -> NodeId {
        self.push(OpKind::Slice { start, limit, stride }, vec![x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: impl Into<Shape>) -> NodeId {
        self.push(OpKind::Reshape { shape: shape.into() }, vec![x])
    }

    pub fn reverse(&mut self, x: NodeId, dims: Vec<usize>) -> NodeId {
        self.push(OpKind::Reverse { dims }, vec![x])
    }

    pub fn reduce(&mut self, x: NodeId, op: ReduceOp, dims: Vec<usize>) -> NodeId {
        self.push(OpKind::Reduce { op, dims }, vec![x])
    }

    pub fn cumsum(&mut self, x: NodeId, dim: usize, exclusive: bool) -> NodeId {
        self.push(OpKind::Cumsum { dim, exclusive }, vec![x])
    }

    pub fn topk(&mut self, x: NodeId, k: usize, dim: usize, output: TopKOutput) -> NodeId {
        self.push(OpKind::TopK { k, dim, output }, vec![x])
    }

    pub fn softmax(&mut self, x: NodeId, dim: usize) -> NodeId {
        self.push(OpKind::Softmax { dim }, vec![x])
    }

    pub fn one_hot(&mut self, x: NodeId, depth: usize, dim: usize) -> NodeId {
        self.push(OpKind::OneHot { depth, dim }, vec![x])
    }

    pub fn dynamic_slice(&mut self, x: NodeId, starts: Vec<NodeId>, sizes: Vec<usize>) -> NodeId {
        let mut operands = vec![x];
        operands.extend(starts);
        self.push(OpKind::DynamicSlice { sizes }, operands)
    }
}
