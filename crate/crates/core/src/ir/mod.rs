//! Static-shape tensor IR: shapes, values, operators, graphs and the text format.

mod graph;
mod infer;
mod op;
mod shape;
mod tensor;
pub mod text;

pub use graph::{Graph, GraphBuilder, Node, NodeId};
pub use infer::{infer_shape, validate};
pub use op::{CompareDir, DimClass, EinsumSpec, ElementwiseOp, OpKind, ReduceOp, TopKOutput, WindowDimConfig};
pub use shape::{IndexIter, Shape};
pub use tensor::TensorValue;
pub use text::{parse_graph, serialize_graph};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IrError {
    #[error("node %{node}: {message}")]
    IncompatibleShapes { node: NodeId, message: String },
    #[error("node %{node}: operand %{operand} is not an earlier node")]
    BadOperand { node: NodeId, operand: NodeId },
    #[error("line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
}

impl IrError {
    pub fn at(node: NodeId, message: impl Into<String>) -> Self {
        IrError::IncompatibleShapes { node, message: message.into() }
    }
}
