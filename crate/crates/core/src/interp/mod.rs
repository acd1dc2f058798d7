//! Unpartitioned reference interpreter.

pub mod kernels;

use std::collections::BTreeMap;

pub use kernels::{clamp_start, eval_op};

use crate::ir::{Graph, NodeId, OpKind, Shape, TensorValue, WindowDimConfig};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InterpError {
    #[error("no input supplied for parameter '{0}'")]
    MissingInput(String),
    #[error("input '{name}' has shape {got}, expected {expected}")]
    ShapeMismatch { name: String, expected: Shape, got: Shape },
    #[error("node %{node}: {message}")]
    Op { node: NodeId, message: String },
}

/// Values of every node, indexed by node id.
pub fn evaluate_nodes(graph: &Graph, inputs: &BTreeMap<String, TensorValue>) -> Result<Vec<TensorValue>, InterpError> {
    let mut values: Vec<TensorValue> = Vec::with_capacity(graph.len());
    for n in &graph.nodes {
        let v = match &n.op {
            OpKind::Parameter { name, shape } => {
                let v = inputs.get(name).ok_or_else(|| InterpError::MissingInput(name.clone()))?;
                if &v.shape != shape {
                    return Err(InterpError::ShapeMismatch { name: name.clone(), expected: shape.clone(), got: v.shape.clone() });
                }
                v.clone()
            }
            op => {
                let args: Vec<&TensorValue> = n.operands.iter().map(|&o| &values[o]).collect();
                eval_op(op, &args).map_err(|message| InterpError::Op { node: n.id, message })?
            }
        };
        values.push(v);
    }
    Ok(values)
}

/// Evaluates the graph and returns its root values keyed `%<id>`.
pub fn evaluate(graph: &Graph, inputs: &BTreeMap<String, TensorValue>) -> Result<BTreeMap<String, TensorValue>, InterpError> {
    let values = evaluate_nodes(graph, inputs)?;
    Ok(graph.roots().into_iter().map(|r| (format!("%{r}"), values[r].clone())).collect())
}

/// Windowed sum over purely spatial operands: `input` and `kernel` each have
/// one dim per config entry.
pub fn evaluate_windowed(input: &TensorValue, kernel: &TensorValue, config: &[WindowDimConfig]) -> Result<TensorValue, String> {
    let wrap = |t: &TensorValue| {
        let mut d = vec![1, 1];
        d.extend_from_slice(t.shape.dims());
        TensorValue::new(d, t.data.clone())
    };
    let out = eval_op(&OpKind::Convolution { window: config.to_vec() }, &[&wrap(input), &wrap(kernel)])?;
    Ok(TensorValue::new(out.shape.dims()[2..].to_vec(), out.data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{GraphBuilder, ReduceOp};
    use proptest::prelude::*;

    fn v(data: &[f32]) -> TensorValue {
        TensorValue::new([data.len()], data.to_vec())
    }

    #[test]
    fn conv_1d() {
        let r = evaluate_windowed(&v(&[1.0, 2.0, 3.0]), &v(&[1.0, 1.0]), &[WindowDimConfig::new(2)]).unwrap();
        assert_eq!(r.data, vec![3.0, 5.0]);
    }

    #[test]
    fn strided_window_count() {
        let r = evaluate_windowed(&v(&[1.0; 5]), &v(&[1.0; 3]), &[WindowDimConfig::new(3).stride(2)]).unwrap();
        assert_eq!(r.shape, Shape::from([2]));
    }

    #[test]
    fn base_dilation_inserts_zeros() {
        let r = evaluate_windowed(&v(&[1.0, 2.0, 3.0]), &v(&[1.0]), &[WindowDimConfig::new(1).base_dilation(2)]).unwrap();
        assert_eq!(r.data, vec![1.0, 0.0, 2.0, 0.0, 3.0]);
    }

    #[test]
    fn window_dilation_span() {
        let cfg = WindowDimConfig::new(2).window_dilation(2);
        assert_eq!(cfg.effective_window(), 3);
        let r = evaluate_windowed(&v(&[1.0, 2.0, 3.0, 4.0]), &v(&[1.0, 10.0]), &[cfg]).unwrap();
        assert_eq!(r.data, vec![31.0, 42.0]);
    }

    #[test]
    fn softmax_of_zeros() {
        let mut b = GraphBuilder::new();
        let x = b.parameter("x", [1, 2]);
        b.softmax(x, 1);
        let g = b.finish();
        let out = evaluate(&g, &[("x".to_string(), TensorValue::zeros([1, 2]))].into()).unwrap();
        assert_eq!(out["%1"].data, vec![0.5, 0.5]);
    }

    #[test]
    fn missing_and_mismatched_inputs() {
        let mut b = GraphBuilder::new();
        let x = b.parameter("x", [2]);
        b.relu(x);
        let g = b.finish();
        assert_eq!(evaluate(&g, &BTreeMap::new()).unwrap_err(), InterpError::MissingInput("x".into()));
        let bad = [("x".to_string(), TensorValue::zeros([3]))].into();
        assert!(matches!(evaluate(&g, &bad), Err(InterpError::ShapeMismatch { .. })));
    }

    fn tensor(max_rank: usize) -> impl Strategy<Value = TensorValue> {
        prop::collection::vec(1usize..5, 1..=max_rank).prop_flat_map(|dims| {
            let n: usize = dims.iter().product();
            prop::collection::vec(-10.0f32..10.0, n).prop_map(move |d| TensorValue::new(dims.clone(), d))
        })
    }

    fn run(build: impl FnOnce(&mut GraphBuilder, usize), x: &TensorValue) -> Vec<TensorValue> {
        let mut b = GraphBuilder::new();
        let p = b.parameter("x", x.shape.clone());
        build(&mut b, p);
        let g = b.finish();
        evaluate_nodes(&g, &[("x".to_string(), x.clone())].into()).unwrap()
    }

    proptest! {
        #[test]
        fn evaluation_is_deterministic(x in tensor(3)) {
            let f = |b: &mut GraphBuilder, p| { let e = b.exp(p); let s = b.softmax(e, 0); b.cumsum(s, 0, false); };
            let a = run(f, &x);
            let c = run(f, &x);
            prop_assert_eq!(a, c);
        }

        #[test]
        fn exclusive_plus_input_is_inclusive(x in tensor(3), d in 0usize..3) {
            let d = d % x.shape.rank();
            let vals = run(|b, p| {
                let ex = b.cumsum(p, d, true);
                b.add(ex, p);
                b.cumsum(p, d, false);
            }, &x);
            for (a, c) in vals[2].data.iter().zip(&vals[3].data) {
                prop_assert!((a - c).abs() <= 1e-4 * c.abs().max(1.0));
            }
        }

        #[test]
        fn reduce_over_unit_dim_is_reshape(x in tensor(3)) {
            let mut dims = x.shape.0.clone();
            dims.insert(0, 1);
            let x1 = TensorValue::new(dims, x.data.clone());
            let vals = run(|b, p| { b.reduce(p, ReduceOp::Add, vec![0]); b.reduce(p, ReduceOp::Max, vec![0]); }, &x1);
            prop_assert_eq!(&vals[1], &x);
            prop_assert_eq!(&vals[2], &x);
        }

        #[test]
        fn reverse_twice_and_pad_then_slice(x in tensor(3), lo in 0usize..3, hi in 0usize..3) {
            let r = x.shape.rank();
            let n = x.shape.0.clone();
            let vals = run(|b, p| {
                let all: Vec<usize> = (0..r).collect();
                let a = b.reverse(p, all.clone());
                b.reverse(a, all);
                let padded = b.pad(p, vec![lo; r], vec![hi; r], vec![0; r], 7.0);
                let limit: Vec<usize> = n.iter().map(|e| e + lo).collect();
                b.slice(padded, vec![lo; r], limit, vec![1; r]);
            }, &x);
            prop_assert_eq!(&vals[2], &x);
            prop_assert_eq!(&vals[4], &x);
        }
    }
}
