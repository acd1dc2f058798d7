use std::collections::HashMap;

use super::graph::Graph;
use super::op::{DimClass, ElementwiseOp, OpKind};
use super::shape::Shape;
use super::IrError;

fn check_dims(dims: &[usize], rank: usize, what: &str) -> Result<(), String> {
    for (i, &d) in dims.iter().enumerate() {
        if d >= rank {
            return Err(format!("{what} dim {d} out of range for rank {rank}"));
        }
        if dims[..i].contains(&d) {
            return Err(format!("{what} dim {d} listed twice"));
        }
    }
    Ok(())
}

fn per_dim_len(v: &[usize], rank: usize, what: &str) -> Result<(), String> {
    if v.len() != rank {
        return Err(format!("{what} has {} entries, expected {rank}", v.len()));
    }
    Ok(())
}

/// Output shape of `op` applied to operands of the given shapes.
pub fn infer_shape(op: &OpKind, operands: &[Shape]) -> Result<Shape, String> {
    if let Some(n) = op.arity() {
        if operands.len() != n {
            return Err(format!("{} expects {n} operands, got {}", op.name(), operands.len()));
        }
    }
    match op {
        OpKind::Parameter { shape, .. } => Ok(shape.clone()),
        OpKind::Constant { value } => Ok(value.shape.clone()),
        OpKind::Iota { dim, shape } => {
            if *dim >= shape.rank() {
                return Err(format!("iota dim {dim} out of range for rank {}", shape.rank()));
            }
            Ok(shape.clone())
        }
        OpKind::Elementwise(e) => {
            let mut common: Option<&Shape> = None;
            for s in operands {
                if s.rank() == 0 {
                    continue;
                }
                match common {
                    None => common = Some(s),
                    Some(c) if c != s => {
                        return Err(format!("{} operand shapes differ: {c} vs {s}", e.name()));
                    }
                    _ => {}
                }
            }
            if *e == ElementwiseOp::Select && operands[0].rank() != 0 && common != Some(&operands[0]) {
                return Err("select predicate shape mismatch".into());
            }
            Ok(common.cloned().unwrap_or_default())
        }
        OpKind::Einsum(spec) => {
            let (l, r) = (&operands[0], &operands[1]);
            if l.rank() != spec.lhs.len() {
                return Err(format!("einsum lhs rank {} does not match '{}'", l.rank(), spec));
            }
            if r.rank() != spec.rhs.len() {
                return Err(format!("einsum rhs rank {} does not match '{}'", r.rank(), spec));
            }
            let mut extents: HashMap<char, usize> = HashMap::new();
            for (i, &c) in spec.lhs.iter().enumerate() {
                extents.insert(c, l.dims()[i]);
            }
            for (i, &c) in spec.rhs.iter().enumerate() {
                let e = r.dims()[i];
                if let Some(&prev) = extents.get(&c) {
                    if prev != e {
                        let kind = match spec.classify(c) {
                            Some(DimClass::Contracting) => "contracting",
                            _ => "batch",
                        };
                        return Err(format!("{kind} dim mismatch {c}: {prev} vs {e}"));
                    }
                }
                extents.insert(c, e);
            }
            Ok(Shape(spec.out.iter().map(|c| extents[c]).collect()))
        }
        OpKind::Convolution { window } => {
            let (inp, ker) = (&operands[0], &operands[1]);
            let ns = window.len();
            if inp.rank() != ns + 2 || ker.rank() != ns + 2 {
                return Err(format!("convolution with {ns} spatial dims needs rank-{} input and kernel, got {inp} and {ker}", ns + 2));
            }
            if inp.dims()[1] != ker.dims()[1] {
                return Err(format!("feature dim mismatch: input {} vs kernel {}", inp.dims()[1], ker.dims()[1]));
            }
            let mut out = vec![inp.dims()[0], ker.dims()[0]];
            for (i, w) in window.iter().enumerate() {
                if !w.is_legal() {
                    return Err(format!("illegal window config {w:?}"));
                }
                if ker.dims()[i + 2] != w.size {
                    return Err(format!("kernel spatial extent {} does not match window size {}", ker.dims()[i + 2], w.size));
                }
                let o = w.output_size(inp.dims()[i + 2]).ok_or_else(|| format!("window larger than padded input on spatial dim {i}"))?;
                out.push(o);
            }
            Ok(Shape(out))
        }
        OpKind::Pad { low, high, interior, .. } => {
            let s = &operands[0];
            per_dim_len(low, s.rank(), "pad low")?;
            per_dim_len(high, s.rank(), "pad high")?;
            per_dim_len(interior, s.rank(), "pad interior")?;
            Ok(Shape(
                (0..s.rank())
                    .map(|d| {
                        let n = s.dims()[d];
                        low[d] + high[d] + n + n.saturating_sub(1) * interior[d]
                    })
                    .collect(),
            ))
        }
        OpKind::Slice { start, limit, stride } => {
            let s = &operands[0];
            per_dim_len(start, s.rank(), "slice start")?;
            per_dim_len(limit, s.rank(), "slice limit")?;
            per_dim_len(stride, s.rank(), "slice stride")?;
            let mut out = Vec::new();
            for d in 0..s.rank() {
                if start[d] > limit[d] || limit[d] > s.dims()[d] || stride[d] == 0 {
                    return Err(format!(
                        "slice [{}, {}) stride {} illegal for extent {} on dim {d}",
                        start[d],
                        limit[d],
                        stride[d],
                        s.dims()[d]
                    ));
                }
                out.push((limit[d] - start[d]).div_ceil(stride[d]));
            }
            Ok(Shape(out))
        }
        OpKind::Reshape { shape } => {
            if shape.num_elements() != operands[0].num_elements() {
                return Err(format!("reshape {} -> {shape} changes element count", operands[0]));
            }
            Ok(shape.clone())
        }
        OpKind::Reverse { dims } => {
            check_dims(dims, operands[0].rank(), "reverse")?;
            Ok(operands[0].clone())
        }
        OpKind::Reduce { dims, .. } => {
            let s = &operands[0];
            check_dims(dims, s.rank(), "reduce")?;
            Ok(Shape((0..s.rank()).filter(|d| !dims.contains(d)).map(|d| s.dims()[d]).collect()))
        }
        OpKind::Cumsum { dim, .. } | OpKind::Softmax { dim } => {
            check_dims(&[*dim], operands[0].rank(), op.name())?;
            Ok(operands[0].clone())
        }
        OpKind::TopK { k, dim, .. } => {
            let s = &operands[0];
            check_dims(&[*dim], s.rank(), "topk")?;
            if *k == 0 || *k > s.dims()[*dim] {
                return Err(format!("topk k={k} illegal for extent {}", s.dims()[*dim]));
            }
            Ok(s.with_dim(*dim, *k))
        }
        OpKind::OneHot { depth, dim } => {
            let s = &operands[0];
            if *dim > s.rank() {
                return Err(format!("one_hot dim {dim} out of range for rank {}", s.rank()));
            }
            let mut d = s.0.clone();
            d.insert(*dim, *depth);
            Ok(Shape(d))
        }
        OpKind::DynamicSlice { sizes } => {
            let s = &operands[0];
            per_dim_len(sizes, s.rank(), "dynamic_slice sizes")?;
            for (d, (&z, &n)) in sizes.iter().zip(s.dims()).enumerate() {
                if z > n {
                    return Err(format!("dynamic_slice size {z} exceeds extent {n} on dim {d}"));
                }
            }
            for (i, st) in operands[1..].iter().enumerate() {
                if st.rank() != 0 {
                    return Err(format!("dynamic_slice start {i} must be a scalar, got {st}"));
                }
            }
            Ok(Shape(sizes.clone()))
        }
    }
}

/// Checks topological order, operand references, shapes and attributes.
/// Reports the first offending node.
pub fn validate(graph: &Graph) -> Result<(), IrError> {
    for (i, n) in graph.nodes.iter().enumerate() {
        if n.id != i {
            return Err(IrError::at(i, format!("node id %{} out of sequence", n.id)));
        }
        for &o in &n.operands {
            if o >= i {
                return Err(IrError::BadOperand { node: i, operand: o });
            }
        }
        let shapes: Vec<Shape> = n.operands.iter().map(|&o| graph.nodes[o].out_shape.clone()).collect();
        let inferred = infer_shape(&n.op, &shapes).map_err(|m| IrError::at(i, m))?;
        if inferred != n.out_shape {
            return Err(IrError::at(i, format!("declared shape {} but inferred {inferred}", n.out_shape)));
        }
        if let Some(s) = &n.sharding {
            s.validate_for(&n.out_shape).map_err(|e| IrError::at(i, e.to_string()))?;
        }
    }
    Ok(())
}
