//! Collective semantics over per-device values. Each function takes the
//! values of one group's members in group order.

use crate::ir::{ReduceOp, TensorValue};

use super::RuntimeError;

fn same_shapes(node: usize, values: &[&TensorValue]) -> Result<(), RuntimeError> {
    if let Some(first) = values.first() {
        for (i, v) in values.iter().enumerate() {
            if v.shape != first.shape {
                return Err(RuntimeError::ShapeMismatch { node, device: i, expected: first.shape.clone(), actual: v.shape.clone() });
            }
        }
    }
    Ok(())
}

/// Concatenates `parts` along `dim`.
pub fn concat(parts: &[&TensorValue], dim: usize) -> TensorValue {
    let mut dims = parts[0].shape.0.clone();
    dims[dim] = parts.iter().map(|p| p.shape.dims()[dim]).sum();
    let mut out = TensorValue::zeros(dims);
    let mut start = vec![0; out.shape.rank()];
    for p in parts {
        out.write_block(&start, p);
        start[dim] += p.shape.dims()[dim];
    }
    out
}

/// Left fold of `values` in the given order.
pub fn all_reduce(node: usize, op: ReduceOp, values: &[&TensorValue]) -> Result<TensorValue, RuntimeError> {
    same_shapes(node, values)?;
    let mut acc = values[0].clone();
    for v in &values[1..] {
        for (a, b) in acc.data.iter_mut().zip(&v.data) {
            *a = op.combine(*a, *b);
        }
    }
    Ok(acc)
}

pub fn all_gather(node: usize, dim: usize, values: &[&TensorValue]) -> Result<TensorValue, RuntimeError> {
    same_shapes(node, values)?;
    Ok(concat(values, dim))
}

/// Returns member `j`'s result for every `j`.
pub fn all_to_all(node: usize, split_dim: usize, concat_dim: usize, values: &[&TensorValue]) -> Result<Vec<TensorValue>, RuntimeError> {
    same_shapes(node, values)?;
    let g = values.len();
    let shape = values[0].shape.clone();
    let piece = shape.dims()[split_dim] / g;
    let mut extent = shape.0.clone();
    extent[split_dim] = piece;
    let pieces: Vec<Vec<TensorValue>> = values
        .iter()
        .map(|v| {
            (0..g)
                .map(|j| {
                    let mut start = vec![0; shape.rank()];
                    start[split_dim] = j * piece;
                    v.slice_block(&start, &extent)
                })
                .collect()
        })
        .collect();
    Ok((0..g)
        .map(|j| {
            let recv: Vec<&TensorValue> = (0..g).map(|i| &pieces[i][j]).collect();
            concat(&recv, concat_dim)
        })
        .collect())
}

/// Each member's block extended by `left` and `right` elements of its
/// neighbors' data along `dim`, zero outside the group's data.
pub fn halo_exchange(
    node: usize,
    dim: usize,
    left: usize,
    right: usize,
    values: &[&TensorValue],
) -> Result<Vec<TensorValue>, RuntimeError> {
    same_shapes(node, values)?;
    let whole = concat(values, dim);
    let p = values[0].shape.dims()[dim];
    let total = whole.shape.dims()[dim] as i64;
    let mut dims = values[0].shape.0.clone();
    dims[dim] = p + left + right;
    Ok((0..values.len())
        .map(|i| {
            let base = (i * p) as i64 - left as i64;
            TensorValue::from_fn(dims.clone(), |idx| {
                let g = base + idx[dim] as i64;
                if g < 0 || g >= total {
                    return 0.0;
                }
                let mut src = idx.to_vec();
                src[dim] = g as usize;
                whole.get(&src)
            })
        })
        .collect())
}

/// Moves values along `pairs`; devices that are no destination get zeros.
pub fn collective_permute(node: usize, pairs: &[(usize, usize)], values: &[&TensorValue]) -> Result<Vec<TensorValue>, RuntimeError> {
    let n = values.len();
    let mut out: Vec<Option<TensorValue>> = vec![None; n];
    for &(src, dst) in pairs {
        if src >= n || dst >= n {
            return Err(RuntimeError::DeadlockDetected { node, detail: format!("pair ({src},{dst}) names a device outside the mesh") });
        }
        if out[dst].is_some() {
            return Err(RuntimeError::DuplicateDestination { node, device: dst });
        }
        out[dst] = Some(values[src].clone());
    }
    Ok(out.into_iter().enumerate().map(|(d, v)| v.unwrap_or_else(|| TensorValue::zeros(values[d].shape.clone()))).collect())
}
