//! Naive reference kernels, one per op kind. Reductions accumulate in
//! ascending index order.

use crate::ir::{
    infer_shape, CompareDir, EinsumSpec, ElementwiseOp, IndexIter, OpKind, ReduceOp, Shape, TensorValue, TopKOutput, WindowDimConfig,
};

/// Evaluates a single op on concrete operand values.
pub fn eval_op(op: &OpKind, args: &[&TensorValue]) -> Result<TensorValue, String> {
    let shapes: Vec<Shape> = args.iter().map(|a| a.shape.clone()).collect();
    let out_shape = infer_shape(op, &shapes)?;
    Ok(match op {
        OpKind::Parameter { name, .. } => return Err(format!("parameter '{name}' has no value")),
        OpKind::Constant { value } => value.clone(),
        OpKind::Iota { dim, shape } => {
            let d = *dim;
            TensorValue::from_fn(shape.clone(), |i| i[d] as f32)
        }
        OpKind::Elementwise(e) => elementwise(*e, args, out_shape),
        OpKind::Einsum(spec) => einsum(spec, args[0], args[1], out_shape),
        OpKind::Convolution { window } => convolution(args[0], args[1], window, out_shape),
        OpKind::Pad { low, interior, value, .. } => {
            let mut out = TensorValue::filled(out_shape, *value);
            for idx in IndexIter::new(&args[0].shape) {
                let o: Vec<usize> = idx.iter().enumerate().map(|(d, &i)| low[d] + i * (interior[d] + 1)).collect();
                out.set(&o, args[0].get(&idx));
            }
            out
        }
        OpKind::Slice { start, stride, .. } => TensorValue::from_fn(out_shape, |o| {
            let src: Vec<usize> = o.iter().enumerate().map(|(d, &i)| start[d] + i * stride[d]).collect();
            args[0].get(&src)
        }),
        OpKind::Reshape { shape } => TensorValue::new(shape.clone(), args[0].data.clone()),
        OpKind::Reverse { dims } => {
            let n = args[0].shape.dims().to_vec();
            TensorValue::from_fn(out_shape, |o| {
                let mut src = o.to_vec();
                for &d in dims {
                    src[d] = n[d] - 1 - o[d];
                }
                args[0].get(&src)
            })
        }
        OpKind::Reduce { op, dims } => reduce(args[0], *op, dims, out_shape),
        OpKind::Cumsum { dim, exclusive } => cumsum(args[0], *dim, *exclusive),
        OpKind::TopK { k, dim, output } => topk(args[0], *k, *dim, *output, out_shape),
        OpKind::Softmax { dim } => softmax(args[0], *dim),
        OpKind::OneHot { depth, dim } => {
            let d = *dim;
            let _ = depth;
            TensorValue::from_fn(out_shape, |o| {
                let mut src = o.to_vec();
                let j = src.remove(d);
                if args[0].get(&src) == j as f32 {
                    1.0
                } else {
                    0.0
                }
            })
        }
        OpKind::DynamicSlice { sizes } => {
            let x = args[0];
            let start: Vec<usize> = (0..sizes.len()).map(|d| clamp_start(args[1 + d].as_scalar(), x.shape.dims()[d], sizes[d])).collect();
            x.slice_block(&start, sizes)
        }
    })
}

/// Clamps a dynamic start so that `[start, start + size)` lies within `extent`.
pub fn clamp_start(v: f32, extent: usize, size: usize) -> usize {
    let hi = (extent - size) as f32;
    v.round().clamp(0.0, hi) as usize
}

/// Splits `shape` around `dim` into (outer, extent, inner) element counts.
fn fibers(shape: &Shape, dim: usize) -> (usize, usize, usize) {
    let d = shape.dims();
    (d[..dim].iter().product(), d[dim], d[dim + 1..].iter().product())
}

fn elementwise(e: ElementwiseOp, args: &[&TensorValue], out_shape: Shape) -> TensorValue {
    let n = out_shape.num_elements();
    let at = |a: &TensorValue, i: usize| if a.shape.rank() == 0 { a.data[0] } else { a.data[i] };
    let data = (0..n)
        .map(|i| match e {
            ElementwiseOp::Add => at(args[0], i) + at(args[1], i),
            ElementwiseOp::Sub => at(args[0], i) - at(args[1], i),
            ElementwiseOp::Mul => at(args[0], i) * at(args[1], i),
            ElementwiseOp::Div => at(args[0], i) / at(args[1], i),
            ElementwiseOp::Max => at(args[0], i).max(at(args[1], i)),
            ElementwiseOp::Exp => at(args[0], i).exp(),
            ElementwiseOp::Relu => at(args[0], i).max(0.0),
            ElementwiseOp::Select => {
                if at(args[0], i) != 0.0 {
                    at(args[1], i)
                } else {
                    at(args[2], i)
                }
            }
            ElementwiseOp::Compare(dir) => compare(dir, at(args[0], i), at(args[1], i)),
        })
        .collect();
    TensorValue::new(out_shape, data)
}

fn compare(dir: CompareDir, a: f32, b: f32) -> f32 {
    if dir.apply(a, b) {
        1.0
    } else {
        0.0
    }
}

fn einsum(spec: &EinsumSpec, lhs: &TensorValue, rhs: &TensorValue, out_shape: Shape) -> TensorValue {
    let letters = spec.letters();
    let extent = |c: char| -> usize {
        if let Some(p) = spec.lhs.iter().position(|&x| x == c) {
            lhs.shape.dims()[p]
        } else {
            rhs.shape.dims()[spec.rhs.iter().position(|&x| x == c).unwrap()]
        }
    };
    let summed: Vec<char> = letters.iter().copied().filter(|c| !spec.out.contains(c)).collect();
    let summed_shape = Shape(summed.iter().map(|&c| extent(c)).collect());

    let stride_of =
        |operand: &[char], strides: &[usize], c: char| -> usize { operand.iter().position(|&x| x == c).map_or(0, |p| strides[p]) };
    let (ls, rs) = (lhs.shape.strides(), rhs.shape.strides());
    let out_l: Vec<usize> = spec.out.iter().map(|&c| stride_of(&spec.lhs, &ls, c)).collect();
    let out_r: Vec<usize> = spec.out.iter().map(|&c| stride_of(&spec.rhs, &rs, c)).collect();
    let sum_l: Vec<usize> = summed.iter().map(|&c| stride_of(&spec.lhs, &ls, c)).collect();
    let sum_r: Vec<usize> = summed.iter().map(|&c| stride_of(&spec.rhs, &rs, c)).collect();
    let inner: Vec<(usize, usize)> = IndexIter::new(&summed_shape)
        .map(|k| {
            let l = k.iter().zip(&sum_l).map(|(i, s)| i * s).sum();
            let r = k.iter().zip(&sum_r).map(|(i, s)| i * s).sum();
            (l, r)
        })
        .collect();

    let data = IndexIter::new(&out_shape)
        .map(|o| {
            let bl: usize = o.iter().zip(&out_l).map(|(i, s)| i * s).sum();
            let br: usize = o.iter().zip(&out_r).map(|(i, s)| i * s).sum();
            let mut acc = 0.0f32;
            for &(l, r) in &inner {
                acc += lhs.data[bl + l] * rhs.data[br + r];
            }
            acc
        })
        .collect();
    TensorValue::new(out_shape, data)
}

/// Source index in the undilated base for a position in the padded, dilated
/// base, or `None` if the position is padding or a dilation hole.
fn base_source(pos: isize, w: &WindowDimConfig, extent: usize) -> Option<usize> {
    let p = pos - w.padding_low as isize;
    if p < 0 {
        return None;
    }
    let p = p as usize;
    let b = w.base_dilation;
    if !p.is_multiple_of(b) || p / b >= extent {
        return None;
    }
    Some(p / b)
}

fn convolution(input: &TensorValue, kernel: &TensorValue, window: &[WindowDimConfig], out_shape: Shape) -> TensorValue {
    let ns = window.len();
    let cin = input.shape.dims()[1];
    let in_spatial = &input.shape.dims()[2..];
    let win_shape = Shape(window.iter().map(|w| w.size).collect());
    let taps: Vec<Vec<usize>> = IndexIter::new(&win_shape).collect();
    TensorValue::from_fn(out_shape, |o| {
        let (n, co) = (o[0], o[1]);
        let mut acc = 0.0f32;
        let mut src = vec![0; ns + 2];
        let mut kidx = vec![0; ns + 2];
        src[0] = n;
        kidx[0] = co;
        for ci in 0..cin {
            src[1] = ci;
            kidx[1] = ci;
            'tap: for k in &taps {
                for d in 0..ns {
                    let w = &window[d];
                    let pos = (o[d + 2] * w.stride + k[d] * w.window_dilation) as isize;
                    match base_source(pos, w, in_spatial[d]) {
                        Some(s) => src[d + 2] = s,
                        None => continue 'tap,
                    }
                    kidx[d + 2] = k[d];
                }
                acc += input.get(&src) * kernel.get(&kidx);
            }
        }
        acc
    })
}

fn reduce(x: &TensorValue, op: ReduceOp, dims: &[usize], out_shape: Shape) -> TensorValue {
    let mut out = TensorValue::filled(out_shape, op.identity());
    let keep: Vec<usize> = (0..x.shape.rank()).filter(|d| !dims.contains(d)).collect();
    let ostr = out.shape.strides();
    for (flat, idx) in IndexIter::new(&x.shape).enumerate() {
        let o: usize = keep.iter().zip(&ostr).map(|(&d, s)| idx[d] * s).sum();
        out.data[o] = op.combine(out.data[o], x.data[flat]);
    }
    out
}

fn cumsum(x: &TensorValue, dim: usize, exclusive: bool) -> TensorValue {
    let (outer, n, inner) = fibers(&x.shape, dim);
    let mut out = x.clone();
    for a in 0..outer {
        for b in 0..inner {
            let mut acc = 0.0f32;
            for j in 0..n {
                let i = (a * n + j) * inner + b;
                let v = x.data[i];
                if exclusive {
                    out.data[i] = acc;
                    acc += v;
                } else {
                    acc += v;
                    out.data[i] = acc;
                }
            }
        }
    }
    out
}

fn topk(x: &TensorValue, k: usize, dim: usize, output: TopKOutput, out_shape: Shape) -> TensorValue {
    let (outer, n, inner) = fibers(&x.shape, dim);
    let mut out = TensorValue::zeros(out_shape);
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for a in 0..outer {
        for b in 0..inner {
            let at = |j: usize| x.data[(a * n + j) * inner + b];
            order.clear();
            order.extend(0..n);
            // Stable sort keeps the lowest index first among ties.
            order.sort_by(|&i, &j| at(j).partial_cmp(&at(i)).unwrap_or(std::cmp::Ordering::Equal));
            for (r, &j) in order.iter().take(k).enumerate() {
                out.data[(a * k + r) * inner + b] = match output {
                    TopKOutput::Values => at(j),
                    TopKOutput::Indices => j as f32,
                };
            }
        }
    }
    out
}

fn softmax(x: &TensorValue, dim: usize) -> TensorValue {
    let (outer, n, inner) = fibers(&x.shape, dim);
    let mut out = x.clone();
    for a in 0..outer {
        for b in 0..inner {
            let idx = |j: usize| (a * n + j) * inner + b;
            let m = (0..n).map(|j| x.data[idx(j)]).fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for j in 0..n {
                let e = (x.data[idx(j)] - m).exp();
                out.data[idx(j)] = e;
                sum += e;
            }
            for j in 0..n {
                out.data[idx(j)] /= sum;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> TensorValue {
        TensorValue::new(shape, data.to_vec())
    }

    #[test]
    fn identity_matmul() {
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let op = OpKind::Einsum(EinsumSpec::parse("AB,BC->AC").unwrap());
        assert_eq!(eval_op(&op, &[&eye, &x]).unwrap(), x);
    }

    #[test]
    fn einsum_with_reduced_letter() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2], &[10.0, 100.0]);
        let op = OpKind::Einsum(EinsumSpec::parse("AB,C->A").unwrap());
        let r = eval_op(&op, &[&a, &b]).unwrap();
        assert_eq!(r.data, vec![330.0, 770.0]);
    }

    #[test]
    fn topk_ties_prefer_lowest_index() {
        let x = t(&[4], &[1.0, 3.0, 3.0, 0.0]);
        let idx = eval_op(&OpKind::TopK { k: 2, dim: 0, output: TopKOutput::Indices }, &[&x]).unwrap();
        assert_eq!(idx.data, vec![1.0, 2.0]);
    }

    #[test]
    fn one_hot_out_of_range_is_zero() {
        let x = t(&[3], &[0.0, 2.0, 5.0]);
        let r = eval_op(&OpKind::OneHot { depth: 3, dim: 1 }, &[&x]).unwrap();
        assert_eq!(r.data, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn dynamic_slice_clamps() {
        let x = t(&[5], &[0.0, 1.0, 2.0, 3.0, 4.0]);
        let op = OpKind::DynamicSlice { sizes: vec![2] };
        let r = eval_op(&op, &[&x, &TensorValue::scalar(9.0)]).unwrap();
        assert_eq!(r.data, vec![3.0, 4.0]);
        let r = eval_op(&op, &[&x, &TensorValue::scalar(-3.0)]).unwrap();
        assert_eq!(r.data, vec![0.0, 1.0]);
    }

    #[test]
    fn pad_interior() {
        let x = t(&[2], &[1.0, 2.0]);
        let op = OpKind::Pad { low: vec![1], high: vec![0], interior: vec![1], value: -1.0 };
        assert_eq!(eval_op(&op, &[&x]).unwrap().data, vec![-1.0, 1.0, -1.0, 2.0]);
    }
}
