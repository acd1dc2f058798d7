//! Annotated graphs exercising each partitioning strategy, sized per device
//! count so that per-device extents do not change with `d`.

use crate::ir::{Graph, GraphBuilder, ReduceOp, WindowDimConfig};
use crate::moe::{build_moe_graph, MoeConfig};
use crate::sharding::Sharding;
use crate::spmd::PartitionOptions;

pub struct CorpusGraph {
    pub name: &'static str,
    pub graph: Graph,
    pub options: PartitionOptions,
}

fn entry(name: &'static str, graph: Graph) -> CorpusGraph {
    CorpusGraph { name, graph, options: PartitionOptions::default() }
}

fn looped(name: &'static str, graph: Graph) -> CorpusGraph {
    CorpusGraph { name, graph, options: PartitionOptions { memory_budget: 0, ..PartitionOptions::default() } }
}

/// Names of all corpus graphs, in [`corpus`] order.
pub const NAMES: &[&str] = &[
    "elementwise_chain",
    "einsum_batch",
    "einsum_contracting",
    "einsum_gather",
    "einsum_loop_output",
    "einsum_loop_contracting",
    "reduce_uneven",
    "pad_slice_reverse",
    "reshape_uneven",
    "conv_halo",
    "conv_base_dilation_divisible",
    "conv_base_dilation_unit_stride",
    "conv_base_dilation_pad_window",
    "conv_window_dilation",
    "replicated",
    "moe",
];

pub fn corpus(d: usize) -> Vec<CorpusGraph> {
    NAMES.iter().map(|n| corpus_graph(n, d).expect("listed name")).collect()
}

pub fn corpus_graph(name: &str, d: usize) -> Option<CorpusGraph> {
    let split = |rank: usize, dim: usize| Sharding::split(rank, dim, d);
    Some(match name {
        "elementwise_chain" => {
            let mut b = GraphBuilder::new();
            let x = b.parameter("x", [4 * d + 1, 3]);
            b.with_sharding(x, split(2, 0));
            let y = b.parameter("y", [4 * d + 1, 3]);
            let s = b.add(x, y);
            let m = b.mul(s, x);
            let e = b.exp(y);
            let r = b.max(m, e);
            let h = b.scalar(0.5);
            let out = b.mul(r, h);
            b.with_sharding(out, split(2, 0));
            entry("elementwise_chain", b.finish())
        }
        "einsum_batch" => {
            let mut b = GraphBuilder::new();
            let x = b.parameter("x", [2 * d, 3, 4]);
            b.with_sharding(x, split(3, 0));
            let w = b.parameter("w", [2 * d, 4, 5]);
            let y = b.einsum("GSM,GMH->GSH", x, w);
            b.with_sharding(y, split(3, 0));
            entry("einsum_batch", b.finish())
        }
        "einsum_contracting" => {
            let mut b = GraphBuilder::new();
            let a = b.parameter("a", [5, 4 * d - 1]);
            b.with_sharding(a, split(2, 1));
            let w = b.parameter("w", [4 * d - 1, 6]);
            b.with_sharding(w, split(2, 0));
            let y = b.einsum("AB,BC->AC", a, w);
            b.with_sharding(y, Sharding::Replicated);
            entry("einsum_contracting", b.finish())
        }
        "einsum_gather" => entry("einsum_gather", nc_matmul(d)),
        "einsum_loop_output" => looped("einsum_loop_output", nc_matmul(d)),
        "einsum_loop_contracting" => {
            let mut b = GraphBuilder::new();
            let a = b.parameter("a", [3 * d, 2 * d + 1]);
            b.with_sharding(a, split(2, 0));
            let w = b.parameter("w", [2 * d + 1, 5]);
            b.with_sharding(w, split(2, 0));
            let y = b.einsum("AB,BC->AC", a, w);
            b.with_sharding(y, split(2, 0));
            looped("einsum_loop_contracting", b.finish())
        }
        "reduce_uneven" => {
            let mut b = GraphBuilder::new();
            let x = b.parameter("x", [8 * d - 1]);
            b.with_sharding(x, split(1, 0));
            let s = b.reduce(x, ReduceOp::Add, vec![0]);
            let m = b.reduce(x, ReduceOp::Max, vec![0]);
            let _ = b.add(s, m);
            entry("reduce_uneven", b.finish())
        }
        "pad_slice_reverse" => {
            let mut b = GraphBuilder::new();
            let x = b.parameter("x", [3 * d + 1, 2]);
            b.with_sharding(x, split(2, 0));
            let p = b.pad(x, vec![2, 1], vec![3, 0], vec![0, 0], 0.5);
            let s = b.slice(p, vec![1, 0], vec![3 * d + 4, 3], vec![1, 1]);
            let r = b.reverse(s, vec![0, 1]);
            b.with_sharding(r, split(2, 0));
            entry("pad_slice_reverse", b.finish())
        }
        "reshape_uneven" => {
            let mut b = GraphBuilder::new();
            let x = b.parameter("x", [d + 1, 2]);
            b.with_sharding(x, split(2, 0));
            let r = b.reshape(x, [2 * d + 2]);
            let y = b.exp(r);
            b.with_sharding(y, split(1, 0));
            entry("reshape_uneven", b.finish())
        }
        "conv_halo" => conv("conv_halo", d, 3 * d, WindowDimConfig::new(3).stride(2).padding(1, d)),
        "conv_base_dilation_divisible" => {
            conv("conv_base_dilation_divisible", d, 6 * d, WindowDimConfig::new(3).base_dilation(2).padding(1, 2))
        }
        "conv_base_dilation_unit_stride" => {
            conv("conv_base_dilation_unit_stride", d, 3 * d / 2, WindowDimConfig::new(2).base_dilation(2).padding(1, 1))
        }
        "conv_base_dilation_pad_window" => {
            conv("conv_base_dilation_pad_window", d, d + 1, WindowDimConfig::new(3).stride(2).base_dilation(3).padding(0, d))
        }
        "conv_window_dilation" => conv("conv_window_dilation", d, 4 * d, WindowDimConfig::new(3).window_dilation(2).padding(2, 2)),
        "replicated" => {
            let mut b = GraphBuilder::new();
            let x = b.parameter("x", [4, 3]);
            let w = b.parameter("w", [3, 2]);
            let y = b.einsum("AB,BC->AC", x, w);
            let z = b.relu(y);
            let _ = b.reduce(z, ReduceOp::Add, vec![1]);
            entry("replicated", b.finish())
        }
        "moe" => entry("moe", build_moe_graph(&MoeConfig::for_devices(d))),
        _ => return None,
    })
}

fn nc_matmul(d: usize) -> Graph {
    let mut b = GraphBuilder::new();
    let a = b.parameter("a", [2 * d + 1, 6]);
    b.with_sharding(a, Sharding::split(2, 0, d));
    let w = b.parameter("w", [6, 3 * d - 1]);
    b.with_sharding(w, Sharding::split(2, 1, d));
    let y = b.einsum("AB,BC->AC", a, w);
    b.with_sharding(y, Sharding::split(2, 0, d));
    b.finish()
}

fn conv(name: &'static str, d: usize, n: usize, w: WindowDimConfig) -> CorpusGraph {
    let mut b = GraphBuilder::new();
    let x = b.parameter("x", [2, 2, n]);
    b.with_sharding(x, Sharding::split(3, 2, d));
    let k = b.parameter("k", [3, 2, w.size]);
    let y = b.convolution(x, k, vec![w]);
    b.with_sharding(y, Sharding::split(3, 2, d));
    entry(name, b.finish())
}
