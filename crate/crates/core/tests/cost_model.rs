use shardir::corpus::corpus;
use shardir::cost::*;
use shardir::moe::MoeConfig;
use shardir::runtime::DeviceMesh;
use shardir::sharding::propagate;
use shardir::spmd::{partition_graph_with, CollectiveKind, SpmdOp};

const SWEEP: [usize; 4] = [16, 64, 256, 1024];

fn ratio(sig: &str, sh: &[&str], field: fn(&CostEstimate) -> f64) -> f64 {
    field(&op_scalability(sig, sh, 64).unwrap()) / field(&op_scalability(sig, sh, 16).unwrap())
}

fn compute(e: &CostEstimate) -> f64 {
    e.compute_units
}

fn comm(e: &CostEstimate) -> f64 {
    e.comm_time_units
}

#[test]
fn elementwise_add_has_no_communication() {
    let e = op_scalability("Add(A,A->A)", &["A", "A", "A"], 16).unwrap();
    assert_eq!(e.comm_time_units, 0.0);
    assert_eq!(e.dominant_primitive, None);
    assert_eq!(ratio("Add(A,A->A)", &["A", "A", "A"], compute), 1.0);
}

#[test]
fn contracting_matmul_is_constant_allreduce() {
    let sh = ["B", "B", ""];
    let e = op_scalability("Matmul(AB,BC->AC)", &sh, 16).unwrap();
    assert_eq!(e.dominant_primitive, Some(CollectiveKind::AllReduce));
    assert_eq!(ratio("Matmul(AB,BC->AC)", &sh, compute), 1.0);
    assert_eq!(ratio("Matmul(AB,BC->AC)", &sh, comm), 1.0);
}

#[test]
fn matched_non_contracting_matmul_is_local() {
    let e = op_scalability("Matmul(AB,BC->AC)", &["A", "", "A"], 16).unwrap();
    assert_eq!(e.comm_time_units, 0.0);
}

#[test]
fn unmatched_matmuls_scale_linearly_with_allgather() {
    for (sig, sh) in [("Matmul(AB,BC->AC)", ["A", "B", "A"]), ("Matmul(AB,BC->AC)", ["A", "C", "C"])] {
        let e = op_scalability(sig, &sh, 16).unwrap();
        assert_eq!(e.dominant_primitive, Some(CollectiveKind::AllGather), "{sh:?}");
        assert_eq!(ratio(sig, &sh, compute), 4.0);
        assert_eq!(ratio(sig, &sh, comm), 4.0);
    }
}

#[test]
fn reduce_rows() {
    let keep = op_scalability("Reduce(AB->A)", &["A", "A"], 16).unwrap();
    assert_eq!(keep.comm_time_units, 0.0);
    let e = op_scalability("Reduce(AB->B)", &["A", ""], 16).unwrap();
    assert_eq!(e.dominant_primitive, Some(CollectiveKind::AllReduce));
    assert_eq!(ratio("Reduce(AB->B)", &["A", ""], comm), 1.0);
}

#[test]
fn dispatch_einsum_is_sqrt_alltoall() {
    let sig = "Einsum(GSEC,GSM->EGCM)";
    let sh = ["G", "G", "E"];
    let e = op_scalability(sig, &sh, 16).unwrap();
    assert_eq!(e.dominant_primitive, Some(CollectiveKind::AllToAll));
    assert_eq!(ratio(sig, &sh, compute), 1.0);
    assert_eq!(ratio(sig, &sh, comm), 2.0);
}

#[test]
fn spatial_convolution_is_constant_permute() {
    let sig = "Convolution(BIXY,xyIO->BOXY)";
    let sh = ["X", "", "X"];
    let e = op_scalability(sig, &sh, 16).unwrap();
    assert_eq!(e.dominant_primitive, Some(CollectiveKind::CollectivePermute));
    assert_eq!(ratio(sig, &sh, compute), 1.0);
    assert_eq!(ratio(sig, &sh, comm), 1.0);
}

#[test]
fn fitted_exponents() {
    for (k, want) in [
        (CollectiveKind::AllReduce, 0.0),
        (CollectiveKind::AllToAll, 0.5),
        (CollectiveKind::AllGather, 1.0),
        (CollectiveKind::CollectivePermute, 0.0),
    ] {
        let got = scaling_exponent(k, 8.0 * 1024.0 * 1024.0, &SWEEP).unwrap();
        assert!((got - want).abs() <= 0.01, "{k}: {got}");
    }
}

#[test]
fn moe_breakdown_scaling() {
    // Capacity 64/d stays integral up to d = 64.
    let d = 4;
    let at = |d: usize| moe_layer_cost(&MoeConfig::scaled(d), d, &DeviceMesh::for_devices(d)).unwrap();
    let (lo, hi) = (at(d), at(16 * d));
    assert_eq!(hi.dispatch_combine_comm / lo.dispatch_combine_comm, 4.0);
    assert_eq!(hi.sequential_gating / lo.sequential_gating, 16.0);
    assert_eq!(hi.ffn, lo.ffn);
    let share = |b: &MoeCostBreakdown| b.dispatch_combine_comm / (b.compute() + b.communication());
    assert!(share(&hi) > share(&lo));
}

/// The model's dominant primitive for every node is one the partitioner emits
/// for that node, and nodes the model calls free get no collectives.
#[test]
fn model_agrees_with_partitioner_on_corpus() {
    for d in [2, 4, 8] {
        for c in corpus(d) {
            let g = propagate(&c.graph, d).unwrap();
            let p = partition_graph_with(&g, d, &c.options).unwrap();
            for (id, est) in graph_cost(&g, d, &c.options).unwrap() {
                let emitted: Vec<CollectiveKind> = p
                    .nodes
                    .iter()
                    .filter(|n| n.origin == Some(id))
                    .filter_map(|n| match &n.op {
                        SpmdOp::Collective(col) => Some(col.kind()),
                        SpmdOp::Loop(_) => Some(CollectiveKind::CollectivePermute),
                        _ => None,
                    })
                    .collect();
                match est.dominant_primitive {
                    Some(k) => assert!(emitted.contains(&k), "{} d={d} %{id}: model {k}, emitted {emitted:?}", c.name),
                    None => assert!(emitted.is_empty(), "{} d={d} %{id}: model none, emitted {emitted:?}", c.name),
                }
            }
        }
    }
}

#[test]
fn output_partitioned_operand_stays_put() {
    use shardir::ir::GraphBuilder;
    use shardir::sharding::Sharding;
    use shardir::verify::{verify_graph, VerifyOptions};
    for budget in [usize::MAX, 0] {
        let mut b = GraphBuilder::new();
        let a = b.parameter("a", [8, 5]);
        b.with_sharding(a, Sharding::split(2, 0, 4));
        let w = b.parameter("w", [5, 7]);
        b.with_sharding(w, Sharding::split(2, 1, 4));
        let y = b.einsum("AB,BC->AC", a, w);
        b.with_sharding(y, Sharding::split(2, 1, 4));
        let g = b.finish();
        let mut opts = VerifyOptions::default();
        opts.partition.memory_budget = budget;
        let r = verify_graph(&g, 4, 3, &opts).unwrap();
        assert!(r.passes(1e-5));
        assert_eq!(r.program.count(CollectiveKind::AllToAll), 0);
        let est = node_cost(&propagate(&g, 4).unwrap(), 2, 4, &opts.partition).unwrap();
        let want = if budget == 0 { CollectiveKind::CollectivePermute } else { CollectiveKind::AllGather };
        assert_eq!(est.dominant_primitive, Some(want));
    }
}
