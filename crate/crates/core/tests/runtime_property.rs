use proptest::prelude::*;
use proptest::test_runner::{Config, RngSeed};
use shardir::corpus::corpus;
use shardir::interp::evaluate;
use shardir::ir::{GraphBuilder, TensorValue};
use shardir::runtime::collectives::all_to_all;
use shardir::runtime::{reassemble, run_sharded, run_spmd_with, shard_inputs, shard_tensor, DeviceMesh, Schedule};
use shardir::sharding::{propagate, DeviceAssignment, Sharding};
use shardir::spmd::{partition_graph_with, CollectiveKind};
use shardir::verify::random_inputs;

fn config(cases: u32) -> Config {
    Config { cases, rng_seed: RngSeed::Fixed(17), failure_persistence: None, ..Config::default() }
}

#[test]
fn schedules_give_identical_bits() {
    let d = 4;
    let mesh = DeviceMesh::for_devices(d);
    for c in corpus(d) {
        let annotated = propagate(&c.graph, d).unwrap();
        let program = partition_graph_with(&annotated, d, &c.options).unwrap();
        let inputs = shard_inputs(&program, &random_inputs(&c.graph, 3)).unwrap();
        let runs: Vec<_> = [Schedule::Sequential, Schedule::Reverse, Schedule::Parallel]
            .into_iter()
            .map(|s| run_spmd_with(&program, &inputs, &mesh, s).unwrap())
            .collect();
        let bits =
            |r: &Vec<Vec<TensorValue>>| -> Vec<u32> { r.iter().flatten().flat_map(|t| t.data.iter().map(|v| v.to_bits())).collect() };
        assert_eq!(bits(&runs[0]), bits(&runs[1]), "{}", c.name);
        assert_eq!(bits(&runs[0]), bits(&runs[2]), "{}", c.name);
    }
}

#[test]
fn corpus_inputs_round_trip_through_shards() {
    for d in [2, 4, 8] {
        for c in corpus(d) {
            let program = partition_graph_with(&propagate(&c.graph, d).unwrap(), d, &c.options).unwrap();
            let full = random_inputs(&c.graph, 5);
            let shards = shard_inputs(&program, &full).unwrap();
            for b in &program.inputs {
                let per: Vec<TensorValue> = shards.iter().map(|s| s[&b.name].clone()).collect();
                assert_eq!(reassemble(&per, &b.full_shape, &b.sharding), full[&b.name], "{} {}", c.name, b.name);
            }
        }
    }
}

#[test]
fn alltoall_reshard_there_and_back_is_identity() {
    let d = 4;
    let mut b = GraphBuilder::new();
    let x = b.parameter("x", [8, 12]);
    b.with_sharding(x, Sharding::split(2, 0, d));
    let one = b.scalar(1.0);
    let y = b.mul(x, one);
    b.with_sharding(y, Sharding::split(2, 1, d));
    let z = b.mul(y, one);
    b.with_sharding(z, Sharding::split(2, 0, d));
    let graph = b.finish();

    let program = partition_graph_with(&propagate(&graph, d).unwrap(), d, &Default::default()).unwrap();
    assert_eq!(program.count(CollectiveKind::AllToAll), 2);
    let inputs = random_inputs(&graph, 9);
    let got = run_sharded(&program, &inputs, &DeviceMesh::for_devices(d)).unwrap();
    assert_eq!(got[&format!("%{z}")], inputs["x"]);
    assert_eq!(evaluate(&graph, &inputs).unwrap()[&format!("%{z}")], inputs["x"]);
}

fn shaped_tensor() -> impl Strategy<Value = TensorValue> {
    prop::collection::vec(1usize..7, 1..4).prop_flat_map(|dims| {
        let n = dims.iter().product::<usize>();
        prop::collection::vec(-100.0f32..100.0, n).prop_map(move |v| TensorValue::new(dims.clone(), v))
    })
}

fn sharded_tensor() -> impl Strategy<Value = (TensorValue, Sharding)> {
    shaped_tensor().prop_flat_map(|t| {
        prop::collection::vec(1usize..4, t.shape.rank()).prop_flat_map(move |tiles| {
            let t = t.clone();
            let n = tiles.iter().product::<usize>();
            Just((0..n).collect::<Vec<_>>())
                .prop_shuffle()
                .prop_map(move |ids| (t.clone(), Sharding::Tiled(DeviceAssignment::new(tiles.clone(), ids).unwrap())))
        })
    })
}

proptest! {
    #![proptest_config(config(128))]

    #[test]
    fn shard_then_reassemble_is_identity((t, sharding) in sharded_tensor()) {
        let n = sharding.num_tiles();
        let shards = shard_tensor(&t, &sharding, n);
        prop_assert_eq!(reassemble(&shards, &t.shape, &sharding), t.clone());
        let whole = shard_tensor(&t, &Sharding::Replicated, n);
        prop_assert_eq!(reassemble(&whole, &t.shape, &Sharding::Replicated), t);
    }

    #[test]
    fn alltoall_preserves_elements(g in 1usize..5, rows in 1usize..4, cols in 1usize..4, data in prop::collection::vec(-50.0f32..50.0, 4 * 4 * 3 * 3)) {
        let per = g * rows * cols;
        let values: Vec<TensorValue> = (0..g).map(|i| TensorValue::new([g * rows, cols], data[i * per..(i + 1) * per].to_vec())).collect();
        let refs: Vec<&TensorValue> = values.iter().collect();
        let out = all_to_all(0, 0, 1, &refs).unwrap();
        let sorted = |ts: &[TensorValue]| {
            let mut v: Vec<u32> = ts.iter().flat_map(|t| t.data.iter().map(|x| x.to_bits())).collect();
            v.sort_unstable();
            v
        };
        prop_assert_eq!(sorted(&values), sorted(&out));
    }
}
