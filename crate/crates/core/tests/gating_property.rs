use proptest::prelude::*;
use proptest::test_runner::{Config, RngSeed};
use shardir::interp::evaluate;
use shardir::ir::TensorValue;
use shardir::moe::{build_moe_graph, moe_forward_numeric, moe_graph_inputs, top2_gating, ExpertWeights, MoeConfig, Routing};
use shardir::verify::max_relative_error;

fn config(cases: u32) -> Config {
    Config { cases, rng_seed: RngSeed::Fixed(31), failure_persistence: None, ..Config::default() }
}

// Multiples of 1/64 in (-8, 8) so that shifting by an integer is exact.
fn grid_logits() -> impl Strategy<Value = TensorValue> {
    (1usize..3, 1usize..9, 2usize..6).prop_flat_map(|(g, s, e)| {
        prop::collection::vec(-511i32..512, g * s * e)
            .prop_map(move |v| TensorValue::new([g, s, e], v.into_iter().map(|k| k as f32 / 64.0).collect()))
    })
}

fn tensor(dims: [usize; 3]) -> impl Strategy<Value = TensorValue> {
    prop::collection::vec(-1.0f32..1.0, dims.iter().product::<usize>()).prop_map(move |v| TensorValue::new(dims, v))
}

proptest! {
    #![proptest_config(config(200))]

    #[test]
    fn routing_respects_capacity(logits in grid_logits(), cap in 1usize..5, seed in any::<u64>()) {
        let out = top2_gating(&logits, cap, &Routing::Seeded(seed)).unwrap();
        let [g_n, s_n, e_n] = logits.shape.dims() else { unreachable!() };
        let (g_n, s_n, e_n) = (*g_n, *s_n, *e_n);
        for g in 0..g_n {
            for s in 0..s_n {
                let experts = (0..e_n).filter(|&e| (0..cap).any(|c| out.dispatch_mask.get(&[g, s, e, c]) != 0.0)).count();
                prop_assert!(experts <= 2);
            }
            for e in 0..e_n {
                for c in 0..cap {
                    let tokens = (0..s_n).filter(|&s| out.dispatch_mask.get(&[g, s, e, c]) != 0.0).count();
                    prop_assert!(tokens <= 1);
                }
            }
        }
        for (w, m) in out.combine_weights.data.iter().zip(&out.dispatch_mask.data) {
            prop_assert_eq!(*m, if *w != 0.0 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn gating_is_bit_deterministic(logits in grid_logits(), seed in any::<u64>()) {
        let a = top2_gating(&logits, 2, &Routing::Seeded(seed)).unwrap();
        let b = top2_gating(&logits, 2, &Routing::Seeded(seed)).unwrap();
        prop_assert_eq!(a.aux_loss.to_bits(), b.aux_loss.to_bits());
        prop_assert_eq!(a, b);
    }

    #[test]
    fn unit_threshold_ignores_seed(logits in grid_logits(), s1 in any::<u64>(), s2 in any::<u64>()) {
        let t = TensorValue::filled([logits.shape.dims()[0], logits.shape.dims()[1]], 1.0);
        let a = top2_gating(&logits, 3, &Routing::Fixed(t)).unwrap();
        let b = top2_gating(&logits, 3, &Routing::Disabled).unwrap();
        prop_assert_eq!(&a, &b);
        // Seeded draws only ever add the second expert.
        for seed in [s1, s2] {
            let c = top2_gating(&logits, 3, &Routing::Seeded(seed)).unwrap();
            for (x, y) in b.dispatch_mask.data.iter().zip(&c.dispatch_mask.data) {
                prop_assert!(x <= y);
            }
        }
    }

    #[test]
    fn shifting_a_token_keeps_routing(logits in grid_logits(), shift in -16i32..17, token in any::<prop::sample::Index>(), seed in any::<u64>()) {
        let dims = logits.shape.dims().to_vec();
        let (s_n, e_n) = (dims[1], dims[2]);
        let t = token.index(dims[0] * s_n);
        let mut shifted = logits.clone();
        for v in &mut shifted.data[t * e_n..(t + 1) * e_n] {
            *v += shift as f32;
        }
        let a = top2_gating(&logits, 2, &Routing::Seeded(seed)).unwrap();
        let b = top2_gating(&shifted, 2, &Routing::Seeded(seed)).unwrap();
        prop_assert_eq!(a.dispatch_mask, b.dispatch_mask);
        for (x, y) in a.combine_weights.data.iter().zip(&b.combine_weights.data) {
            prop_assert!((x - y).abs() <= 1e-6, "{} vs {}", x, y);
        }
    }
}

proptest! {
    #![proptest_config(config(24))]

    #[test]
    fn numeric_layer_matches_graph(
        x in tensor([2, 4, 4]),
        wg in tensor([4, 4, 1]),
        wi in tensor([4, 4, 8]),
        wo in tensor([4, 8, 4]),
        seed in any::<u64>(),
    ) {
        let cfg = MoeConfig::new(2, 4, 4, 4, 8, 0.0, seed);
        let weights = ExpertWeights { wg: TensorValue::new([4, 4], wg.data), wi, wo };
        let routing = Routing::Seeded(seed);
        let (y, aux) = moe_forward_numeric(&x, &weights, &cfg, &routing).unwrap();
        let graph = build_moe_graph(&cfg);
        let got = evaluate(&graph, &moe_graph_inputs(&x, &weights, &cfg, &routing)).unwrap();
        let out = got.values().find(|v| v.shape == y.shape).unwrap();
        let loss = got.values().find(|v| v.shape.rank() == 0).unwrap();
        let (err, at) = max_relative_error(out, &y);
        prop_assert!(err <= 1e-5, "error {} at {:?}", err, at);
        prop_assert!(max_relative_error(loss, &TensorValue::scalar(aux)).0 <= 1e-5);
    }
}
