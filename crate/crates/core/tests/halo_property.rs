mod common;

use common::exact_requirement;
use proptest::prelude::*;
use shardir::ir::{GraphBuilder, WindowDimConfig};
use shardir::sharding::Sharding;
use shardir::spmd::halo::plan_window;
use shardir::verify::{verify_graph, VerifyOptions};

fn config() -> impl Strategy<Value = (WindowDimConfig, usize, usize)> {
    (1usize..=7, 1usize..=3, 1usize..=3, 1usize..=3, 0usize..=4, 0usize..=4, 2usize..=8, 1usize..=24).prop_filter_map(
        "window must fit",
        |(size, stride, bd, wd, lo, hi, parts, n)| {
            let w = WindowDimConfig::new(size).stride(stride).base_dilation(bd).window_dilation(wd).padding(lo, hi);
            w.output_size(n).map(|_| (w, n, parts))
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, ..ProptestConfig::default() })]

    #[test]
    fn planned_halo_covers_requirement((w, n, parts) in config()) {
        let n_out = w.output_size(n).unwrap();
        let plan = plan_window(2, &w, n, n_out, parts);
        let p_in = plan.per_in as i64;
        for i in 0..parts {
            let Some((lo, hi)) = exact_requirement(&w, n, n_out, parts, i) else { continue };
            let have_lo = i as i64 * p_in - plan.halo.left.eval(i as i64);
            let have_hi = (i as i64 + 1) * p_in + plan.halo.right.eval(i as i64);
            prop_assert!(have_lo <= lo && hi < have_hi, "partition {i}: need [{lo},{hi}] have [{have_lo},{have_hi})");
            prop_assert!(plan.first[i] <= lo && hi < plan.limit(i), "partition {i}: slice misses [{lo},{hi}]");
        }
    }

    #[test]
    fn partitioned_window_matches_reference((w, n, parts) in config()) {
        let mut b = GraphBuilder::new();
        let x = b.parameter("x", [1, 2, n]);
        b.with_sharding(x, Sharding::split(3, 2, parts));
        let k = b.parameter("k", [2, 2, w.size]);
        let y = b.convolution(x, k, vec![w]);
        b.with_sharding(y, Sharding::split(3, 2, parts));
        let report = verify_graph(&b.finish(), parts, 11, &VerifyOptions::default()).unwrap();
        prop_assert!(report.passes(1e-5), "error {} at {:?}", report.max_rel_error, report.worst);
    }
}
