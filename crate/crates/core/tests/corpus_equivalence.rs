use shardir::corpus::corpus;
use shardir::verify::{verify_graph, VerifyOptions};

#[test]
fn corpus_matches_reference() {
    let mut failures = Vec::new();
    for d in [1, 2, 4, 8] {
        for c in corpus(d) {
            let opts = VerifyOptions { partition: c.options.clone(), ..VerifyOptions::default() };
            match verify_graph(&c.graph, d, 7, &opts) {
                Ok(r) if r.passes(1e-5) => {}
                Ok(r) => failures.push(format!("{} d={d}: error {} at {:?}", c.name, r.max_rel_error, r.worst)),
                Err(e) => failures.push(format!("{} d={d}: {e}", c.name)),
            }
        }
    }
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}
