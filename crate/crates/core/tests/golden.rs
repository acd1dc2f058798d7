//! Golden program dumps for a few corpus graphs stored as text files.
//! Set `UPDATE_GOLDENS=1` to rewrite them.

use std::fs;
use std::path::PathBuf;

use shardir::corpus::corpus_graph;
use shardir::ir::{parse_graph, serialize_graph};
use shardir::sharding::propagate;
use shardir::spmd::{partition_graph_with, CollectiveKind};

const CASES: &[(&str, usize)] =
    &[("moe", 8), ("conv_halo", 4), ("einsum_contracting", 4), ("pad_slice_reverse", 4), ("reshape_uneven", 4), ("replicated", 4)];

fn data(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(rel)
}

fn check(path: PathBuf, actual: &str) {
    if std::env::var_os("UPDATE_GOLDENS").is_some() {
        fs::write(&path, actual).unwrap();
        return;
    }
    let want = fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(actual, want, "{} differs", path.display());
}

#[test]
fn graph_files_and_program_dumps_match() {
    for &(name, d) in CASES {
        let graph = corpus_graph(name, d).unwrap();
        let text = serialize_graph(&graph.graph);
        check(data(&format!("graphs/{name}.d{d}.graph")), &text);

        let parsed = parse_graph(&text).unwrap();
        assert_eq!(serialize_graph(&parsed), text);
        let program = partition_graph_with(&propagate(&parsed, d).unwrap(), d, &graph.options).unwrap();
        check(data(&format!("golden/{name}.d{d}.spmd")), &program.to_text());
    }
}

#[test]
fn moe_dump_has_one_alltoall_pair() {
    let text = fs::read_to_string(data("golden/moe.d8.spmd")).unwrap();
    assert_eq!(text.lines().filter(|l| l.contains("= all_to_all ")).count(), 2);
}

#[test]
fn replicated_dump_has_no_collectives() {
    let g = corpus_graph("replicated", 4).unwrap().graph;
    let p = partition_graph_with(&propagate(&g, 4).unwrap(), 4, &Default::default()).unwrap();
    for k in [CollectiveKind::AllReduce, CollectiveKind::AllGather, CollectiveKind::AllToAll, CollectiveKind::CollectivePermute] {
        assert_eq!(p.count(k), 0);
    }
}
