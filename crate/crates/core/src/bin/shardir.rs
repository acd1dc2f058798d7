use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use shardir::corpus::corpus_graph;
use shardir::cost::{fmt_units, graph_cost, moe_layer_cost};
use shardir::ir::{parse_graph, serialize_graph, Graph, TensorValue};
use shardir::moe::{build_moe_graph, MoeConfig};
use shardir::runtime::{run_spmd, shard_inputs, DeviceMesh};
use shardir::sharding::propagate;
use shardir::spmd::{partition_graph_with, PartitionOptions};
use shardir::verify::{random_inputs, verify_graph, VerifyOptions, VerifyReport};

/// Partition annotated tensor graphs and check them on a simulated mesh.
#[derive(Parser)]
#[command(name = "shardir", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Partition a graph and write the per-device program.
    Partition {
        #[command(flatten)]
        common: Common,
        /// Where to write the program text.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Compare the partitioned program against the reference interpreter.
    Verify {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        check: Check,
    },
    /// Per-node cost estimates.
    CostReport {
        #[command(flatten)]
        common: Common,
    },
    /// Run the partitioned program and dump each device's outputs.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output prefix; files are named `<dump>.dev<k>`.
        #[arg(long)]
        dump: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Mixture-of-experts demo layer.
    Moe {
        #[command(subcommand)]
        command: MoeCommand,
    },
}

#[derive(Subcommand)]
enum MoeCommand {
    /// Emit the MoE graph for `--devices` experts and verify it.
    Demo {
        #[arg(long, default_value_t = 4)]
        devices: usize,
        #[arg(long)]
        mesh: Option<String>,
        #[command(flatten)]
        check: Check,
        /// Where to write the graph text; printed when omitted.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Graph file, or `corpus:<name>` for a built-in graph sized to `--devices`.
    graph: String,
    #[arg(long)]
    devices: Option<usize>,
    /// Mesh shape, e.g. `2x4`.
    #[arg(long)]
    mesh: Option<String>,
    /// Largest operand, in bytes, that may be replicated on every device.
    #[arg(long)]
    memory_budget: Option<usize>,
}

#[derive(Args)]
struct Check {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f32,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Binary,
}

struct Loaded {
    label: String,
    graph: Graph,
    devices: usize,
    mesh: DeviceMesh,
    options: PartitionOptions,
}

fn parse_mesh(s: &str) -> Result<DeviceMesh> {
    let (r, c) = s.split_once(['x', 'X']).ok_or_else(|| anyhow!("mesh `{s}` is not of the form RxC"))?;
    let r: usize = r.trim().parse().with_context(|| format!("mesh rows in `{s}`"))?;
    let c: usize = c.trim().parse().with_context(|| format!("mesh cols in `{s}`"))?;
    if r == 0 || c == 0 {
        bail!("mesh `{s}` has an empty dimension");
    }
    Ok(DeviceMesh::new(r, c, true))
}

fn resolve_mesh(devices: Option<usize>, mesh: Option<&str>) -> Result<(usize, DeviceMesh)> {
    let mesh = mesh.map(parse_mesh).transpose()?;
    let d = match (devices, mesh) {
        (Some(d), _) => d,
        (None, Some(m)) => m.total_devices(),
        (None, None) => 1,
    };
    if d == 0 {
        bail!("--devices must be positive");
    }
    let mesh = mesh.unwrap_or_else(|| DeviceMesh::for_devices(d));
    if mesh.total_devices() != d {
        bail!("mesh {}x{} holds {} devices, not {d}", mesh.rows, mesh.cols, mesh.total_devices());
    }
    Ok((d, mesh))
}

fn load(common: &Common) -> Result<Loaded> {
    let (devices, mesh) = resolve_mesh(common.devices, common.mesh.as_deref())?;
    let (label, graph, mut options) = match common.graph.strip_prefix("corpus:") {
        Some(name) => {
            let c = corpus_graph(name, devices).ok_or_else(|| anyhow!("no corpus graph named `{name}`"))?;
            (common.graph.clone(), c.graph, c.options)
        }
        None => {
            let path = Path::new(&common.graph);
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let graph = parse_graph(&text).map_err(|e| anyhow!("{}: {e}", path.display()))?;
            (path.display().to_string(), graph, PartitionOptions::default())
        }
    };
    if let Some(b) = common.memory_budget {
        options.memory_budget = b;
    }
    Ok(Loaded { label, graph, devices, mesh, options })
}

fn header(out: &mut String, l: &Loaded) {
    out.push_str(&format!("graph: {}\n", l.label));
    out.push_str(&format!("devices: {} (mesh {}x{})\n", l.devices, l.mesh.rows, l.mesh.cols));
}

fn cmd_partition(common: &Common, dump: Option<&Path>) -> Result<String> {
    let l = load(common)?;
    let annotated = propagate(&l.graph, l.devices)?;
    let program = partition_graph_with(&annotated, l.devices, &l.options)?;
    if let Some(p) = dump {
        fs::write(p, program.to_text()).with_context(|| format!("writing {}", p.display()))?;
    }
    let mut out = String::new();
    header(&mut out, &l);
    out.push_str(&format!("nodes: {}\n", program.len()));
    out.push_str(&format!("collectives: {}\n", program.collective_summary()));
    Ok(out)
}

fn report(out: &mut String, r: &VerifyReport, seed: u64, tolerance: f32) -> bool {
    out.push_str(&format!("seed: {seed}\n"));
    out.push_str(&format!("program nodes: {}\n", r.program.len()));
    out.push_str(&format!("max relative error: {:e}\n", r.max_rel_error));
    out.push_str(&format!("tolerance: {tolerance:e}\n"));
    let ok = r.passes(tolerance);
    if !ok {
        if let Some(w) = &r.worst {
            let idx: Vec<String> = w.index.iter().map(usize::to_string).collect();
            out.push_str(&format!("worst: {}[{}] actual {} expected {}\n", w.output, idx.join(","), w.actual, w.expected));
        }
    }
    out.push_str(if ok { "result: PASS\n" } else { "result: FAIL\n" });
    ok
}

fn verify_options(l: &Loaded, check: &Check) -> VerifyOptions {
    VerifyOptions { partition: l.options.clone(), mesh: Some(l.mesh), inject_fault: check.inject_fault }
}

fn cmd_verify(common: &Common, check: &Check) -> Result<(String, bool)> {
    let l = load(common)?;
    let r = verify_graph(&l.graph, l.devices, check.seed, &verify_options(&l, check))?;
    let mut out = String::new();
    header(&mut out, &l);
    let ok = report(&mut out, &r, check.seed, check.tolerance);
    Ok((out, ok))
}

fn cmd_cost(common: &Common) -> Result<String> {
    let l = load(common)?;
    let annotated = propagate(&l.graph, l.devices)?;
    let rows = graph_cost(&annotated, l.devices, &l.options)?;
    let mut out = String::new();
    header(&mut out, &l);
    out.push_str(&format!("{:<6} {:<14} {:>12} {:>12}  {}\n", "node", "op", "compute", "comm", "primitive"));
    let (mut compute, mut comm) = (0.0, 0.0);
    for (id, est) in &rows {
        compute += est.compute_units;
        comm += est.comm_time_units;
        let prim = est.dominant_primitive.map_or("-", |k| k.name());
        let op = annotated.node(*id).op.name();
        out.push_str(&format!(
            "{:<6} {:<14} {:>12} {:>12}  {}\n",
            format!("%{id}"),
            op,
            fmt_units(est.compute_units),
            fmt_units(est.comm_time_units),
            prim
        ));
    }
    out.push_str(&format!("total compute {} comm {}\n", fmt_units(compute), fmt_units(comm)));
    if let Some(cfg) = MoeConfig::from_graph(&l.graph) {
        let b = moe_layer_cost(&cfg, l.devices, &l.mesh)?;
        out.push_str(&format!("moe layer G={} S={} E={} C={} M={} H={}\n", cfg.g, cfg.s, cfg.e, cfg.c, cfg.m, cfg.h));
        for (name, v) in b.rows() {
            out.push_str(&format!("  {name:<26} {:>12}\n", fmt_units(v)));
        }
    }
    Ok(out)
}

fn encode(values: &[(usize, &TensorValue)], format: Format) -> Vec<u8> {
    match format {
        Format::Text => {
            let mut s = String::new();
            for (node, v) in values {
                let dims: Vec<String> = v.shape.dims().iter().map(usize::to_string).collect();
                s.push_str(&format!("%{node} [{}]\n", dims.join(",")));
                let data: Vec<String> = v.data.iter().map(|x| format!("{x:e}")).collect();
                s.push_str(&data.join(" "));
                s.push('\n');
            }
            s.into_bytes()
        }
        Format::Binary => {
            let mut b = b"SHRD".to_vec();
            b.extend((values.len() as u32).to_le_bytes());
            for (node, v) in values {
                b.extend((*node as u32).to_le_bytes());
                b.extend((v.shape.rank() as u32).to_le_bytes());
                for &d in v.shape.dims() {
                    b.extend((d as u64).to_le_bytes());
                }
                for x in &v.data {
                    b.extend(x.to_le_bytes());
                }
            }
            b
        }
    }
}

fn cmd_run(common: &Common, seed: u64, dump: &Path, format: Format) -> Result<String> {
    let l = load(common)?;
    let annotated = propagate(&l.graph, l.devices)?;
    let program = partition_graph_with(&annotated, l.devices, &l.options)?;
    let inputs = shard_inputs(&program, &random_inputs(&l.graph, seed))?;
    let per_device = run_spmd(&program, &inputs, &l.mesh)?;
    let mut out = String::new();
    header(&mut out, &l);
    for (k, outs) in per_device.iter().enumerate() {
        let named: Vec<(usize, &TensorValue)> = program.outputs.iter().map(|b| b.graph_node).zip(outs).collect();
        let mut name = dump.as_os_str().to_owned();
        name.push(format!(".dev{k}"));
        let path = PathBuf::from(name);
        fs::write(&path, encode(&named, format)).with_context(|| format!("writing {}", path.display()))?;
        out.push_str(&format!("wrote {}\n", path.display()));
    }
    Ok(out)
}

fn cmd_moe_demo(devices: usize, mesh: Option<&str>, check: &Check, dump: Option<&Path>) -> Result<(String, bool)> {
    let (devices, mesh) = resolve_mesh(Some(devices), mesh)?;
    let cfg = MoeConfig::for_devices(devices);
    let graph = build_moe_graph(&cfg);
    let text = serialize_graph(&graph);
    let mut out = String::new();
    match dump {
        Some(p) => fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?,
        None => out.push_str(&text),
    }
    let l = Loaded {
        label: format!("moe G={} S={} E={} C={} M={} H={}", cfg.g, cfg.s, cfg.e, cfg.c, cfg.m, cfg.h),
        graph,
        devices,
        mesh,
        options: PartitionOptions::default(),
    };
    let r = verify_graph(&l.graph, devices, check.seed, &verify_options(&l, check))?;
    header(&mut out, &l);
    out.push_str(&format!("collectives: {}\n", r.program.collective_summary()));
    let ok = report(&mut out, &r, check.seed, check.tolerance);
    Ok((out, ok))
}

fn run(cli: Cli) -> Result<(String, ExitCode)> {
    let ok = |s| Ok((s, ExitCode::SUCCESS));
    let checked = |(s, pass): (String, bool)| Ok((s, if pass { ExitCode::SUCCESS } else { ExitCode::from(2) }));
    match &cli.command {
        Command::Partition { common, dump } => ok(cmd_partition(common, dump.as_deref())?),
        Command::Verify { common, check } => checked(cmd_verify(common, check)?),
        Command::CostReport { common } => ok(cmd_cost(common)?),
        Command::Run { common, seed, dump, format } => ok(cmd_run(common, *seed, dump, *format)?),
        Command::Moe { command: MoeCommand::Demo { devices, mesh, check, dump } } => {
            checked(cmd_moe_demo(*devices, mesh.as_deref(), check, dump.as_deref())?)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok((out, code)) => {
            let mut stdout = std::io::stdout().lock();
            let _ = stdout.write_all(out.as_bytes());
            code
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
