//! Analytic cost model: scaling laws for collectives, per-operator estimates
//! and a per-category breakdown of the MoE layer.
//!
//! Time units are abstract: bytes divided by link bandwidth on an idealized
//! square torus.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::ir::{EinsumSpec, Graph, NodeId, OpKind};
use crate::moe::MoeConfig;
use crate::runtime::DeviceMesh;
use crate::sharding::Sharding;
use crate::spmd::{CollectiveKind, PartitionOptions};

pub const BYTES_PER_ELEMENT: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CostError {
    #[error("unknown collective kind `{0}`")]
    UnknownKind(String),
    #[error("unknown operator pattern `{0}`")]
    UnknownPattern(String),
    #[error("{devices} devices do not match a {rows}x{cols} mesh")]
    MeshMismatch { devices: usize, rows: usize, cols: usize },
}

/// Link parameters. A positive `hop_latency` adds a latency floor that
/// dominates once `bytes / link_bandwidth` drops below it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostParams {
    pub link_bandwidth: f64,
    pub hop_latency: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        CostParams { link_bandwidth: 1.0, hop_latency: 0.0 }
    }
}

impl CostParams {
    pub fn collective_cost(&self, kind: CollectiveKind, bytes_per_device: f64, d: usize, mesh: &DeviceMesh) -> Result<f64, CostError> {
        if mesh.total_devices() != d {
            return Err(CostError::MeshMismatch { devices: d, rows: mesh.rows, cols: mesh.cols });
        }
        if d <= 1 || bytes_per_device <= 0.0 {
            return Ok(0.0);
        }
        let bw = self.link_bandwidth;
        let hops = (d as f64).sqrt();
        Ok(match kind {
            CollectiveKind::AllToAll => (bytes_per_device * hops / bw).max(self.hop_latency * hops),
            CollectiveKind::AllReduce => (2.0 * bytes_per_device / bw).max(self.hop_latency),
            CollectiveKind::AllGather => (bytes_per_device * d as f64 / bw).max(self.hop_latency),
            CollectiveKind::CollectivePermute => (bytes_per_device / bw).max(self.hop_latency),
        })
    }
}

/// Time for one collective with default link parameters.
///
/// AllToAll grows as `sqrt(D)`, AllGather as `D`; AllReduce and
/// CollectivePermute are independent of `D`. Everything is free at `D = 1`.
pub fn collective_cost(kind: CollectiveKind, bytes_per_device: f64, d: usize, mesh: &DeviceMesh) -> Result<f64, CostError> {
    CostParams::default().collective_cost(kind, bytes_per_device, d, mesh)
}

pub fn collective_cost_by_name(kind: &str, bytes_per_device: f64, d: usize, mesh: &DeviceMesh) -> Result<f64, CostError> {
    let k = CollectiveKind::from_name(kind).ok_or_else(|| CostError::UnknownKind(kind.to_string()))?;
    collective_cost(k, bytes_per_device, d, mesh)
}

/// Least-squares slope of `log y` against `log x`.
pub fn fit_exponent(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

/// Fitted exponent of `collective_cost(kind, bytes, D)` over `devices`.
pub fn scaling_exponent(kind: CollectiveKind, bytes_per_device: f64, devices: &[usize]) -> Result<f64, CostError> {
    let xs: Vec<f64> = devices.iter().map(|&d| d as f64).collect();
    let ys =
        devices.iter().map(|&d| collective_cost(kind, bytes_per_device, d, &DeviceMesh::for_devices(d))).collect::<Result<Vec<_>, _>>()?;
    Ok(fit_exponent(&xs, &ys))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CostEstimate {
    /// Per-partition multiply-accumulates.
    pub compute_units: f64,
    pub comm_time_units: f64,
    /// Collective with the largest single contribution.
    pub dominant_primitive: Option<CollectiveKind>,
}

impl fmt::Display for CostEstimate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dom = self.dominant_primitive.map_or("-", CollectiveKind::name);
        write!(f, "compute={} comm={} {}", fmt_units(self.compute_units), fmt_units(self.comm_time_units), dom)
    }
}

pub fn fmt_units(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if (1e-3..1e6).contains(&v.abs()) {
        format!("{v:.3}")
    } else {
        format!("{v:.3e}")
    }
}

struct Acc<'a> {
    d: usize,
    mesh: &'a DeviceMesh,
    est: CostEstimate,
    top: f64,
}

impl<'a> Acc<'a> {
    fn new(d: usize, mesh: &'a DeviceMesh) -> Self {
        Acc { d, mesh, est: CostEstimate::default(), top: 0.0 }
    }

    fn comm(&mut self, kind: CollectiveKind, elements: f64) -> Result<(), CostError> {
        let t = collective_cost(kind, elements * BYTES_PER_ELEMENT, self.d, self.mesh)?;
        self.est.comm_time_units += t;
        if self.est.dominant_primitive.is_none() || t > self.top {
            self.top = t;
            self.est.dominant_primitive = Some(kind);
        }
        Ok(())
    }

    fn finish(self) -> CostEstimate {
        self.est
    }
}

/// A tensor described by dim letters and the subset that is partitioned.
#[derive(Clone, Debug)]
struct Term {
    letters: Vec<char>,
    sharded: BTreeSet<char>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Elementwise,
    Einsum,
    Reduce,
    Convolution,
}

struct Pattern {
    kind: Kind,
    operands: Vec<Term>,
    out: Term,
    extents: BTreeMap<char, f64>,
    /// Halo width per partitioned spatial letter (convolutions).
    halo: BTreeMap<char, f64>,
    /// Rotating operands larger than this use a permute loop instead of a gather.
    gather_budget: Option<f64>,
}

impl Pattern {
    fn size(&self, letters: &[char]) -> f64 {
        letters.iter().map(|c| self.extents.get(c).copied().unwrap_or(1.0)).product()
    }

    fn reshard(&self, acc: &mut Acc, letters: &[char], from: &BTreeSet<char>, to: &BTreeSet<char>) -> Result<(), CostError> {
        if from == to || from.is_empty() {
            return Ok(());
        }
        let per = self.size(letters) / acc.d as f64;
        let kind = if to.is_empty() { CollectiveKind::AllGather } else { CollectiveKind::AllToAll };
        acc.comm(kind, per)
    }

    fn estimate(&self, d: usize, mesh: &DeviceMesh) -> Result<CostEstimate, CostError> {
        let mut acc = Acc::new(d, mesh);
        let any_sharded = self.operands.iter().chain([&self.out]).any(|t| !t.sharded.is_empty());
        let total = match self.kind {
            Kind::Einsum | Kind::Convolution => {
                let all: BTreeSet<char> = self.operands.iter().flat_map(|t| t.letters.iter().copied()).collect();
                self.size(&all.into_iter().collect::<Vec<_>>())
            }
            _ => self.size(&self.operands[0].letters),
        };
        acc.est.compute_units = if any_sharded { total / d as f64 } else { total };

        let result = match self.kind {
            Kind::Elementwise => {
                for t in &self.operands {
                    if !t.letters.is_empty() {
                        self.reshard(&mut acc, &t.letters, &t.sharded, &self.out.sharded)?;
                    }
                }
                self.out.sharded.clone()
            }
            Kind::Reduce => {
                let x = &self.operands[0];
                let kept: BTreeSet<char> = x.sharded.iter().copied().filter(|c| self.out.letters.contains(c)).collect();
                if kept.len() < x.sharded.len() {
                    acc.comm(CollectiveKind::AllReduce, self.size(&self.out.letters))?;
                    BTreeSet::new()
                } else {
                    kept
                }
            }
            Kind::Einsum => self.einsum(&mut acc)?,
            Kind::Convolution => {
                let (x, k) = (&self.operands[0], &self.operands[1]);
                self.reshard(&mut acc, &k.letters, &k.sharded, &BTreeSet::new())?;
                for c in &x.sharded {
                    let w = self.halo.get(c).copied().unwrap_or(0.0);
                    if w > 0.0 {
                        let rest: Vec<char> = x.letters.iter().copied().filter(|l| l != c).collect();
                        acc.comm(CollectiveKind::CollectivePermute, self.size(&rest) * w)?;
                    }
                }
                x.sharded.iter().copied().filter(|c| self.out.letters.contains(c)).collect()
            }
        };
        self.reshard(&mut acc, &self.out.letters, &result, &self.out.sharded)?;
        Ok(acc.finish())
    }

    /// Returns the partitioning of the locally computed result.
    fn einsum(&self, acc: &mut Acc) -> Result<BTreeSet<char>, CostError> {
        let (l, r) = (&self.operands[0], &self.operands[1]);
        let out = &self.out.letters;
        let in_out = |c: &char| out.contains(c);
        let batch: BTreeSet<char> = l.sharded.intersection(&r.sharded).copied().filter(in_out).collect();
        if !batch.is_empty() {
            return Ok(batch);
        }
        for (x, o) in [(l, r), (r, l)] {
            let shared: BTreeSet<char> = x.sharded.iter().copied().filter(|c| in_out(c) && o.letters.contains(c)).collect();
            if !shared.is_empty() {
                self.reshard(acc, &o.letters, &o.sharded, &shared)?;
                return Ok(x.sharded.iter().copied().filter(in_out).collect());
            }
        }
        let contracting = |t: &Term| !t.sharded.is_empty() && t.sharded.iter().all(|c| !in_out(c));
        let non_contracting = |t: &Term| !t.sharded.is_empty() && t.sharded.iter().all(in_out);
        if (contracting(l) && (r.sharded.is_empty() || r.sharded == l.sharded)) || (contracting(r) && l.sharded.is_empty()) {
            acc.comm(CollectiveKind::AllReduce, self.size(out))?;
            return Ok(BTreeSet::new());
        }
        // Keep the operand whose partitioning survives into the output.
        let order = if !r.sharded.is_empty() && r.sharded.is_subset(&self.out.sharded) { [(r, l), (l, r)] } else { [(l, r), (r, l)] };
        for (x, o) in order {
            if !non_contracting(x) {
                continue;
            }
            if o.sharded.is_empty() {
                return Ok(x.sharded.clone());
            }
            let full = self.size(&o.letters);
            let per = full / acc.d as f64;
            match self.gather_budget {
                Some(b) if full * BYTES_PER_ELEMENT > b => {
                    for _ in 1..acc.d {
                        acc.comm(CollectiveKind::CollectivePermute, per)?;
                    }
                }
                _ => acc.comm(CollectiveKind::AllGather, per)?,
            }
            return Ok(x.sharded.clone());
        }
        for t in [l, r] {
            self.reshard(acc, &t.letters, &t.sharded, &BTreeSet::new())?;
        }
        Ok(BTreeSet::new())
    }
}

fn parse_signature(sig: &str, shardings: &[&str], d: usize) -> Result<Pattern, CostError> {
    let bad = || CostError::UnknownPattern(sig.to_string());
    let sig_t = sig.trim();
    let open = sig_t.find('(').ok_or_else(bad)?;
    let body = sig_t[open + 1..].strip_suffix(')').ok_or_else(bad)?;
    let kind = match sig_t[..open].trim().to_ascii_lowercase().as_str() {
        "add" | "sub" | "mul" | "div" | "max" | "min" => Kind::Elementwise,
        "matmul" | "einsum" | "dot" => Kind::Einsum,
        "reduce" => Kind::Reduce,
        "convolution" | "conv" => Kind::Convolution,
        _ => return Err(bad()),
    };
    let (ins, out) = body.split_once("->").ok_or_else(bad)?;
    let operands: Vec<&str> = ins.split(',').map(str::trim).collect();
    let arity_ok = match kind {
        Kind::Elementwise => !operands.is_empty(),
        Kind::Reduce => operands.len() == 1,
        Kind::Einsum | Kind::Convolution => operands.len() == 2,
    };
    let letters_ok = |s: &str| !s.is_empty() && s.chars().all(|c| c.is_ascii_alphabetic());
    if !arity_ok || shardings.len() != operands.len() + 1 || !operands.iter().all(|s| letters_ok(s)) || !letters_ok(out.trim()) {
        return Err(bad());
    }
    let term = |s: &str, sh: &str| -> Result<Term, CostError> {
        let letters: Vec<char> = s.chars().collect();
        let sharded: BTreeSet<char> = sh.chars().filter(|c| !c.is_whitespace() && *c != ',').collect();
        if !sharded.iter().all(|c| letters.contains(c)) {
            return Err(bad());
        }
        Ok(Term { letters, sharded })
    };
    let operands = operands.iter().zip(shardings).map(|(s, sh)| term(s, sh)).collect::<Result<Vec<_>, _>>()?;
    let out = term(out.trim(), shardings[shardings.len() - 1])?;
    if kind == Kind::Elementwise && operands.iter().any(|t| t.letters != out.letters) {
        return Err(bad());
    }

    // Partitioned letters grow with D; the expert capacity shrinks as 1/D
    // when experts grow; kernel spatial letters are small constants.
    let scaled: BTreeSet<char> = operands.iter().chain([&out]).flat_map(|t| t.sharded.iter().copied()).collect();
    let mut extents = BTreeMap::new();
    let mut halo = BTreeMap::new();
    let all: BTreeSet<char> = operands.iter().chain([&out]).flat_map(|t| t.letters.iter().copied()).collect();
    for &c in &all {
        let v = if scaled.contains(&c) {
            d as f64
        } else if c == 'C' && kind == Kind::Einsum && scaled.contains(&'E') {
            1.0 / d as f64
        } else if c.is_ascii_lowercase() && kind == Kind::Convolution {
            3.0
        } else {
            1.0
        };
        extents.insert(c, v);
    }
    if kind == Kind::Convolution {
        for c in &operands[0].sharded {
            let k = c.to_ascii_lowercase();
            if operands[1].letters.contains(&k) {
                halo.insert(*c, extents[&k] - 1.0);
            }
        }
    }
    Ok(Pattern { kind, operands, out, extents, halo, gather_budget: None })
}

/// Per-partition compute and communication for an operator signature such as
/// `Matmul(AB,BC->AC)`. `shardings` lists the partitioned letters of each
/// operand followed by the output, e.g. `["B", "B", ""]`.
///
/// Partitioned letters have extent `D` and others extent 1, except the
/// capacity letter `C` of an einsum with partitioned experts `E`, which has
/// extent `1/D`.
pub fn op_scalability(op_signature: &str, shardings: &[&str], d: usize) -> Result<CostEstimate, CostError> {
    let p = parse_signature(op_signature, shardings, d)?;
    p.estimate(d, &DeviceMesh::for_devices(d))
}

fn letters(n: usize) -> Vec<char> {
    (0..n).map(|i| (b'a' + i as u8) as char).collect()
}

fn sharded_letters(s: Option<&Sharding>, letters: &[char]) -> BTreeSet<char> {
    match s {
        Some(s) => s.tiled_dims().into_iter().filter(|&d| d < letters.len()).map(|d| letters[d]).collect(),
        None => BTreeSet::new(),
    }
}

/// Estimate for one node of an annotated graph partitioned on `d` devices.
pub fn node_cost(graph: &Graph, id: NodeId, d: usize, opts: &PartitionOptions) -> Result<CostEstimate, CostError> {
    let mesh = DeviceMesh::for_devices(d);
    let node = graph.node(id);
    let out_shape = &node.out_shape;
    let term_of = |nid: NodeId, letters: Vec<char>| Term { sharded: sharded_letters(graph.node(nid).sharding.as_ref(), &letters), letters };
    let extents_of = |pairs: &[(&[char], &[usize])]| {
        let mut m = BTreeMap::new();
        for (ls, dims) in pairs {
            for (c, &n) in ls.iter().zip(dims.iter()) {
                m.insert(*c, n as f64);
            }
        }
        m
    };
    let out_letters = letters(out_shape.rank());
    let out_term = term_of(id, out_letters.clone());
    let pattern = |kind, operands: Vec<Term>, out: Term, extents, halo| Pattern {
        kind,
        operands,
        out,
        extents,
        halo,
        gather_budget: Some(opts.memory_budget as f64),
    };
    let simple = |compute: f64| CostEstimate { compute_units: compute, ..CostEstimate::default() };
    let per_device = |nid: NodeId| {
        let n = graph.node(nid);
        let s = n.sharding.clone().unwrap_or(Sharding::Replicated);
        s.per_device_shape(&n.out_shape).num_elements() as f64
    };

    match &node.op {
        OpKind::Parameter { .. } | OpKind::Iota { .. } | OpKind::Constant { .. } => Ok(simple(0.0)),
        OpKind::Elementwise(_) => {
            let operands: Vec<Term> = node
                .operands
                .iter()
                .map(|&o| {
                    if graph.shape(o).rank() == 0 {
                        Term { letters: vec![], sharded: BTreeSet::new() }
                    } else {
                        term_of(o, out_letters.clone())
                    }
                })
                .collect();
            let ext = extents_of(&[(&out_letters, out_shape.dims())]);
            pattern(Kind::Elementwise, operands, out_term, ext, BTreeMap::new()).estimate(d, &mesh)
        }
        OpKind::Einsum(spec) => {
            let EinsumSpec { lhs, rhs, out, .. } = spec;
            let (a, b) = (node.operands[0], node.operands[1]);
            let ext = extents_of(&[(lhs, graph.shape(a).dims()), (rhs, graph.shape(b).dims())]);
            let ops = vec![term_of(a, lhs.clone()), term_of(b, rhs.clone())];
            pattern(Kind::Einsum, ops, term_of(id, out.clone()), ext, BTreeMap::new()).estimate(d, &mesh)
        }
        OpKind::Reduce { dims, .. } => {
            let x = node.operands[0];
            let in_l = letters(graph.shape(x).rank());
            let kept: Vec<char> = (0..in_l.len()).filter(|i| !dims.contains(i)).map(|i| in_l[i]).collect();
            let ext = extents_of(&[(&in_l, graph.shape(x).dims())]);
            let out = term_of(id, kept);
            pattern(Kind::Reduce, vec![term_of(x, in_l)], out, ext, BTreeMap::new()).estimate(d, &mesh)
        }
        OpKind::Convolution { window } => {
            let (x, k) = (node.operands[0], node.operands[1]);
            let rank = graph.shape(x).rank();
            // Input b,i,spatial...; kernel o,i,spatial...; output b,o,spatial...
            let spatial: Vec<char> = (0..rank - 2).map(|i| (b'x' - (rank as u8 - 2) + 1 + i as u8) as char).collect();
            let mut xl = vec!['b', 'i'];
            xl.extend(&spatial);
            let mut kl = vec!['o', 'i'];
            kl.extend(spatial.iter().map(|c| c.to_ascii_uppercase()));
            let mut ol = vec!['b', 'o'];
            ol.extend(&spatial);
            let ext = extents_of(&[(&xl, graph.shape(x).dims()), (&kl, graph.shape(k).dims())]);
            let halo =
                spatial.iter().zip(window).map(|(c, w)| (*c, (w.effective_window() + w.padding_low + w.padding_high) as f64)).collect();
            let ops = vec![term_of(x, xl), term_of(k, kl)];
            pattern(Kind::Convolution, ops, term_of(id, ol), ext, halo).estimate(d, &mesh)
        }
        _ => {
            let mut acc = Acc::new(d, &mesh);
            acc.est.compute_units = per_device(id);
            let x = node.operands[0];
            let s_in = graph.node(x).sharding.clone().unwrap_or(Sharding::Replicated);
            let s_out = node.sharding.clone().unwrap_or(Sharding::Replicated);
            let tiled = s_in.tiled_dims();
            let gather = |acc: &mut Acc| -> Result<(), CostError> {
                for &o in &node.operands {
                    if graph.node(o).sharding.as_ref().is_some_and(|s| !s.is_replicated()) {
                        acc.comm(CollectiveKind::AllGather, per_device(o))?;
                    }
                }
                Ok(())
            };
            let in_full = graph.shape(x).dims().to_vec();
            match &node.op {
                OpKind::Pad { low, high, interior, .. } => {
                    if tiled.iter().any(|&t| interior[t] != 0) {
                        gather(&mut acc)?;
                    } else if tiled.iter().any(|&t| low[t] != 0 || high[t] != 0) {
                        acc.comm(CollectiveKind::CollectivePermute, per_device(x))?;
                    }
                }
                OpKind::Slice { start, limit, stride } => {
                    if tiled.iter().any(|&t| stride[t] != 1) {
                        gather(&mut acc)?;
                    } else if tiled.iter().any(|&t| start[t] != 0 || limit[t] != in_full[t]) {
                        acc.comm(CollectiveKind::CollectivePermute, per_device(x))?;
                    }
                }
                OpKind::Reverse { dims } => {
                    if dims.iter().any(|t| tiled.contains(t)) {
                        acc.comm(CollectiveKind::CollectivePermute, per_device(x))?;
                    }
                }
                OpKind::Reshape { .. } => {
                    let leading = |s: &Sharding| s.single_tiled_dim() == Some(0);
                    if s_in.is_replicated() {
                    } else if leading(&s_in) && leading(&s_out) && s_in.num_tiles() == s_out.num_tiles() {
                        if in_full[0] != out_shape.dims()[0] {
                            acc.comm(CollectiveKind::CollectivePermute, per_device(x))?;
                        }
                    } else {
                        gather(&mut acc)?;
                    }
                }
                OpKind::Cumsum { dim, .. } | OpKind::Softmax { dim } | OpKind::TopK { dim, .. } | OpKind::OneHot { dim, .. } => {
                    let blocked = s_out.tiled_dims().contains(dim);
                    let in_dim = |t: usize| if matches!(node.op, OpKind::OneHot { .. }) && t >= *dim { t + 1 } else { t };
                    let aligned = tiled.iter().map(|&t| in_dim(t)).collect::<Vec<_>>() == s_out.tiled_dims();
                    if blocked {
                        gather(&mut acc)?;
                    } else if !aligned && !tiled.is_empty() {
                        let kind = if s_out.is_replicated() { CollectiveKind::AllGather } else { CollectiveKind::AllToAll };
                        acc.comm(kind, per_device(x))?;
                    }
                }
                OpKind::DynamicSlice { sizes } => {
                    if s_out.tiled_dims().iter().any(|&t| sizes[t] != in_full[t]) {
                        gather(&mut acc)?;
                    }
                }
                other => return Err(CostError::UnknownPattern(other.name().to_string())),
            }
            Ok(acc.finish())
        }
    }
}

/// [`node_cost`] for every node, in graph order.
pub fn graph_cost(graph: &Graph, d: usize, opts: &PartitionOptions) -> Result<Vec<(NodeId, CostEstimate)>, CostError> {
    (0..graph.len()).map(|id| node_cost(graph, id, d, opts).map(|c| (id, c))).collect()
}

/// Per-device cost of the MoE layer's parts.
#[derive(Clone, Debug, PartialEq)]
pub struct MoeCostBreakdown {
    /// Expert feed-forward compute.
    pub ffn: f64,
    /// Gate projection, dispatch and combine einsums.
    pub gate_einsum: f64,
    /// Cumulative sums that turn per-token choices into per-expert slots.
    pub sequential_gating: f64,
    /// Dispatch and combine AllToAll time.
    pub dispatch_combine_comm: f64,
    /// Reduction of the auxiliary loss.
    pub aux_comm: f64,
}

impl MoeCostBreakdown {
    pub fn compute(&self) -> f64 {
        self.ffn + self.gate_einsum + self.sequential_gating
    }

    pub fn communication(&self) -> f64 {
        self.dispatch_combine_comm + self.aux_comm
    }

    pub fn rows(&self) -> [(&'static str, f64); 5] {
        [
            ("ffn", self.ffn),
            ("gate_einsum", self.gate_einsum),
            ("sequential_gating", self.sequential_gating),
            ("dispatch_combine_alltoall", self.dispatch_combine_comm),
            ("aux_allreduce", self.aux_comm),
        ]
    }
}

pub fn moe_layer_cost(cfg: &MoeConfig, d: usize, mesh: &DeviceMesh) -> Result<MoeCostBreakdown, CostError> {
    if mesh.total_devices() != d {
        return Err(CostError::MeshMismatch { devices: d, rows: mesh.rows, cols: mesh.cols });
    }
    let [g, s, e, m, h, c] = [cfg.g, cfg.s, cfg.e, cfg.m, cfg.h, cfg.c].map(|x| x as f64);
    let dd = d as f64;
    let dispatched = e * g * c * m / dd;
    let a2a = collective_cost(CollectiveKind::AllToAll, dispatched * BYTES_PER_ELEMENT, d, mesh)?;
    Ok(MoeCostBreakdown {
        ffn: 2.0 * e * g * c * m * h / dd,
        gate_einsum: g * s * m * e / dd + 2.0 * g * s * e * c * m / dd,
        sequential_gating: 2.0 * g * s * e / dd,
        dispatch_combine_comm: 2.0 * a2a,
        aux_comm: collective_cost(CollectiveKind::AllReduce, BYTES_PER_ELEMENT, d, mesh)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mesh(d: usize) -> DeviceMesh {
        DeviceMesh::for_devices(d)
    }

    #[test]
    fn zero_bytes_and_single_device_are_free() {
        assert_eq!(collective_cost(CollectiveKind::CollectivePermute, 0.0, 4, &mesh(4)).unwrap(), 0.0);
        for k in [CollectiveKind::AllReduce, CollectiveKind::AllToAll, CollectiveKind::AllGather] {
            assert_eq!(collective_cost(k, 100.0, 1, &mesh(1)).unwrap(), 0.0);
        }
    }

    #[test]
    fn allreduce_flat_alltoall_sqrt() {
        let ar = |d| collective_cost(CollectiveKind::AllReduce, 8.0, d, &mesh(d)).unwrap();
        assert_eq!(ar(16), ar(2048));
        let a2a = |d| collective_cost(CollectiveKind::AllToAll, 8.0, d, &mesh(d)).unwrap();
        assert!((a2a(2048) / a2a(16) - 128f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert!(matches!(collective_cost_by_name("Broadcast", 1.0, 4, &mesh(4)), Err(CostError::UnknownKind(_))));
        assert!(matches!(collective_cost(CollectiveKind::AllReduce, 1.0, 4, &mesh(8)), Err(CostError::MeshMismatch { .. })));
        assert!(matches!(op_scalability("Sort(A->A)", &["A", "A"], 4), Err(CostError::UnknownPattern(_))));
        assert!(matches!(op_scalability("Matmul(AB,BC->AC)", &["B", "B"], 4), Err(CostError::UnknownPattern(_))));
    }

    #[test]
    fn latency_floor() {
        let p = CostParams { link_bandwidth: 1.0, hop_latency: 100.0 };
        let t = |d| p.collective_cost(CollectiveKind::AllToAll, 1.0, d, &mesh(d)).unwrap();
        assert_eq!(t(64) / t(16), 2.0);
    }

    #[test]
    fn fit_recovers_power() {
        let xs = [2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(0.7)).collect();
        assert!((fit_exponent(&xs, &ys) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn moe_single_device_has_no_communication() {
        let b = moe_layer_cost(&MoeConfig::scaled(1), 1, &mesh(1)).unwrap();
        assert_eq!(b.communication(), 0.0);
        assert!(b.ffn > 0.0);
    }
}
