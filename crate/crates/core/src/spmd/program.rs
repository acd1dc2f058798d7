use std::fmt::{self, Write as _};

use crate::ir::text::{format_attrs, format_operands};
use crate::ir::{EinsumSpec, NodeId, OpKind, ReduceOp, Shape};
use crate::sharding::Sharding;

pub type SpmdNodeId = usize;

#[derive(Clone, Debug, PartialEq)]
pub enum Collective {
    /// Elementwise reduction within each group; every member receives the result.
    AllReduce { op: ReduceOp, groups: Vec<Vec<usize>> },
    /// Concatenates group members' values along `dim` in group order.
    AllGather { dim: usize, groups: Vec<Vec<usize>> },
    /// Splits along `split_dim` into one piece per member, sends piece `j` to
    /// member `j`, and concatenates received pieces along `concat_dim`.
    AllToAll { split_dim: usize, concat_dim: usize, groups: Vec<Vec<usize>> },
    /// Sends each source's value to its destination; devices that are no
    /// destination receive zeros.
    CollectivePermute { pairs: Vec<(usize, usize)> },
    /// Extends each member's block along `dim` with `left` elements from its
    /// predecessors and `right` from its successors in group order. Positions
    /// outside the group's concatenated data are zero.
    HaloExchange { dim: usize, left: usize, right: usize, groups: Vec<Vec<usize>> },
}

impl Collective {
    pub fn kind(&self) -> CollectiveKind {
        match self {
            Collective::AllReduce { .. } => CollectiveKind::AllReduce,
            Collective::AllGather { .. } => CollectiveKind::AllGather,
            Collective::AllToAll { .. } => CollectiveKind::AllToAll,
            Collective::CollectivePermute { .. } | Collective::HaloExchange { .. } => CollectiveKind::CollectivePermute,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CollectiveKind {
    AllReduce,
    AllGather,
    AllToAll,
    CollectivePermute,
}

impl CollectiveKind {
    pub fn name(self) -> &'static str {
        match self {
            CollectiveKind::AllReduce => "AllReduce",
            CollectiveKind::AllGather => "AllGather",
            CollectiveKind::AllToAll => "AllToAll",
            CollectiveKind::CollectivePermute => "CollectivePermute",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Some(match s.to_ascii_lowercase().replace(['_', '-'], "").as_str() {
            "allreduce" | "ar" => CollectiveKind::AllReduce,
            "allgather" | "ag" => CollectiveKind::AllGather,
            "alltoall" | "a2a" => CollectiveKind::AllToAll,
            "collectivepermute" | "cp" => CollectiveKind::CollectivePermute,
            _ => return None,
        })
    }
}

impl fmt::Display for CollectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// What happens to the rotating operand's block on each loop iteration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LoopUse {
    /// The rotating dim survives into the output; each block fills the
    /// output slice at `out_dim`.
    Output { out_dim: usize },
    /// The rotating dim is contracted; the matching slice of the stationary
    /// operand along `stationary_dim` is used and partial results are summed.
    Contract { stationary_dim: usize },
}

/// Slicing-in-a-loop einsum. Operands: stationary block, rotating block, and
/// the scalar ring position of the executing device.
#[derive(Clone, Debug, PartialEq)]
pub struct EinsumLoop {
    pub spec: EinsumSpec,
    pub stationary_is_lhs: bool,
    pub rotate_dim: usize,
    pub usage: LoopUse,
    /// Device order around the ring; after each iteration member `q` passes
    /// its rotating block to member `q - 1`.
    pub rings: Vec<Vec<usize>>,
}

impl EinsumLoop {
    pub fn iterations(&self) -> usize {
        self.rings.first().map_or(1, Vec::len)
    }

    pub fn permute_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for ring in &self.rings {
            let k = ring.len();
            for q in 0..k {
                pairs.push((ring[q], ring[(q + k - 1) % k]));
            }
        }
        pairs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SpmdOp {
    Local(OpKind),
    PartitionId,
    Collective(Collective),
    Loop(EinsumLoop),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpmdNode {
    pub id: SpmdNodeId,
    pub op: SpmdOp,
    pub operands: Vec<SpmdNodeId>,
    /// Per-device shape.
    pub shape: Shape,
    /// Graph node this instruction was emitted for.
    pub origin: Option<NodeId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputBinding {
    pub name: String,
    pub node: SpmdNodeId,
    pub full_shape: Shape,
    pub sharding: Sharding,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputBinding {
    pub graph_node: NodeId,
    pub node: SpmdNodeId,
    pub full_shape: Shape,
    pub sharding: Sharding,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpmdProgram {
    pub num_devices: usize,
    pub nodes: Vec<SpmdNode>,
    pub inputs: Vec<InputBinding>,
    pub outputs: Vec<OutputBinding>,
}

impl SpmdProgram {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Collective kinds in program order, loop rotations included.
    pub fn collective_kinds(&self) -> Vec<CollectiveKind> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                SpmdOp::Collective(c) => Some(c.kind()),
                SpmdOp::Loop(_) => Some(CollectiveKind::CollectivePermute),
                _ => None,
            })
            .collect()
    }

    pub fn count(&self, kind: CollectiveKind) -> usize {
        self.collective_kinds().iter().filter(|&&k| k == kind).count()
    }

    /// Short summary such as `AllReduce=1 AllToAll=2`.
    pub fn collective_summary(&self) -> String {
        let kinds = [CollectiveKind::AllReduce, CollectiveKind::AllGather, CollectiveKind::AllToAll, CollectiveKind::CollectivePermute];
        kinds.iter().map(|&k| format!("{k}={}", self.count(k))).collect::<Vec<_>>().join(" ")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# devices={}", self.num_devices);
        for b in &self.inputs {
            let _ = writeln!(s, "# input \"{}\" %{} : {} {}", b.name, b.node, b.full_shape, b.sharding);
        }
        for b in &self.outputs {
            let _ = writeln!(s, "# output graph %{} -> %{} : {} {}", b.graph_node, b.node, b.full_shape, b.sharding);
        }
        for n in &self.nodes {
            let _ = writeln!(s, "{}", format_node(n));
        }
        s
    }
}

fn groups_text(groups: &[Vec<usize>]) -> String {
    let g: Vec<String> = groups.iter().map(|g| format!("[{}]", g.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","))).collect();
    format!("[{}]", g.join(","))
}

fn pairs_text(pairs: &[(usize, usize)]) -> String {
    let p: Vec<String> = pairs.iter().map(|(a, b)| format!("({a},{b})")).collect();
    format!("[{}]", p.join(","))
}

fn format_node(n: &SpmdNode) -> String {
    let head = match &n.op {
        SpmdOp::Local(op) => format!("{}{}", op.name(), format_attrs(op)),
        SpmdOp::PartitionId => "partition_id".to_string(),
        SpmdOp::Collective(c) => match c {
            Collective::AllReduce { op, groups } => format!("all_reduce op={} groups={}", op.name(), groups_text(groups)),
            Collective::AllGather { dim, groups } => format!("all_gather dim={dim} groups={}", groups_text(groups)),
            Collective::AllToAll { split_dim, concat_dim, groups } => {
                format!("all_to_all split={split_dim} concat={concat_dim} groups={}", groups_text(groups))
            }
            Collective::CollectivePermute { pairs } => format!("collective_permute pairs={}", pairs_text(pairs)),
            Collective::HaloExchange { dim, left, right, groups } => {
                format!("halo_exchange dim={dim} left={left} right={right} groups={}", groups_text(groups))
            }
        },
        SpmdOp::Loop(l) => {
            let usage = match l.usage {
                LoopUse::Output { out_dim } => format!("out_dim={out_dim}"),
                LoopUse::Contract { stationary_dim } => format!("contract_dim={stationary_dim}"),
            };
            format!(
                "einsum_loop \"{}\" stationary={} rotate_dim={} {} iterations={} pairs={}",
                l.spec,
                if l.stationary_is_lhs { "lhs" } else { "rhs" },
                l.rotate_dim,
                usage,
                l.iterations(),
                pairs_text(&l.permute_pairs())
            )
        }
    };
    let origin = n.origin.map(|o| format!("  # from %{o}")).unwrap_or_default();
    format!("%{} = {}{} : {}{}", n.id, head, format_operands(&n.operands), n.shape, origin)
}
