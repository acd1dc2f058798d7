//! Position-wise mixture-of-experts layer: group-level top-2 gating, the
//! annotated forward-pass graph, and flop accounting.

use crate::ir::{CompareDir, Graph, GraphBuilder, OpKind, ReduceOp, Shape, TensorValue, TopKOutput};
use crate::rng::uniform;
use crate::sharding::Sharding;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MoeError {
    #[error("expert capacity must be at least 1")]
    CapacityNonPositive,
    #[error("{what} has shape {actual}, expected {expected}")]
    ShapeMismatch { what: &'static str, expected: Shape, actual: Shape },
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeConfig {
    /// Groups.
    pub g: usize,
    /// Tokens per group.
    pub s: usize,
    /// Experts.
    pub e: usize,
    /// Model dim.
    pub m: usize,
    /// Hidden dim.
    pub h: usize,
    /// Per-group expert capacity.
    pub c: usize,
    /// Auxiliary loss multiplier.
    pub aux_weight: f32,
    pub seed: u64,
    /// Partitions used for the graph's annotations.
    pub partitions: usize,
}

impl MoeConfig {
    /// Capacity `ceil(2S/E)` and one partition per expert.
    pub fn new(g: usize, s: usize, e: usize, m: usize, h: usize, aux_weight: f32, seed: u64) -> Self {
        MoeConfig { g, s, e, m, h, c: (2 * s).div_ceil(e).max(1), aux_weight, seed, partitions: e }
    }

    /// Small layer with `G = E = d`.
    pub fn for_devices(d: usize) -> Self {
        MoeConfig::new(d, 8, d, 4, 8, 0.01, 0)
    }

    /// Layer following the scaling rules: tokens per device, S, M and H fixed;
    /// G and E proportional to `d`; `C = 2S/E`.
    pub fn scaled(d: usize) -> Self {
        MoeConfig::new(d, 32, d, 16, 64, 0.01, 0)
    }

    /// Recovers the layer dimensions from a graph built by [`build_moe_graph`].
    pub fn from_graph(graph: &Graph) -> Option<MoeConfig> {
        let param = |want: &str| {
            graph.nodes.iter().find_map(|n| match &n.op {
                OpKind::Parameter { name, shape } if name == want => Some(shape.dims().to_vec()),
                _ => None,
            })
        };
        let (x, wi) = (param("inputs")?, param("wi")?);
        let [g, s, m] = x[..] else { return None };
        let [e, m2, h] = wi[..] else { return None };
        if m != m2 {
            return None;
        }
        let c = graph.nodes.iter().find_map(|n| match &n.op {
            OpKind::Einsum(spec) if spec.to_string() == "GSEC,GSM->EGCM" => Some(n.out_shape.dims()[2]),
            _ => None,
        })?;
        let parts = graph.node(graph.parameters().first()?.0).sharding.as_ref().map_or(1, |s| s.num_tiles());
        Some(MoeConfig { g, s, e, m, h, c, aux_weight: 0.0, seed: 0, partitions: parts })
    }

    pub fn validate(&self) -> Result<(), MoeError> {
        if self.c == 0 {
            return Err(MoeError::CapacityNonPositive);
        }
        Ok(())
    }
}

/// Source of the second-expert routing threshold.
#[derive(Clone, Debug, PartialEq)]
pub enum Routing {
    /// Uniform draws keyed by `(seed, g, s)`.
    Seeded(u64),
    /// Explicit `[G, S]` thresholds.
    Fixed(TensorValue),
    /// Threshold 1: the second expert is never used.
    Disabled,
}

/// `[G, S]` uniform thresholds keyed by `(seed, g, s)`.
pub fn routing_noise(seed: u64, g: usize, s: usize) -> TensorValue {
    TensorValue::from_fn([g, s], |i| uniform(seed, i[0] as u64, i[1] as u64))
}

impl Routing {
    fn threshold(&self, g: usize, s: usize) -> f32 {
        match self {
            Routing::Seeded(seed) => uniform(*seed, g as u64, s as u64),
            Routing::Fixed(t) => t.get(&[g, s]),
            Routing::Disabled => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatingOutput {
    /// `[G, S, E, C]`.
    pub combine_weights: TensorValue,
    /// `[G, S, E, C]`, 1 where the combine weight is non-zero.
    pub dispatch_mask: TensorValue,
    /// Mean over groups of the per-group auxiliary loss.
    pub aux_loss: f32,
    /// Softmax gates, `[G, S, E]`.
    pub gates: TensorValue,
}

fn softmax_row(row: &[f32]) -> Vec<f32> {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = row.iter().map(|&x| (x - max).exp()).collect();
    let sum: f32 = exps.iter().sum();
    exps.iter().map(|&x| x / sum).collect()
}

/// Best two entries, ties going to the lower index.
fn top2(row: &[f32]) -> ((f32, usize), Option<(f32, usize)>) {
    let mut first = (row[0], 0);
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > first.0 {
            first = (v, i);
        }
    }
    let mut second: Option<(f32, usize)> = None;
    for (i, &v) in row.iter().enumerate() {
        if i != first.1 && second.is_none_or(|(b, _)| v > b) {
            second = Some((v, i));
        }
    }
    (first, second)
}

/// Group-level top-2 gating over `[G, S, E]` logits.
pub fn top2_gating(logits: &TensorValue, capacity: usize, routing: &Routing) -> Result<GatingOutput, MoeError> {
    if capacity == 0 {
        return Err(MoeError::CapacityNonPositive);
    }
    let dims = logits.shape.dims();
    let [g_n, s_n, e_n] = dims else {
        return Err(MoeError::ShapeMismatch { what: "logits", expected: Shape::new([0, 0, 0]), actual: logits.shape.clone() });
    };
    let (g_n, s_n, e_n) = (*g_n, *s_n, *e_n);
    let mut combine = TensorValue::zeros([g_n, s_n, e_n, capacity]);
    let mut gates = TensorValue::zeros([g_n, s_n, e_n]);
    let mut aux_sum = 0.0f32;

    for g in 0..g_n {
        let rows: Vec<Vec<f32>> = (0..s_n).map(|s| softmax_row(&logits.data[(g * s_n + s) * e_n..(g * s_n + s + 1) * e_n])).collect();
        for (s, r) in rows.iter().enumerate() {
            for (e, &v) in r.iter().enumerate() {
                gates.set(&[g, s, e], v);
            }
        }
        let mean: Vec<f32> = (0..e_n).map(|e| rows.iter().map(|r| r[e]).sum::<f32>() / s_n as f32).collect();
        let mut counts = vec![0usize; e_n];
        for (s, r) in rows.iter().enumerate() {
            let ((g1, e1), second) = top2(r);
            let g2 = second.map_or(0.0, |x| x.0);
            let c = counts[e1];
            if c < capacity {
                combine.set(&[g, s, e1, c], g1 / (g1 + g2));
            }
            counts[e1] = c + 1;
        }
        aux_sum += (0..e_n).map(|e| counts[e] as f32 / s_n as f32 * mean[e]).sum::<f32>() / e_n as f32;
        for (s, r) in rows.iter().enumerate() {
            let ((g1, _), second) = top2(r);
            let Some((g2, e2)) = second else { continue };
            let w2 = g2 / (g1 + g2);
            let rnd = routing.threshold(g, s);
            let c = counts[e2];
            if c < capacity && 2.0 * w2 > rnd {
                combine.set(&[g, s, e2, c], w2);
            }
            counts[e2] = c + 1;
        }
    }
    let mask = TensorValue::new(combine.shape.clone(), combine.data.iter().map(|&w| if w != 0.0 { 1.0 } else { 0.0 }).collect());
    Ok(GatingOutput { combine_weights: combine, dispatch_mask: mask, aux_loss: aux_sum / g_n as f32, gates })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertWeights {
    /// `[M, E]`.
    pub wg: TensorValue,
    /// `[E, M, H]`.
    pub wi: TensorValue,
    /// `[E, H, M]`.
    pub wo: TensorValue,
}

fn expect_shape(what: &'static str, t: &TensorValue, dims: &[usize]) -> Result<(), MoeError> {
    if t.shape.dims() != dims {
        return Err(MoeError::ShapeMismatch { what, expected: Shape::new(dims.to_vec()), actual: t.shape.clone() });
    }
    Ok(())
}

/// Direct evaluation: `y_s = sum_e combine[s, e] * wo_e relu(wi_e x_s)`.
pub fn moe_forward_numeric(
    inputs: &TensorValue,
    weights: &ExpertWeights,
    cfg: &MoeConfig,
    routing: &Routing,
) -> Result<(TensorValue, f32), MoeError> {
    cfg.validate()?;
    let (g_n, s_n, e_n, m_n, h_n) = (cfg.g, cfg.s, cfg.e, cfg.m, cfg.h);
    expect_shape("inputs", inputs, &[g_n, s_n, m_n])?;
    expect_shape("wg", &weights.wg, &[m_n, e_n])?;
    expect_shape("wi", &weights.wi, &[e_n, m_n, h_n])?;
    expect_shape("wo", &weights.wo, &[e_n, h_n, m_n])?;

    let logits =
        TensorValue::from_fn([g_n, s_n, e_n], |i| (0..m_n).map(|m| inputs.get(&[i[0], i[1], m]) * weights.wg.get(&[m, i[2]])).sum());
    let gating = top2_gating(&logits, cfg.c, routing)?;
    let mut out = TensorValue::zeros([g_n, s_n, m_n]);
    for g in 0..g_n {
        for s in 0..s_n {
            for e in 0..e_n {
                for c in 0..cfg.c {
                    let w = gating.combine_weights.get(&[g, s, e, c]);
                    if w == 0.0 {
                        continue;
                    }
                    let hidden: Vec<f32> = (0..h_n)
                        .map(|h| (0..m_n).map(|m| inputs.get(&[g, s, m]) * weights.wi.get(&[e, m, h])).sum::<f32>().max(0.0))
                        .collect();
                    for m in 0..m_n {
                        let y: f32 = (0..h_n).map(|h| hidden[h] * weights.wo.get(&[e, h, m])).sum();
                        let cur = out.get(&[g, s, m]);
                        out.set(&[g, s, m], cur + w * y);
                    }
                }
            }
        }
    }
    Ok((out, gating.aux_loss))
}

/// The forward pass as an annotated graph with parameters `inputs`, `wg`,
/// `wi`, `wo` and `rnd` (`[G, S]` routing thresholds). Roots are the
/// auxiliary loss and the `[G, S, M]` outputs.
pub fn build_moe_graph(cfg: &MoeConfig) -> Graph {
    let (g_n, s_n, e_n, m_n, h_n, c_n) = (cfg.g, cfg.s, cfg.e, cfg.m, cfg.h, cfg.c);
    let parts = cfg.partitions;
    let mut b = GraphBuilder::new();
    let inputs = b.parameter("inputs", [g_n, s_n, m_n]);
    b.with_sharding(inputs, Sharding::split(3, 0, parts));
    let wg = b.parameter("wg", [m_n, e_n]);
    b.with_sharding(wg, Sharding::Replicated);
    let wi = b.parameter("wi", [e_n, m_n, h_n]);
    b.with_sharding(wi, Sharding::split(3, 0, parts));
    let wo = b.parameter("wo", [e_n, h_n, m_n]);
    b.with_sharding(wo, Sharding::split(3, 0, parts));
    let rnd = b.parameter("rnd", [g_n, s_n]);
    b.with_sharding(rnd, Sharding::split(2, 0, parts));

    let logits = b.einsum("GSM,ME->GSE", inputs, wg);
    let gates = b.softmax(logits, 2);

    let (weighted1, count1, pos1, second) = if e_n == 1 {
        let ones = gates;
        let cum = b.cumsum(ones, 1, true);
        let pos = b.reshape(cum, [g_n, s_n]);
        let count = b.reduce(ones, ReduceOp::Add, vec![1]);
        (ones, count, pos, None)
    } else {
        let vals = b.topk(gates, 2, 2, TopKOutput::Values);
        let idx = b.topk(gates, 2, 2, TopKOutput::Indices);
        let pick = |b: &mut GraphBuilder, t, k: usize| {
            let sl = b.slice(t, vec![0, 0, k], vec![g_n, s_n, k + 1], vec![1, 1, 1]);
            b.reshape(sl, [g_n, s_n])
        };
        let (g1, g2) = (pick(&mut b, vals, 0), pick(&mut b, vals, 1));
        let (i1, i2) = (pick(&mut b, idx, 0), pick(&mut b, idx, 1));
        let denom = b.add(g1, g2);
        let w1 = b.div(g1, denom);
        let w2 = b.div(g2, denom);
        let mask1 = b.one_hot(i1, e_n, 2);
        let mask2 = b.one_hot(i2, e_n, 2);
        let cum1 = b.cumsum(mask1, 1, true);
        let pos1 = b.einsum("GSE,GSE->GS", cum1, mask1);
        let count1 = b.reduce(mask1, ReduceOp::Add, vec![1]);
        let weighted1 = b.einsum("GSE,GS->GSE", mask1, w1);

        let cum2 = b.cumsum(mask2, 1, true);
        let within = b.einsum("GSE,GSE->GS", cum2, mask2);
        let before = b.einsum("GE,GSE->GS", count1, mask2);
        let pos2 = b.add(within, before);
        let two = b.scalar(2.0);
        let doubled = b.mul(w2, two);
        let keep2 = b.compare(CompareDir::Gt, doubled, rnd);
        let cw2 = b.mul(w2, keep2);
        let weighted2 = b.einsum("GSE,GS->GSE", mask2, cw2);
        (weighted1, count1, pos1, Some((weighted2, pos2)))
    };

    // Auxiliary loss: mean over groups of (1/E) sum_e (c_e / S) m_e.
    let gate_sum = b.reduce(gates, ReduceOp::Add, vec![1]);
    let per_group = b.einsum("GE,GE->G", count1, gate_sum);
    let total = b.reduce(per_group, ReduceOp::Add, vec![0]);
    let scale = b.scalar(1.0 / (e_n * s_n * s_n * g_n) as f32);
    b.mul(total, scale);

    let slot1 = b.one_hot(pos1, c_n, 2);
    let mut combine = b.einsum("GSE,GSC->GSEC", weighted1, slot1);
    if let Some((weighted2, pos2)) = second {
        let slot2 = b.one_hot(pos2, c_n, 2);
        let c2 = b.einsum("GSE,GSC->GSEC", weighted2, slot2);
        combine = b.add(combine, c2);
    }
    let zero = b.scalar(0.0);
    let dispatch = b.compare(CompareDir::Gt, combine, zero);

    let dispatched = b.einsum("GSEC,GSM->EGCM", dispatch, inputs);
    b.with_sharding(dispatched, Sharding::split(4, 0, parts));
    let h = b.einsum("EGCM,EMH->EGCH", dispatched, wi);
    let h = b.relu(h);
    let expert_out = b.einsum("EGCH,EHM->GECM", h, wo);
    b.with_sharding(expert_out, Sharding::split(4, 0, parts));
    let out = b.einsum("GSEC,GECM->GSM", combine, expert_out);
    b.with_sharding(out, Sharding::split(3, 0, parts));
    b.finish()
}

/// Graph inputs matching a numeric run with the given routing.
pub fn moe_graph_inputs(
    inputs: &TensorValue,
    weights: &ExpertWeights,
    cfg: &MoeConfig,
    routing: &Routing,
) -> std::collections::BTreeMap<String, TensorValue> {
    let rnd = match routing {
        Routing::Seeded(seed) => routing_noise(*seed, cfg.g, cfg.s),
        Routing::Fixed(t) => t.clone(),
        Routing::Disabled => TensorValue::filled([cfg.g, cfg.s], 1.0),
    };
    [("inputs", inputs.clone()), ("wg", weights.wg.clone()), ("wi", weights.wi.clone()), ("wo", weights.wo.clone()), ("rnd", rnd)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
}

/// Multiply-accumulate counts of the layer's cost terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlopCounts {
    /// Gating einsum and softmax, `G*S*M*E`.
    pub softmax: f64,
    /// `G*S*E*C`.
    pub top2_gating: f64,
    /// Dispatch and combine einsums, `G*S*M*E*C`.
    pub dispatch_combine: f64,
    /// Expert feed-forward, `E*G*C*H*M`.
    pub ffn: f64,
    pub devices: usize,
}

impl FlopCounts {
    pub fn total(&self) -> f64 {
        self.softmax + self.top2_gating + self.dispatch_combine + self.ffn
    }

    /// The same terms divided by the device count.
    pub fn per_device(&self) -> FlopCounts {
        let d = self.devices as f64;
        FlopCounts {
            softmax: self.softmax / d,
            top2_gating: self.top2_gating / d,
            dispatch_combine: self.dispatch_combine / d,
            ffn: self.ffn / d,
            devices: self.devices,
        }
    }
}

pub fn count_flops(cfg: &MoeConfig, devices: usize) -> FlopCounts {
    let [g, s, e, m, h, c] = [cfg.g, cfg.s, cfg.e, cfg.m, cfg.h, cfg.c].map(|x| x as f64);
    FlopCounts { softmax: g * s * m * e, top2_gating: g * s * e * c, dispatch_combine: g * s * m * e * c, ffn: e * g * c * h * m, devices }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(rows: &[[f32; 2]]) -> TensorValue {
        TensorValue::new([1, rows.len(), 2], rows.iter().flatten().copied().collect())
    }

    #[test]
    fn config_round_trips_through_graph() {
        let cfg = MoeConfig::for_devices(4);
        let got = MoeConfig::from_graph(&build_moe_graph(&cfg)).unwrap();
        assert_eq!((got.g, got.s, got.e, got.m, got.h, got.c, got.partitions), (4, 8, 4, 4, 8, 4, 4));
    }

    #[test]
    fn capacity_one_overflows_later_tokens() {
        let out = top2_gating(&logits(&[[10.0, -10.0]; 3]), 1, &Routing::Disabled).unwrap();
        let w = &out.combine_weights;
        assert!(w.get(&[0, 0, 0, 0]) > 0.99);
        for s in 1..3 {
            assert!((0..2).all(|e| w.get(&[0, s, e, 0]) == 0.0));
        }
    }

    #[test]
    fn single_expert_takes_everything() {
        let l = TensorValue::new([1, 3, 1], vec![0.3, -1.0, 2.0]);
        let out = top2_gating(&l, 3, &Routing::Seeded(5)).unwrap();
        for s in 0..3 {
            assert_eq!(out.combine_weights.get(&[0, s, 0, s]), 1.0);
        }
        assert_eq!(out.aux_loss, 1.0);
    }

    #[test]
    fn one_hot_routing_aux_is_one_over_e() {
        let out = top2_gating(&logits(&[[10.0, -10.0]; 4]), 4, &Routing::Disabled).unwrap();
        assert!((out.aux_loss - 0.5).abs() < 1e-6);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let cfg = MoeConfig::new(1, 4, 2, 3, 5, 0.0, 0);
        let w = ExpertWeights {
            wg: TensorValue::filled([3, 2], 0.5),
            wi: TensorValue::filled([2, 3, 5], 1.0),
            wo: TensorValue::filled([2, 5, 3], 1.0),
        };
        let (y, _) = moe_forward_numeric(&TensorValue::zeros([1, 4, 3]), &w, &cfg, &Routing::Seeded(1)).unwrap();
        assert!(y.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn graph_shapes() {
        let cfg = MoeConfig { c: 4, ..MoeConfig::new(4, 8, 4, 8, 16, 0.0, 0) };
        let g = build_moe_graph(&cfg);
        let gates = g.nodes.iter().find(|n| matches!(n.op, crate::ir::OpKind::Softmax { .. })).unwrap();
        assert_eq!(gates.out_shape, Shape::new([4, 8, 4]));
        assert!(g.nodes.iter().any(|n| n.out_shape == Shape::new([4, 4, 4, 8])));
    }

    #[test]
    fn flops_match_extents() {
        let cfg = MoeConfig::new(2, 4, 2, 3, 5, 0.0, 0);
        let f = count_flops(&cfg, 1);
        assert_eq!(f.ffn, (2 * 2 * 4 * 5 * 3) as f64);
        assert_eq!(f.per_device(), f);
    }
}
