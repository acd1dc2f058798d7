use crate::ir::{NodeId, OpKind, WindowDimConfig};
use crate::sharding::Sharding;

use super::halo::{plan_window, WindowCase};
use super::partition::{PartitionError, Partitioner};
use super::program::{Collective, SpmdNodeId};

enum OutputTrim {
    Dynamic(SpmdNodeId),
    Static,
}

impl Partitioner<'_> {
    pub(crate) fn lower_convolution(&mut self, id: NodeId, window: &[WindowDimConfig]) -> Result<SpmdNodeId, PartitionError> {
        let node = self.g.node(id);
        let (x, kern) = (node.operands[0], node.operands[1]);
        let in_full = self.g.shape(x).clone();
        let k_full = self.g.shape(kern).clone();
        let out_full = node.out_shape.clone();
        let s_in = self.shardings[x].clone();
        let s_k = self.shardings[kern].clone();
        let s_out = self.shardings[id].clone();

        for d in s_k.tiled_dims() {
            if d >= 2 && window[d - 2].window_dilation > 1 {
                return Err(PartitionError::UnsupportedWindowConfig {
                    node: id,
                    detail: format!("kernel dim {d} is partitioned and window-dilated"),
                });
            }
        }
        let mut kv = self.reshard(self.vals[kern], &k_full, &s_k, &Sharding::Replicated);

        if s_in.tiles_along(1) > 1 {
            let xv = self.reshard(self.vals[x], &in_full, &s_in, &Sharding::Replicated);
            let r = self.b.local(OpKind::Convolution { window: window.to_vec() }, vec![xv, kv]);
            return Ok(self.reshard(r, &out_full, &Sharding::Replicated, &s_out));
        }

        let spatial: Vec<usize> = s_in.tiled_dims().into_iter().filter(|&d| d >= 2).collect();
        let mut local_window = window.to_vec();
        let mut xv = self.vals[x];
        let mut trims = Vec::new();
        for &d in &spatial {
            let w = &window[d - 2];
            let k = s_in.tiles_along(d);
            let plan = plan_window(d, w, in_full.dims()[d], out_full.dims()[d], k);
            let halo = &plan.halo;
            self.check_halo(id, halo.max_left.max(halo.max_right), plan.per_in)?;
            let groups = s_in.assignment().expect("tiled").groups_along(d);
            let ext = self.b.collective(Collective::HaloExchange { dim: d, left: halo.max_left, right: halo.max_right, groups }, xv);
            let (p_in, ml) = (plan.per_in as i64, halo.max_left as i64);
            let off = self.b.per_tile(&s_in, d, |t| t as i64 * p_in - ml);
            let n_in = in_full.dims()[d] as i64;
            xv = self.b.mask_range(ext, d, off, Some(0), Some(n_in), 0.0);

            if plan.case != WindowCase::StaticConfig {
                let start = self.b.per_tile(&s_in, d, |t| plan.input_start(t));
                let mut sizes = self.b.shape(xv).0.clone();
                sizes[d] = plan.span;
                let mut ops = vec![xv];
                ops.extend(self.starts_along(sizes.len(), d, start));
                xv = self.b.local(OpKind::DynamicSlice { sizes }, ops);
            }
            if plan.case == WindowCase::PadWindow {
                kv = self.pad_kernel(kv, d, w, &plan.pad, plan.max_pad, &s_in);
            }
            local_window[d - 2] = plan.local;
            let trim = match plan.case {
                WindowCase::StaticConfig | WindowCase::UnitStride => {
                    OutputTrim::Dynamic(self.b.per_tile(&s_in, d, |t| plan.output_start(t)))
                }
                WindowCase::Divisible | WindowCase::PadWindow => OutputTrim::Static,
            };
            trims.push((d, plan.per_out, trim));
        }

        let mut y = self.b.local(OpKind::Convolution { window: local_window }, vec![xv, kv]);
        for (d, per_out, trim) in trims {
            let rank = out_full.rank();
            let mut sizes = self.b.shape(y).0.clone();
            sizes[d] = per_out;
            y = match trim {
                OutputTrim::Dynamic(start) => {
                    let mut ops = vec![y];
                    ops.extend(self.starts_along(rank, d, start));
                    self.b.local(OpKind::DynamicSlice { sizes }, ops)
                }
                OutputTrim::Static => self.b.local(OpKind::Slice { start: vec![0; rank], limit: sizes, stride: vec![1; rank] }, vec![y]),
            };
        }
        Ok(self.reshard(y, &out_full, &s_in, &s_out))
    }

    /// Explicitly dilates the kernel along `d` and shifts it by each
    /// partition's low padding inside a window of `We + max_pad`.
    fn pad_kernel(&mut self, kv: SpmdNodeId, d: usize, w: &WindowDimConfig, pad: &[i64], max_pad: i64, s_in: &Sharding) -> SpmdNodeId {
        let rank = self.b.shape(kv).rank();
        let mut cur = kv;
        if w.window_dilation > 1 {
            let mut interior = vec![0; rank];
            interior[d] = w.window_dilation - 1;
            cur = self.b.local(OpKind::Pad { low: vec![0; rank], high: vec![0; rank], interior, value: 0.0 }, vec![cur]);
        }
        let mut low = vec![0; rank];
        low[d] = max_pad as usize;
        let padded = self.b.local(OpKind::Pad { low: low.clone(), high: low, interior: vec![0; rank], value: 0.0 }, vec![cur]);
        let pads = pad.to_vec();
        let start = self.b.per_tile(s_in, d, |t| pads[t]);
        let mut sizes = self.b.shape(padded).0.clone();
        sizes[d] = w.effective_window() + max_pad as usize;
        let mut ops = vec![padded];
        ops.extend(self.starts_along(rank, d, start));
        self.b.local(OpKind::DynamicSlice { sizes }, ops)
    }
}
