//! Halo arithmetic for windowed and realigning operators.

use crate::ir::WindowDimConfig;

pub fn floor_div(a: i64, b: i64) -> i64 {
    a.div_euclid(b)
}

pub fn ceil_div(a: i64, b: i64) -> i64 {
    -(-a).div_euclid(b)
}

/// Exclusive limit of base data needed by partition `i`:
/// `floor((stride * count * i + window - low_pad + dilation - 1) / dilation)`.
pub fn base_dilation_limit_index(stride: i64, count: i64, i: i64, window: i64, low_pad: i64, dilation: i64) -> i64 {
    floor_div(stride * count * i + window - low_pad + dilation - 1, dilation)
}

/// `floor((slope * i + intercept) / denom)`; affine when `denom` divides `slope`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AffineHalo {
    pub slope: i64,
    pub intercept: i64,
    pub denom: i64,
}

impl AffineHalo {
    pub fn eval(&self, i: i64) -> i64 {
        floor_div(self.slope * i + self.intercept, self.denom)
    }

    pub fn is_affine(&self) -> bool {
        self.slope % self.denom == 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HaloExchangeSpec {
    pub dim: usize,
    pub left: AffineHalo,
    pub right: AffineHalo,
    pub max_left: usize,
    pub max_right: usize,
}

impl HaloExchangeSpec {
    fn new(dim: usize, left: AffineHalo, right: AffineHalo, parts: usize) -> Self {
        let max = |h: &AffineHalo| (0..parts as i64).map(|i| h.eval(i)).max().unwrap_or(0).max(0) as usize;
        HaloExchangeSpec { dim, max_left: max(&left), max_right: max(&right), left, right }
    }

    pub fn is_empty(&self) -> bool {
        self.max_left == 0 && self.max_right == 0
    }
}

/// How a partitioned windowed dim is lowered.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowCase {
    /// Unit stride, no base dilation: one uniform config over the extended
    /// data, then a per-partition slice of the output.
    StaticConfig,
    /// `stride * count` divisible by the base dilation: shared low padding.
    Divisible,
    /// Unit stride: maximum low padding, then a per-partition output slice.
    UnitStride,
    /// Neither: the window itself is padded per partition.
    PadWindow,
}

/// Lowering plan for one partitioned spatial dim.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowPlan {
    pub case: WindowCase,
    pub parts: usize,
    pub per_in: usize,
    pub per_out: usize,
    /// First base element needed by each partition (may be negative).
    pub first: Vec<i64>,
    /// Low padding each partition needs before its first element.
    pub pad: Vec<i64>,
    pub max_pad: i64,
    /// Base elements each partition slices from its extended data.
    pub span: usize,
    pub halo: HaloExchangeSpec,
    /// Config of the local window op.
    pub local: WindowDimConfig,
}

impl WindowPlan {
    /// Start of the partition's slice within its extended data.
    pub fn input_start(&self, i: usize) -> i64 {
        self.halo.max_left as i64 - self.halo.left.eval(i as i64)
    }

    /// Start of the partition's valid outputs within the local op's output.
    pub fn output_start(&self, i: usize) -> i64 {
        match self.case {
            WindowCase::StaticConfig => self.input_start(i),
            WindowCase::UnitStride => self.max_pad - self.pad[i],
            WindowCase::Divisible | WindowCase::PadWindow => 0,
        }
    }

    /// Exclusive end of the data window per partition, in base elements.
    pub fn limit(&self, i: usize) -> i64 {
        self.first[i] + self.span as i64
    }
}

/// Plans a windowed dim with input extent `n_in` and output extent `n_out`
/// split `parts` ways along spatial dim `dim`.
pub fn plan_window(dim: usize, w: &WindowDimConfig, n_in: usize, n_out: usize, parts: usize) -> WindowPlan {
    let k = parts as i64;
    let p_in = n_in.div_ceil(parts) as i64;
    let p_out = n_out.div_ceil(parts) as i64;
    let (s, b, lo) = (w.stride as i64, w.base_dilation as i64, w.padding_low as i64);
    let we = w.effective_window() as i64;

    let first: Vec<i64> = (0..k).map(|i| ceil_div(i * p_out * s - lo, b)).collect();
    let limit: Vec<i64> = (0..k).map(|i| base_dilation_limit_index(s, p_out, i, (p_out - 1) * s + we, lo, b)).collect();
    let pad: Vec<i64> = (0..k as usize).map(|i| b * first[i] - (i as i64 * p_out * s - lo)).collect();
    let span = (0..k as usize).map(|i| limit[i] - first[i]).max().unwrap_or(1).max(1);
    let max_pad = pad.iter().copied().max().unwrap_or(0);
    let min_pad = pad.iter().copied().min().unwrap_or(0);

    let case = if b == 1 && s == 1 {
        WindowCase::StaticConfig
    } else if (s * p_out) % b == 0 {
        WindowCase::Divisible
    } else if s == 1 {
        WindowCase::UnitStride
    } else {
        WindowCase::PadWindow
    };

    let left = AffineHalo { slope: p_in * b - p_out * s, intercept: lo, denom: b };
    let right = AffineHalo { slope: p_out * s - p_in * b, intercept: -lo + b - 1 + (span - p_in) * b, denom: b };
    let halo = HaloExchangeSpec::new(dim, left, right, parts);

    let dilated = (span - 1) * b + 1;
    let local = match case {
        WindowCase::StaticConfig => WindowDimConfig { padding_low: 0, padding_high: 0, ..*w },
        WindowCase::Divisible => {
            let hi = ((p_out - 1) * s + we - pad[0] - dilated).max(0);
            WindowDimConfig { padding_low: pad[0] as usize, padding_high: hi as usize, ..*w }
        }
        WindowCase::UnitStride => {
            let hi = (max_pad - min_pad + p_out - 1 + we - max_pad - dilated).max(0);
            WindowDimConfig { padding_low: max_pad as usize, padding_high: hi as usize, ..*w }
        }
        WindowCase::PadWindow => {
            let hi = ((p_out - 1) * s + we - dilated).max(0);
            WindowDimConfig {
                size: (we + max_pad) as usize,
                stride: w.stride,
                padding_low: max_pad as usize,
                padding_high: hi as usize,
                base_dilation: w.base_dilation,
                window_dilation: 1,
            }
        }
    };

    WindowPlan { case, parts, per_in: p_in as usize, per_out: p_out as usize, first, pad, max_pad, span: span as usize, halo, local }
}

/// Realignment where output element `o` reads source element `o + shift`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Realign {
    pub per_in: usize,
    pub per_out: usize,
    pub shift: i64,
    pub halo: HaloExchangeSpec,
}

pub fn plan_realign(dim: usize, per_in: usize, per_out: usize, shift: i64, parts: usize) -> Realign {
    let (pi, po) = (per_in as i64, per_out as i64);
    let left = AffineHalo { slope: pi - po, intercept: -shift, denom: 1 };
    let right = AffineHalo { slope: po - pi, intercept: po - pi + shift, denom: 1 };
    Realign { per_in, per_out, shift, halo: HaloExchangeSpec::new(dim, left, right, parts) }
}

impl Realign {
    pub fn start(&self, i: usize) -> i64 {
        self.halo.max_left as i64 - self.halo.left.eval(i as i64)
    }
}
