use std::fmt;

use super::shape::Shape;
use super::tensor::TensorValue;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CompareDir {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
}

impl CompareDir {
    pub fn name(self) -> &'static str {
        match self {
            CompareDir::Lt => "lt",
            CompareDir::Le => "le",
            CompareDir::Gt => "gt",
            CompareDir::Ge => "ge",
            CompareDir::Eq => "eq",
            CompareDir::Ne => "ne",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "lt" => CompareDir::Lt,
            "le" => CompareDir::Le,
            "gt" => CompareDir::Gt,
            "ge" => CompareDir::Ge,
            "eq" => CompareDir::Eq,
            "ne" => CompareDir::Ne,
            _ => return None,
        })
    }

    pub fn apply(self, a: f32, b: f32) -> bool {
        match self {
            CompareDir::Lt => a < b,
            CompareDir::Le => a <= b,
            CompareDir::Gt => a > b,
            CompareDir::Ge => a >= b,
            CompareDir::Eq => a == b,
            CompareDir::Ne => a != b,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Exp,
    Relu,
    /// `select(pred, on_true, on_false)`; a predicate element is true when non-zero.
    Select,
    /// Produces 1.0 where the comparison holds, else 0.0.
    Compare(CompareDir),
}

impl ElementwiseOp {
    pub fn arity(self) -> usize {
        match self {
            ElementwiseOp::Exp | ElementwiseOp::Relu => 1,
            ElementwiseOp::Select => 3,
            _ => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ElementwiseOp::Add => "add",
            ElementwiseOp::Sub => "sub",
            ElementwiseOp::Mul => "mul",
            ElementwiseOp::Div => "div",
            ElementwiseOp::Max => "max",
            ElementwiseOp::Exp => "exp",
            ElementwiseOp::Relu => "relu",
            ElementwiseOp::Select => "select",
            ElementwiseOp::Compare(_) => "compare",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ReduceOp {
    Add,
    Max,
}

impl ReduceOp {
    pub fn identity(self) -> f32 {
        match self {
            ReduceOp::Add => 0.0,
            ReduceOp::Max => f32::NEG_INFINITY,
        }
    }

    pub fn combine(self, a: f32, b: f32) -> f32 {
        match self {
            ReduceOp::Add => a + b,
            ReduceOp::Max => a.max(b),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ReduceOp::Add => "add",
            ReduceOp::Max => "max",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "add" => Some(ReduceOp::Add),
            "max" => Some(ReduceOp::Max),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TopKOutput {
    Values,
    Indices,
}

/// Per-spatial-dimension window configuration of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct WindowDimConfig {
    pub size: usize,
    pub stride: usize,
    pub padding_low: usize,
    pub padding_high: usize,
    pub base_dilation: usize,
    pub window_dilation: usize,
}

impl WindowDimConfig {
    pub fn new(size: usize) -> Self {
        WindowDimConfig { size, stride: 1, padding_low: 0, padding_high: 0, base_dilation: 1, window_dilation: 1 }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn padding(mut self, low: usize, high: usize) -> Self {
        self.padding_low = low;
        self.padding_high = high;
        self
    }

    pub fn base_dilation(mut self, d: usize) -> Self {
        self.base_dilation = d;
        self
    }

    pub fn window_dilation(mut self, d: usize) -> Self {
        self.window_dilation = d;
        self
    }

    pub fn is_legal(&self) -> bool {
        self.size >= 1 && self.stride >= 1 && self.base_dilation >= 1 && self.window_dilation >= 1
    }

    /// Span of the dilated window.
    pub fn effective_window(&self) -> usize {
        (self.size - 1) * self.window_dilation + 1
    }

    /// Length of the base after dilation and padding.
    pub fn padded_dilated_input(&self, input: usize) -> usize {
        let dilated = if input == 0 { 0 } else { (input - 1) * self.base_dilation + 1 };
        dilated + self.padding_low + self.padding_high
    }

    pub fn output_size(&self, input: usize) -> Option<usize> {
        let padded = self.padded_dilated_input(input);
        let w = self.effective_window();
        if padded < w {
            return None;
        }
        Some((padded - w) / self.stride + 1)
    }
}

/// A two-operand einsum such as `"GSM,ME->GSE"`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct EinsumSpec {
    pub lhs: Vec<char>,
    pub rhs: Vec<char>,
    pub out: Vec<char>,
}

/// Role of an einsum dimension letter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DimClass {
    Batch,
    Contracting,
    LhsNonContracting,
    RhsNonContracting,
    /// Appears in one operand only and is summed away.
    LhsReduced,
    RhsReduced,
}

impl EinsumSpec {
    pub fn parse(s: &str) -> Result<Self, String> {
        let (inputs, out) = s.split_once("->").ok_or_else(|| format!("einsum spec '{s}' lacks '->'"))?;
        let (lhs, rhs) = inputs.split_once(',').ok_or_else(|| format!("einsum spec '{s}' must have exactly two operands"))?;
        if rhs.contains(',') {
            return Err(format!("einsum spec '{s}' must have exactly two operands"));
        }
        let letters = |part: &str| -> Result<Vec<char>, String> {
            let v: Vec<char> = part.trim().chars().collect();
            for (i, c) in v.iter().enumerate() {
                if !c.is_ascii_alphabetic() {
                    return Err(format!("einsum spec '{s}': bad dimension letter '{c}'"));
                }
                if v[..i].contains(c) {
                    return Err(format!("einsum spec '{s}': repeated letter '{c}' in one operand"));
                }
            }
            Ok(v)
        };
        let spec = EinsumSpec { lhs: letters(lhs)?, rhs: letters(rhs)?, out: letters(out)? };
        for c in &spec.out {
            if !spec.lhs.contains(c) && !spec.rhs.contains(c) {
                return Err(format!("einsum spec '{s}': output letter '{c}' not in any operand"));
            }
        }
        Ok(spec)
    }

    pub fn classify(&self, letter: char) -> Option<DimClass> {
        let (l, r, o) = (self.lhs.contains(&letter), self.rhs.contains(&letter), self.out.contains(&letter));
        Some(match (l, r, o) {
            (true, true, true) => DimClass::Batch,
            (true, true, false) => DimClass::Contracting,
            (true, false, true) => DimClass::LhsNonContracting,
            (false, true, true) => DimClass::RhsNonContracting,
            (true, false, false) => DimClass::LhsReduced,
            (false, true, false) => DimClass::RhsReduced,
            _ => return None,
        })
    }

    /// All distinct letters, in order of first appearance across lhs, rhs.
    pub fn letters(&self) -> Vec<char> {
        let mut v = Vec::new();
        for &c in self.lhs.iter().chain(&self.rhs) {
            if !v.contains(&c) {
                v.push(c);
            }
        }
        v
    }
}

impl fmt::Display for EinsumSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = |v: &[char]| v.iter().collect::<String>();
        write!(f, "{},{}->{}", s(&self.lhs), s(&self.rhs), s(&self.out))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Parameter {
        name: String,
        shape: Shape,
    },
    Constant {
        value: TensorValue,
    },
    Iota {
        dim: usize,
        shape: Shape,
    },
    Elementwise(ElementwiseOp),
    Einsum(EinsumSpec),
    /// Input `[N, C_in, spatial...]`, kernel `[C_out, C_in, window...]`,
    /// output `[N, C_out, spatial_out...]`.
    Convolution {
        window: Vec<WindowDimConfig>,
    },
    Pad {
        low: Vec<usize>,
        high: Vec<usize>,
        interior: Vec<usize>,
        value: f32,
    },
    Slice {
        start: Vec<usize>,
        limit: Vec<usize>,
        stride: Vec<usize>,
    },
    Reshape {
        shape: Shape,
    },
    Reverse {
        dims: Vec<usize>,
    },
    Reduce {
        op: ReduceOp,
        dims: Vec<usize>,
    },
    Cumsum {
        dim: usize,
        exclusive: bool,
    },
    TopK {
        k: usize,
        dim: usize,
        output: TopKOutput,
    },
    Softmax {
        dim: usize,
    },
    OneHot {
        depth: usize,
        dim: usize,
    },
    /// Operands: the tensor followed by one rank-0 start index per dimension.
    /// Starts are clamped so the slice stays in bounds.
    DynamicSlice {
        sizes: Vec<usize>,
    },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Parameter { .. } => "parameter",
            OpKind::Constant { .. } => "constant",
            OpKind::Iota { .. } => "iota",
            OpKind::Elementwise(e) => e.name(),
            OpKind::Einsum(_) => "einsum",
            OpKind::Convolution { .. } => "convolution",
            OpKind::Pad { .. } => "pad",
            OpKind::Slice { .. } => "slice",
            OpKind::Reshape { .. } => "reshape",
            OpKind::Reverse { .. } => "reverse",
            OpKind::Reduce { .. } => "reduce",
            OpKind::Cumsum { .. } => "cumsum",
            OpKind::TopK { .. } => "topk",
            OpKind::Softmax { .. } => "softmax",
            OpKind::OneHot { .. } => "one_hot",
            OpKind::DynamicSlice { .. } => "dynamic_slice",
        }
    }

    /// Expected operand count, or `None` for variadic ops.
    pub fn arity(&self) -> Option<usize> {
        match self {
            OpKind::Parameter { .. } | OpKind::Constant { .. } | OpKind::Iota { .. } => Some(0),
            OpKind::Elementwise(e) => Some(e.arity()),
            OpKind::Einsum(_) | OpKind::Convolution { .. } => Some(2),
            OpKind::DynamicSlice { sizes } => Some(1 + sizes.len()),
            _ => Some(1),
        }
    }
}
