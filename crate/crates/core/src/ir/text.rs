//! Line-oriented IR text format.
//!
//! ```text
//! %0 = parameter name="x" : [4,8] {devices=[2,1] ids=[0,1]}
//! %1 = parameter name="w" : [8,3] {replicated}
//! %2 = einsum "AB,BC->AC" (%0, %1) : [4,3]
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. The `: shape` suffix
//! is optional on input; when present it must match the inferred shape.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::sharding::{DeviceAssignment, Sharding};

use super::graph::{Graph, Node};
use super::infer::infer_shape;
use super::op::{CompareDir, EinsumSpec, ElementwiseOp, OpKind, ReduceOp, TopKOutput, WindowDimConfig};
use super::shape::Shape;
use super::tensor::TensorValue;
use super::IrError;

fn list<T: ToString>(v: &[T]) -> String {
    let items: Vec<String> = v.iter().map(|x| x.to_string()).collect();
    format!("[{}]", items.join(","))
}

/// Attribute text for an op (without the op name), with a leading space when non-empty.
pub fn format_attrs(op: &OpKind) -> String {
    match op {
        OpKind::Parameter { name, .. } => format!(" name=\"{name}\""),
        OpKind::Constant { value } => format!(" values={}", list(&value.data)),
        OpKind::Iota { dim, .. } => format!(" dim={dim}"),
        OpKind::Elementwise(ElementwiseOp::Compare(dir)) => format!(" dir={}", dir.name()),
        OpKind::Elementwise(_) | OpKind::Reshape { .. } => String::new(),
        OpKind::Einsum(spec) => format!(" \"{spec}\""),
        OpKind::Convolution { window } => {
            let f = |g: fn(&WindowDimConfig) -> usize| list(&window.iter().map(g).collect::<Vec<_>>());
            format!(
                " size={} stride={} pad_low={} pad_high={} base_dilation={} window_dilation={}",
                f(|w| w.size),
                f(|w| w.stride),
                f(|w| w.padding_low),
                f(|w| w.padding_high),
                f(|w| w.base_dilation),
                f(|w| w.window_dilation)
            )
        }
        OpKind::Pad { low, high, interior, value } => {
            format!(" low={} high={} interior={} value={}", list(low), list(high), list(interior), value)
        }
        OpKind::Slice { start, limit, stride } => {
            format!(" start={} limit={} stride={}", list(start), list(limit), list(stride))
        }
        OpKind::Reverse { dims } => format!(" dims={}", list(dims)),
        OpKind::Reduce { op, dims } => format!(" op={} dims={}", op.name(), list(dims)),
        OpKind::Cumsum { dim, exclusive } => format!(" dim={dim} exclusive={exclusive}"),
        OpKind::TopK { k, dim, output } => {
            let o = match output {
                TopKOutput::Values => "values",
                TopKOutput::Indices => "indices",
            };
            format!(" k={k} dim={dim} output={o}")
        }
        OpKind::Softmax { dim } => format!(" dim={dim}"),
        OpKind::OneHot { depth, dim } => format!(" depth={depth} dim={dim}"),
        OpKind::DynamicSlice { sizes } => format!(" sizes={}", list(sizes)),
    }
}

pub fn format_operands(ops: &[usize]) -> String {
    if ops.is_empty() {
        return String::new();
    }
    let items: Vec<String> = ops.iter().map(|o| format!("%{o}")).collect();
    format!(" ({})", items.join(", "))
}

pub fn serialize_node(n: &Node) -> String {
    let mut s = format!("%{} = {}{}{} : {}", n.id, n.op.name(), format_attrs(&n.op), format_operands(&n.operands), n.out_shape);
    if let Some(sh) = &n.sharding {
        let _ = write!(s, " {sh}");
    }
    s
}

pub fn serialize_graph(g: &Graph) -> String {
    let mut out = String::new();
    for n in &g.nodes {
        out.push_str(&serialize_node(n));
        out.push('\n');
    }
    out
}

struct Cursor<'a> {
    chars: Vec<char>,
    pos: usize,
    line: usize,
    _src: &'a str,
}

#[derive(Debug, Clone)]
enum AttrValue {
    Str(String),
    List(Vec<String>),
    Bare(String),
}

impl<'a> Cursor<'a> {
    fn new(src: &'a str, line: usize) -> Self {
        Cursor { chars: src.chars().collect(), pos: 0, line, _src: src }
    }

    fn err(&self, msg: impl Into<String>) -> IrError {
        IrError::Syntax { line: self.line, column: self.pos + 1, message: msg.into() }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.chars.len() && self.chars[self.pos].is_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn eat(&mut self, c: char) -> bool {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<(), IrError> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.err(format!("expected '{c}'")))
        }
    }

    fn word(&mut self) -> String {
        self.skip_ws();
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_alphanumeric() || c == '_' || c == '.' || c == '-' || c == '+' {
                self.pos += 1;
            } else {
                break;
            }
        }
        self.chars[start..self.pos].iter().collect()
    }

    fn number(&mut self) -> Result<usize, IrError> {
        let w = self.word();
        w.parse().map_err(|_| self.err(format!("expected integer, found '{w}'")))
    }

    fn string(&mut self) -> Result<String, IrError> {
        self.expect('"')?;
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c == '"' {
                let s: String = self.chars[start..self.pos].iter().collect();
                self.pos += 1;
                return Ok(s);
            }
            self.pos += 1;
        }
        Err(self.err("unterminated string"))
    }

    fn list(&mut self) -> Result<Vec<String>, IrError> {
        self.expect('[')?;
        let mut items = Vec::new();
        if self.eat(']') {
            return Ok(items);
        }
        loop {
            let w = self.word();
            if w.is_empty() {
                return Err(self.err("expected list element"));
            }
            items.push(w);
            if self.eat(']') {
                return Ok(items);
            }
            self.expect(',')?;
        }
    }

    fn shape(&mut self) -> Result<Shape, IrError> {
        let items = self.list()?;
        let dims = items
            .iter()
            .map(|s| s.parse::<usize>().map_err(|_| self.err(format!("bad dimension '{s}'"))))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Shape(dims))
    }

    fn at_end(&mut self) -> bool {
        self.skip_ws();
        self.pos >= self.chars.len()
    }
}

fn parse_sharding(c: &mut Cursor) -> Result<Sharding, IrError> {
    c.expect('{')?;
    let w = c.word();
    if w == "replicated" {
        c.expect('}')?;
        return Ok(Sharding::Replicated);
    }
    if w != "devices" {
        return Err(c.err(format!("unknown sharding '{w}'")));
    }
    c.expect('=')?;
    let dims = c.shape()?.0;
    if c.word() != "ids" {
        return Err(c.err("expected 'ids='"));
    }
    c.expect('=')?;
    let ids = c.shape()?.0;
    c.expect('}')?;
    DeviceAssignment::new(dims, ids).map(Sharding::Tiled).map_err(|e| c.err(e.to_string()))
}

struct Attrs<'c, 'a> {
    map: HashMap<String, AttrValue>,
    cursor: &'c Cursor<'a>,
}

impl Attrs<'_, '_> {
    fn take(&mut self, key: &str) -> Result<AttrValue, IrError> {
        self.map.remove(key).ok_or_else(|| self.cursor.err(format!("missing attribute '{key}'")))
    }

    fn usize(&mut self, key: &str) -> Result<usize, IrError> {
        match self.take(key)? {
            AttrValue::Bare(s) => s.parse().map_err(|_| self.cursor.err(format!("'{key}' must be an integer"))),
            _ => Err(self.cursor.err(format!("'{key}' must be an integer"))),
        }
    }

    fn usizes(&mut self, key: &str) -> Result<Vec<usize>, IrError> {
        match self.take(key)? {
            AttrValue::List(v) => v.iter().map(|s| s.parse().map_err(|_| self.cursor.err(format!("'{key}' must hold integers")))).collect(),
            _ => Err(self.cursor.err(format!("'{key}' must be a list"))),
        }
    }

    fn bare(&mut self, key: &str) -> Result<String, IrError> {
        match self.take(key)? {
            AttrValue::Bare(s) => Ok(s),
            _ => Err(self.cursor.err(format!("'{key}' must be a word"))),
        }
    }

    fn f32(&mut self, key: &str) -> Result<f32, IrError> {
        let s = self.bare(key)?;
        s.parse().map_err(|_| self.cursor.err(format!("'{key}' must be a number")))
    }

    fn finish(self) -> Result<(), IrError> {
        if let Some(k) = self.map.keys().min() {
            return Err(self.cursor.err(format!("unexpected attribute '{k}'")));
        }
        Ok(())
    }
}

fn build_op(
    name: &str,
    positional: Option<String>,
    attrs: &mut Attrs,
    declared: Option<&Shape>,
    cursor: &Cursor,
) -> Result<OpKind, IrError> {
    let need_shape = || declared.cloned().ok_or_else(|| cursor.err(format!("{name} requires a ': shape' suffix")));
    let ew = |e| Ok(OpKind::Elementwise(e));
    match name {
        "parameter" => {
            let n = match attrs.take("name")? {
                AttrValue::Str(s) => s,
                _ => return Err(cursor.err("parameter name must be quoted")),
            };
            Ok(OpKind::Parameter { name: n, shape: need_shape()? })
        }
        "constant" => {
            let shape = need_shape()?;
            let vals = match attrs.take("values")? {
                AttrValue::List(v) => v
                    .iter()
                    .map(|s| s.parse::<f32>().map_err(|_| cursor.err(format!("bad constant value '{s}'"))))
                    .collect::<Result<Vec<_>, _>>()?,
                _ => return Err(cursor.err("constant values must be a list")),
            };
            if vals.len() != shape.num_elements() {
                return Err(cursor.err(format!("constant has {} values but shape {shape}", vals.len())));
            }
            Ok(OpKind::Constant { value: TensorValue::new(shape, vals) })
        }
        "iota" => Ok(OpKind::Iota { dim: attrs.usize("dim")?, shape: need_shape()? }),
        "add" => ew(ElementwiseOp::Add),
        "sub" => ew(ElementwiseOp::Sub),
        "mul" => ew(ElementwiseOp::Mul),
        "div" => ew(ElementwiseOp::Div),
        "max" => ew(ElementwiseOp::Max),
        "exp" => ew(ElementwiseOp::Exp),
        "relu" => ew(ElementwiseOp::Relu),
        "select" => ew(ElementwiseOp::Select),
        "compare" => {
            let d = attrs.bare("dir")?;
            let dir = CompareDir::from_name(&d).ok_or_else(|| cursor.err(format!("unknown compare dir '{d}'")))?;
            ew(ElementwiseOp::Compare(dir))
        }
        "einsum" => {
            let s = positional.ok_or_else(|| cursor.err("einsum requires a quoted spec"))?;
            EinsumSpec::parse(&s).map(OpKind::Einsum).map_err(|e| cursor.err(e))
        }
        "convolution" => {
            let size = attrs.usizes("size")?;
            let stride = attrs.usizes("stride")?;
            let lo = attrs.usizes("pad_low")?;
            let hi = attrs.usizes("pad_high")?;
            let bd = attrs.usizes("base_dilation")?;
            let wd = attrs.usizes("window_dilation")?;
            let n = size.len();
            if [stride.len(), lo.len(), hi.len(), bd.len(), wd.len()].iter().any(|&l| l != n) {
                return Err(cursor.err("convolution window attributes differ in length"));
            }
            let window = (0..n)
                .map(|i| WindowDimConfig {
                    size: size[i],
                    stride: stride[i],
                    padding_low: lo[i],
                    padding_high: hi[i],
                    base_dilation: bd[i],
                    window_dilation: wd[i],
                })
                .collect();
            Ok(OpKind::Convolution { window })
        }
        "pad" => Ok(OpKind::Pad {
            low: attrs.usizes("low")?,
            high: attrs.usizes("high")?,
            interior: attrs.usizes("interior")?,
            value: if attrs.map.contains_key("value") { attrs.f32("value")? } else { 0.0 },
        }),
        "slice" => Ok(OpKind::Slice { start: attrs.usizes("start")?, limit: attrs.usizes("limit")?, stride: attrs.usizes("stride")? }),
        "reshape" => Ok(OpKind::Reshape { shape: need_shape()? }),
        "reverse" => Ok(OpKind::Reverse { dims: attrs.usizes("dims")? }),
        "reduce" => {
            let o = attrs.bare("op")?;
            let op = ReduceOp::from_name(&o).ok_or_else(|| cursor.err(format!("unknown reduction '{o}'")))?;
            Ok(OpKind::Reduce { op, dims: attrs.usizes("dims")? })
        }
        "cumsum" => {
            let dim = attrs.usize("dim")?;
            let exclusive = match attrs.bare("exclusive")?.as_str() {
                "true" => true,
                "false" => false,
                other => return Err(cursor.err(format!("exclusive must be true or false, got '{other}'"))),
            };
            Ok(OpKind::Cumsum { dim, exclusive })
        }
        "topk" => {
            let k = attrs.usize("k")?;
            let dim = attrs.usize("dim")?;
            let output = match attrs.bare("output")?.as_str() {
                "values" => TopKOutput::Values,
                "indices" => TopKOutput::Indices,
                other => return Err(cursor.err(format!("unknown topk output '{other}'"))),
            };
            Ok(OpKind::TopK { k, dim, output })
        }
        "softmax" => Ok(OpKind::Softmax { dim: attrs.usize("dim")? }),
        "one_hot" => Ok(OpKind::OneHot { depth: attrs.usize("depth")?, dim: attrs.usize("dim")? }),
        "dynamic_slice" => Ok(OpKind::DynamicSlice { sizes: attrs.usizes("sizes")? }),
        other => Err(cursor.err(format!("unknown op '{other}'"))),
    }
}

fn parse_line(text: &str, line: usize, expected_id: usize, graph: &Graph) -> Result<Node, IrError> {
    let mut c = Cursor::new(text, line);
    c.expect('%')?;
    let id = c.number()?;
    if id != expected_id {
        return Err(c.err(format!("expected node %{expected_id}, found %{id}")));
    }
    c.expect('=')?;
    let name = c.word();
    if name.is_empty() {
        return Err(c.err("expected op name"));
    }

    let mut positional = None;
    let mut map = HashMap::new();
    loop {
        c.skip_ws();
        match c.peek() {
            Some('"') => positional = Some(c.string()?),
            Some(ch) if ch.is_alphabetic() => {
                let key = c.word();
                c.expect('=')?;
                c.skip_ws();
                let v = match c.peek() {
                    Some('[') => AttrValue::List(c.list()?),
                    Some('"') => AttrValue::Str(c.string()?),
                    _ => AttrValue::Bare(c.word()),
                };
                map.insert(key, v);
            }
            _ => break,
        }
    }

    let mut operands = Vec::new();
    if c.eat('(') && !c.eat(')') {
        loop {
            c.expect('%')?;
            let o = c.number()?;
            if o >= id {
                return Err(c.err(format!("operand %{o} does not refer to an earlier node")));
            }
            operands.push(o);
            if c.eat(')') {
                break;
            }
            c.expect(',')?;
        }
    }

    let declared = if c.eat(':') { Some(c.shape()?) } else { None };
    c.skip_ws();
    let sharding = if c.peek() == Some('{') { Some(parse_sharding(&mut c)?) } else { None };
    if !c.at_end() {
        return Err(c.err("unexpected trailing text"));
    }

    let mut attrs = Attrs { map, cursor: &c };
    let op = build_op(&name, positional, &mut attrs, declared.as_ref(), &c)?;
    attrs.finish()?;

    let shapes: Vec<Shape> = operands.iter().map(|&o| graph.nodes[o].out_shape.clone()).collect();
    let inferred = infer_shape(&op, &shapes).map_err(|m| IrError::Syntax { line, column: 1, message: m })?;
    if let Some(d) = &declared {
        if *d != inferred {
            return Err(IrError::Syntax { line, column: 1, message: format!("declared shape {d} but inferred {inferred}") });
        }
    }
    if let Some(s) = &sharding {
        s.validate_for(&inferred).map_err(|e| IrError::Syntax { line, column: 1, message: e.to_string() })?;
    }
    Ok(Node { id, op, operands, out_shape: inferred, sharding })
}

pub fn parse_graph(text: &str) -> Result<Graph, IrError> {
    let mut g = Graph::new();
    for (i, raw) in text.lines().enumerate() {
        let t = raw.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let node = parse_line(t, i + 1, g.nodes.len(), &g)?;
        g.nodes.push(node);
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_empty_graph() {
        assert!(parse_graph("").unwrap().is_empty());
        assert!(parse_graph("\n# comment\n\n").unwrap().is_empty());
    }

    #[test]
    fn einsum_line_without_shape() {
        let text = "%0 = parameter name=\"inputs\" : [2,3,4]\n%1 = parameter name=\"wg\" : [4,5]\n%2 = einsum \"GSM,ME->GSE\" (%0, %1)\n";
        let g = parse_graph(text).unwrap();
        match &g.node(2).op {
            OpKind::Einsum(s) => assert_eq!(s.to_string(), "GSM,ME->GSE"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(g.shape(2), &Shape::from([2, 3, 5]));
    }

    #[test]
    fn syntax_errors_carry_position() {
        let err = parse_graph("%0 = parameter name=\"x\" : [2]\n%1 = frobnicate (%0)\n").unwrap_err();
        match err {
            IrError::Syntax { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let err = parse_graph("%0 = parameter name=\"x\" : [2\n").unwrap_err();
        assert!(matches!(err, IrError::Syntax { line: 1, column, .. } if column > 1));
    }

    #[test]
    fn forward_references_rejected() {
        assert!(parse_graph("%0 = relu (%0) : [2]\n").is_err());
    }

    #[test]
    fn sharding_suffix_round_trips() {
        let text = "%0 = parameter name=\"x\" : [4,8] {devices=[2,1] ids=[1,0]}\n%1 = relu (%0) : [4,8] {replicated}\n";
        let g = parse_graph(text).unwrap();
        assert_eq!(serialize_graph(&g), text);
    }

    #[test]
    fn constants_keep_special_values() {
        let text = "%0 = constant values=[-inf,0.1,3] : [3]\n";
        let g = parse_graph(text).unwrap();
        assert_eq!(serialize_graph(&g), text);
    }
}
