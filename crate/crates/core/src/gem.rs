//! GEM, the tensor-algebra intermediate representation shared by both
//! compiler stages.
//!
//! Nodes live in a hash-consed arena ([`Gem`]); a [`NodeId`] is a handle
//! into it and structurally identical constructions return the same id.
//! Constructors compute shape and free indices and fold zeros on the way in,
//! so no caller ever observes `Product(Zero, x)` and friends.
//!
//! Free indices follow the relaxed semantics: a scalar operation simply
//! depends on the union of its operands' free indices.

use std::cell::Cell;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::rc::Rc;

use crate::error::{Error, Result};

/// A free index. Identity is the id; the extent rides along.
#[derive(Clone, Copy, Debug)]
pub struct Index {
    pub id: u32,
    pub extent: usize,
}

impl PartialEq for Index {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
    }
}
impl Eq for Index {}
impl Hash for Index {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.id.hash(state)
    }
}
impl PartialOrd for Index {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Index {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.id.cmp(&other.id)
    }
}

/// Per-compilation source of fresh indices, shared by the form and GEM stages.
#[derive(Clone, Debug, Default)]
pub struct IndexGen(Rc<Cell<u32>>);

impl IndexGen {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn fresh(&self, extent: usize) -> Index {
        let id = self.0.get();
        self.0.set(id + 1);
        Index { id, extent }
    }
}

/// An index whose value is only known at run time (a facet number).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VariableIndex {
    pub name: String,
    pub extent: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum IndexItem {
    Free(Index),
    Fixed(usize),
    Variable(VariableIndex),
}

impl IndexItem {
    pub fn extent(&self) -> Option<usize> {
        match self {
            IndexItem::Free(i) => Some(i.extent),
            IndexItem::Fixed(_) => None,
            IndexItem::Variable(v) => Some(v.extent),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MathFn {
    Abs,
    Sqrt,
    Exp,
    Ln,
    Sin,
    Cos,
    Tan,
}

impl MathFn {
    pub const ALL: [MathFn; 7] = [
        MathFn::Abs,
        MathFn::Sqrt,
        MathFn::Exp,
        MathFn::Ln,
        MathFn::Sin,
        MathFn::Cos,
        MathFn::Tan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MathFn::Abs => "abs",
            MathFn::Sqrt => "sqrt",
            MathFn::Exp => "exp",
            MathFn::Ln => "ln",
            MathFn::Sin => "sin",
            MathFn::Cos => "cos",
            MathFn::Tan => "tan",
        }
    }

    /// Name of the C99 `math.h` function.
    pub fn c_name(self) -> &'static str {
        match self {
            MathFn::Abs => "fabs",
            MathFn::Ln => "log",
            other => other.name(),
        }
    }

    pub fn from_name(name: &str) -> Option<MathFn> {
        MathFn::ALL.into_iter().find(|f| f.name() == name)
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            MathFn::Abs => x.abs(),
            MathFn::Sqrt => x.sqrt(),
            MathFn::Exp => x.exp(),
            MathFn::Ln => x.ln(),
            MathFn::Sin => x.sin(),
            MathFn::Cos => x.cos(),
            MathFn::Tan => x.tan(),
        }
    }

    /// Whether f(0) = 0, which lets the function fold a zero operand.
    fn maps_zero_to_zero(self) -> bool {
        matches!(self, MathFn::Abs | MathFn::Sqrt | MathFn::Sin | MathFn::Tan)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CmpOp {
    Gt,
    Ge,
    Eq,
    Ne,
    Lt,
    Le,
}

impl CmpOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
        }
    }

    pub fn apply(self, a: f64, b: f64) -> bool {
        match self {
            CmpOp::Gt => a > b,
            CmpOp::Ge => a >= b,
            CmpOp::Eq => a == b,
            CmpOp::Ne => a != b,
            CmpOp::Lt => a < b,
            CmpOp::Le => a <= b,
        }
    }
}

/// Node operation plus payload. This is also the hash-consing key.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Op {
    Literal { shape: Vec<usize>, bits: Vec<u64> },
    Zero { shape: Vec<usize> },
    Identity { dim: usize },
    Variable { name: String, shape: Vec<usize> },
    Sum(NodeId, NodeId),
    Product(NodeId, NodeId),
    Division(NodeId, NodeId),
    Power(NodeId, NodeId),
    MinValue(NodeId, NodeId),
    MaxValue(NodeId, NodeId),
    MathFunction(MathFn, NodeId),
    Comparison(CmpOp, NodeId, NodeId),
    LogicalAnd(NodeId, NodeId),
    LogicalOr(NodeId, NodeId),
    LogicalNot(NodeId),
    Conditional(NodeId, NodeId, NodeId),
    Indexed(NodeId, Vec<IndexItem>),
    ComponentTensor(NodeId, Vec<Index>),
    IndexSum(NodeId, Index),
    ListTensor(Vec<NodeId>),
}

impl Op {
    pub fn children(&self) -> Vec<NodeId> {
        match self {
            Op::Literal { .. } | Op::Zero { .. } | Op::Identity { .. } | Op::Variable { .. } => {
                Vec::new()
            }
            Op::Sum(a, b)
            | Op::Product(a, b)
            | Op::Division(a, b)
            | Op::Power(a, b)
            | Op::MinValue(a, b)
            | Op::MaxValue(a, b)
            | Op::Comparison(_, a, b)
            | Op::LogicalAnd(a, b)
            | Op::LogicalOr(a, b) => vec![*a, *b],
            Op::MathFunction(_, a)
            | Op::LogicalNot(a)
            | Op::Indexed(a, _)
            | Op::ComponentTensor(a, _)
            | Op::IndexSum(a, _) => vec![*a],
            Op::Conditional(c, t, f) => vec![*c, *t, *f],
            Op::ListTensor(cs) => cs.clone(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Op::Literal { .. } => "Literal",
            Op::Zero { .. } => "Zero",
            Op::Identity { .. } => "Identity",
            Op::Variable { .. } => "Variable",
            Op::Sum(..) => "Sum",
            Op::Product(..) => "Product",
            Op::Division(..) => "Division",
            Op::Power(..) => "Power",
            Op::MinValue(..) => "MinValue",
            Op::MaxValue(..) => "MaxValue",
            Op::MathFunction(..) => "MathFunction",
            Op::Comparison(..) => "Comparison",
            Op::LogicalAnd(..) => "LogicalAnd",
            Op::LogicalOr(..) => "LogicalOr",
            Op::LogicalNot(..) => "LogicalNot",
            Op::Conditional(..) => "Conditional",
            Op::Indexed(..) => "Indexed",
            Op::ComponentTensor(..) => "ComponentTensor",
            Op::IndexSum(..) => "IndexSum",
            Op::ListTensor(..) => "ListTensor",
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(
            self,
            Op::Literal { .. } | Op::Zero { .. } | Op::Identity { .. } | Op::Variable { .. }
        )
    }
}

/// Every node kind in the IR, in inventory order.
pub const NODE_KINDS: [&str; 20] = [
    "Literal",
    "Zero",
    "Identity",
    "Variable",
    "Sum",
    "Product",
    "Division",
    "Power",
    "MinValue",
    "MaxValue",
    "MathFunction",
    "Comparison",
    "LogicalAnd",
    "LogicalOr",
    "LogicalNot",
    "Conditional",
    "Indexed",
    "ComponentTensor",
    "IndexSum",
    "ListTensor",
];

#[derive(Clone, Debug)]
pub struct NodeData {
    pub op: Op,
    pub shape: Vec<usize>,
    /// Free indices, sorted by id.
    pub free: Vec<Index>,
}

/// Hash-consed node arena for one compilation.
#[derive(Debug, Default)]
pub struct Gem {
    nodes: Vec<NodeData>,
    intern: HashMap<Op, NodeId>,
    pub indices: IndexGen,
}

fn union(a: &[Index], b: &[Index]) -> Vec<Index> {
    let mut out: Vec<Index> = a.iter().chain(b).copied().collect();
    out.sort();
    out.dedup();
    out
}

fn shape_str(shape: &[usize]) -> String {
    let parts: Vec<String> = shape.iter().map(|s| s.to_string()).collect();
    format!("({})", parts.join(","))
}

impl Gem {
    pub fn new(indices: IndexGen) -> Self {
        Gem { nodes: Vec::new(), intern: HashMap::new(), indices }
    }

    /// Number of unique nodes ever constructed in this arena.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &NodeData {
        &self.nodes[id.0 as usize]
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.node(id).op
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn free(&self, id: NodeId) -> &[Index] {
        &self.node(id).free
    }

    pub fn children(&self, id: NodeId) -> Vec<NodeId> {
        self.op(id).children()
    }

    pub fn is_zero(&self, id: NodeId) -> bool {
        matches!(self.op(id), Op::Zero { .. })
    }

    /// Values of a Literal node in row-major order.
    pub fn literal_values(&self, id: NodeId) -> Option<Vec<f64>> {
        match self.op(id) {
            Op::Literal { bits, .. } => Some(bits.iter().map(|b| f64::from_bits(*b)).collect()),
            _ => None,
        }
    }

    pub fn scalar_value(&self, id: NodeId) -> Option<f64> {
        match self.op(id) {
            Op::Literal { shape, bits } if shape.is_empty() => Some(f64::from_bits(bits[0])),
            Op::Zero { shape } if shape.is_empty() => Some(0.0),
            _ => None,
        }
    }

    fn intern(&mut self, op: Op, shape: Vec<usize>, free: Vec<Index>) -> NodeId {
        if let Some(id) = self.intern.get(&op) {
            return *id;
        }
        let id = NodeId(self.nodes.len() as u32);
        self.intern.insert(op.clone(), id);
        self.nodes.push(NodeData { op, shape, free });
        id
    }

    fn require_scalar(&self, kind: &'static str, ids: &[NodeId]) -> Result<()> {
        for id in ids {
            if !self.shape(*id).is_empty() {
                let shapes: Vec<String> = ids.iter().map(|c| shape_str(self.shape(*c))).collect();
                return Err(Error::Shape { kind, detail: format!("operand shapes {}", shapes.join(", ")) });
            }
        }
        Ok(())
    }

    fn scalar_op(&mut self, kind: &'static str, op: Op) -> Result<NodeId> {
        let children = op.children();
        self.require_scalar(kind, &children)?;
        let free = children.iter().fold(Vec::new(), |acc, c| union(&acc, self.free(*c)));
        Ok(self.intern(op, Vec::new(), free))
    }

    // ---- terminals ----

    pub fn literal(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<NodeId> {
        let size: usize = shape.iter().product();
        if size != values.len() {
            return Err(Error::Shape {
                kind: "Literal",
                detail: format!("shape {} needs {} values, got {}", shape_str(&shape), size, values.len()),
            });
        }
        if values.iter().all(|v| *v == 0.0) {
            return Ok(self.zero(shape));
        }
        let bits = values.iter().map(|v| v.to_bits()).collect();
        Ok(self.intern(Op::Literal { shape: shape.clone(), bits }, shape, Vec::new()))
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.literal(Vec::new(), vec![value]).expect("scalar literal")
    }

    pub fn zero(&mut self, shape: Vec<usize>) -> NodeId {
        self.intern(Op::Zero { shape: shape.clone() }, shape, Vec::new())
    }

    pub fn identity(&mut self, dim: usize) -> NodeId {
        self.intern(Op::Identity { dim }, vec![dim, dim], Vec::new())
    }

    pub fn variable(&mut self, name: &str, shape: Vec<usize>) -> NodeId {
        self.intern(Op::Variable { name: name.to_string(), shape: shape.clone() }, shape, Vec::new())
    }

    // ---- scalar operations ----

    pub fn sum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.require_scalar("Sum", &[a, b])?;
        if self.is_zero(a) {
            return Ok(b);
        }
        if self.is_zero(b) {
            return Ok(a);
        }
        self.scalar_op("Sum", Op::Sum(a, b))
    }

    pub fn product(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.require_scalar("Product", &[a, b])?;
        if self.is_zero(a) || self.is_zero(b) {
            return Ok(self.zero(Vec::new()));
        }
        self.scalar_op("Product", Op::Product(a, b))
    }

    pub fn division(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.require_scalar("Division", &[a, b])?;
        if self.is_zero(a) {
            return Ok(self.zero(Vec::new()));
        }
        self.scalar_op("Division", Op::Division(a, b))
    }

    /// `base ^ exponent`; the exponent must be a compile-time constant.
    pub fn power(&mut self, base: NodeId, exponent: NodeId) -> Result<NodeId> {
        self.require_scalar("Power", &[base, exponent])?;
        let Some(p) = self.scalar_value(exponent) else {
            return Err(Error::Unsupported("Power with a non-constant exponent".into()));
        };
        if p == 0.0 {
            return Ok(self.scalar(1.0));
        }
        if self.is_zero(base) && p > 0.0 {
            return Ok(self.zero(Vec::new()));
        }
        self.scalar_op("Power", Op::Power(base, exponent))
    }

    pub fn min_value(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.scalar_op("MinValue", Op::MinValue(a, b))
    }

    pub fn max_value(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.scalar_op("MaxValue", Op::MaxValue(a, b))
    }

    pub fn math(&mut self, f: MathFn, a: NodeId) -> Result<NodeId> {
        self.require_scalar("MathFunction", &[a])?;
        if self.is_zero(a) && f.maps_zero_to_zero() {
            return Ok(a);
        }
        self.scalar_op("MathFunction", Op::MathFunction(f, a))
    }

    pub fn comparison(&mut self, op: CmpOp, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.scalar_op("Comparison", Op::Comparison(op, a, b))
    }

    pub fn logical_and(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.scalar_op("LogicalAnd", Op::LogicalAnd(a, b))
    }

    pub fn logical_or(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.scalar_op("LogicalOr", Op::LogicalOr(a, b))
    }

    pub fn logical_not(&mut self, a: NodeId) -> Result<NodeId> {
        self.scalar_op("LogicalNot", Op::LogicalNot(a))
    }

    pub fn conditional(&mut self, c: NodeId, t: NodeId, f: NodeId) -> Result<NodeId> {
        self.require_scalar("Conditional", &[c, t, f])?;
        if self.is_zero(t) && self.is_zero(f) {
            return Ok(t);
        }
        self.scalar_op("Conditional", Op::Conditional(c, t, f))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        let m = self.scalar(-1.0);
        self.product(m, a)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.neg(b)?;
        self.sum(a, nb)
    }

    // ---- tensor nodes ----

    pub fn indexed(&mut self, a: NodeId, items: Vec<IndexItem>) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if shape.len() != items.len() {
            return Err(Error::Shape {
                kind: "Indexed",
                detail: format!("operand of shape {} indexed with {} indices", shape_str(&shape), items.len()),
            });
        }
        for (item, ext) in items.iter().zip(&shape) {
            match item {
                IndexItem::Fixed(v) if *v >= *ext => {
                    return Err(Error::OutOfRange { value: *v, extent: *ext });
                }
                IndexItem::Free(_) | IndexItem::Variable(_) if item.extent() != Some(*ext) => {
                    return Err(Error::Shape {
                        kind: "Indexed",
                        detail: format!("index of extent {:?} used for dimension {}", item.extent(), ext),
                    });
                }
                _ => {}
            }
        }
        if items.is_empty() {
            return Ok(a);
        }
        let all_fixed: Option<Vec<usize>> = items
            .iter()
            .map(|i| if let IndexItem::Fixed(v) = i { Some(*v) } else { None })
            .collect();
        match self.op(a).clone() {
            Op::Zero { .. } => return Ok(self.zero(Vec::new())),
            Op::Literal { bits, .. } => {
                if let Some(fixed) = &all_fixed {
                    let flat = fixed.iter().zip(&shape).fold(0, |acc, (v, e)| acc * e + v);
                    return Ok(self.scalar(f64::from_bits(bits[flat])));
                }
            }
            Op::Identity { .. } => {
                if let Some(fixed) = &all_fixed {
                    return Ok(if fixed[0] == fixed[1] { self.scalar(1.0) } else { self.zero(Vec::new()) });
                }
            }
            Op::ListTensor(children) => {
                if let IndexItem::Fixed(v) = items[0] {
                    return self.indexed(children[v], items[1..].to_vec());
                }
            }
            _ => {}
        }
        let item_free: Vec<Index> =
            items.iter().filter_map(|i| if let IndexItem::Free(x) = i { Some(*x) } else { None }).collect();
        let free = union(self.free(a), &item_free);
        Ok(self.intern(Op::Indexed(a, items), Vec::new(), free))
    }

    pub fn component_tensor(&mut self, a: NodeId, indices: Vec<Index>) -> Result<NodeId> {
        self.require_scalar("ComponentTensor", &[a])?;
        let mut seen = HashSet::new();
        for i in &indices {
            if !seen.insert(*i) {
                return Err(Error::Shape { kind: "ComponentTensor", detail: format!("repeated index i{}", i.id) });
            }
        }
        let shape: Vec<usize> = indices.iter().map(|i| i.extent).collect();
        if indices.is_empty() {
            return Ok(a);
        }
        if self.is_zero(a) {
            return Ok(self.zero(shape));
        }
        for i in &indices {
            if !self.free(a).contains(i) {
                return Err(Error::IndexNotFree { kind: "ComponentTensor", index: format!("i{}", i.id) });
            }
        }
        let free: Vec<Index> = self.free(a).iter().filter(|i| !indices.contains(i)).copied().collect();
        Ok(self.intern(Op::ComponentTensor(a, indices), shape, free))
    }

    pub fn index_sum(&mut self, a: NodeId, index: Index) -> Result<NodeId> {
        self.require_scalar("IndexSum", &[a])?;
        if self.is_zero(a) {
            return Ok(a);
        }
        if !self.free(a).contains(&index) {
            return Err(Error::IndexNotFree { kind: "IndexSum", index: format!("i{}", index.id) });
        }
        let free: Vec<Index> = self.free(a).iter().filter(|i| **i != index).copied().collect();
        Ok(self.intern(Op::IndexSum(a, index), Vec::new(), free))
    }

    pub fn list_tensor(&mut self, children: Vec<NodeId>) -> Result<NodeId> {
        let Some(first) = children.first() else {
            return Err(Error::Shape { kind: "ListTensor", detail: "no entries".into() });
        };
        let inner = self.shape(*first).to_vec();
        if children.iter().any(|c| self.shape(*c) != inner.as_slice()) {
            let shapes: Vec<String> = children.iter().map(|c| shape_str(self.shape(*c))).collect();
            return Err(Error::Shape { kind: "ListTensor", detail: format!("entry shapes {}", shapes.join(", ")) });
        }
        let mut shape = vec![children.len()];
        shape.extend(&inner);
        if children.iter().all(|c| self.is_zero(*c)) {
            return Ok(self.zero(shape));
        }
        let free = children.iter().fold(Vec::new(), |acc, c| union(&acc, self.free(*c)));
        Ok(self.intern(Op::ListTensor(children), shape, free))
    }

    /// Reconstructs `id` with new children, keeping its payload. Folding
    /// applies, so the result may be a different kind of node.
    pub fn rebuild(&mut self, id: NodeId, ch: &[NodeId]) -> Result<NodeId> {
        let op = self.op(id).clone();
        if ch == op.children().as_slice() {
            return Ok(id);
        }
        match op {
            Op::Literal { .. } | Op::Zero { .. } | Op::Identity { .. } | Op::Variable { .. } => Ok(id),
            Op::Sum(..) => self.sum(ch[0], ch[1]),
            Op::Product(..) => self.product(ch[0], ch[1]),
            Op::Division(..) => self.division(ch[0], ch[1]),
            Op::Power(..) => self.power(ch[0], ch[1]),
            Op::MinValue(..) => self.min_value(ch[0], ch[1]),
            Op::MaxValue(..) => self.max_value(ch[0], ch[1]),
            Op::MathFunction(f, _) => self.math(f, ch[0]),
            Op::Comparison(c, ..) => self.comparison(c, ch[0], ch[1]),
            Op::LogicalAnd(..) => self.logical_and(ch[0], ch[1]),
            Op::LogicalOr(..) => self.logical_or(ch[0], ch[1]),
            Op::LogicalNot(_) => self.logical_not(ch[0]),
            Op::Conditional(..) => self.conditional(ch[0], ch[1], ch[2]),
            Op::Indexed(_, items) => self.indexed(ch[0], items),
            Op::ComponentTensor(_, idx) => self.component_tensor(ch[0], idx),
            Op::IndexSum(_, i) => self.index_sum(ch[0], i),
            Op::ListTensor(_) => self.list_tensor(ch.to_vec()),
        }
    }

    /// Idempotent zero folding of an already constructed node: rebuilds the
    /// DAG bottom-up through the folding constructors.
    pub fn fold_zero(&mut self, root: NodeId) -> Result<NodeId> {
        let mut map: HashMap<NodeId, NodeId> = HashMap::new();
        for n in traverse_unique(self, root) {
            let ch: Vec<NodeId> = self.children(n).iter().map(|c| map[c]).collect();
            let r = self.rebuild(n, &ch)?;
            map.insert(n, r);
        }
        Ok(map[&root])
    }

    /// Replaces free indices according to `mapping`, respecting shadowing by
    /// IndexSum and ComponentTensor. Shared subexpressions are rewritten once.
    pub fn substitute_indices(&mut self, root: NodeId, mapping: &HashMap<Index, IndexItem>) -> Result<NodeId> {
        for (k, v) in mapping {
            match v {
                IndexItem::Fixed(x) if *x >= k.extent => {
                    return Err(Error::OutOfRange { value: *x, extent: k.extent });
                }
                _ => {
                    if let Some(e) = v.extent() {
                        if e != k.extent {
                            return Err(Error::ExtentMismatch {
                                index: format!("i{}", k.id),
                                expected: k.extent,
                                found: e,
                            });
                        }
                    }
                }
            }
        }
        if mapping.is_empty() {
            return Ok(root);
        }
        let mut memo = HashMap::new();
        self.subst_rec(root, mapping, &mut memo)
    }

    fn subst_rec(
        &mut self,
        n: NodeId,
        mapping: &HashMap<Index, IndexItem>,
        memo: &mut HashMap<NodeId, NodeId>,
    ) -> Result<NodeId> {
        if !self.free(n).iter().any(|i| mapping.contains_key(i)) {
            return Ok(n);
        }
        if let Some(r) = memo.get(&n) {
            return Ok(*r);
        }
        let op = self.op(n).clone();
        let result = match op {
            Op::Indexed(c, items) => {
                let c2 = self.subst_rec(c, mapping, memo)?;
                let items2 = items
                    .into_iter()
                    .map(|it| match &it {
                        IndexItem::Free(i) => mapping.get(i).cloned().unwrap_or(it),
                        _ => it,
                    })
                    .collect();
                self.indexed(c2, items2)?
            }
            Op::ComponentTensor(c, idx) => {
                let (c2, idx2) = self.subst_binder(c, &idx, mapping, memo)?;
                self.component_tensor(c2, idx2)?
            }
            Op::IndexSum(c, i) => {
                let (c2, i2) = self.subst_binder(c, &[i], mapping, memo)?;
                self.index_sum(c2, i2[0])?
            }
            _ => {
                let ch = op.children();
                let mut ch2 = Vec::with_capacity(ch.len());
                for c in ch {
                    ch2.push(self.subst_rec(c, mapping, memo)?);
                }
                self.rebuild(n, &ch2)?
            }
        };
        memo.insert(n, result);
        Ok(result)
    }

    /// Substitutes below a binder. Bound indices shadow the mapping, and a
    /// bound index that also occurs as a replacement is renamed to a fresh
    /// one so the replacement is not captured.
    fn subst_binder(
        &mut self,
        child: NodeId,
        bound: &[Index],
        mapping: &HashMap<Index, IndexItem>,
        memo: &mut HashMap<NodeId, NodeId>,
    ) -> Result<(NodeId, Vec<Index>)> {
        let free = self.free(child).to_vec();
        let mut inner: HashMap<Index, IndexItem> =
            mapping.iter().filter(|(k, _)| !bound.contains(k) && free.contains(k)).map(|(k, v)| (*k, v.clone())).collect();
        let captured: Vec<Index> =
            bound.iter().copied().filter(|b| inner.values().any(|v| matches!(v, IndexItem::Free(i) if i == b))).collect();
        let mut bound2 = bound.to_vec();
        for b in captured {
            let fresh = self.indices.fresh(b.extent);
            inner.insert(b, IndexItem::Free(fresh));
            bound2.iter_mut().filter(|x| **x == b).for_each(|x| *x = fresh);
        }
        if bound2 == bound && !bound.iter().any(|b| mapping.contains_key(b)) {
            return Ok((self.subst_rec(child, mapping, memo)?, bound2));
        }
        let mut local = HashMap::new();
        Ok((self.subst_rec(child, &inner, &mut local)?, bound2))
    }
}

/// Every node reachable from `root`, each exactly once, children first.
pub fn traverse_unique(gem: &Gem, root: NodeId) -> Vec<NodeId> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    let mut stack = vec![(root, false)];
    while let Some((n, expanded)) = stack.pop() {
        if expanded {
            order.push(n);
            continue;
        }
        if !seen.insert(n) {
            continue;
        }
        stack.push((n, true));
        for c in gem.children(n).into_iter().rev() {
            if !seen.contains(&c) {
                stack.push((c, false));
            }
        }
    }
    order
}

/// Number of parent-edge occurrences for each reachable node (root: 0).
pub fn reference_counts(gem: &Gem, root: NodeId) -> HashMap<NodeId, usize> {
    let mut counts = HashMap::new();
    for n in traverse_unique(gem, root) {
        counts.entry(n).or_insert(0);
        for c in gem.children(n) {
            *counts.entry(c).or_insert(0) += 1;
        }
    }
    counts
}

/// Size of the expression if it were expanded into a tree (saturating).
pub fn tree_size(gem: &Gem, root: NodeId) -> u128 {
    let mut size: HashMap<NodeId, u128> = HashMap::new();
    for n in traverse_unique(gem, root) {
        let s = gem.children(n).iter().fold(1u128, |acc, c| acc.saturating_add(size[c]));
        size.insert(n, s);
    }
    size[&root]
}

/// Node-kind histogram over the unique reachable nodes.
pub fn census(gem: &Gem, root: NodeId) -> BTreeMap<&'static str, usize> {
    let mut out = BTreeMap::new();
    for n in traverse_unique(gem, root) {
        *out.entry(gem.op(n).kind_name()).or_insert(0) += 1;
    }
    out
}

/// Printed index names: `q`, `j`, `k` for the quadrature and argument
/// indices, `i0`, `i1`, ... for the rest in order of first appearance.
#[derive(Clone, Debug, Default)]
pub struct IndexNames {
    names: HashMap<Index, String>,
    next: usize,
}

impl IndexNames {
    pub fn new(quadrature: Option<Index>, arguments: &[Index]) -> Self {
        let mut names = HashMap::new();
        if let Some(q) = quadrature {
            names.insert(q, "q".to_string());
        }
        for (n, a) in arguments.iter().enumerate() {
            let name = match n {
                0 => "j".to_string(),
                1 => "k".to_string(),
                _ => format!("a{n}"),
            };
            names.insert(*a, name);
        }
        IndexNames { names, next: 0 }
    }

    /// Names every index of the DAG under `root` in traversal order.
    pub fn assign(&mut self, gem: &Gem, root: NodeId) {
        for n in traverse_unique(gem, root) {
            let mut local: Vec<Index> = gem.free(n).to_vec();
            match gem.op(n) {
                Op::Indexed(_, items) => {
                    local.extend(items.iter().filter_map(|i| if let IndexItem::Free(x) = i { Some(*x) } else { None }))
                }
                Op::ComponentTensor(_, idx) => local.extend(idx),
                Op::IndexSum(_, i) => local.push(*i),
                _ => {}
            }
            for i in local {
                self.name(i);
            }
        }
    }

    pub fn name(&mut self, i: Index) -> String {
        if let Some(n) = self.names.get(&i) {
            return n.clone();
        }
        let n = format!("i{}", self.next);
        self.next += 1;
        self.names.insert(i, n.clone());
        n
    }

    pub fn get(&self, i: Index) -> String {
        self.names.get(&i).cloned().unwrap_or_else(|| format!("#{}", i.id))
    }

    pub fn item(&self, item: &IndexItem) -> String {
        match item {
            IndexItem::Free(i) => self.get(*i),
            IndexItem::Fixed(v) => v.to_string(),
            IndexItem::Variable(v) => v.name.clone(),
        }
    }
}

pub(crate) fn fmt_scalar(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{v:.1}")
    } else {
        // Shortest representation that reads back to the same value.
        format!("{v:?}")
    }
}

/// One line per unique node: `id: kind(child-ids) shape=(...) free=(...)`,
/// numbered in traversal order.
pub fn dump(gem: &Gem, root: NodeId, names: &IndexNames) -> String {
    let order = traverse_unique(gem, root);
    let pos: HashMap<NodeId, usize> = order.iter().enumerate().map(|(i, n)| (*n, i)).collect();
    let mut out = String::new();
    for (k, n) in order.iter().enumerate() {
        let op = gem.op(*n);
        let payload = match op {
            Op::Literal { shape, bits } if shape.is_empty() => format!("{{{}}}", fmt_scalar(f64::from_bits(bits[0]))),
            Op::Identity { dim } => format!("{{{dim}}}"),
            Op::Variable { name, .. } => format!("{{{name}}}"),
            Op::MathFunction(f, _) => format!("{{{}}}", f.name()),
            Op::Comparison(c, ..) => format!("{{{}}}", c.symbol()),
            Op::Indexed(_, items) => {
                let s: Vec<String> = items.iter().map(|i| names.item(i)).collect();
                format!("{{{}}}", s.join(","))
            }
            Op::ComponentTensor(_, idx) => {
                let s: Vec<String> = idx.iter().map(|i| names.get(*i)).collect();
                format!("{{{}}}", s.join(","))
            }
            Op::IndexSum(_, i) => format!("{{{}}}", names.get(*i)),
            _ => String::new(),
        };
        let ch: Vec<String> = op.children().iter().map(|c| pos[c].to_string()).collect();
        let free: Vec<String> = gem.free(*n).iter().map(|i| names.get(*i)).collect();
        out += &format!(
            "{}: {}{}({}) shape={} free=({})\n",
            k,
            op.kind_name(),
            payload,
            ch.join(","),
            shape_str(gem.shape(*n)),
            free.join(",")
        );
    }
    out
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "%{}", self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gem() -> Gem {
        Gem::new(IndexGen::new())
    }

    #[test]
    fn relaxed_sum_unions_free_indices() {
        let mut g = gem();
        let u = g.variable("u", vec![3]);
        let i = g.indices.fresh(3);
        let j = g.indices.fresh(3);
        let ui = g.indexed(u, vec![IndexItem::Free(i)]).unwrap();
        let uj = g.indexed(u, vec![IndexItem::Free(j)]).unwrap();
        let s = g.sum(ui, uj).unwrap();
        assert!(g.shape(s).is_empty());
        assert_eq!(g.free(s), &[i, j]);
    }

    #[test]
    fn fixed_literal_selection() {
        let mut g = gem();
        let b = g.literal(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let e = g.indexed(b, vec![IndexItem::Fixed(1), IndexItem::Fixed(1)]).unwrap();
        assert_eq!(g.scalar_value(e), Some(4.0));
    }

    #[test]
    fn hash_consing_returns_same_node() {
        let mut g = gem();
        let a = g.variable("a", vec![]);
        let b = g.variable("b", vec![]);
        let p1 = g.product(a, b).unwrap();
        let before = g.len();
        let p2 = g.product(a, b).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(g.len(), before);
    }

    #[test]
    fn zero_folding_rules() {
        let mut g = gem();
        let z = g.zero(vec![]);
        let x = g.variable("x", vec![]);
        let three = g.scalar(3.0);
        let deep = (0..50).fold(x, |acc, _| g.product(acc, x).unwrap());
        let p0 = g.product(z, deep).unwrap();
        assert!(g.is_zero(p0));
        assert_eq!(g.sum(z, three).unwrap(), three);
        let e = g.variable("E", vec![4, 5]);
        let q = g.indices.fresh(4);
        let j = g.indices.fresh(5);
        let eqj = g.indexed(e, vec![IndexItem::Free(q), IndexItem::Free(j)]).unwrap();
        let p = g.product(z, eqj).unwrap();
        let s0 = g.index_sum(p, q).unwrap();
        assert!(g.is_zero(s0));
        let zt = g.zero(vec![4]);
        let i0 = g.indexed(zt, vec![IndexItem::Free(q)]).unwrap();
        assert!(g.is_zero(i0));
        let ct = g.component_tensor(z, vec![q, j]).unwrap();
        assert_eq!(g.op(ct), &Op::Zero { shape: vec![4, 5] });
    }

    #[test]
    fn substitution_renames_and_is_identity_when_absent() {
        let mut g = gem();
        let u = g.variable("u", vec![3]);
        let i = g.indices.fresh(3);
        let j = g.indices.fresh(3);
        let two = g.scalar(2.0);
        let ui = g.indexed(u, vec![IndexItem::Free(i)]).unwrap();
        let e = g.product(ui, two).unwrap();
        let m: HashMap<_, _> = [(i, IndexItem::Free(j))].into();
        let r = g.substitute_indices(e, &m).unwrap();
        let uj = g.indexed(u, vec![IndexItem::Free(j)]).unwrap();
        let expect = g.product(uj, two).unwrap();
        assert_eq!(r, expect);
        let k = g.indices.fresh(3);
        let m2: HashMap<_, _> = [(k, IndexItem::Free(j))].into();
        assert_eq!(g.substitute_indices(e, &m2).unwrap(), e);
        assert_eq!(g.substitute_indices(e, &HashMap::new()).unwrap(), e);
        let bad = g.indices.fresh(4);
        let m3: HashMap<_, _> = [(i, IndexItem::Free(bad))].into();
        assert!(matches!(g.substitute_indices(e, &m3), Err(Error::ExtentMismatch { .. })));
    }

    #[test]
    fn substitution_respects_shadowing() {
        let mut g = gem();
        let u = g.variable("u", vec![3]);
        let i = g.indices.fresh(3);
        let ui = g.indexed(u, vec![IndexItem::Free(i)]).unwrap();
        let s = g.index_sum(ui, i).unwrap();
        let m: HashMap<_, _> = [(i, IndexItem::Fixed(0))].into();
        assert_eq!(g.substitute_indices(s, &m).unwrap(), s);
    }

    #[test]
    fn substitution_avoids_capture() {
        // sum_i u[i] * v[j] with j -> i must not become sum_i u[i] * v[i].
        let mut g = gem();
        let u = g.variable("u", vec![3]);
        let v = g.variable("v", vec![3]);
        let (i, j) = (g.indices.fresh(3), g.indices.fresh(3));
        let ui = g.indexed(u, vec![IndexItem::Free(i)]).unwrap();
        let vj = g.indexed(v, vec![IndexItem::Free(j)]).unwrap();
        let p = g.product(ui, vj).unwrap();
        let s = g.index_sum(p, i).unwrap();
        let m: HashMap<_, _> = [(j, IndexItem::Free(i))].into();
        let r = g.substitute_indices(s, &m).unwrap();
        assert_eq!(g.free(r), &[i]);
        let Op::IndexSum(_, bound) = g.op(r) else { panic!("{:?}", g.op(r)) };
        assert_ne!(*bound, i);
    }

    #[test]
    fn diamond_traversal_and_counts() {
        let mut g = gem();
        let d = g.variable("d", vec![]);
        let b = g.math(MathFn::Sin, d).unwrap();
        let c = g.math(MathFn::Cos, d).unwrap();
        let a = g.sum(b, c).unwrap();
        assert_eq!(traverse_unique(&g, a).len(), 4);
        assert_eq!(tree_size(&g, a), 5);
        let rc = reference_counts(&g, a);
        assert_eq!(rc[&d], 2);
        assert_eq!(rc[&a], 0);
        let lit = g.scalar(1.5);
        assert_eq!(traverse_unique(&g, lit), vec![lit]);
    }

    #[test]
    fn chain_visits_n_plus_one() {
        let mut g = gem();
        let x = g.variable("x", vec![]);
        let mut built = 1;
        let mut acc = x;
        for _ in 0..10 {
            acc = g.product(acc, x).unwrap();
            built += 1;
        }
        assert_eq!(traverse_unique(&g, acc).len(), built);
    }

    #[test]
    fn shape_and_index_errors() {
        let mut g = gem();
        let v = g.variable("v", vec![2]);
        let s = g.variable("s", vec![]);
        assert!(matches!(g.sum(v, s), Err(Error::Shape { kind: "Sum", .. })));
        let i = g.indices.fresh(2);
        assert!(matches!(g.index_sum(s, i), Err(Error::IndexNotFree { .. })));
        assert!(matches!(g.component_tensor(s, vec![i]), Err(Error::IndexNotFree { .. })));
    }

    #[test]
    fn list_tensor_fixed_selection() {
        let mut g = gem();
        let a = g.variable("a", vec![]);
        let b = g.variable("b", vec![]);
        let l = g.list_tensor(vec![a, b]).unwrap();
        assert_eq!(g.shape(l), &[2]);
        assert_eq!(g.indexed(l, vec![IndexItem::Fixed(1)]).unwrap(), b);
    }

    #[test]
    fn dump_format() {
        let mut g = gem();
        let u = g.variable("u", vec![3]);
        let i = g.indices.fresh(3);
        let ui = g.indexed(u, vec![IndexItem::Free(i)]).unwrap();
        let s = g.index_sum(ui, i).unwrap();
        let mut names = IndexNames::new(None, &[]);
        names.assign(&g, s);
        assert_eq!(
            dump(&g, s, &names),
            "0: Variable{u}() shape=(3) free=()\n1: Indexed{i0}(0) shape=() free=(i0)\n2: IndexSum{i0}(1) shape=() free=()\n"
        );
    }
}
