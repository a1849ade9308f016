//! Weak-form expression trees with strict (UFL-style) shape and free-index
//! checking.
//!
//! Expressions are reference-counted DAGs. The raw constructors here check
//! shapes and fold zeros; the `mul`/`index` helpers add the user-facing
//! conventions (implicit summation over repeated indices, scalar times
//! tensor).

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::gem::{Index, IndexGen, MathFn};

pub type Expr = Rc<Node>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    Plus,
    Minus,
}

impl Side {
    pub fn sign(self) -> char {
        match self {
            Side::Plus => '+',
            Side::Minus => '-',
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Terminal {
    Argument { number: usize, name: String, degree: usize },
    Coefficient { number: usize, name: String, degree: usize },
    SpatialCoordinate,
    FacetNormal,
    /// Tangent of the reference facet, selected by the facet number.
    FacetTangent,
}

impl Terminal {
    pub fn label(&self) -> String {
        match self {
            Terminal::Argument { name, .. } | Terminal::Coefficient { name, .. } => name.clone(),
            Terminal::SpatialCoordinate => "x".into(),
            Terminal::FacetNormal => "n".into(),
            Terminal::FacetTangent => "tangent".into(),
        }
    }

    pub fn is_argument(&self) -> bool {
        matches!(self, Terminal::Argument { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FIndex {
    Free(Index),
    Fixed(usize),
}

#[derive(Clone, Debug)]
pub enum Kind {
    Terminal(Terminal),
    Constant(f64),
    Zero,
    /// A terminal with its restriction and reference-gradient order applied.
    Modified { terminal: Terminal, restriction: Option<Side>, grad: usize },
    Grad(Expr),
    ReferenceGrad(Expr),
    Restricted(Side, Expr),
    Indexed(Expr, Vec<FIndex>),
    IndexSum(Expr, Index),
    ComponentTensor(Expr, Vec<Index>),
    ListTensor(Vec<Expr>),
    Sum(Expr, Expr),
    Product(Expr, Expr),
    Division(Expr, Expr),
    Power(Expr, f64),
    MathFunction(MathFn, Expr),
    Dot(Expr, Expr),
    Inner(Expr, Expr),
    Outer(Expr, Expr),
    Jump(Expr, Option<Expr>),
    Avg(Expr),
    Determinant(Expr),
    Inverse(Expr),
}

#[derive(Clone, Debug)]
pub struct Node {
    pub kind: Kind,
    pub shape: Vec<usize>,
    /// Free indices sorted by id.
    pub free: Vec<Index>,
}

impl Node {
    pub fn children(&self) -> Vec<Expr> {
        match &self.kind {
            Kind::Terminal(_) | Kind::Constant(_) | Kind::Zero | Kind::Modified { .. } => vec![],
            Kind::Grad(a)
            | Kind::ReferenceGrad(a)
            | Kind::Restricted(_, a)
            | Kind::Indexed(a, _)
            | Kind::IndexSum(a, _)
            | Kind::ComponentTensor(a, _)
            | Kind::Power(a, _)
            | Kind::MathFunction(_, a)
            | Kind::Avg(a)
            | Kind::Determinant(a)
            | Kind::Inverse(a)
            | Kind::Jump(a, None) => vec![a.clone()],
            Kind::Sum(a, b)
            | Kind::Product(a, b)
            | Kind::Division(a, b)
            | Kind::Dot(a, b)
            | Kind::Inner(a, b)
            | Kind::Outer(a, b)
            | Kind::Jump(a, Some(b)) => vec![a.clone(), b.clone()],
            Kind::ListTensor(cs) => cs.clone(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match &self.kind {
            Kind::Terminal(Terminal::Argument { .. }) => "Argument",
            Kind::Terminal(Terminal::Coefficient { .. }) => "Coefficient",
            Kind::Terminal(Terminal::SpatialCoordinate) => "SpatialCoordinate",
            Kind::Terminal(Terminal::FacetNormal) => "FacetNormal",
            Kind::Terminal(Terminal::FacetTangent) => "FacetTangent",
            Kind::Constant(_) => "ConstantLiteral",
            Kind::Zero => "Zero",
            Kind::Modified { .. } => "ModifiedTerminal",
            Kind::Grad(_) => "Grad",
            Kind::ReferenceGrad(_) => "ReferenceGrad",
            Kind::Restricted(Side::Plus, _) => "PositiveRestricted",
            Kind::Restricted(Side::Minus, _) => "NegativeRestricted",
            Kind::Indexed(..) => "Indexed",
            Kind::IndexSum(..) => "IndexSum",
            Kind::ComponentTensor(..) => "ComponentTensor",
            Kind::ListTensor(_) => "ListTensor",
            Kind::Sum(..) => "Sum",
            Kind::Product(..) => "Product",
            Kind::Division(..) => "Division",
            Kind::Power(..) => "Power",
            Kind::MathFunction(..) => "MathFunction",
            Kind::Dot(..) => "Dot",
            Kind::Inner(..) => "Inner",
            Kind::Outer(..) => "Outer",
            Kind::Jump(..) => "Jump",
            Kind::Avg(_) => "Avg",
            Kind::Determinant(_) => "Determinant",
            Kind::Inverse(_) => "Inverse",
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind, Kind::Zero)
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }
}

fn mk(kind: Kind, shape: Vec<usize>, free: Vec<Index>) -> Expr {
    Rc::new(Node { kind, shape, free })
}

fn union(a: &[Index], b: &[Index]) -> Vec<Index> {
    let mut v: Vec<Index> = a.iter().chain(b).copied().collect();
    v.sort();
    v.dedup();
    v
}

fn shape_err(kind: &'static str, detail: String) -> Error {
    Error::Shape { kind, detail }
}

fn fmt_shape(s: &[usize]) -> String {
    format!("{s:?}")
}

pub fn constant(v: f64) -> Expr {
    if v == 0.0 {
        return zero(vec![], vec![]);
    }
    mk(Kind::Constant(v), vec![], vec![])
}

pub fn zero(shape: Vec<usize>, free: Vec<Index>) -> Expr {
    mk(Kind::Zero, shape, free)
}

pub fn terminal(t: Terminal, shape: Vec<usize>) -> Expr {
    mk(Kind::Terminal(t), shape, vec![])
}

pub fn modified(t: Terminal, restriction: Option<Side>, grad: usize, shape: Vec<usize>) -> Expr {
    mk(Kind::Modified { terminal: t, restriction, grad }, shape, vec![])
}

pub fn sum(a: &Expr, b: &Expr) -> Result<Expr> {
    if a.shape != b.shape || a.free != b.free {
        return Err(shape_err(
            "Sum",
            format!(
                "operands differ: shape {} free {} vs shape {} free {}",
                fmt_shape(&a.shape),
                a.free.len(),
                fmt_shape(&b.shape),
                b.free.len()
            ),
        ));
    }
    if a.is_zero() {
        return Ok(b.clone());
    }
    if b.is_zero() {
        return Ok(a.clone());
    }
    Ok(mk(Kind::Sum(a.clone(), b.clone()), a.shape.clone(), a.free.clone()))
}

/// Scalar product without implicit summation.
pub fn product(a: &Expr, b: &Expr) -> Result<Expr> {
    if !a.is_scalar() || !b.is_scalar() {
        return Err(shape_err("Product", format!("non-scalar operands {} and {}", fmt_shape(&a.shape), fmt_shape(&b.shape))));
    }
    let free = union(&a.free, &b.free);
    if a.is_zero() || b.is_zero() {
        return Ok(zero(vec![], free));
    }
    Ok(mk(Kind::Product(a.clone(), b.clone()), vec![], free))
}

/// Scalar quotient; the denominator must be scalar.
pub fn division(a: &Expr, b: &Expr) -> Result<Expr> {
    if !a.is_scalar() || !b.is_scalar() {
        return Err(shape_err("Division", format!("non-scalar operands {} and {}", fmt_shape(&a.shape), fmt_shape(&b.shape))));
    }
    let free = union(&a.free, &b.free);
    if a.is_zero() {
        return Ok(zero(vec![], free));
    }
    Ok(mk(Kind::Division(a.clone(), b.clone()), vec![], free))
}

pub fn power(a: &Expr, p: f64) -> Result<Expr> {
    if !a.is_scalar() {
        return Err(shape_err("Power", format!("non-scalar base {}", fmt_shape(&a.shape))));
    }
    if p == 0.0 {
        return Ok(constant(1.0));
    }
    if a.is_zero() && p > 0.0 {
        return Ok(a.clone());
    }
    Ok(mk(Kind::Power(a.clone(), p), vec![], a.free.clone()))
}

pub fn math(f: MathFn, a: &Expr) -> Result<Expr> {
    if !a.is_scalar() {
        return Err(shape_err("MathFunction", format!("non-scalar operand {}", fmt_shape(&a.shape))));
    }
    if a.is_zero() && matches!(f, MathFn::Abs | MathFn::Sqrt | MathFn::Sin | MathFn::Tan) {
        return Ok(a.clone());
    }
    Ok(mk(Kind::MathFunction(f, a.clone()), vec![], a.free.clone()))
}

fn check_items(a: &Expr, items: &[FIndex]) -> Result<()> {
    if a.shape.len() != items.len() {
        return Err(shape_err("Indexed", format!("rank {} indexed with {} indices", a.shape.len(), items.len())));
    }
    for (it, ext) in items.iter().zip(&a.shape) {
        match it {
            FIndex::Fixed(v) if v >= ext => return Err(Error::OutOfRange { value: *v, extent: *ext }),
            FIndex::Free(i) if i.extent != *ext => {
                return Err(shape_err("Indexed", format!("index of extent {} used for dimension {}", i.extent, ext)))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Indexing without implicit summation or simplification.
pub fn indexed(a: &Expr, items: Vec<FIndex>) -> Result<Expr> {
    check_items(a, &items)?;
    if items.is_empty() {
        return Ok(a.clone());
    }
    let item_free: Vec<Index> = items.iter().filter_map(|i| if let FIndex::Free(x) = i { Some(*x) } else { None }).collect();
    let free = union(&a.free, &item_free);
    if a.is_zero() {
        return Ok(zero(vec![], free));
    }
    if let (Kind::ListTensor(cs), FIndex::Fixed(v)) = (&a.kind, items[0]) {
        return indexed(&cs[v], items[1..].to_vec());
    }
    Ok(mk(Kind::Indexed(a.clone(), items), vec![], free))
}

/// Indexing that beta-reduces `ComponentTensor` operands.
pub fn index_into(ig: &IndexGen, a: &Expr, items: Vec<FIndex>) -> Result<Expr> {
    if let Kind::ComponentTensor(e, alpha) = &a.kind {
        check_items(a, &items)?;
        let map: HashMap<Index, FIndex> = alpha.iter().copied().zip(items).collect();
        return substitute(ig, e, &map);
    }
    indexed(a, items)
}

/// User-level indexing: repeated indices in `items` are summed.
pub fn index(ig: &IndexGen, a: &Expr, items: Vec<FIndex>) -> Result<Expr> {
    let mut seen: Vec<Index> = Vec::new();
    let mut repeated = Vec::new();
    for it in &items {
        if let FIndex::Free(i) = it {
            if a.free.contains(i) {
                return Err(shape_err("Indexed", "index already free in the operand".into()));
            }
            if seen.contains(i) {
                repeated.push(*i);
            }
            seen.push(*i);
        }
    }
    let mut e = indexed(a, items)?;
    for r in repeated {
        e = index_sum(&e, r)?;
    }
    let _ = ig;
    Ok(e)
}

pub fn index_sum(a: &Expr, i: Index) -> Result<Expr> {
    if !a.is_scalar() {
        return Err(shape_err("IndexSum", format!("non-scalar summand {}", fmt_shape(&a.shape))));
    }
    if !a.free.contains(&i) {
        return Err(Error::IndexNotFree { kind: "IndexSum", index: format!("i{}", i.id) });
    }
    let free: Vec<Index> = a.free.iter().filter(|x| **x != i).copied().collect();
    if a.is_zero() {
        return Ok(zero(vec![], free));
    }
    Ok(mk(Kind::IndexSum(a.clone(), i), vec![], free))
}

pub fn component_tensor(a: &Expr, ii: Vec<Index>) -> Result<Expr> {
    if ii.is_empty() {
        return Ok(a.clone());
    }
    if !a.is_scalar() {
        return Err(shape_err("ComponentTensor", format!("non-scalar operand {}", fmt_shape(&a.shape))));
    }
    for (n, i) in ii.iter().enumerate() {
        if !a.free.contains(i) {
            return Err(Error::IndexNotFree { kind: "ComponentTensor", index: format!("i{}", i.id) });
        }
        if ii[..n].contains(i) {
            return Err(shape_err("ComponentTensor", "repeated index".into()));
        }
    }
    let shape: Vec<usize> = ii.iter().map(|i| i.extent).collect();
    let free: Vec<Index> = a.free.iter().filter(|x| !ii.contains(x)).copied().collect();
    if a.is_zero() {
        return Ok(zero(shape, free));
    }
    Ok(mk(Kind::ComponentTensor(a.clone(), ii), shape, free))
}

pub fn list_tensor(cs: Vec<Expr>) -> Result<Expr> {
    let Some(first) = cs.first() else {
        return Err(shape_err("ListTensor", "no entries".into()));
    };
    if cs.iter().any(|c| c.shape != first.shape || c.free != first.free) {
        return Err(shape_err("ListTensor", "entries differ in shape or free indices".into()));
    }
    let mut shape = vec![cs.len()];
    shape.extend(&first.shape);
    let free = first.free.clone();
    if cs.iter().all(|c| c.is_zero()) {
        return Ok(zero(shape, free));
    }
    Ok(mk(Kind::ListTensor(cs), shape, free))
}

fn fresh_for(ig: &IndexGen, shape: &[usize]) -> Vec<Index> {
    shape.iter().map(|e| ig.fresh(*e)).collect()
}

fn free_items(ii: &[Index]) -> Vec<FIndex> {
    ii.iter().map(|i| FIndex::Free(*i)).collect()
}

/// User-level multiplication: scalar times scalar with implicit summation
/// over shared free indices, or scalar times tensor.
pub fn mul(ig: &IndexGen, a: &Expr, b: &Expr) -> Result<Expr> {
    match (a.is_scalar(), b.is_scalar()) {
        (true, true) => {
            let repeated: Vec<Index> = a.free.iter().filter(|i| b.free.contains(i)).copied().collect();
            let mut e = product(a, b)?;
            for r in repeated {
                e = index_sum(&e, r)?;
            }
            Ok(e)
        }
        (true, false) => {
            let ii = fresh_for(ig, &b.shape);
            let bi = index_into(ig, b, free_items(&ii))?;
            component_tensor(&mul(ig, a, &bi)?, ii)
        }
        (false, true) => {
            let ii = fresh_for(ig, &a.shape);
            let ai = index_into(ig, a, free_items(&ii))?;
            component_tensor(&mul(ig, &ai, b)?, ii)
        }
        (false, false) => Err(shape_err(
            "Product",
            format!("tensor operands {} and {}; use dot, inner or outer", fmt_shape(&a.shape), fmt_shape(&b.shape)),
        )),
    }
}

/// User-level division: a tensor numerator is divided componentwise.
pub fn div(ig: &IndexGen, a: &Expr, b: &Expr) -> Result<Expr> {
    if !b.is_scalar() {
        return Err(shape_err("Division", format!("non-scalar denominator {}", fmt_shape(&b.shape))));
    }
    if a.is_scalar() {
        return division(a, b);
    }
    let ii = fresh_for(ig, &a.shape);
    let ai = index_into(ig, a, free_items(&ii))?;
    component_tensor(&division(&ai, b)?, ii)
}

pub fn neg(ig: &IndexGen, a: &Expr) -> Result<Expr> {
    mul(ig, &constant(-1.0), a)
}

pub fn sub(ig: &IndexGen, a: &Expr, b: &Expr) -> Result<Expr> {
    sum(a, &neg(ig, b)?)
}

fn disjoint_free(kind: &'static str, a: &Expr, b: &Expr) -> Result<Vec<Index>> {
    if a.free.iter().any(|i| b.free.contains(i)) {
        return Err(shape_err(kind, "operands share a free index".into()));
    }
    Ok(union(&a.free, &b.free))
}

pub fn dot(a: &Expr, b: &Expr) -> Result<Expr> {
    if a.is_scalar() && b.is_scalar() {
        return product(a, b);
    }
    if a.shape.is_empty() || b.shape.is_empty() || a.shape.last() != b.shape.first() {
        return Err(shape_err("Dot", format!("shapes {} and {}", fmt_shape(&a.shape), fmt_shape(&b.shape))));
    }
    let free = disjoint_free("Dot", a, b)?;
    let mut shape = a.shape[..a.shape.len() - 1].to_vec();
    shape.extend(&b.shape[1..]);
    if a.is_zero() || b.is_zero() {
        return Ok(zero(shape, free));
    }
    Ok(mk(Kind::Dot(a.clone(), b.clone()), shape, free))
}

pub fn inner(a: &Expr, b: &Expr) -> Result<Expr> {
    if a.shape != b.shape {
        return Err(shape_err("Inner", format!("shapes {} and {}", fmt_shape(&a.shape), fmt_shape(&b.shape))));
    }
    if a.is_scalar() {
        return product(a, b);
    }
    let free = disjoint_free("Inner", a, b)?;
    if a.is_zero() || b.is_zero() {
        return Ok(zero(vec![], free));
    }
    Ok(mk(Kind::Inner(a.clone(), b.clone()), vec![], free))
}

pub fn outer(a: &Expr, b: &Expr) -> Result<Expr> {
    let free = disjoint_free("Outer", a, b)?;
    let mut shape = a.shape.clone();
    shape.extend(&b.shape);
    if a.is_zero() || b.is_zero() {
        return Ok(zero(shape, free));
    }
    Ok(mk(Kind::Outer(a.clone(), b.clone()), shape, free))
}

pub fn jump(a: &Expr, n: Option<&Expr>) -> Result<Expr> {
    let shape = match n {
        None => a.shape.clone(),
        Some(n) => {
            if n.shape.len() != 1 {
                return Err(shape_err("Jump", "normal must be a vector".into()));
            }
            match a.shape.len() {
                0 => n.shape.clone(),
                1 if a.shape == n.shape => vec![],
                _ => return Err(shape_err("Jump", format!("operand shape {}", fmt_shape(&a.shape)))),
            }
        }
    };
    if a.is_zero() {
        return Ok(zero(shape, a.free.clone()));
    }
    Ok(mk(Kind::Jump(a.clone(), n.cloned()), shape, a.free.clone()))
}

pub fn avg(a: &Expr) -> Result<Expr> {
    if a.is_zero() {
        return Ok(a.clone());
    }
    Ok(mk(Kind::Avg(a.clone()), a.shape.clone(), a.free.clone()))
}

fn square_matrix(kind: &'static str, a: &Expr) -> Result<()> {
    if a.shape.len() != 2 || a.shape[0] != a.shape[1] || a.shape[0] > 2 {
        return Err(shape_err(kind, format!("expected a 1x1 or 2x2 matrix, got {}", fmt_shape(&a.shape))));
    }
    Ok(())
}

pub fn determinant(a: &Expr) -> Result<Expr> {
    square_matrix("Determinant", a)?;
    if a.is_zero() {
        return Ok(zero(vec![], a.free.clone()));
    }
    Ok(mk(Kind::Determinant(a.clone()), vec![], a.free.clone()))
}

pub fn inverse(a: &Expr) -> Result<Expr> {
    square_matrix("Inverse", a)?;
    Ok(mk(Kind::Inverse(a.clone()), a.shape.clone(), a.free.clone()))
}

pub fn grad(a: &Expr, gdim: usize) -> Result<Expr> {
    let mut shape = a.shape.clone();
    shape.push(gdim);
    if a.is_zero() || matches!(a.kind, Kind::Constant(_)) {
        return Ok(zero(shape, a.free.clone()));
    }
    Ok(mk(Kind::Grad(a.clone()), shape, a.free.clone()))
}

pub fn reference_grad(a: &Expr, tdim: usize) -> Result<Expr> {
    let mut shape = a.shape.clone();
    shape.push(tdim);
    if a.is_zero() || matches!(a.kind, Kind::Constant(_)) {
        return Ok(zero(shape, a.free.clone()));
    }
    Ok(mk(Kind::ReferenceGrad(a.clone()), shape, a.free.clone()))
}

pub fn restricted(side: Side, a: &Expr) -> Result<Expr> {
    if a.is_zero() || matches!(a.kind, Kind::Constant(_)) {
        return Ok(a.clone());
    }
    Ok(mk(Kind::Restricted(side, a.clone()), a.shape.clone(), a.free.clone()))
}

/// Reconstructs `e` over new children with the raw constructors.
pub fn rebuild(e: &Expr, ch: &[Expr]) -> Result<Expr> {
    let old = e.children();
    if old.len() == ch.len() && old.iter().zip(ch).all(|(a, b)| Rc::ptr_eq(a, b)) {
        return Ok(e.clone());
    }
    Ok(match &e.kind {
        Kind::Terminal(_) | Kind::Constant(_) | Kind::Zero | Kind::Modified { .. } => e.clone(),
        Kind::Grad(_) => grad(&ch[0], *e.shape.last().unwrap())?,
        Kind::ReferenceGrad(_) => reference_grad(&ch[0], *e.shape.last().unwrap())?,
        Kind::Restricted(s, _) => restricted(*s, &ch[0])?,
        Kind::Indexed(_, items) => indexed(&ch[0], items.clone())?,
        Kind::IndexSum(_, i) => index_sum(&ch[0], *i)?,
        Kind::ComponentTensor(_, ii) => component_tensor(&ch[0], ii.clone())?,
        Kind::ListTensor(_) => list_tensor(ch.to_vec())?,
        Kind::Sum(..) => sum(&ch[0], &ch[1])?,
        Kind::Product(..) => product(&ch[0], &ch[1])?,
        Kind::Division(..) => division(&ch[0], &ch[1])?,
        Kind::Power(_, p) => power(&ch[0], *p)?,
        Kind::MathFunction(f, _) => math(*f, &ch[0])?,
        Kind::Dot(..) => dot(&ch[0], &ch[1])?,
        Kind::Inner(..) => inner(&ch[0], &ch[1])?,
        Kind::Outer(..) => outer(&ch[0], &ch[1])?,
        Kind::Jump(..) => jump(&ch[0], ch.get(1))?,
        Kind::Avg(_) => avg(&ch[0])?,
        Kind::Determinant(_) => determinant(&ch[0])?,
        Kind::Inverse(_) => inverse(&ch[0])?,
    })
}

/// Node rewrite callback for [`transform`].
pub type Rewrite<'a> = dyn FnMut(&Expr, &[Expr]) -> Result<Option<Expr>> + 'a;

/// Memoized bottom-up rewrite. `f` sees each node with its children already
/// rewritten and returns `None` to keep the default reconstruction.
pub fn transform(e: &Expr, f: &mut Rewrite) -> Result<Expr> {
    let mut memo: HashMap<*const Node, Expr> = HashMap::new();
    transform_rec(e, f, &mut memo)
}

fn transform_rec(
    e: &Expr,
    f: &mut Rewrite,
    memo: &mut HashMap<*const Node, Expr>,
) -> Result<Expr> {
    if let Some(r) = memo.get(&Rc::as_ptr(e)) {
        return Ok(r.clone());
    }
    let mut ch = Vec::new();
    for c in e.children() {
        ch.push(transform_rec(&c, f, memo)?);
    }
    let r = match f(e, &ch)? {
        Some(r) => r,
        None => rebuild(e, &ch)?,
    };
    memo.insert(Rc::as_ptr(e), r.clone());
    Ok(r)
}

/// Replaces free indices, respecting binding by IndexSum and ComponentTensor.
pub fn substitute(ig: &IndexGen, e: &Expr, map: &HashMap<Index, FIndex>) -> Result<Expr> {
    let mut memo = HashMap::new();
    subst_rec(ig, e, map, &mut memo)
}

fn subst_rec(
    ig: &IndexGen,
    e: &Expr,
    map: &HashMap<Index, FIndex>,
    memo: &mut HashMap<*const Node, Expr>,
) -> Result<Expr> {
    if !e.free.iter().any(|i| map.contains_key(i)) {
        return Ok(e.clone());
    }
    if let Some(r) = memo.get(&Rc::as_ptr(e)) {
        return Ok(r.clone());
    }
    let bound: Vec<Index> = match &e.kind {
        Kind::IndexSum(_, i) => vec![*i],
        Kind::ComponentTensor(_, ii) => ii.clone(),
        _ => vec![],
    };
    let child = e.children().into_iter().next();
    // A bound index that is also a replacement target is renamed first.
    let captured: Vec<Index> = match &child {
        Some(c) => bound
            .iter()
            .copied()
            .filter(|b| map.iter().any(|(k, v)| c.free.contains(k) && !bound.contains(k) && *v == FIndex::Free(*b)))
            .collect(),
        None => vec![],
    };
    let r = if bound.iter().any(|b| map.contains_key(b)) || !captured.is_empty() {
        let mut inner: HashMap<Index, FIndex> =
            map.iter().filter(|(k, _)| !bound.contains(k)).map(|(k, v)| (*k, *v)).collect();
        let mut bound2 = bound.clone();
        for b in captured {
            let fresh = ig.fresh(b.extent);
            inner.insert(b, FIndex::Free(fresh));
            bound2.iter_mut().filter(|x| **x == b).for_each(|x| *x = fresh);
        }
        let c = subst_rec(ig, &child.expect("binder has a child"), &inner, &mut HashMap::new())?;
        match &e.kind {
            Kind::IndexSum(..) => index_sum(&c, bound2[0])?,
            _ => component_tensor(&c, bound2)?,
        }
    } else {
        let mut ch = Vec::new();
        for c in e.children() {
            ch.push(subst_rec(ig, &c, map, memo)?);
        }
        match &e.kind {
            Kind::Indexed(_, items) => {
                let items2 = items
                    .iter()
                    .map(|it| match it {
                        FIndex::Free(i) => map.get(i).copied().unwrap_or(*it),
                        _ => *it,
                    })
                    .collect();
                indexed(&ch[0], items2)?
            }
            _ => rebuild(e, &ch)?,
        }
    };
    memo.insert(Rc::as_ptr(e), r.clone());
    Ok(r)
}

/// Every node reachable from `e`, each once (by pointer), children first.
pub fn unique_nodes(e: &Expr) -> Vec<Expr> {
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut stack = vec![(e.clone(), false)];
    while let Some((n, expanded)) = stack.pop() {
        if expanded {
            out.push(n);
            continue;
        }
        if !seen.insert(Rc::as_ptr(&n)) {
            continue;
        }
        stack.push((n.clone(), true));
        for c in n.children().into_iter().rev() {
            stack.push((c, false));
        }
    }
    out
}

/// Node-kind histogram over unique nodes.
pub fn census(e: &Expr) -> std::collections::BTreeMap<&'static str, usize> {
    let mut m = std::collections::BTreeMap::new();
    for n in unique_nodes(e) {
        *m.entry(n.kind_name()).or_insert(0) += 1;
    }
    m
}

/// Number of (Product, Sum-child) edges: the pattern distributivity would
/// have to create.
pub fn sum_under_product(e: &Expr) -> usize {
    unique_nodes(e)
        .iter()
        .filter(|n| matches!(n.kind, Kind::Product(..)))
        .map(|n| n.children().iter().filter(|c| matches!(c.kind, Kind::Sum(..))).count())
        .sum()
}

/// Argument numbers an expression is linear in; `None` for zero (which is
/// compatible with any set).
pub fn argument_set(e: &Expr, form: &str) -> Result<Option<BTreeSet<usize>>> {
    let mut memo: HashMap<*const Node, Option<BTreeSet<usize>>> = HashMap::new();
    arg_rec(e, form, &mut memo)
}

fn arg_rec(
    e: &Expr,
    form: &str,
    memo: &mut HashMap<*const Node, Option<BTreeSet<usize>>>,
) -> Result<Option<BTreeSet<usize>>> {
    if let Some(r) = memo.get(&Rc::as_ptr(e)) {
        return Ok(r.clone());
    }
    let nonlinear = |set: &BTreeSet<usize>| Error::Nonlinear {
        form: form.to_string(),
        argument: set.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(","),
    };
    let ch: Vec<Option<BTreeSet<usize>>> =
        e.children().iter().map(|c| arg_rec(c, form, memo)).collect::<Result<_>>()?;
    let empty = BTreeSet::new();
    let r = match &e.kind {
        Kind::Zero => None,
        Kind::Terminal(Terminal::Argument { number, .. })
        | Kind::Modified { terminal: Terminal::Argument { number, .. }, .. } => Some(BTreeSet::from([*number])),
        Kind::Terminal(_) | Kind::Constant(_) | Kind::Modified { .. } => Some(empty),
        Kind::Sum(..) | Kind::ListTensor(_) => {
            let sets: Vec<&BTreeSet<usize>> = ch.iter().flatten().collect();
            if let Some(first) = sets.first() {
                if let Some(bad) = sets.iter().find(|s| *s != first) {
                    let diff: BTreeSet<usize> = first.symmetric_difference(bad).copied().collect();
                    return Err(nonlinear(&diff));
                }
                Some((*first).clone())
            } else {
                None
            }
        }
        Kind::Product(..) | Kind::Dot(..) | Kind::Inner(..) | Kind::Outer(..) => match (&ch[0], &ch[1]) {
            (Some(a), Some(b)) => {
                let common: BTreeSet<usize> = a.intersection(b).copied().collect();
                if !common.is_empty() {
                    return Err(nonlinear(&common));
                }
                Some(a.union(b).copied().collect())
            }
            _ => None,
        },
        Kind::Division(..) => {
            if let Some(b) = &ch[1] {
                if !b.is_empty() {
                    return Err(nonlinear(b));
                }
            }
            ch[0].clone()
        }
        Kind::Power(_, p) => match &ch[0] {
            Some(a) if !a.is_empty() && *p != 1.0 => return Err(nonlinear(a)),
            other => other.clone(),
        },
        Kind::MathFunction(..) | Kind::Determinant(_) | Kind::Inverse(_) => match &ch[0] {
            Some(a) if !a.is_empty() => return Err(nonlinear(a)),
            other => other.clone(),
        },
        Kind::Jump(_, Some(_)) => ch[0].clone(),
        _ => ch[0].clone(),
    };
    memo.insert(Rc::as_ptr(e), r.clone());
    Ok(r)
}

/// Prints an expression in DSL-like syntax.
pub fn to_text(e: &Expr) -> String {
    let mut names: HashMap<Index, String> = HashMap::new();
    let mut out = String::new();
    write_expr(e, &mut names, &mut out);
    out
}

fn index_name(i: Index, names: &mut HashMap<Index, String>) -> String {
    let n = names.len();
    names.entry(i).or_insert_with(|| format!("i{n}")).clone()
}

fn write_expr(e: &Expr, names: &mut HashMap<Index, String>, out: &mut String) {
    let sub = |c: &Expr, names: &mut HashMap<Index, String>| {
        let mut s = String::new();
        write_expr(c, names, &mut s);
        s
    };
    match &e.kind {
        Kind::Terminal(t) => out.push_str(&t.label()),
        Kind::Constant(v) => out.push_str(&crate::gem::fmt_scalar(*v)),
        Kind::Zero => out.push('0'),
        Kind::Modified { terminal, restriction, grad } => {
            let mut s = terminal.label();
            for _ in 0..*grad {
                s = format!("rgrad({s})");
            }
            if let Some(r) = restriction {
                s = format!("{s}('{}')", r.sign());
            }
            out.push_str(&s);
        }
        Kind::Grad(a) => {
            let s = sub(a, names);
            let _ = write!(out, "grad({s})");
        }
        Kind::ReferenceGrad(a) => {
            let s = sub(a, names);
            let _ = write!(out, "rgrad({s})");
        }
        Kind::Restricted(side, a) => {
            let s = sub(a, names);
            let _ = write!(out, "{}({s})", if *side == Side::Plus { "pos" } else { "neg" });
        }
        Kind::Indexed(a, items) => {
            let s = sub(a, names);
            let idx: Vec<String> = items
                .iter()
                .map(|it| match it {
                    FIndex::Free(i) => index_name(*i, names),
                    FIndex::Fixed(v) => v.to_string(),
                })
                .collect();
            let _ = write!(out, "{s}[{}]", idx.join(", "));
        }
        Kind::IndexSum(a, i) => {
            let n = index_name(*i, names);
            let s = sub(a, names);
            let _ = write!(out, "sum({n}, {s})");
        }
        Kind::ComponentTensor(a, ii) => {
            let ns: Vec<String> = ii.iter().map(|i| index_name(*i, names)).collect();
            let s = sub(a, names);
            let _ = write!(out, "as_tensor({s}, ({}))", ns.join(", "));
        }
        Kind::ListTensor(cs) => {
            let parts: Vec<String> = cs.iter().map(|c| sub(c, names)).collect();
            let _ = write!(out, "[{}]", parts.join(", "));
        }
        Kind::Sum(a, b) => {
            let (x, y) = (sub(a, names), sub(b, names));
            let _ = write!(out, "({x} + {y})");
        }
        Kind::Product(a, b) => {
            let (x, y) = (sub(a, names), sub(b, names));
            let _ = write!(out, "{x} * {y}");
        }
        Kind::Division(a, b) => {
            let (x, y) = (sub(a, names), sub(b, names));
            let _ = write!(out, "({x}) / ({y})");
        }
        Kind::Power(a, p) => {
            let x = sub(a, names);
            let _ = write!(out, "({x}) ^ {}", crate::gem::fmt_scalar(*p));
        }
        Kind::MathFunction(f, a) => {
            let x = sub(a, names);
            let _ = write!(out, "{}({x})", f.name());
        }
        Kind::Dot(a, b) | Kind::Inner(a, b) | Kind::Outer(a, b) | Kind::Jump(a, Some(b)) => {
            let name = match e.kind {
                Kind::Dot(..) => "dot",
                Kind::Inner(..) => "inner",
                Kind::Outer(..) => "outer",
                _ => "jump",
            };
            let (x, y) = (sub(a, names), sub(b, names));
            let _ = write!(out, "{name}({x}, {y})");
        }
        Kind::Jump(a, None) | Kind::Avg(a) | Kind::Determinant(a) | Kind::Inverse(a) => {
            let name = match e.kind {
                Kind::Jump(..) => "jump",
                Kind::Avg(_) => "avg",
                Kind::Determinant(_) => "det",
                _ => "inv",
            };
            let x = sub(a, names);
            let _ = write!(out, "{name}({x})");
        }
    }
}
