//! Reference semantics for differential testing: a direct GEM interpreter,
//! a schedule interpreter and a brute-force physical-space integrator.
//!
//! The physical integrator never looks at the pulled-back integrand. It
//! evaluates the parsed form at mapped quadrature points, carrying second
//! order Taylor jets in physical coordinates so that gradients follow from
//! the chain rule directly.

use std::collections::HashMap;
use std::rc::Rc;

use nalgebra::DMatrix;
use rand::Rng;

use crate::element::{self, Cell, LagrangeElement};
use crate::error::{Error, Result};
use crate::form::ast::{Expr, FIndex, Kind, Node, Side, Terminal};
use crate::form::{IntegralSpec, IntegralType};
use crate::gem::{Gem, Index, IndexItem, MathFn, NodeId, Op};
use crate::lowering::{InputRole, KernelSignature, LoweredKernel};
use crate::scheduler::{LoopTree, Schedule, Statement};

/// Dense tensor over free indices followed by shape axes, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub free: Vec<Index>,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

type Assign = Vec<(Index, usize)>;

fn lookup(a: &[(Index, usize)], i: Index) -> usize {
    a.iter().find(|(x, _)| *x == i).map(|(_, v)| *v).expect("unassigned free index")
}

fn multi_indices(extents: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for e in extents {
        out = out.into_iter().flat_map(|p: Vec<usize>| (0..*e).map(move |v| [p.clone(), vec![v]].concat())).collect();
    }
    out
}

impl<T: Copy> Tensor<T> {
    fn build(free: Vec<Index>, shape: Vec<usize>, mut f: impl FnMut(&[(Index, usize)], &[usize]) -> Result<T>) -> Result<Self> {
        let fe: Vec<usize> = free.iter().map(|i| i.extent).collect();
        let mut data = Vec::new();
        for fa in multi_indices(&fe) {
            let assign: Assign = free.iter().copied().zip(fa).collect();
            for comp in multi_indices(&shape) {
                data.push(f(&assign, &comp)?);
            }
        }
        Ok(Tensor { free, shape, data })
    }

    pub fn get(&self, assign: &[(Index, usize)], comp: &[usize]) -> T {
        let mut off = 0;
        for i in &self.free {
            off = off * i.extent + lookup(assign, *i);
        }
        for (c, e) in comp.iter().zip(&self.shape) {
            off = off * e + c;
        }
        self.data[off]
    }

    pub fn scalar(&self) -> T {
        self.data[0]
    }
}

/// Bindings for Variables and VariableIndices.
#[derive(Clone, Debug, Default)]
pub struct Environment {
    pub variables: HashMap<String, (Vec<usize>, Vec<f64>)>,
    pub variable_indices: HashMap<String, usize>,
}

impl Environment {
    pub fn bind(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        self.variables.insert(name.to_string(), (shape, data));
    }

    pub fn bind_index(&mut self, name: &str, value: usize) {
        self.variable_indices.insert(name.to_string(), value);
    }

    fn variable(&self, name: &str, shape: &[usize]) -> Result<&[f64]> {
        let (s, d) = self.variables.get(name).ok_or_else(|| Error::Unbound(name.to_string()))?;
        if s != shape || d.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape { kind: "Variable", detail: format!("`{name}` bound with shape {s:?}, expected {shape:?}") });
        }
        Ok(d)
    }

    fn index(&self, name: &str, extent: usize) -> Result<usize> {
        let v = *self.variable_indices.get(name).ok_or_else(|| Error::Unbound(name.to_string()))?;
        if v >= extent {
            return Err(Error::OutOfRange { value: v, extent });
        }
        Ok(v)
    }
}

fn resolve_item(item: &IndexItem, assign: &[(Index, usize)], env: &Environment) -> Result<usize> {
    match item {
        IndexItem::Free(i) => Ok(lookup(assign, *i)),
        IndexItem::Fixed(v) => Ok(*v),
        IndexItem::Variable(v) => env.index(&v.name, v.extent),
    }
}

fn truth(x: f64) -> f64 {
    if x != 0.0 { 1.0 } else { 0.0 }
}

/// Evaluates a GEM node under the recursive semantics.
pub fn eval_gem(gem: &Gem, root: NodeId, env: &Environment) -> Result<Tensor<f64>> {
    let mut memo: HashMap<NodeId, Tensor<f64>> = HashMap::new();
    for n in crate::gem::traverse_unique(gem, root) {
        let t = eval_node(gem, n, env, &memo)?;
        memo.insert(n, t);
    }
    Ok(memo.remove(&root).unwrap())
}

fn eval_node(gem: &Gem, n: NodeId, env: &Environment, memo: &HashMap<NodeId, Tensor<f64>>) -> Result<Tensor<f64>> {
    let free = gem.free(n).to_vec();
    let shape = gem.shape(n).to_vec();
    let c = |k: NodeId| &memo[&k];
    let bin = |a: NodeId, b: NodeId, f: &dyn Fn(f64, f64) -> f64| {
        Tensor::build(free.clone(), vec![], |s, _| Ok(f(c(a).get(s, &[]), c(b).get(s, &[]))))
    };
    match gem.op(n) {
        Op::Literal { bits, .. } => Ok(Tensor { free, shape, data: bits.iter().map(|b| f64::from_bits(*b)).collect() }),
        Op::Zero { .. } => Tensor::build(free, shape, |_, _| Ok(0.0)),
        Op::Identity { .. } => Tensor::build(free, shape, |_, ij| Ok(if ij[0] == ij[1] { 1.0 } else { 0.0 })),
        Op::Variable { name, shape: s } => Ok(Tensor { free, shape, data: env.variable(name, s)?.to_vec() }),
        Op::Sum(a, b) => bin(*a, *b, &|x, y| x + y),
        Op::Product(a, b) => bin(*a, *b, &|x, y| x * y),
        Op::Division(a, b) => bin(*a, *b, &|x, y| x / y),
        Op::Power(a, b) => bin(*a, *b, &|x, y| x.powf(y)),
        Op::MinValue(a, b) => bin(*a, *b, &|x, y| x.min(y)),
        Op::MaxValue(a, b) => bin(*a, *b, &|x, y| x.max(y)),
        Op::MathFunction(f, a) => Tensor::build(free, vec![], |s, _| Ok(f.apply(c(*a).get(s, &[])))),
        Op::Comparison(op, a, b) => bin(*a, *b, &|x, y| if op.apply(x, y) { 1.0 } else { 0.0 }),
        Op::LogicalAnd(a, b) => bin(*a, *b, &|x, y| truth(x) * truth(y)),
        Op::LogicalOr(a, b) => bin(*a, *b, &|x, y| truth(truth(x) + truth(y))),
        Op::LogicalNot(a) => Tensor::build(free, vec![], |s, _| Ok(1.0 - truth(c(*a).get(s, &[])))),
        Op::Conditional(k, a, b) => Tensor::build(free, vec![], |s, _| {
            Ok(if c(*k).get(s, &[]) != 0.0 { c(*a).get(s, &[]) } else { c(*b).get(s, &[]) })
        }),
        Op::Indexed(a, items) => Tensor::build(free, vec![], |s, _| {
            let comp: Vec<usize> = items.iter().map(|it| resolve_item(it, s, env)).collect::<Result<_>>()?;
            Ok(c(*a).get(s, &comp))
        }),
        Op::ComponentTensor(a, alpha) => Tensor::build(free, shape, |s, comp| {
            let mut full = s.to_vec();
            full.extend(alpha.iter().copied().zip(comp.iter().copied()));
            Ok(c(*a).get(&full, &[]))
        }),
        Op::IndexSum(a, i) => Tensor::build(free, vec![], |s, _| {
            let mut full = s.to_vec();
            full.push((*i, 0));
            let mut acc = 0.0;
            for v in 0..i.extent {
                full.last_mut().unwrap().1 = v;
                acc += c(*a).get(&full, &[]);
            }
            Ok(acc)
        }),
        Op::ListTensor(cs) => Tensor::build(free, shape, |s, comp| Ok(c(cs[comp[0]]).get(s, &comp[1..]))),
    }
}

/// Interprets a schedule's loop tree. Returns the values of the output
/// temporary: the full `A` array for kernels, otherwise a tensor over the
/// output's free indices.
pub fn eval_schedule(s: &Schedule, env: &Environment) -> Result<Vec<f64>> {
    let mut store: Vec<Vec<f64>> = s.temporaries.iter().map(|t| vec![0.0; t.size()]).collect();
    let out = s.temporaries.iter().position(|t| t.output);
    let a_size = match (&s.signature, out) {
        (Some(sig), _) => sig.output_shape.iter().product(),
        (None, Some(o)) => s.temporaries[o].size(),
        (None, None) => 1,
    };
    let mut a = vec![0.0; a_size];
    let mut interp = Interp { s, env, store: &mut store, a: &mut a };
    interp.run(&s.tree, &mut Vec::new())?;
    Ok(a)
}

struct Interp<'a> {
    s: &'a Schedule,
    env: &'a Environment,
    store: &'a mut Vec<Vec<f64>>,
    a: &'a mut Vec<f64>,
}

impl Interp<'_> {
    fn run(&mut self, items: &[LoopTree], assign: &mut Assign) -> Result<()> {
        for it in items {
            match it {
                LoopTree::Loop { index, body } => {
                    for v in 0..index.extent {
                        assign.push((*index, v));
                        self.run(body, assign)?;
                        assign.pop();
                    }
                }
                LoopTree::Nest(k) => self.exec(*k, assign)?,
            }
        }
        Ok(())
    }

    /// Flat location of temporary `t` at component `comp`.
    fn slot(&self, t: usize, assign: &[(Index, usize)], comp: &[usize]) -> usize {
        let temp = &self.s.temporaries[t];
        if temp.output {
            if let Some(sig) = &self.s.signature {
                let mut off = 0;
                for (a, i) in temp.indices.iter().enumerate() {
                    off = off * sig.output_shape[a] + lookup(assign, *i) + sig.output_offsets[a];
                }
                return off;
            }
        }
        let mut off = 0;
        for i in temp.kept() {
            off = off * i.extent + lookup(assign, *i);
        }
        for (c, e) in comp.iter().zip(&temp.shape) {
            off = off * e + c;
        }
        off
    }

    fn write(&mut self, t: usize, off: usize, v: f64, add: bool) {
        let dst = if self.s.temporaries[t].output { &mut *self.a } else { &mut self.store[t] };
        if add {
            dst[off] += v;
        } else {
            dst[off] = v;
        }
    }

    fn exec(&mut self, k: usize, assign: &[(Index, usize)]) -> Result<()> {
        let nest = &self.s.nests[k];
        let t = nest.temp;
        match nest.statement {
            Statement::Init => {
                for comp in multi_indices(&self.s.temporaries[t].shape) {
                    let off = self.slot(t, assign, &comp);
                    self.write(t, off, 0.0, false);
                }
            }
            Statement::Accumulate(e) => {
                let v = self.eval(e, None, assign)?;
                let off = self.slot(t, assign, &[]);
                self.write(t, off, v, true);
            }
            Statement::Assign(n) => {
                let v = self.eval(n, Some(n), assign)?;
                let off = self.slot(t, assign, &[]);
                self.write(t, off, v, false);
            }
            Statement::ListAssign(n) => {
                let leaves = self.s.list_leaves(n);
                let comps = multi_indices(&self.s.temporaries[t].shape);
                for (comp, l) in comps.iter().zip(leaves) {
                    let v = self.eval(l, None, assign)?;
                    let off = self.slot(t, assign, comp);
                    self.write(t, off, v, false);
                }
            }
        }
        Ok(())
    }

    fn read(&self, t: usize, assign: &[(Index, usize)], comp: &[usize]) -> f64 {
        let off = self.slot(t, assign, comp);
        if self.s.temporaries[t].output { self.a[off] } else { self.store[t][off] }
    }

    fn eval(&self, n: NodeId, own: Option<NodeId>, assign: &[(Index, usize)]) -> Result<f64> {
        let gem = &self.s.gem;
        if Some(n) != own {
            if let Some(t) = self.s.temp_of(n) {
                return Ok(self.read(t, assign, &[]));
            }
        }
        let e = |c: NodeId| self.eval(c, None, assign);
        Ok(match gem.op(n) {
            Op::Literal { bits, .. } => f64::from_bits(bits[0]),
            Op::Zero { .. } => 0.0,
            Op::Sum(a, b) => e(*a)? + e(*b)?,
            Op::Product(a, b) => e(*a)? * e(*b)?,
            Op::Division(a, b) => e(*a)? / e(*b)?,
            Op::Power(a, b) => e(*a)?.powf(e(*b)?),
            Op::MinValue(a, b) => e(*a)?.min(e(*b)?),
            Op::MaxValue(a, b) => e(*a)?.max(e(*b)?),
            Op::MathFunction(f, a) => f.apply(e(*a)?),
            Op::Comparison(op, a, b) => (op.apply(e(*a)?, e(*b)?)) as u8 as f64,
            Op::LogicalAnd(a, b) => truth(e(*a)?) * truth(e(*b)?),
            Op::LogicalOr(a, b) => truth(truth(e(*a)?) + truth(e(*b)?)),
            Op::LogicalNot(a) => 1.0 - truth(e(*a)?),
            Op::Conditional(c, a, b) => {
                if e(*c)? != 0.0 {
                    e(*a)?
                } else {
                    e(*b)?
                }
            }
            Op::Indexed(a, items) => {
                let comp: Vec<usize> = items.iter().map(|it| resolve_item(it, assign, self.env)).collect::<Result<_>>()?;
                if let Some(t) = self.s.temp_of(*a) {
                    return Ok(self.read(t, assign, &comp));
                }
                match gem.op(*a) {
                    Op::Literal { shape, bits } => bits[flat(&comp, shape)].pipe(f64::from_bits),
                    Op::Identity { .. } => (comp[0] == comp[1]) as u8 as f64,
                    Op::Variable { name, shape } => self.env.variable(name, shape)?[flat(&comp, shape)],
                    other => return Err(Error::Unsupported(format!("indexing a {} in a schedule", other.kind_name()))),
                }
            }
            Op::Variable { name, shape } => self.env.variable(name, shape)?[0],
            other => return Err(Error::Unsupported(format!("{} inside a statement", other.kind_name()))),
        })
    }
}

trait Pipe: Sized {
    fn pipe<R>(self, f: impl FnOnce(Self) -> R) -> R {
        f(self)
    }
}
impl<T> Pipe for T {}

fn flat(comp: &[usize], shape: &[usize]) -> usize {
    comp.iter().zip(shape).fold(0, |acc, (c, e)| acc * e + c)
}

// ---- kernel inputs ----

/// Geometry and coefficient data of one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellData {
    /// Nodal coordinates, row per coordinate dof.
    pub coords: Vec<f64>,
    /// Dof values per coefficient, in the spec's coefficient order.
    pub coefficients: Vec<Vec<f64>>,
    /// Local facet number for facet integrals.
    pub facet: Option<usize>,
}

/// Binds a kernel's inputs; `cells[1]` is the minus side.
pub fn kernel_environment(sig: &KernelSignature, cells: &[CellData]) -> Result<Environment> {
    let mut env = Environment::default();
    for input in &sig.inputs {
        let cell = &cells[if input.side == Some(Side::Minus) { 1 } else { 0 }];
        let data = match input.role {
            InputRole::Coordinates => cell.coords.clone(),
            InputRole::Coefficient(k) => cell.coefficients[k].clone(),
        };
        env.bind(&input.name, input.shape.clone(), data);
    }
    for (s, v) in sig.facets.iter().enumerate() {
        let f = cells[s].facet.ok_or_else(|| Error::Unbound(v.name.clone()))?;
        env.bind_index(&v.name, f);
    }
    Ok(env)
}

/// Evaluates a lowered kernel's root into the full output array.
pub fn eval_kernel_gem(k: &LoweredKernel, env: &Environment) -> Result<Vec<f64>> {
    let t = eval_gem(&k.gem, k.root, env)?;
    let sig = &k.signature;
    let mut a = vec![0.0; sig.output_shape.iter().product()];
    let extents: Vec<usize> = sig.argument_indices.iter().map(|i| i.extent).collect();
    for mi in multi_indices(&extents) {
        let assign: Assign = sig.argument_indices.iter().copied().zip(mi.iter().copied()).collect();
        let mut off = 0;
        for (a_, v) in mi.iter().enumerate() {
            off = off * sig.output_shape[a_] + v + sig.output_offsets[a_];
        }
        a[off] += t.get(&assign, &[]);
    }
    Ok(a)
}

/// Reference cell vertices moved by up to `jitter` in each coordinate.
pub fn random_vertices(cell: Cell, jitter: f64, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    cell.vertices().iter().map(|v| v.iter().map(|x| x + rng.gen_range(-jitter..=jitter)).collect()).collect()
}

/// Nodal coordinates for vertex positions; edge nodes of quadratic
/// coordinates sit at edge midpoints shifted by `bulge`.
pub fn cell_coordinates(cell: Cell, coord_degree: usize, vertices: &[Vec<f64>], bulge: &[Vec<f64>]) -> Result<Vec<f64>> {
    let el = LagrangeElement::new(cell, coord_degree)?;
    let lambda = |x: &[f64]| -> Vec<f64> {
        match cell {
            Cell::Interval => vec![1.0 - x[0], x[0]],
            Cell::Triangle => vec![1.0 - x[0] - x[1], x[0], x[1]],
        }
    };
    let mut out = Vec::new();
    for (k, node) in el.nodes.iter().enumerate() {
        let l = lambda(node);
        for d in 0..cell.dim() {
            let mut x: f64 = l.iter().zip(vertices).map(|(w, v)| w * v[d]).sum();
            if k >= vertices.len() {
                x += bulge.get(k - vertices.len()).map_or(0.0, |b| b[d]);
            }
            out.push(x);
        }
    }
    Ok(out)
}

/// Vertices of a neighbour sharing local facet `f0` of the given cell as
/// its local facet `f1`, with matching facet parametrizations.
pub fn neighbour_vertices(cell: Cell, vertices: &[Vec<f64>], f0: usize, f1: usize) -> Vec<Vec<f64>> {
    let fv0 = cell.facet_vertices(f0);
    let fv1 = cell.facet_vertices(f1);
    let n = cell.dim() + 1;
    let mut out = vec![vec![0.0; cell.dim()]; n];
    for (a, b) in fv0.iter().zip(&fv1) {
        out[*b] = vertices[*a].clone();
    }
    // The remaining vertex is the reflection of the opposite one through
    // the facet's centroid.
    let opp0 = (0..n).find(|v| !fv0.contains(v)).unwrap();
    let opp1 = (0..n).find(|v| !fv1.contains(v)).unwrap();
    let centroid: Vec<f64> =
        (0..cell.dim()).map(|d| fv0.iter().map(|v| vertices[*v][d]).sum::<f64>() / fv0.len() as f64).collect();
    out[opp1] = (0..cell.dim()).map(|d| 2.0 * centroid[d] - vertices[opp0][d]).collect();
    out
}

/// Random cell data for a spec: jittered geometry, coefficient values in
/// [-1, 1], and for interior facets a reflected neighbour.
pub fn random_cells(spec: &IntegralSpec, curved: bool, rng: &mut impl Rng) -> Result<Vec<CellData>> {
    let cell = spec.cell;
    let v0 = random_vertices(cell, 0.15, rng);
    let nedges = if cell == Cell::Triangle { 3 } else { 1 };
    let bulge = |rng: &mut dyn rand::RngCore| -> Vec<Vec<f64>> {
        (0..nedges)
            .map(|_| (0..cell.dim()).map(|_| if curved { rng.gen_range(-0.08..=0.08) } else { 0.0 }).collect())
            .collect()
    };
    let coeffs = |rng: &mut dyn rand::RngCore| -> Result<Vec<Vec<f64>>> {
        spec.coefficients
            .iter()
            .map(|c| Ok((0..LagrangeElement::new(cell, c.degree)?.space_dim()).map(|_| rng.gen_range(-1.0..=1.0)).collect()))
            .collect()
    };
    let nf = cell.facet_count();
    match spec.integral_type {
        IntegralType::Cell => {
            Ok(vec![CellData { coords: cell_coordinates(cell, spec.coord_degree, &v0, &bulge(rng))?, coefficients: coeffs(rng)?, facet: None }])
        }
        IntegralType::ExteriorFacet => {
            let f = rng.gen_range(0..nf);
            Ok(vec![CellData { coords: cell_coordinates(cell, spec.coord_degree, &v0, &bulge(rng))?, coefficients: coeffs(rng)?, facet: Some(f) }])
        }
        IntegralType::InteriorFacet => {
            let (f0, f1) = (rng.gen_range(0..nf), rng.gen_range(0..nf));
            let v1 = neighbour_vertices(cell, &v0, f0, f1);
            // Shared edge nodes must coincide, so no bulging here.
            let flat = vec![vec![0.0; cell.dim()]; nedges];
            Ok(vec![
                CellData { coords: cell_coordinates(cell, spec.coord_degree, &v0, &flat)?, coefficients: coeffs(rng)?, facet: Some(f0) },
                CellData { coords: cell_coordinates(cell, spec.coord_degree, &v1, &flat)?, coefficients: coeffs(rng)?, facet: Some(f1) },
            ])
        }
    }
}

// ---- physical-space integration ----

/// Value with physical gradient and Hessian. Entries that cannot be known
/// (derivatives past second order) are NaN.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jet {
    pub v: f64,
    pub g: [f64; 2],
    pub h: [[f64; 2]; 2],
}

impl Jet {
    fn constant(v: f64) -> Jet {
        Jet { v, g: [0.0; 2], h: [[0.0; 2]; 2] }
    }

    fn add(self, o: Jet) -> Jet {
        let mut r = self;
        r.v += o.v;
        for a in 0..2 {
            r.g[a] += o.g[a];
            for b in 0..2 {
                r.h[a][b] += o.h[a][b];
            }
        }
        r
    }

    fn scale(self, s: f64) -> Jet {
        self.mul(Jet::constant(s))
    }

    fn mul(self, o: Jet) -> Jet {
        let mut r = Jet::constant(self.v * o.v);
        for a in 0..2 {
            r.g[a] = self.g[a] * o.v + self.v * o.g[a];
            for b in 0..2 {
                r.h[a][b] = self.h[a][b] * o.v + self.g[a] * o.g[b] + o.g[a] * self.g[b] + self.v * o.h[a][b];
            }
        }
        r
    }

    /// `f(self)` given `f`, `f'` and `f''` at `self.v`.
    fn chain(self, f0: f64, f1: f64, f2: f64) -> Jet {
        let mut r = Jet::constant(f0);
        for a in 0..2 {
            r.g[a] = f1 * self.g[a];
            for b in 0..2 {
                r.h[a][b] = f2 * self.g[a] * self.g[b] + f1 * self.h[a][b];
            }
        }
        r
    }

    fn div(self, o: Jet) -> Jet {
        let x = o.v;
        self.mul(o.chain(1.0 / x, -1.0 / (x * x), 2.0 / (x * x * x)))
    }

    fn powf(self, p: f64) -> Jet {
        let x = self.v;
        if p == 0.0 {
            return Jet::constant(1.0);
        }
        let d1 = if p == 1.0 { 1.0 } else { p * x.powf(p - 1.0) };
        let d2 = if p == 1.0 { 0.0 } else if p == 2.0 { 2.0 } else { p * (p - 1.0) * x.powf(p - 2.0) };
        self.chain(x.powf(p), d1, d2)
    }

    fn math(self, f: MathFn) -> Jet {
        let x = self.v;
        match f {
            MathFn::Abs => self.chain(x.abs(), x.signum(), 0.0),
            MathFn::Sqrt => self.chain(x.sqrt(), 0.5 / x.sqrt(), -0.25 / (x * x.sqrt())),
            MathFn::Exp => self.chain(x.exp(), x.exp(), x.exp()),
            MathFn::Ln => self.chain(x.ln(), 1.0 / x, -1.0 / (x * x)),
            MathFn::Sin => self.chain(x.sin(), x.cos(), -x.sin()),
            MathFn::Cos => self.chain(x.cos(), -x.sin(), -x.cos()),
            MathFn::Tan => {
                let t = x.tan();
                self.chain(t, 1.0 + t * t, 2.0 * t * (1.0 + t * t))
            }
        }
    }

    /// Component `d` of the gradient as a jet of its own.
    fn derivative(self, d: usize) -> Jet {
        Jet { v: self.g[d], g: self.h[d], h: [[f64::NAN; 2]; 2] }
    }
}

/// Mapping data of one cell at one point.
struct PointGeometry {
    xi: Vec<f64>,
    x: Vec<f64>,
    /// Inverse Jacobian.
    k: DMatrix<f64>,
    affine: bool,
    normal: Option<Vec<f64>>,
}

fn jacobian(cell: Cell, coord_degree: usize, coords: &[f64], xi: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let dim = cell.dim();
    let el = LagrangeElement::new(cell, coord_degree)?;
    let pts = vec![xi.to_vec()];
    let phi = &el.evaluate(&vec![0; dim], &pts)[0];
    let x: Vec<f64> = (0..dim).map(|a| phi.iter().enumerate().map(|(r, p)| p * coords[r * dim + a]).sum()).collect();
    let mut j = DMatrix::zeros(dim, dim);
    for b in 0..dim {
        let mut e = vec![0; dim];
        e[b] = 1;
        let dphi = &el.evaluate(&e, &pts)[0];
        for a in 0..dim {
            j[(a, b)] = dphi.iter().enumerate().map(|(r, p)| p * coords[r * dim + a]).sum();
        }
    }
    Ok((x, j))
}

/// Outward unit normal of facet `f` from the physical vertex positions.
fn physical_normal(cell: Cell, coords: &[f64], f: usize) -> Vec<f64> {
    let dim = cell.dim();
    let vert = |v: usize| -> Vec<f64> { coords[v * dim..(v + 1) * dim].to_vec() };
    match cell {
        Cell::Interval => {
            let (me, other) = (vert(f)[0], vert(1 - f)[0]);
            vec![(me - other).signum()]
        }
        Cell::Triangle => {
            let fv = cell.facet_vertices(f);
            let (a, b, opp) = (vert(fv[0]), vert(fv[1]), vert(f));
            let e = [b[0] - a[0], b[1] - a[1]];
            let len = (e[0] * e[0] + e[1] * e[1]).sqrt();
            let mut n = vec![e[1] / len, -e[0] / len];
            if n[0] * (a[0] - opp[0]) + n[1] * (a[1] - opp[1]) < 0.0 {
                n = vec![-n[0], -n[1]];
            }
            n
        }
    }
}

struct PhysEval<'a> {
    spec: &'a IntegralSpec,
    cells: &'a [CellData],
    geo: Vec<PointGeometry>,
    /// Per argument: side and local basis number.
    args: Vec<(usize, usize)>,
    memo: HashMap<(*const Node, usize), Tensor<Jet>>,
}

impl PhysEval<'_> {
    fn basis(&self, side: usize, degree: usize, r: usize) -> Result<Jet> {
        let g = &self.geo[side];
        let dim = self.spec.gdim();
        let el = LagrangeElement::new(self.spec.cell, degree)?;
        let pts = vec![g.xi.clone()];
        let mut jet = Jet::constant(el.evaluate(&vec![0; dim], &pts)[0][r]);
        let mut rg = vec![0.0; dim];
        for (b, item) in rg.iter_mut().enumerate() {
            let mut e = vec![0; dim];
            e[b] = 1;
            *item = el.evaluate(&e, &pts)[0][r];
        }
        for a in 0..dim {
            jet.g[a] = (0..dim).map(|b| g.k[(b, a)] * rg[b]).sum();
        }
        let mut hr = DMatrix::zeros(dim, dim);
        for b in 0..dim {
            for c in 0..dim {
                let mut e = vec![0; dim];
                e[b] += 1;
                e[c] += 1;
                hr[(b, c)] = el.evaluate(&e, &pts)[0][r];
            }
        }
        let hp = g.k.transpose() * hr * &g.k;
        for a in 0..dim {
            for b in 0..dim {
                jet.h[a][b] = if g.affine { hp[(a, b)] } else { f64::NAN };
            }
        }
        Ok(jet)
    }

    fn terminal(&self, t: &Terminal, shape: &[usize], side: Option<usize>) -> Result<Tensor<Jet>> {
        let interior = self.spec.integral_type == IntegralType::InteriorFacet;
        let need = |side: Option<usize>| -> Result<usize> {
            match side {
                Some(s) => Ok(s),
                None if !interior => Ok(0),
                None => Err(Error::Restriction(format!("unrestricted `{}` on an interior facet", t.label()))),
            }
        };
        let dim = self.spec.gdim();
        let scalar = |j: Jet| Tensor { free: vec![], shape: shape.to_vec(), data: vec![j] };
        match t {
            Terminal::Argument { number, degree, .. } => {
                let s = need(side)?;
                let (as_, r) = self.args[*number];
                Ok(scalar(if as_ == s { self.basis(s, *degree, r)? } else { Jet::constant(0.0) }))
            }
            Terminal::Coefficient { name, degree, .. } => {
                let s = need(side)?;
                let k = self.spec.coefficients.iter().position(|c| c.name == *name).ok_or_else(|| Error::Unbound(name.clone()))?;
                let w = &self.cells[s].coefficients[k];
                let mut acc = Jet::constant(0.0);
                for (r, wr) in w.iter().enumerate() {
                    acc = acc.add(self.basis(s, *degree, r)?.scale(*wr));
                }
                Ok(scalar(acc))
            }
            Terminal::SpatialCoordinate => {
                let s = side.unwrap_or(0);
                let data = (0..dim)
                    .map(|a| {
                        let mut j = Jet::constant(self.geo[s].x[a]);
                        j.g[a] = 1.0;
                        j
                    })
                    .collect();
                Ok(Tensor { free: vec![], shape: shape.to_vec(), data })
            }
            Terminal::FacetNormal => {
                let s = need(side)?;
                let g = &self.geo[s];
                if !g.affine {
                    return Err(Error::Unsupported("facet normal on a curved cell".into()));
                }
                let n = g.normal.as_ref().ok_or_else(|| Error::Unsupported("facet normal in a cell integral".into()))?;
                Ok(Tensor { free: vec![], shape: shape.to_vec(), data: n.iter().map(|v| Jet::constant(*v)).collect() })
            }
            Terminal::FacetTangent => {
                let s = side.unwrap_or(0);
                let f = self.cells[s].facet.ok_or_else(|| Error::Unsupported("facet tangent in a cell integral".into()))?;
                let t = &self.spec.cell.facet_tangents()[f];
                Ok(Tensor { free: vec![], shape: shape.to_vec(), data: t.iter().map(|v| Jet::constant(*v)).collect() })
            }
        }
    }

    fn eval(&mut self, e: &Expr, side: Option<usize>) -> Result<Tensor<Jet>> {
        let key = (Rc::as_ptr(e), side.map_or(2, |s| s));
        if let Some(t) = self.memo.get(&key) {
            return Ok(t.clone());
        }
        let free = e.free.clone();
        let shape = e.shape.clone();
        let r = match &e.kind {
            Kind::Terminal(t) => self.terminal(t, &shape, side)?,
            Kind::Constant(v) => Tensor { free, shape, data: vec![Jet::constant(*v)] },
            Kind::Zero => Tensor::build(free, shape, |_, _| Ok(Jet::constant(0.0)))?,
            Kind::Restricted(s, a) => self.eval(a, Some(if *s == Side::Plus { 0 } else { 1 }))?,
            Kind::Sum(a, b) => {
                let (x, y) = (self.eval(a, side)?, self.eval(b, side)?);
                Tensor::build(free, shape, |s, c| Ok(x.get(s, c).add(y.get(s, c))))?
            }
            Kind::Product(a, b) => {
                let (x, y) = (self.eval(a, side)?, self.eval(b, side)?);
                Tensor::build(free, shape, |s, _| Ok(x.get(s, &[]).mul(y.get(s, &[]))))?
            }
            Kind::Division(a, b) => {
                let (x, y) = (self.eval(a, side)?, self.eval(b, side)?);
                Tensor::build(free, shape, |s, _| Ok(x.get(s, &[]).div(y.get(s, &[]))))?
            }
            Kind::Power(a, p) => {
                let x = self.eval(a, side)?;
                Tensor::build(free, shape, |s, _| Ok(x.get(s, &[]).powf(*p)))?
            }
            Kind::MathFunction(f, a) => {
                let x = self.eval(a, side)?;
                Tensor::build(free, shape, |s, _| Ok(x.get(s, &[]).math(*f)))?
            }
            Kind::Indexed(a, items) => {
                let x = self.eval(a, side)?;
                Tensor::build(free, shape, |s, _| {
                    let comp: Vec<usize> = items
                        .iter()
                        .map(|it| match it {
                            FIndex::Free(i) => lookup(s, *i),
                            FIndex::Fixed(v) => *v,
                        })
                        .collect();
                    Ok(x.get(s, &comp))
                })?
            }
            Kind::IndexSum(a, i) => {
                let x = self.eval(a, side)?;
                Tensor::build(free, shape, |s, c| {
                    let mut full = s.to_vec();
                    let mut acc = Jet::constant(0.0);
                    full.push((*i, 0));
                    for v in 0..i.extent {
                        full.last_mut().unwrap().1 = v;
                        acc = acc.add(x.get(&full, c));
                    }
                    Ok(acc)
                })?
            }
            Kind::ComponentTensor(a, alpha) => {
                let x = self.eval(a, side)?;
                Tensor::build(free, shape, |s, c| {
                    let mut full = s.to_vec();
                    full.extend(alpha.iter().copied().zip(c.iter().copied()));
                    Ok(x.get(&full, &[]))
                })?
            }
            Kind::ListTensor(cs) => {
                let xs = cs.iter().map(|c| self.eval(c, side)).collect::<Result<Vec<_>>>()?;
                Tensor::build(free, shape, |s, c| Ok(xs[c[0]].get(s, &c[1..])))?
            }
            Kind::Grad(a) => {
                let x = self.eval(a, side)?;
                Tensor::build(free, shape, |s, c| {
                    let (last, rest) = c.split_last().unwrap();
                    Ok(x.get(s, rest).derivative(*last))
                })?
            }
            Kind::Dot(a, b) => {
                let (x, y) = (self.eval(a, side)?, self.eval(b, side)?);
                let ra = a.shape.len();
                let n = if ra == 0 { 1 } else { a.shape[ra - 1] };
                Tensor::build(free, shape, |s, c| {
                    if ra == 0 && b.shape.is_empty() {
                        return Ok(x.get(s, &[]).mul(y.get(s, &[])));
                    }
                    let (ca, cb) = c.split_at(ra - 1);
                    let mut acc = Jet::constant(0.0);
                    for i in 0..n {
                        let ia: Vec<usize> = ca.iter().copied().chain([i]).collect();
                        let ib: Vec<usize> = [i].into_iter().chain(cb.iter().copied()).collect();
                        acc = acc.add(x.get(s, &ia).mul(y.get(s, &ib)));
                    }
                    Ok(acc)
                })?
            }
            Kind::Inner(a, b) => {
                let (x, y) = (self.eval(a, side)?, self.eval(b, side)?);
                let comps = multi_indices(&a.shape);
                Tensor::build(free, shape, |s, _| {
                    let mut acc = Jet::constant(0.0);
                    for c in &comps {
                        acc = acc.add(x.get(s, c).mul(y.get(s, c)));
                    }
                    Ok(acc)
                })?
            }
            Kind::Outer(a, b) => {
                let (x, y) = (self.eval(a, side)?, self.eval(b, side)?);
                let ra = a.shape.len();
                Tensor::build(free, shape, |s, c| Ok(x.get(s, &c[..ra]).mul(y.get(s, &c[ra..]))))?
            }
            Kind::Jump(a, n) => {
                let (xp, xm) = (self.eval(a, Some(0))?, self.eval(a, Some(1))?);
                match n {
                    None => Tensor::build(free, shape, |s, c| Ok(xp.get(s, c).add(xm.get(s, c).scale(-1.0))))?,
                    Some(n) => {
                        let (np, nm) = (self.eval(n, Some(0))?, self.eval(n, Some(1))?);
                        let dim = n.shape[0];
                        let ra = a.shape.len();
                        Tensor::build(free, shape, |s, c| {
                            let mut acc = Jet::constant(0.0);
                            if ra == 0 {
                                let ia: Vec<usize> = vec![];
                                return Ok(xp.get(s, &ia).mul(np.get(s, c)).add(xm.get(s, &ia).mul(nm.get(s, c))));
                            }
                            for i in 0..dim {
                                let ia: Vec<usize> = c.iter().copied().chain([i]).collect();
                                acc = acc.add(xp.get(s, &ia).mul(np.get(s, &[i])));
                                acc = acc.add(xm.get(s, &ia).mul(nm.get(s, &[i])));
                            }
                            Ok(acc)
                        })?
                    }
                }
            }
            Kind::Avg(a) => {
                let (xp, xm) = (self.eval(a, Some(0))?, self.eval(a, Some(1))?);
                Tensor::build(free, shape, |s, c| Ok(xp.get(s, c).add(xm.get(s, c)).scale(0.5)))?
            }
            Kind::Determinant(a) => {
                let x = self.eval(a, side)?;
                Tensor::build(free, shape, |s, _| Ok(det_jet(&x, s, a.shape[0])))?
            }
            Kind::Inverse(a) => {
                let x = self.eval(a, side)?;
                let n = a.shape[0];
                Tensor::build(free, shape, |s, c| {
                    let d = det_jet(&x, s, n);
                    let adj = if n == 1 {
                        Jet::constant(1.0)
                    } else {
                        let (i, j) = (c[0], c[1]);
                        let m = x.get(s, &[1 - j, 1 - i]);
                        if i == j { m } else { m.scale(-1.0) }
                    };
                    Ok(adj.div(d))
                })?
            }
            other => return Err(Error::Unsupported(format!("{} in a physical integrand", kind_label(other)))),
        };
        self.memo.insert(key, r.clone());
        Ok(r)
    }
}

fn kind_label(k: &Kind) -> &'static str {
    match k {
        Kind::Modified { .. } => "modified terminal",
        Kind::ReferenceGrad(_) => "reference gradient",
        _ => "operator",
    }
}

fn det_jet(x: &Tensor<Jet>, s: &[(Index, usize)], n: usize) -> Jet {
    if n == 1 {
        return x.get(s, &[0, 0]);
    }
    x.get(s, &[0, 0]).mul(x.get(s, &[1, 1])).add(x.get(s, &[0, 1]).mul(x.get(s, &[1, 0])).scale(-1.0))
}

/// Integrates the physical integrand of a spec over the given cells with a
/// rule of the given degree, for every combination of argument basis
/// functions. Interior-facet forms use the doubled basis of both cells.
pub fn integrate_physical(spec: &IntegralSpec, cells: &[CellData], degree: usize) -> Result<Vec<f64>> {
    let cell = spec.cell;
    let dim = cell.dim();
    let interior = spec.integral_type == IntegralType::InteriorFacet;
    let ns: Vec<usize> =
        spec.arguments.iter().map(|a| LagrangeElement::new(cell, a.degree).map(|e| e.space_dim())).collect::<Result<_>>()?;
    let extents: Vec<usize> = ns.iter().map(|n| if interior { 2 * n } else { *n }).collect();
    let mut out = vec![0.0; extents.iter().product()];
    let rule = match spec.integral_type {
        IntegralType::Cell => element::quadrature(cell, degree),
        _ => element::facet_quadrature(cell, degree),
    };
    let sides = if interior { 2 } else { 1 };
    for (p, w) in rule.points.iter().zip(&rule.weights) {
        let mut geo = Vec::new();
        let mut weight = *w;
        for (s, cd) in cells.iter().enumerate().take(sides) {
            let xi = match cd.facet {
                Some(f) if spec.integral_type != IntegralType::Cell => cell.facet_point(f, p),
                _ => p.clone(),
            };
            let (x, j) = jacobian(cell, spec.coord_degree, &cd.coords, &xi)?;
            let k = j.clone().try_inverse().ok_or_else(|| Error::Unsupported("degenerate cell".into()))?;
            if s == 0 {
                weight *= match (spec.integral_type, cd.facet) {
                    (IntegralType::Cell, _) => j.determinant().abs(),
                    (_, Some(f)) if dim == 2 => {
                        let t = &cell.facet_tangents()[f];
                        let v = &j * nalgebra::DVector::from_column_slice(t);
                        v.norm()
                    }
                    _ => 1.0,
                };
            }
            let normal = cd.facet.filter(|_| spec.integral_type != IntegralType::Cell).map(|f| physical_normal(cell, &cd.coords, f));
            geo.push(PointGeometry { xi, x, k, affine: spec.coord_degree == 1, normal });
        }
        for (flat_idx, mi) in multi_indices(&extents).into_iter().enumerate() {
            let args: Vec<(usize, usize)> = mi.iter().zip(&ns).map(|(v, n)| (v / n, v % n)).collect();
            let mut ev = PhysEval { spec, cells, geo: Vec::new(), args, memo: HashMap::new() };
            ev.geo = std::mem::take(&mut geo);
            let val = ev.eval(&spec.physical, None)?.scalar().v;
            geo = ev.geo;
            out[flat_idx] += weight * val;
        }
    }
    Ok(out)
}

/// `max |a - b| / max |b|`, or `max |a|` when `b` vanishes.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() || a.iter().chain(b).any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    if scale == 0.0 { diff } else { diff / scale }
}
