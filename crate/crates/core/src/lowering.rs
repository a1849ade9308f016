//! First stage, second half: preprocessed form to GEM.
//!
//! Modified terminals are replaced by their evaluation rules (tabulation
//! tables indexed by quadrature and basis indices, coefficient contractions,
//! facet-indexed reference geometry) and the integrand is wrapped in the
//! weighted quadrature sum.

use std::collections::HashMap;
use std::rc::Rc;

use crate::element::{self, Cell, LagrangeElement, QuadratureRule, TabulationTable};
use crate::error::{Error, Result};
use crate::facet_split::RestrictionBlock;
use crate::form::ast::{Expr, FIndex, Kind, Node, Side, Terminal};
use crate::form::{estimate_degree, ArgumentInfo, IntegralSpec, IntegralType};
use crate::gem::{Gem, Index, IndexItem, NodeId, VariableIndex};

/// Tolerance for deciding that table rows coincide.
const CONSTANT_TOL: f64 = 1e-13;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LoweringOptions {
    /// Drop the quadrature axis of tables that do not vary with it.
    pub cellwise_constant: bool,
    /// Expand cellwise-constant coefficient evaluations with at most two
    /// nonzero table entries.
    pub fast_jacobian: bool,
    /// Lower an unsplit interior-facet integrand against the doubled basis
    /// of both cells, with zero-padded tables.
    pub doubled_basis: bool,
    /// Overrides the estimated quadrature degree.
    pub quadrature_degree: Option<usize>,
}

impl Default for LoweringOptions {
    fn default() -> Self {
        LoweringOptions { cellwise_constant: true, fast_jacobian: true, doubled_basis: false, quadrature_degree: None }
    }
}

impl LoweringOptions {
    /// No optional optimizations.
    pub fn plain() -> Self {
        LoweringOptions { cellwise_constant: false, fast_jacobian: false, ..Default::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum InputRole {
    Coordinates,
    /// Position in the spec's coefficient list.
    Coefficient(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InputVariable {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: InputRole,
    pub side: Option<Side>,
}

#[derive(Clone, Debug)]
pub struct KernelSignature {
    pub name: String,
    pub integral_type: IntegralType,
    pub cell: Cell,
    pub arguments: Vec<ArgumentInfo>,
    /// Output free indices in argument-number order.
    pub argument_indices: Vec<Index>,
    /// Shape of the whole output array `A`.
    pub output_shape: Vec<usize>,
    /// Where this kernel's block starts inside `A`, per argument.
    pub output_offsets: Vec<usize>,
    pub inputs: Vec<InputVariable>,
    /// Facet-number variables, one per side.
    pub facets: Vec<VariableIndex>,
    pub quadrature_index: Index,
    pub quadrature_degree: usize,
    pub restrictions: Vec<Side>,
}

#[derive(Debug)]
pub struct LoweredKernel {
    pub signature: KernelSignature,
    pub gem: Gem,
    pub root: NodeId,
}

fn side_suffix(side: Option<Side>) -> &'static str {
    match side {
        None => "",
        Some(Side::Plus) => "_p",
        Some(Side::Minus) => "_m",
    }
}

fn sides(ty: IntegralType) -> Vec<Option<Side>> {
    if ty == IntegralType::InteriorFacet {
        vec![Some(Side::Plus), Some(Side::Minus)]
    } else {
        vec![None]
    }
}

/// Name of the coordinate variable for a side.
pub fn coordinates_name(side: Option<Side>) -> String {
    format!("coords{}", side_suffix(side))
}

/// Name of the variable holding coefficient `k` for a side.
pub fn coefficient_name(k: usize, side: Option<Side>) -> String {
    format!("w_{k}{}", side_suffix(side))
}

/// Degree of the quadrature rule used for a preprocessed spec.
pub fn quadrature_degree(spec: &IntegralSpec, opts: &LoweringOptions) -> usize {
    opts.quadrature_degree.unwrap_or_else(|| {
        estimate_degree(spec, &spec.integrand) + spec.scale.as_ref().map_or(0, |s| estimate_degree(spec, s))
    })
}

/// The quadrature rule for a preprocessed spec: on the cell or on the
/// reference facet.
pub fn quadrature_rule(spec: &IntegralSpec, degree: usize) -> QuadratureRule {
    match spec.integral_type {
        IntegralType::Cell => element::quadrature(spec.cell, degree),
        _ => element::facet_quadrature(spec.cell, degree),
    }
}

struct Ctx<'a> {
    spec: &'a IntegralSpec,
    opts: &'a LoweringOptions,
    gem: Gem,
    rule: QuadratureRule,
    q: Index,
    args: Vec<Index>,
    facets: Vec<VariableIndex>,
    basis: HashMap<usize, Index>,
    elements: HashMap<usize, LagrangeElement>,
    tables: HashMap<(usize, Vec<usize>), TabulationTable>,
    memo: HashMap<*const Node, NodeId>,
}

impl Ctx<'_> {
    fn element(&mut self, degree: usize) -> Result<LagrangeElement> {
        if let Some(e) = self.elements.get(&degree) {
            return Ok(e.clone());
        }
        let e = LagrangeElement::new(self.spec.cell, degree)?;
        self.elements.insert(degree, e.clone());
        Ok(e)
    }

    fn table(&mut self, degree: usize, derivative: &[usize]) -> Result<TabulationTable> {
        let key = (degree, derivative.to_vec());
        if let Some(t) = self.tables.get(&key) {
            return Ok(t.clone());
        }
        let el = self.element(degree)?;
        let t = match self.spec.integral_type {
            IntegralType::Cell => element::tabulate(&el, derivative, &self.rule)?,
            _ => element::tabulate_facet(&el, derivative, &self.rule)?,
        };
        self.tables.insert(key, t.clone());
        Ok(t)
    }

    fn facet_var(&self, side: Option<Side>) -> Option<VariableIndex> {
        match side {
            Some(Side::Minus) => self.facets.get(1).cloned(),
            _ => self.facets.first().cloned(),
        }
    }

    fn basis_index(&mut self, degree: usize, n: usize) -> Index {
        *self.basis.entry(degree).or_insert_with(|| self.gem.indices.fresh(n))
    }

    /// Reduces a table to the axes it actually varies along. Returns the
    /// remaining shape, values and whether the facet and q axes were kept.
    fn reduce(&self, t: &TabulationTable) -> (Vec<f64>, bool, bool) {
        let nf = if t.facet_indexed { t.shape[0] } else { 1 };
        let (nq, nb) = (t.shape[t.shape.len() - 2], t.shape[t.shape.len() - 1]);
        let mut keep_q = true;
        let mut keep_f = t.facet_indexed;
        if self.opts.cellwise_constant {
            keep_q = !(0..nf).all(|f| (0..nq).all(|q| (0..nb).all(|r| (t.get(f, q, r) - t.get(f, 0, r)).abs() <= CONSTANT_TOL)));
            if keep_f {
                let nq_eff = if keep_q { nq } else { 1 };
                keep_f = !(0..nf).all(|f| (0..nq_eff).all(|q| (0..nb).all(|r| (t.get(f, q, r) - t.get(0, q, r)).abs() <= CONSTANT_TOL)));
            }
        }
        let mut values = Vec::new();
        for f in 0..if keep_f { nf } else { 1 } {
            for q in 0..if keep_q { nq } else { 1 } {
                for r in 0..nb {
                    values.push(t.get(f, q, r));
                }
            }
        }
        (values, keep_f, keep_q)
    }

    /// Literal for a (reduced) table indexed by facet, q and `basis`.
    fn table_entry(&mut self, t: &TabulationTable, side: Option<Side>, basis: IndexItem, pad: Option<Side>) -> Result<NodeId> {
        let (mut values, keep_f, keep_q) = self.reduce(t);
        let mut nb = t.shape[t.shape.len() - 1];
        if let Some(half) = pad {
            let rows: Vec<Vec<f64>> = values.chunks(nb).map(|c| c.to_vec()).collect();
            values = rows
                .into_iter()
                .flat_map(|row| {
                    let z = vec![0.0; nb];
                    if half == Side::Plus { [row, z].concat() } else { [z, row].concat() }
                })
                .collect();
            nb *= 2;
        }
        let mut shape = Vec::new();
        let mut items = Vec::new();
        if keep_f {
            shape.push(t.shape[0]);
            let fv = self.facet_var(side).ok_or_else(|| Error::Unsupported("facet table in a cell integral".into()))?;
            items.push(IndexItem::Variable(fv));
        }
        if keep_q {
            shape.push(self.rule.len());
            items.push(IndexItem::Free(self.q));
        }
        shape.push(nb);
        items.push(basis);
        let lit = self.gem.literal(shape, values)?;
        self.gem.indexed(lit, items)
    }

    /// Derivative multi-indices for each component of a `grad`-th
    /// reference gradient, as a nested ListTensor built by `leaf`.
    fn derivative_tensor(&mut self, grad: usize, leaf: &mut dyn FnMut(&mut Self, &[usize]) -> Result<NodeId>) -> Result<NodeId> {
        fn rec<'a>(
            ctx: &mut Ctx<'a>,
            tdim: usize,
            left: usize,
            counts: &mut Vec<usize>,
            leaf: &mut dyn FnMut(&mut Ctx<'a>, &[usize]) -> Result<NodeId>,
        ) -> Result<NodeId> {
            if left == 0 {
                return leaf(ctx, counts);
            }
            let mut ch = Vec::new();
            for d in 0..tdim {
                counts[d] += 1;
                ch.push(rec(ctx, tdim, left - 1, counts, leaf)?);
                counts[d] -= 1;
            }
            ctx.gem.list_tensor(ch)
        }
        let tdim = self.spec.tdim();
        rec(self, tdim, grad, &mut vec![0; tdim], leaf)
    }

    fn lower_argument(&mut self, number: usize, degree: usize, side: Option<Side>, grad: usize) -> Result<NodeId> {
        let basis = IndexItem::Free(self.args[number]);
        let pad = if self.opts.doubled_basis { side } else { None };
        self.derivative_tensor(grad, &mut |ctx, counts| {
            let t = ctx.table(degree, counts)?;
            ctx.table_entry(&t, side, basis.clone(), pad)
        })
    }

    /// `sum_r T[.., r] * var[r, component..]`, or its explicit expansion.
    fn contract(&mut self, t: &TabulationTable, side: Option<Side>, var: NodeId, component: Option<usize>, degree: usize) -> Result<NodeId> {
        let entry = |ctx: &mut Self, r: IndexItem| -> Result<NodeId> {
            let mut items = vec![r];
            if let Some(a) = component {
                items.push(IndexItem::Fixed(a));
            }
            ctx.gem.indexed(var, items)
        };
        let (values, keep_f, keep_q) = self.reduce(t);
        let nonzero: Vec<(usize, f64)> = values.iter().copied().enumerate().filter(|(_, v)| *v != 0.0).collect();
        if self.opts.fast_jacobian && !keep_f && !keep_q && nonzero.len() <= 2 {
            let mut terms = Vec::new();
            for (r, c) in nonzero {
                let x = entry(self, IndexItem::Fixed(r))?;
                let term = if c == 1.0 {
                    x
                } else if c == -1.0 {
                    self.gem.neg(x)?
                } else {
                    let lit = self.gem.scalar(c);
                    self.gem.product(lit, x)?
                };
                terms.push((c < 0.0, term));
            }
            terms.sort_by_key(|(negative, _)| *negative);
            let mut acc = self.gem.zero(vec![]);
            for (_, t) in terms {
                acc = self.gem.sum(acc, t)?;
            }
            return Ok(acc);
        }
        let n = t.shape[t.shape.len() - 1];
        let r = self.basis_index(degree, n);
        let tab = self.table_entry(t, side, IndexItem::Free(r), None)?;
        let v = entry(self, IndexItem::Free(r))?;
        let p = self.gem.product(tab, v)?;
        self.gem.index_sum(p, r)
    }

    fn coordinate_variable(&mut self, side: Option<Side>) -> Result<(NodeId, usize)> {
        let el = self.element(self.spec.coord_degree)?;
        let n = el.space_dim();
        Ok((self.gem.variable(&coordinates_name(side), vec![n, self.spec.gdim()]), n))
    }

    fn lower_coefficient(&mut self, k: usize, degree: usize, side: Option<Side>, grad: usize) -> Result<NodeId> {
        let n = self.element(degree)?.space_dim();
        let var = self.gem.variable(&coefficient_name(k, side), vec![n]);
        self.derivative_tensor(grad, &mut |ctx, counts| {
            let t = ctx.table(degree, counts)?;
            ctx.contract(&t, side, var, None, degree)
        })
    }

    fn lower_coordinate(&mut self, side: Option<Side>, grad: usize) -> Result<NodeId> {
        let (var, _) = self.coordinate_variable(side)?;
        let degree = self.spec.coord_degree;
        let mut comps = Vec::new();
        for a in 0..self.spec.gdim() {
            comps.push(self.derivative_tensor(grad, &mut |ctx, counts| {
                let t = ctx.table(degree, counts)?;
                ctx.contract(&t, side, var, Some(a), degree)
            })?);
        }
        self.gem.list_tensor(comps)
    }

    fn jacobian_entry(&mut self, side: Option<Side>, a: usize, b: usize) -> Result<NodeId> {
        let j = self.lower_coordinate(side, 1)?;
        self.gem.indexed(j, vec![IndexItem::Fixed(a), IndexItem::Fixed(b)])
    }

    /// Physical unit normal `K^T n_ref / |K^T n_ref|`, with the inverse
    /// Jacobian built exactly as the pullback builds it so that the nodes
    /// are shared.
    fn lower_normal(&mut self, side: Option<Side>) -> Result<NodeId> {
        let cell = self.spec.cell;
        let dim = self.spec.gdim();
        let fv = self.facet_var(side).ok_or_else(|| Error::Unsupported("facet normal in a cell integral".into()))?;
        let normals: Vec<f64> = cell.reference_normals().concat();
        let table = self.gem.literal(vec![cell.facet_count(), dim], normals)?;
        let nref: Vec<NodeId> = (0..dim)
            .map(|i| self.gem.indexed(table, vec![IndexItem::Variable(fv.clone()), IndexItem::Fixed(i)]))
            .collect::<Result<_>>()?;
        let kinv: Vec<Vec<NodeId>> = if dim == 1 {
            let d = self.jacobian_entry(side, 0, 0)?;
            let one = self.gem.scalar(1.0);
            vec![vec![self.gem.division(one, d)?]]
        } else {
            let j: Vec<Vec<NodeId>> =
                (0..2).map(|a| (0..2).map(|b| self.jacobian_entry(side, a, b)).collect()).collect::<Result<_>>()?;
            let p1 = self.gem.product(j[0][0], j[1][1])?;
            let p2 = self.gem.product(j[0][1], j[1][0])?;
            let d = self.gem.sub(p1, p2)?;
            let adj = [[j[1][1], self.gem.neg(j[0][1])?], [self.gem.neg(j[1][0])?, j[0][0]]];
            adj.iter().map(|row| row.iter().map(|x| self.gem.division(*x, d)).collect()).collect::<Result<_>>()?
        };
        let mut m = Vec::new();
        #[allow(clippy::needless_range_loop)]
        for l in 0..dim {
            let mut acc = self.gem.zero(vec![]);
            for (i, n) in nref.iter().enumerate() {
                let p = self.gem.product(kinv[i][l], *n)?;
                acc = self.gem.sum(acc, p)?;
            }
            m.push(acc);
        }
        let mut sq = self.gem.zero(vec![]);
        for x in &m {
            let p = self.gem.product(*x, *x)?;
            sq = self.gem.sum(sq, p)?;
        }
        let norm = self.gem.math(crate::gem::MathFn::Sqrt, sq)?;
        let comps: Vec<NodeId> = m.iter().map(|x| self.gem.division(*x, norm)).collect::<Result<_>>()?;
        self.gem.list_tensor(comps)
    }

    fn lower_tangent(&mut self, side: Option<Side>) -> Result<NodeId> {
        let cell = self.spec.cell;
        let tdim = self.spec.tdim();
        let fv = self.facet_var(side).ok_or_else(|| Error::Unsupported("facet tangent in a cell integral".into()))?;
        let table = self.gem.literal(vec![cell.facet_count(), tdim], cell.facet_tangents().concat())?;
        let comps: Vec<NodeId> = (0..tdim)
            .map(|c| self.gem.indexed(table, vec![IndexItem::Variable(fv.clone()), IndexItem::Fixed(c)]))
            .collect::<Result<_>>()?;
        self.gem.list_tensor(comps)
    }

    fn lower_modified(&mut self, e: &Expr, t: &Terminal, side: Option<Side>, grad: usize) -> Result<NodeId> {
        match t {
            Terminal::Argument { number, degree, .. } => self.lower_argument(*number, *degree, side, grad),
            Terminal::Coefficient { name, degree, .. } => {
                let k = self
                    .spec
                    .coefficients
                    .iter()
                    .position(|c| c.name == *name)
                    .ok_or_else(|| Error::Unbound(name.clone()))?;
                self.lower_coefficient(k, *degree, side, grad)
            }
            Terminal::SpatialCoordinate => self.lower_coordinate(side, grad),
            Terminal::FacetNormal | Terminal::FacetTangent if grad > 0 => Ok(self.gem.zero(e.shape.clone())),
            Terminal::FacetNormal => self.lower_normal(side),
            Terminal::FacetTangent => self.lower_tangent(side),
        }
    }

    fn lower(&mut self, e: &Expr) -> Result<NodeId> {
        if let Some(id) = self.memo.get(&Rc::as_ptr(e)) {
            return Ok(*id);
        }
        let ch: Vec<NodeId> = e.children().iter().map(|c| self.lower(c)).collect::<Result<_>>()?;
        let id = match &e.kind {
            Kind::Modified { terminal, restriction, grad } => self.lower_modified(e, terminal, *restriction, *grad)?,
            Kind::Constant(v) => self.gem.scalar(*v),
            Kind::Zero => self.gem.zero(e.shape.clone()),
            Kind::Sum(..) if e.shape.is_empty() => self.gem.sum(ch[0], ch[1])?,
            Kind::Sum(..) => {
                let alpha: Vec<Index> = e.shape.iter().map(|n| self.gem.indices.fresh(*n)).collect();
                let items: Vec<IndexItem> = alpha.iter().map(|i| IndexItem::Free(*i)).collect();
                let a = self.gem.indexed(ch[0], items.clone())?;
                let b = self.gem.indexed(ch[1], items)?;
                let s = self.gem.sum(a, b)?;
                self.gem.component_tensor(s, alpha)?
            }
            Kind::Product(..) => self.gem.product(ch[0], ch[1])?,
            Kind::Division(..) => self.gem.division(ch[0], ch[1])?,
            Kind::Power(_, p) => {
                let p = self.gem.scalar(*p);
                self.gem.power(ch[0], p)?
            }
            Kind::MathFunction(f, _) => self.gem.math(*f, ch[0])?,
            Kind::Indexed(_, items) => {
                let items = items
                    .iter()
                    .map(|it| match it {
                        FIndex::Free(i) => IndexItem::Free(*i),
                        FIndex::Fixed(v) => IndexItem::Fixed(*v),
                    })
                    .collect();
                self.gem.indexed(ch[0], items)?
            }
            Kind::IndexSum(_, i) => self.gem.index_sum(ch[0], *i)?,
            Kind::ComponentTensor(_, ii) => self.gem.component_tensor(ch[0], ii.clone())?,
            Kind::ListTensor(_) => self.gem.list_tensor(ch)?,
            _ => return Err(Error::Unsupported(format!("{} reached lowering", e.kind_name()))),
        };
        self.memo.insert(Rc::as_ptr(e), id);
        Ok(id)
    }
}

/// Lowers one restriction block of a preprocessed spec. For non-interior
/// integrals pass the single unrestricted block from `facet_split::split`.
pub fn compile_integrand(spec: &IntegralSpec, block: &RestrictionBlock, opts: &LoweringOptions) -> Result<LoweredKernel> {
    let ty = spec.integral_type;
    let degree = quadrature_degree(spec, opts);
    let rule = quadrature_rule(spec, degree);
    let ig = spec.indices.clone();
    let gem = Gem::new(ig.clone());
    let q = ig.fresh(rule.len());
    let doubled = opts.doubled_basis && ty == IntegralType::InteriorFacet;
    let mut extents = Vec::new();
    for a in &spec.arguments {
        let n = LagrangeElement::new(spec.cell, a.degree)?.space_dim();
        extents.push(n);
    }
    let args: Vec<Index> = extents.iter().map(|n| ig.fresh(if doubled { 2 * n } else { *n })).collect();
    let facets: Vec<VariableIndex> = match ty {
        IntegralType::Cell => vec![],
        IntegralType::ExteriorFacet => vec![VariableIndex { name: "facet_0".into(), extent: spec.cell.facet_count() }],
        IntegralType::InteriorFacet => (0..2)
            .map(|s| VariableIndex { name: format!("facet_{s}"), extent: spec.cell.facet_count() })
            .collect(),
    };
    let coord_n = LagrangeElement::new(spec.cell, spec.coord_degree)?.space_dim();
    let mut inputs = Vec::new();
    for side in sides(ty) {
        inputs.push(InputVariable {
            name: coordinates_name(side),
            shape: vec![coord_n, spec.gdim()],
            role: InputRole::Coordinates,
            side,
        });
    }
    for (k, c) in spec.coefficients.iter().enumerate() {
        let n = LagrangeElement::new(spec.cell, c.degree)?.space_dim();
        for side in sides(ty) {
            inputs.push(InputVariable { name: coefficient_name(k, side), shape: vec![n], role: InputRole::Coefficient(k), side });
        }
    }
    let (output_shape, output_offsets) = if ty == IntegralType::InteriorFacet {
        let shape = extents.iter().map(|n| 2 * n).collect();
        let offsets = if doubled {
            vec![0; extents.len()]
        } else {
            extents.iter().zip(&block.restrictions).map(|(n, s)| if *s == Side::Plus { 0 } else { *n }).collect()
        };
        (shape, offsets)
    } else {
        (extents.clone(), vec![0; extents.len()])
    };
    let weights = rule.weights.clone();
    let mut ctx = Ctx {
        spec,
        opts,
        gem,
        rule,
        q,
        args: args.clone(),
        facets: facets.clone(),
        basis: HashMap::new(),
        elements: HashMap::new(),
        tables: HashMap::new(),
        memo: HashMap::new(),
    };
    let integrand = ctx.lower(&block.integrand)?;
    let root = if ctx.gem.is_zero(integrand) {
        integrand
    } else {
        let wl = ctx.gem.literal(vec![weights.len()], weights)?;
        let mut scaled = ctx.gem.indexed(wl, vec![IndexItem::Free(q)])?;
        if let Some(s) = &spec.scale {
            let s = ctx.lower(s)?;
            if ctx.gem.scalar_value(s) != Some(1.0) {
                scaled = ctx.gem.product(scaled, s)?;
            }
        }
        let summand = ctx.gem.product(scaled, integrand)?;
        ctx.gem.index_sum(summand, q)?
    };
    let name = format!("{}{}", spec.name, if doubled { String::new() } else { block.suffix() });
    let signature = KernelSignature {
        name,
        integral_type: ty,
        cell: spec.cell,
        arguments: spec.arguments.clone(),
        argument_indices: args,
        output_shape,
        output_offsets,
        inputs,
        facets,
        quadrature_index: q,
        quadrature_degree: degree,
        restrictions: if doubled { vec![] } else { block.restrictions.clone() },
    };
    Ok(LoweredKernel { signature, gem: ctx.gem, root })
}

/// Lowers the unsplit interior-facet integrand against the doubled basis.
pub fn compile_doubled(spec: &IntegralSpec, opts: &LoweringOptions) -> Result<LoweredKernel> {
    let block = RestrictionBlock { restrictions: vec![], integrand: spec.integrand.clone() };
    let opts = LoweringOptions { doubled_basis: true, ..opts.clone() };
    compile_integrand(spec, &block, &opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::facet_split::split;
    use crate::form::{parse, preprocess};
    use crate::gem::{census, traverse_unique, Op, NODE_KINDS};

    fn lowered(src: &str, opts: &LoweringOptions) -> Vec<LoweredKernel> {
        let spec = preprocess(&parse(src).unwrap().remove(0).1).unwrap();
        split(&spec).unwrap().iter().map(|b| compile_integrand(&spec, b, opts).unwrap()).collect()
    }

    const LAPLACE_P2: &str = "cell triangle coord_degree 1\nspace V lagrange 2\nargument v test V\nargument u trial V\n\
                              form a = cell integral dot(grad(u), grad(v))\n";

    #[test]
    fn laplace_census_matches_worked_example() {
        let k = lowered(LAPLACE_P2, &LoweringOptions::plain()).remove(0);
        let c = census(&k.gem, k.root);
        // Four Jacobian contractions, the two inner sums, the i5 sum and q.
        assert_eq!(c["IndexSum"], 8);
        assert_eq!(c["ComponentTensor"], 1);
        assert_eq!(c["Variable"], 1);
        assert_eq!(c["MathFunction"], 1);
        // Two gradient ListTensors plus the adjugate and its rows.
        assert_eq!(c["ListTensor"], 5);
        let mut free: Vec<Index> = k.gem.free(k.root).to_vec();
        free.sort();
        assert_eq!(free, k.signature.argument_indices);
    }

    #[test]
    fn only_gem_kinds_survive() {
        let k = lowered(LAPLACE_P2, &LoweringOptions::default()).remove(0);
        for n in traverse_unique(&k.gem, k.root) {
            assert!(NODE_KINDS.contains(&k.gem.op(n).kind_name()));
        }
    }

    #[test]
    fn fast_jacobian_has_no_coordinate_contraction() {
        let k = lowered(LAPLACE_P2, &LoweringOptions::default()).remove(0);
        let c = census(&k.gem, k.root);
        // Only the two inner sums, the i5 sum and q remain.
        assert_eq!(c["IndexSum"], 4);
        for n in traverse_unique(&k.gem, k.root) {
            if let Op::Indexed(v, items) = k.gem.op(n) {
                if matches!(k.gem.op(*v), Op::Variable { .. }) {
                    assert!(items.iter().all(|i| matches!(i, IndexItem::Fixed(_))));
                }
            }
        }
    }

    #[test]
    fn zero_integrand_lowers_to_zero() {
        let src = "cell triangle coord_degree 1\nspace V lagrange 1\nargument v test V\nargument u trial V\n\
                   form a = interior_facet integral pos(u) * pos(v)\n";
        let ks = lowered(src, &LoweringOptions::default());
        assert!(!ks[0].gem.is_zero(ks[0].root));
        assert!(ks[1..].iter().all(|k| k.gem.is_zero(k.root)));
        assert_eq!(ks[1].signature.output_offsets, vec![0, 3]);
        assert_eq!(ks[1].signature.name, "a_pm");
    }

    #[test]
    fn second_derivative_of_p1_folds() {
        let src = "cell triangle coord_degree 1\nspace V lagrange 1\nargument v test V\ncoefficient f V\n\
                   form L = cell integral grad(grad(f))[0, 1] * v\n";
        let k = lowered(src, &LoweringOptions::default()).remove(0);
        assert!(k.gem.is_zero(k.root));
    }
}
