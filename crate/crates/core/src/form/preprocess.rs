//! Preprocessing: pullback to the reference cell, lowering of compound
//! operators to index notation, and propagation of reference gradients and
//! restrictions down to the terminals.

use std::collections::HashMap;
use std::rc::Rc;

use super::ast::{self, Expr, FIndex, Kind, Node, Side, Terminal};
use super::{IntegralSpec, IntegralType};
use crate::error::{Error, Result};
use crate::gem::{Index, IndexGen, MathFn};

/// Jacobian-derived quantities shared by every gradient in one integrand.
struct Geometry {
    jacobian: Expr,
    det: Expr,
    kinv: Expr,
}

fn fixed(a: &Expr, items: &[usize]) -> Result<Expr> {
    ast::indexed(a, items.iter().map(|v| FIndex::Fixed(*v)).collect())
}

fn free(ii: &[Index]) -> Vec<FIndex> {
    ii.iter().map(|i| FIndex::Free(*i)).collect()
}

/// Determinant and adjugate of a 1x1 or 2x2 matrix expression.
fn det_adjugate(ig: &IndexGen, m: &Expr) -> Result<(Expr, Expr)> {
    if m.shape[0] == 1 {
        let det = fixed(m, &[0, 0])?;
        let adj = ast::list_tensor(vec![ast::list_tensor(vec![ast::constant(1.0)])?])?;
        return Ok((det, adj));
    }
    let m00 = fixed(m, &[0, 0])?;
    let m01 = fixed(m, &[0, 1])?;
    let m10 = fixed(m, &[1, 0])?;
    let m11 = fixed(m, &[1, 1])?;
    let det = ast::sub(ig, &ast::product(&m00, &m11)?, &ast::product(&m01, &m10)?)?;
    let adj = ast::list_tensor(vec![
        ast::list_tensor(vec![m11.clone(), ast::neg(ig, &m01)?])?,
        ast::list_tensor(vec![ast::neg(ig, &m10)?, m00.clone()])?,
    ])?;
    Ok((det, adj))
}

/// `adj / det` as a ComponentTensor over fresh indices.
fn scaled_inverse(ig: &IndexGen, det: &Expr, adj: &Expr) -> Result<Expr> {
    let n = adj.shape[0];
    let (i, j) = (ig.fresh(n), ig.fresh(n));
    let entry = ast::indexed(adj, vec![FIndex::Free(i), FIndex::Free(j)])?;
    ast::component_tensor(&ast::division(&entry, det)?, vec![i, j])
}

impl Geometry {
    fn new(spec: &IntegralSpec) -> Result<Geometry> {
        let ig = &spec.indices;
        let x = ast::terminal(Terminal::SpatialCoordinate, vec![spec.gdim()]);
        let jacobian = ast::reference_grad(&x, spec.tdim())?;
        let (det, adj) = det_adjugate(ig, &jacobian)?;
        let kinv = scaled_inverse(ig, &det, &adj)?;
        Ok(Geometry { jacobian, det, kinv })
    }

    /// Measure scaling for the integral type.
    fn scale(&self, spec: &IntegralSpec) -> Result<Expr> {
        let ig = &spec.indices;
        let s = match spec.integral_type {
            IntegralType::Cell => return ast::math(MathFn::Abs, &self.det),
            _ if spec.tdim() == 1 => return Ok(ast::constant(1.0)),
            _ => {
                let t = ast::terminal(Terminal::FacetTangent, vec![spec.tdim()]);
                let (a, b) = (ig.fresh(spec.gdim()), ig.fresh(spec.tdim()));
                let jt = ast::index_sum(
                    &ast::product(
                        &ast::indexed(&self.jacobian, vec![FIndex::Free(a), FIndex::Free(b)])?,
                        &ast::indexed(&t, vec![FIndex::Free(b)])?,
                    )?,
                    b,
                )?;
                ast::math(MathFn::Sqrt, &ast::index_sum(&ast::power(&jt, 2.0)?, a)?)?
            }
        };
        if spec.integral_type == IntegralType::InteriorFacet {
            ast::restricted(Side::Plus, &s)
        } else {
            Ok(s)
        }
    }
}

/// Rewrites physical gradients as `K^T` times reference gradients and sets
/// the measure scaling.
pub fn pull_back(spec: &IntegralSpec) -> Result<IntegralSpec> {
    let ig = spec.indices.clone();
    let geo = Geometry::new(spec)?;
    let tdim = spec.tdim();
    let integrand = ast::transform(&spec.integrand, &mut |e, ch| {
        let Kind::Grad(_) = &e.kind else { return Ok(None) };
        let a = &ch[0];
        let alpha: Vec<Index> = a.shape.iter().map(|n| ig.fresh(*n)).collect();
        let i = ig.fresh(tdim);
        let l = ig.fresh(*e.shape.last().unwrap());
        let mut items = free(&alpha);
        items.push(FIndex::Free(i));
        let rg = ast::indexed(&ast::reference_grad(a, tdim)?, items)?;
        let k = ast::indexed(&geo.kinv, vec![FIndex::Free(i), FIndex::Free(l)])?;
        let contracted = ast::index_sum(&ast::product(&k, &rg)?, i)?;
        let mut out = alpha;
        out.push(l);
        Ok(Some(ast::component_tensor(&contracted, out)?))
    })?;
    Ok(IntegralSpec { integrand, scale: Some(geo.scale(spec)?), ..spec.clone() })
}

fn lowered_dot(ig: &IndexGen, a: &Expr, b: &Expr) -> Result<Expr> {
    if a.is_scalar() && b.is_scalar() {
        return ast::product(a, b);
    }
    let alpha: Vec<Index> = a.shape[..a.shape.len() - 1].iter().map(|n| ig.fresh(*n)).collect();
    let beta: Vec<Index> = b.shape[1..].iter().map(|n| ig.fresh(*n)).collect();
    let i = ig.fresh(b.shape[0]);
    let mut ai = free(&alpha);
    ai.push(FIndex::Free(i));
    let mut bi = vec![FIndex::Free(i)];
    bi.extend(free(&beta));
    let p = ast::product(&ast::index_into(ig, a, ai)?, &ast::index_into(ig, b, bi)?)?;
    let s = ast::index_sum(&p, i)?;
    ast::component_tensor(&s, alpha.into_iter().chain(beta).collect())
}

fn lowered_inner(ig: &IndexGen, a: &Expr, b: &Expr) -> Result<Expr> {
    let ii: Vec<Index> = a.shape.iter().map(|n| ig.fresh(*n)).collect();
    let mut e = ast::product(&ast::index_into(ig, a, free(&ii))?, &ast::index_into(ig, b, free(&ii))?)?;
    for i in ii.iter().rev() {
        e = ast::index_sum(&e, *i)?;
    }
    Ok(e)
}

fn lowered_outer(ig: &IndexGen, a: &Expr, b: &Expr) -> Result<Expr> {
    let alpha: Vec<Index> = a.shape.iter().map(|n| ig.fresh(*n)).collect();
    let beta: Vec<Index> = b.shape.iter().map(|n| ig.fresh(*n)).collect();
    let p = ast::product(&ast::index_into(ig, a, free(&alpha))?, &ast::index_into(ig, b, free(&beta))?)?;
    ast::component_tensor(&p, alpha.into_iter().chain(beta).collect())
}

/// Rewrites Dot, Inner, Outer, Jump, Avg, Determinant and Inverse in terms
/// of index notation and explicit restrictions.
pub fn lower_compounds(spec: &IntegralSpec) -> Result<IntegralSpec> {
    let ig = spec.indices.clone();
    let lower = |e: &Expr| -> Result<Expr> {
        ast::transform(e, &mut |e, ch| {
            let plus = |x: &Expr| ast::restricted(Side::Plus, x);
            let minus = |x: &Expr| ast::restricted(Side::Minus, x);
            Ok(Some(match &e.kind {
                Kind::Dot(..) => lowered_dot(&ig, &ch[0], &ch[1])?,
                Kind::Inner(..) => lowered_inner(&ig, &ch[0], &ch[1])?,
                Kind::Outer(..) => lowered_outer(&ig, &ch[0], &ch[1])?,
                Kind::Jump(_, None) => ast::sub(&ig, &plus(&ch[0])?, &minus(&ch[0])?)?,
                Kind::Jump(_, Some(_)) => {
                    let (a, n) = (&ch[0], &ch[1]);
                    if a.is_scalar() {
                        ast::sum(&ast::mul(&ig, &plus(a)?, &plus(n)?)?, &ast::mul(&ig, &minus(a)?, &minus(n)?)?)?
                    } else {
                        ast::sum(&lowered_dot(&ig, &plus(a)?, &plus(n)?)?, &lowered_dot(&ig, &minus(a)?, &minus(n)?)?)?
                    }
                }
                Kind::Avg(_) => ast::mul(&ig, &ast::constant(0.5), &ast::sum(&plus(&ch[0])?, &minus(&ch[0])?)?)?,
                Kind::Determinant(_) => det_adjugate(&ig, &ch[0])?.0,
                Kind::Inverse(_) => {
                    let (det, adj) = det_adjugate(&ig, &ch[0])?;
                    scaled_inverse(&ig, &det, &adj)?
                }
                _ => return Ok(None),
            }))
        })
    };
    let integrand = lower(&spec.integrand)?;
    let scale = spec.scale.as_ref().map(&lower).transpose()?;
    Ok(IntegralSpec { integrand, scale, ..spec.clone() })
}

struct Propagator {
    ig: IndexGen,
    ty: IntegralType,
    tdim: usize,
    affine: bool,
    memo: HashMap<(*const Node, Option<Side>), Expr>,
    grad_memo: HashMap<*const Node, Expr>,
}

impl Propagator {
    fn restrict(&mut self, e: &Expr, side: Option<Side>) -> Result<Expr> {
        let key = (Rc::as_ptr(e), side);
        if let Some(r) = self.memo.get(&key) {
            return Ok(r.clone());
        }
        let r = match &e.kind {
            Kind::Restricted(s, a) => {
                if self.ty != IntegralType::InteriorFacet {
                    return Err(Error::Restriction(format!("restriction in a {} integral", self.ty.name())));
                }
                if side.is_some() {
                    return Err(Error::Restriction("expression restricted twice".into()));
                }
                self.restrict(a, Some(*s))?
            }
            Kind::Terminal(t) => {
                let r = match (self.ty, side) {
                    (IntegralType::InteriorFacet, None) => match t {
                        Terminal::SpatialCoordinate | Terminal::FacetTangent => Some(Side::Plus),
                        _ => {
                            return Err(Error::Restriction(format!(
                                "`{}` must be restricted in an interior-facet integral",
                                t.label()
                            )))
                        }
                    },
                    (_, s) => s,
                };
                ast::modified(t.clone(), r, 0, e.shape.clone())
            }
            Kind::ReferenceGrad(a) => {
                let a = self.restrict(a, side)?;
                self.rgrad(&a)?
            }
            _ => {
                let mut ch = Vec::new();
                for c in e.children() {
                    ch.push(self.restrict(&c, side)?);
                }
                ast::rebuild(e, &ch)?
            }
        };
        self.memo.insert(key, r.clone());
        Ok(r)
    }

    fn grad_shape(&self, e: &Expr) -> Vec<usize> {
        let mut s = e.shape.clone();
        s.push(self.tdim);
        s
    }

    /// Reference gradient of an expression whose terminals are already
    /// modified.
    fn rgrad(&mut self, e: &Expr) -> Result<Expr> {
        if let Some(r) = self.grad_memo.get(&Rc::as_ptr(e)) {
            return Ok(r.clone());
        }
        let ig = self.ig.clone();
        let tdim = self.tdim;
        let i = || ig.fresh(tdim);
        let at = |g: &Expr, mut items: Vec<FIndex>, i: Index| {
            items.push(FIndex::Free(i));
            ast::index_into(&ig, g, items)
        };
        let r = match &e.kind {
            Kind::Modified { terminal, restriction, grad } => match terminal {
                Terminal::FacetNormal if !self.affine => {
                    return Err(Error::Unsupported("gradient of the facet normal on a non-affine cell".into()))
                }
                Terminal::FacetNormal | Terminal::FacetTangent => ast::zero(self.grad_shape(e), vec![]),
                t => ast::modified(t.clone(), *restriction, grad + 1, self.grad_shape(e)),
            },
            Kind::Constant(_) | Kind::Zero => ast::zero(self.grad_shape(e), e.free.clone()),
            Kind::Sum(a, b) => {
                let (ga, gb) = (self.rgrad(a)?, self.rgrad(b)?);
                ast::sum(&ga, &gb)?
            }
            Kind::Product(a, b) => {
                let (ga, gb) = (self.rgrad(a)?, self.rgrad(b)?);
                let k = i();
                let t1 = ast::product(&at(&ga, vec![], k)?, b)?;
                let t2 = ast::product(a, &at(&gb, vec![], k)?)?;
                ast::component_tensor(&ast::sum(&t1, &t2)?, vec![k])?
            }
            Kind::Division(a, b) => {
                let (ga, gb) = (self.rgrad(a)?, self.rgrad(b)?);
                let k = i();
                let num = ast::sub(&ig, &at(&ga, vec![], k)?, &ast::product(e, &at(&gb, vec![], k)?)?)?;
                ast::component_tensor(&ast::division(&num, b)?, vec![k])?
            }
            Kind::Power(a, p) => {
                let ga = self.rgrad(a)?;
                let k = i();
                let outer = ast::product(&ast::constant(*p), &ast::power(a, p - 1.0)?)?;
                ast::component_tensor(&ast::product(&outer, &at(&ga, vec![], k)?)?, vec![k])?
            }
            Kind::MathFunction(f, a) => {
                let ga = self.rgrad(a)?;
                let k = i();
                let fp = match f {
                    MathFn::Abs => ast::division(a, e)?,
                    MathFn::Sqrt => ast::division(&ast::constant(0.5), e)?,
                    MathFn::Exp => e.clone(),
                    MathFn::Ln => ast::division(&ast::constant(1.0), a)?,
                    MathFn::Sin => ast::math(MathFn::Cos, a)?,
                    MathFn::Cos => ast::neg(&ig, &ast::math(MathFn::Sin, a)?)?,
                    MathFn::Tan => ast::sum(&ast::constant(1.0), &ast::power(e, 2.0)?)?,
                };
                ast::component_tensor(&ast::product(&fp, &at(&ga, vec![], k)?)?, vec![k])?
            }
            Kind::Indexed(a, items) => {
                let ga = self.rgrad(a)?;
                let k = i();
                ast::component_tensor(&at(&ga, items.clone(), k)?, vec![k])?
            }
            Kind::IndexSum(a, j) => {
                let ga = self.rgrad(a)?;
                let k = i();
                ast::component_tensor(&ast::index_sum(&at(&ga, vec![], k)?, *j)?, vec![k])?
            }
            Kind::ComponentTensor(a, alpha) => {
                let ga = self.rgrad(a)?;
                let k = i();
                let mut out = alpha.clone();
                out.push(k);
                ast::component_tensor(&at(&ga, vec![], k)?, out)?
            }
            Kind::ListTensor(cs) => {
                let gs = cs.iter().map(|c| self.rgrad(c)).collect::<Result<Vec<_>>>()?;
                ast::list_tensor(gs)?
            }
            _ => return Err(Error::Unsupported(format!("reference gradient of {}", e.kind_name()))),
        };
        self.grad_memo.insert(Rc::as_ptr(e), r.clone());
        Ok(r)
    }
}

/// Moves restrictions and reference gradients onto the terminals, which
/// become `Modified` nodes.
pub fn propagate_modifiers(spec: &IntegralSpec) -> Result<IntegralSpec> {
    let mut p = Propagator {
        ig: spec.indices.clone(),
        ty: spec.integral_type,
        tdim: spec.tdim(),
        affine: spec.is_affine(),
        memo: HashMap::new(),
        grad_memo: HashMap::new(),
    };
    let integrand = p.restrict(&spec.integrand, None)?;
    let scale = spec.scale.as_ref().map(|s| p.restrict(s, None)).transpose()?;
    Ok(IntegralSpec { integrand, scale, ..spec.clone() })
}

/// The full preprocessing pipeline.
pub fn preprocess(spec: &IntegralSpec) -> Result<IntegralSpec> {
    propagate_modifiers(&lower_compounds(&pull_back(spec)?)?)
}

/// Polynomial degree estimate of a preprocessed expression.
pub fn estimate_degree(spec: &IntegralSpec, e: &Expr) -> usize {
    let mut memo: HashMap<*const Node, usize> = HashMap::new();
    degree_rec(spec, e, &mut memo)
}

fn degree_rec(spec: &IntegralSpec, e: &Expr, memo: &mut HashMap<*const Node, usize>) -> usize {
    if let Some(d) = memo.get(&Rc::as_ptr(e)) {
        return *d;
    }
    let ch: Vec<usize> = e.children().iter().map(|c| degree_rec(spec, c, memo)).collect();
    let d = match &e.kind {
        Kind::Modified { terminal, grad, .. } => match terminal {
            Terminal::Argument { degree, .. } | Terminal::Coefficient { degree, .. } => degree.saturating_sub(*grad),
            Terminal::SpatialCoordinate => spec.coord_degree.saturating_sub(*grad),
            Terminal::FacetNormal if !spec.is_affine() => spec.coord_degree,
            Terminal::FacetNormal | Terminal::FacetTangent => 0,
        },
        Kind::Terminal(Terminal::SpatialCoordinate) => spec.coord_degree,
        Kind::Terminal(Terminal::Argument { degree, .. } | Terminal::Coefficient { degree, .. }) => *degree,
        Kind::Terminal(_) | Kind::Constant(_) | Kind::Zero => 0,
        Kind::Product(..) | Kind::Division(..) | Kind::Dot(..) | Kind::Inner(..) | Kind::Outer(..) => ch.iter().sum(),
        Kind::Power(_, p) if *p >= 0.0 && p.fract() == 0.0 => ch[0] * (*p as usize),
        Kind::Power(..) => ch[0] + 2,
        Kind::MathFunction(MathFn::Abs, _) => ch[0],
        Kind::MathFunction(..) if ch[0] == 0 => 0,
        Kind::MathFunction(..) => ch[0] + 2,
        Kind::ReferenceGrad(_) | Kind::Grad(_) => ch[0].saturating_sub(1),
        _ => ch.iter().copied().max().unwrap_or(0),
    };
    memo.insert(Rc::as_ptr(e), d);
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::form::parse;

    fn spec(body: &str, ty: &str) -> IntegralSpec {
        let src = format!(
            "cell triangle coord_degree 1\nspace V lagrange 1\nargument v test V\nargument u trial V\n\
             coefficient f V\nform a = {ty} integral {body}\n"
        );
        parse(&src).unwrap().remove(0).1
    }

    fn assert_preprocessed(e: &Expr) {
        for n in ast::unique_nodes(e) {
            match &n.kind {
                Kind::Grad(_)
                | Kind::ReferenceGrad(_)
                | Kind::Restricted(..)
                | Kind::Dot(..)
                | Kind::Inner(..)
                | Kind::Outer(..)
                | Kind::Jump(..)
                | Kind::Avg(_)
                | Kind::Determinant(_)
                | Kind::Inverse(_)
                | Kind::Terminal(_) => panic!("{} survived preprocessing", n.kind_name()),
                _ => {}
            }
        }
    }

    #[test]
    fn laplace_pullback_structure() {
        let s = pull_back(&spec("dot(grad(u), grad(v))", "cell")).unwrap();
        let c = ast::census(&s.integrand);
        assert_eq!(c.get("Grad"), None);
        // Two argument gradients plus the Jacobian.
        assert_eq!(c.get("ReferenceGrad"), Some(&3));
        let scale = s.scale.unwrap();
        assert!(matches!(scale.kind, Kind::MathFunction(MathFn::Abs, _)));
    }

    #[test]
    fn mass_has_no_gradients() {
        let s = pull_back(&spec("f * u * v", "cell")).unwrap();
        assert!(!ast::census(&s.integrand).contains_key("ReferenceGrad"));
    }

    #[test]
    fn compounds_lowered() {
        let s = lower_compounds(&spec("dot(grad(u), grad(v))", "cell")).unwrap();
        assert!(matches!(s.integrand.kind, Kind::IndexSum(..)));
        let s = lower_compounds(&spec("outer(grad(u), grad(v))[0, 1]", "cell")).unwrap();
        assert!(!ast::census(&s.integrand).contains_key("Outer"));
    }

    #[test]
    fn jump_and_avg_become_restrictions() {
        let s = lower_compounds(&spec("jump(u) * avg(v)", "interior_facet")).unwrap();
        let c = ast::census(&s.integrand);
        assert_eq!(c.get("PositiveRestricted"), Some(&2));
        assert_eq!(c.get("NegativeRestricted"), Some(&2));
    }

    #[test]
    fn full_pipeline_leaves_modified_terminals() {
        for (body, ty) in [
            ("f * dot(grad(u), grad(v))", "cell"),
            ("(1 + f * f) ^ 2 * dot(grad(u), grad(v)) + sin(f) * u * v", "cell"),
            ("jump(u, n)[0] * avg(grad(v))[0] + jump(u) * jump(v)", "interior_facet"),
            ("u * v * n[1]", "exterior_facet"),
        ] {
            let s = preprocess(&spec(body, ty)).unwrap();
            assert_preprocessed(&s.integrand);
            assert_preprocessed(s.scale.as_ref().unwrap());
        }
    }

    #[test]
    fn restriction_distributes_to_terminals() {
        let s = preprocess(&spec("pos(u * n[0]) * pos(v)", "interior_facet")).unwrap();
        for n in ast::unique_nodes(&s.integrand) {
            if let Kind::Modified { restriction, .. } = &n.kind {
                assert_eq!(*restriction, Some(Side::Plus));
            }
        }
    }

    #[test]
    fn unrestricted_argument_in_interior_facet() {
        let r = preprocess(&spec("u * pos(v)", "interior_facet"));
        assert!(matches!(r, Err(Error::Restriction(_))));
    }

    #[test]
    fn product_rule() {
        let s = spec("f * v", "cell");
        let mut p = Propagator {
            ig: s.indices.clone(),
            ty: IntegralType::Cell,
            tdim: 2,
            affine: true,
            memo: HashMap::new(),
            grad_memo: HashMap::new(),
        };
        let e = p.restrict(&s.integrand, None).unwrap();
        let g = p.rgrad(&e).unwrap();
        let Kind::ComponentTensor(body, _) = &g.kind else { panic!() };
        let Kind::Sum(t1, t2) = &body.kind else { panic!() };
        assert!(ast::to_text(t1).starts_with("rgrad(f)"));
        assert!(ast::to_text(t2).starts_with("f * rgrad(v)"));
    }

    #[test]
    fn degree_estimates() {
        let s = preprocess(&spec("f * u * v", "cell")).unwrap();
        assert_eq!(estimate_degree(&s, &s.integrand), 3);
        let s = preprocess(&spec("dot(grad(u), grad(v))", "cell")).unwrap();
        assert_eq!(estimate_degree(&s, &s.integrand), 0);
    }
}
