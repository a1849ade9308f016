//! Reference cells, quadrature rules and Lagrange basis tabulation.
//!
//! Basis functions are kept as exact polynomials so that derivatives beyond
//! the degree come out as exact zeros.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Cell {
    Interval,
    Triangle,
}

impl Cell {
    pub fn from_name(name: &str) -> Option<Cell> {
        match name {
            "interval" => Some(Cell::Interval),
            "triangle" => Some(Cell::Triangle),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Cell::Interval => "interval",
            Cell::Triangle => "triangle",
        }
    }

    pub fn dim(self) -> usize {
        match self {
            Cell::Interval => 1,
            Cell::Triangle => 2,
        }
    }

    pub fn facet_count(self) -> usize {
        self.dim() + 1
    }

    pub fn measure(self) -> f64 {
        match self {
            Cell::Interval => 1.0,
            Cell::Triangle => 0.5,
        }
    }

    pub fn vertices(self) -> Vec<Vec<f64>> {
        match self {
            Cell::Interval => vec![vec![0.0], vec![1.0]],
            Cell::Triangle => vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]],
        }
    }

    /// Vertices of facet `f` in increasing order. On the triangle facet `f`
    /// is the edge opposite vertex `f`; on the interval facet `f` is vertex `f`.
    pub fn facet_vertices(self, f: usize) -> Vec<usize> {
        match self {
            Cell::Interval => vec![f],
            Cell::Triangle => (0..3).filter(|v| *v != f).collect(),
        }
    }

    /// Embeds a point of the reference facet (dimension `dim - 1`) into the cell.
    pub fn facet_point(self, f: usize, t: &[f64]) -> Vec<f64> {
        let verts = self.vertices();
        let fv = self.facet_vertices(f);
        match self {
            Cell::Interval => verts[fv[0]].clone(),
            Cell::Triangle => {
                let (a, b) = (&verts[fv[0]], &verts[fv[1]]);
                (0..2).map(|d| a[d] + t[0] * (b[d] - a[d])).collect()
            }
        }
    }

    /// Tangent of the facet parametrization (triangle only).
    pub fn facet_tangents(self) -> Vec<Vec<f64>> {
        match self {
            Cell::Interval => vec![vec![], vec![]],
            Cell::Triangle => (0..3)
                .map(|f| {
                    let verts = self.vertices();
                    let fv = self.facet_vertices(f);
                    (0..2).map(|d| verts[fv[1]][d] - verts[fv[0]][d]).collect()
                })
                .collect(),
        }
    }

    /// Unit outward normals of the reference cell, one per facet.
    pub fn reference_normals(self) -> Vec<Vec<f64>> {
        match self {
            Cell::Interval => vec![vec![-1.0], vec![1.0]],
            Cell::Triangle => {
                let s = std::f64::consts::FRAC_1_SQRT_2;
                vec![vec![s, s], vec![-1.0, 0.0], vec![0.0, -1.0]]
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuadratureRule {
    /// Dimension of the integration domain (0 for a facet of an interval).
    pub dim: usize,
    pub degree: usize,
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// `n`-point Gauss-Legendre rule on [0, 1], points ascending.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut pts = Vec::with_capacity(n);
    let mut wts = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = -(std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 0 { 1.0 } else { p1 };
            let pm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * p - pm1) / (x * x - 1.0);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        pts.push(0.5 * (x + 1.0));
        wts.push(1.0 / ((1.0 - x * x) * dp * dp));
    }
    (pts, wts)
}

/// A rule on the reference cell exact for polynomials up to `degree`.
pub fn quadrature(cell: Cell, degree: usize) -> QuadratureRule {
    match cell {
        Cell::Interval => {
            let (pts, wts) = gauss_legendre(degree / 2 + 1);
            QuadratureRule { dim: 1, degree, points: pts.into_iter().map(|p| vec![p]).collect(), weights: wts }
        }
        Cell::Triangle if degree <= 1 => QuadratureRule {
            dim: 2,
            degree,
            points: vec![vec![1.0 / 3.0, 1.0 / 3.0]],
            weights: vec![0.5],
        },
        Cell::Triangle if degree == 2 => QuadratureRule {
            dim: 2,
            degree,
            points: vec![vec![1.0 / 6.0, 1.0 / 6.0], vec![2.0 / 3.0, 1.0 / 6.0], vec![1.0 / 6.0, 2.0 / 3.0]],
            weights: vec![1.0 / 6.0; 3],
        },
        Cell::Triangle => {
            let (gp, gw) = gauss_legendre((degree + 3) / 2);
            let mut points = Vec::new();
            let mut weights = Vec::new();
            for (u, wu) in gp.iter().zip(&gw) {
                for (v, wv) in gp.iter().zip(&gw) {
                    points.push(vec![*u, v * (1.0 - u)]);
                    weights.push(wu * wv * (1.0 - u));
                }
            }
            QuadratureRule { dim: 2, degree, points, weights }
        }
    }
}

/// A rule on the reference facet of `cell`.
pub fn facet_quadrature(cell: Cell, degree: usize) -> QuadratureRule {
    match cell {
        Cell::Interval => QuadratureRule { dim: 0, degree, points: vec![vec![]], weights: vec![1.0] },
        Cell::Triangle => quadrature(Cell::Interval, degree),
    }
}

/// Polynomial in up to two variables with exact coefficients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Poly(BTreeMap<[u32; 2], f64>);

impl Poly {
    pub fn constant(c: f64) -> Poly {
        let mut m = BTreeMap::new();
        if c != 0.0 {
            m.insert([0, 0], c);
        }
        Poly(m)
    }

    pub fn var(d: usize) -> Poly {
        let mut e = [0, 0];
        e[d] = 1;
        Poly(BTreeMap::from([(e, 1.0)]))
    }

    pub fn add(&self, other: &Poly) -> Poly {
        let mut m = self.0.clone();
        for (e, c) in &other.0 {
            *m.entry(*e).or_insert(0.0) += c;
        }
        m.retain(|_, c| *c != 0.0);
        Poly(m)
    }

    pub fn scale(&self, s: f64) -> Poly {
        let mut m: BTreeMap<[u32; 2], f64> = self.0.iter().map(|(e, c)| (*e, c * s)).collect();
        m.retain(|_, c| *c != 0.0);
        Poly(m)
    }

    pub fn mul(&self, other: &Poly) -> Poly {
        let mut m = BTreeMap::new();
        for (ea, ca) in &self.0 {
            for (eb, cb) in &other.0 {
                *m.entry([ea[0] + eb[0], ea[1] + eb[1]]).or_insert(0.0) += ca * cb;
            }
        }
        m.retain(|_, c: &mut f64| *c != 0.0);
        Poly(m)
    }

    pub fn deriv(&self, d: usize) -> Poly {
        let mut m = BTreeMap::new();
        for (e, c) in &self.0 {
            if e[d] > 0 {
                let mut e2 = *e;
                e2[d] -= 1;
                *m.entry(e2).or_insert(0.0) += c * e[d] as f64;
            }
        }
        Poly(m)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.0
            .iter()
            .map(|(e, c)| {
                let mut v = *c;
                for (d, p) in e.iter().enumerate() {
                    if *p > 0 {
                        v *= x[d].powi(*p as i32);
                    }
                }
                v
            })
            .sum()
    }
}

/// Scalar Lagrange element of degree 1 or 2. Basis order: vertices, then
/// edges (edge `e` of the triangle is opposite vertex `e`).
#[derive(Clone, Debug, PartialEq)]
pub struct LagrangeElement {
    pub cell: Cell,
    pub degree: usize,
    pub basis: Vec<Poly>,
    pub nodes: Vec<Vec<f64>>,
}

impl LagrangeElement {
    pub fn new(cell: Cell, degree: usize) -> Result<Self> {
        if !(1..=2).contains(&degree) {
            return Err(Error::Unsupported(format!("Lagrange degree {degree} (only 1 and 2)")));
        }
        let one = Poly::constant(1.0);
        let lambda: Vec<Poly> = match cell {
            Cell::Interval => vec![one.add(&Poly::var(0).scale(-1.0)), Poly::var(0)],
            Cell::Triangle => vec![
                one.add(&Poly::var(0).scale(-1.0)).add(&Poly::var(1).scale(-1.0)),
                Poly::var(0),
                Poly::var(1),
            ],
        };
        let verts = cell.vertices();
        let (basis, nodes) = if degree == 1 {
            (lambda, verts)
        } else {
            let mut basis: Vec<Poly> =
                lambda.iter().map(|l| l.mul(&l.scale(2.0).add(&Poly::constant(-1.0)))).collect();
            let mut nodes = verts.clone();
            let edges: Vec<(usize, usize)> = match cell {
                Cell::Interval => vec![(0, 1)],
                Cell::Triangle => vec![(1, 2), (0, 2), (0, 1)],
            };
            for (a, b) in edges {
                basis.push(lambda[a].mul(&lambda[b]).scale(4.0));
                nodes.push(verts[a].iter().zip(&verts[b]).map(|(x, y)| 0.5 * (x + y)).collect());
            }
            (basis, nodes)
        };
        Ok(LagrangeElement { cell, degree, basis, nodes })
    }

    pub fn space_dim(&self) -> usize {
        self.basis.len()
    }

    fn derivative_basis(&self, derivative: &[usize]) -> Vec<Poly> {
        self.basis
            .iter()
            .map(|p| {
                let mut p = p.clone();
                for (d, n) in derivative.iter().enumerate() {
                    for _ in 0..*n {
                        p = p.deriv(d);
                    }
                }
                p
            })
            .collect()
    }

    /// Values of the (derivative of the) basis at `points`, row per point.
    pub fn evaluate(&self, derivative: &[usize], points: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let polys = self.derivative_basis(derivative);
        points.iter().map(|x| polys.iter().map(|p| p.eval(x)).collect()).collect()
    }
}

/// Constant tensor of basis values, shape `[facet?, q, basis]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabulationTable {
    pub derivative: Vec<usize>,
    pub facet_indexed: bool,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl TabulationTable {
    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    pub fn get(&self, facet: usize, q: usize, r: usize) -> f64 {
        let (nq, nb) = (self.shape[self.shape.len() - 2], self.shape[self.shape.len() - 1]);
        let f = if self.facet_indexed { facet } else { 0 };
        self.values[(f * nq + q) * nb + r]
    }
}

fn check_derivative(element: &LagrangeElement, derivative: &[usize]) -> Result<()> {
    if derivative.len() != element.cell.dim() || derivative.iter().sum::<usize>() > 2 {
        return Err(Error::Unsupported(format!("derivative {derivative:?} on {}", element.cell.name())));
    }
    Ok(())
}

pub fn tabulate(element: &LagrangeElement, derivative: &[usize], rule: &QuadratureRule) -> Result<TabulationTable> {
    check_derivative(element, derivative)?;
    let rows = element.evaluate(derivative, &rule.points);
    Ok(TabulationTable {
        derivative: derivative.to_vec(),
        facet_indexed: false,
        shape: vec![rule.len(), element.space_dim()],
        values: rows.concat(),
    })
}

/// Tabulates on every facet: block `f` uses facet `f`'s embedding of the
/// facet rule's points.
pub fn tabulate_facet(
    element: &LagrangeElement,
    derivative: &[usize],
    facet_rule: &QuadratureRule,
) -> Result<TabulationTable> {
    check_derivative(element, derivative)?;
    let cell = element.cell;
    let mut values = Vec::new();
    for f in 0..cell.facet_count() {
        let pts: Vec<Vec<f64>> = facet_rule.points.iter().map(|t| cell.facet_point(f, t)).collect();
        values.extend(element.evaluate(derivative, &pts).concat());
    }
    Ok(TabulationTable {
        derivative: derivative.to_vec(),
        facet_indexed: true,
        shape: vec![cell.facet_count(), facet_rule.len(), element.space_dim()],
        values,
    })
}
