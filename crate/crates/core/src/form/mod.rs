//! Form language: AST, parser and preprocessing passes.

pub mod ast;
pub mod parser;
pub mod preprocess;

pub use ast::{Expr, FIndex, Kind, Node, Side, Terminal};
pub use parser::{parse, parse_with};
pub use preprocess::{estimate_degree, lower_compounds, preprocess, propagate_modifiers, pull_back};

use crate::element::Cell;
use crate::gem::IndexGen;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum IntegralType {
    Cell,
    ExteriorFacet,
    InteriorFacet,
}

impl IntegralType {
    pub fn name(self) -> &'static str {
        match self {
            IntegralType::Cell => "cell",
            IntegralType::ExteriorFacet => "exterior_facet",
            IntegralType::InteriorFacet => "interior_facet",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArgumentInfo {
    /// 0 for the test function, 1 for the trial function.
    pub number: usize,
    pub name: String,
    pub degree: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoefficientInfo {
    /// Position in the file's coefficient declarations.
    pub number: usize,
    pub name: String,
    pub degree: usize,
}

#[derive(Clone, Debug)]
pub struct IntegralSpec {
    pub name: String,
    pub integral_type: IntegralType,
    pub integrand: Expr,
    /// The integrand as parsed, in physical space.
    pub physical: Expr,
    /// Measure scaling set by the pullback: |det J| or the facet factor.
    pub scale: Option<Expr>,
    pub cell: Cell,
    pub coord_degree: usize,
    /// Arguments the form is linear in, by number.
    pub arguments: Vec<ArgumentInfo>,
    /// Coefficients referenced by the integrand, in declaration order.
    pub coefficients: Vec<CoefficientInfo>,
    pub indices: IndexGen,
}

impl IntegralSpec {
    pub fn gdim(&self) -> usize {
        self.cell.dim()
    }

    pub fn tdim(&self) -> usize {
        self.cell.dim()
    }

    /// Lagrange degree, cell and value dimension of the coordinate field.
    pub fn coordinate_element(&self) -> (usize, Cell, usize) {
        (self.coord_degree, self.cell, self.gdim())
    }

    pub fn is_affine(&self) -> bool {
        self.coord_degree == 1
    }
}
