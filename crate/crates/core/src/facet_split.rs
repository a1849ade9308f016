//! Splitting interior-facet integrands into restriction blocks.
//!
//! Each block fixes a side for every argument. Occurrences of an argument
//! restricted to the other side are replaced by a zero of the argument's
//! shape and the zero is folded away by the AST constructors. No product
//! expansion happens, so the tensor structure of the integrand survives.

use crate::error::{Error, Result};
use crate::form::ast::{self, Expr, Kind, Side, Terminal};
use crate::form::{IntegralSpec, IntegralType};

#[derive(Clone, Debug)]
pub struct RestrictionBlock {
    /// Side per argument, in argument-number order.
    pub restrictions: Vec<Side>,
    pub integrand: Expr,
}

impl RestrictionBlock {
    /// Kernel-name suffix such as `_pm`.
    pub fn suffix(&self) -> String {
        if self.restrictions.is_empty() {
            return String::new();
        }
        let s: String = self.restrictions.iter().map(|r| if *r == Side::Plus { 'p' } else { 'm' }).collect();
        format!("_{s}")
    }

    /// Tuple label such as `(+,-)`.
    pub fn label(&self) -> String {
        let s: Vec<String> = self.restrictions.iter().map(|r| r.sign().to_string()).collect();
        format!("({})", s.join(","))
    }

    pub fn is_zero(&self) -> bool {
        self.integrand.is_zero()
    }
}

/// All `2^n` restriction tuples in lexicographic order with `+` first.
pub fn restriction_tuples(n: usize) -> Vec<Vec<Side>> {
    (0..1usize << n)
        .map(|bits| (0..n).map(|a| if bits >> (n - 1 - a) & 1 == 0 { Side::Plus } else { Side::Minus }).collect())
        .collect()
}

/// Splits a preprocessed interior-facet integrand. Other integral types
/// yield a single block with no restrictions.
pub fn split(spec: &IntegralSpec) -> Result<Vec<RestrictionBlock>> {
    if spec.integral_type != IntegralType::InteriorFacet {
        return Ok(vec![RestrictionBlock { restrictions: vec![], integrand: spec.integrand.clone() }]);
    }
    let n = spec.arguments.len();
    let mut blocks = Vec::new();
    for tuple in restriction_tuples(n) {
        let integrand = ast::transform(&spec.integrand, &mut |e, _| match &e.kind {
            Kind::Modified { terminal: Terminal::Argument { number, name, .. }, restriction, .. } => match restriction {
                None => Err(Error::Restriction(format!("unrestricted argument `{name}` in an interior-facet integral"))),
                Some(r) if *r != tuple[*number] => Ok(Some(ast::zero(e.shape.clone(), vec![]))),
                Some(_) => Ok(None),
            },
            _ => Ok(None),
        })?;
        blocks.push(RestrictionBlock { restrictions: tuple, integrand });
    }
    Ok(blocks)
}
