//! Compile-time scaling families.
//!
//! The diamond chain shares every intermediate result between two parents,
//! so its tree expansion doubles with each level while the DAG grows by a
//! constant. The composition ladder nests a coefficient nonlinearity ever
//! deeper inside a Laplace-type form.

use std::time::{Duration, Instant};

use crate::gem::{traverse_unique, tree_size, Gem, IndexGen, MathFn, NodeId};
use crate::pipeline::{compile_source, CompileOptions};
use crate::scheduler::{Schedule, ScheduleOptions};
use crate::Result;

/// `x_{k+1} = sin(x_k) + x_k`, starting from a scalar variable.
pub fn diamond_chain(depth: usize) -> Result<(Gem, NodeId)> {
    let mut g = Gem::new(IndexGen::new());
    let mut x = g.variable("x", vec![]);
    for _ in 0..depth {
        let s = g.math(MathFn::Sin, x)?;
        x = g.sum(s, x)?;
    }
    Ok((g, x))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiamondReport {
    pub depth: usize,
    /// Nodes visited by a memoized traversal.
    pub visits: usize,
    /// Nodes in the equivalent expression tree.
    pub tree_size: u128,
    /// Temporaries in the resulting schedule.
    pub temporaries: usize,
    pub compile_time: Duration,
}

/// Builds and schedules one member of the diamond family.
pub fn run_diamond(depth: usize) -> Result<DiamondReport> {
    let start = Instant::now();
    let (g, root) = diamond_chain(depth)?;
    let visits = traverse_unique(&g, root).len();
    let tree = tree_size(&g, root);
    let s = Schedule::build(g, root, None, &[], &ScheduleOptions::default())?;
    Ok(DiamondReport { depth, visits, tree_size: tree, temporaries: s.temporaries.len(), compile_time: start.elapsed() })
}

/// Checks the scaling claim on a range of reports: visits grow by a
/// constant per level while the tree at least doubles.
pub fn linear_visits(reports: &[DiamondReport]) -> bool {
    reports.windows(2).all(|w| {
        let dv = w[1].visits as i64 - w[0].visits as i64;
        let dd = (w[1].depth - w[0].depth) as i64;
        dv == 2 * dd && w[1].tree_size >= w[0].tree_size << (w[1].depth - w[0].depth)
    })
}

/// Form source for rung `k` of the composition ladder: rung 0 is a
/// Helmholtz operator and each further rung wraps the coefficient term in
/// another `1 + f^2`.
pub fn ladder_source(k: usize) -> String {
    let mut f = "w".to_string();
    for _ in 0..k {
        f = format!("(1.0 + ({f}) ^ 2)");
    }
    format!(
        "cell triangle coord_degree 1\nspace V lagrange 2\nspace W lagrange 1\nargument v test V\nargument u trial V\n\
         coefficient w W\nform rung{k} = cell integral {f} * dot(grad(u), grad(v)) - 4.0 * u * v\n"
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct LadderReport {
    pub rung: usize,
    pub quadrature_points: usize,
    pub nests: usize,
    pub compile_time: Duration,
}

/// Compiles one rung of the ladder through both stages.
pub fn run_ladder(k: usize) -> Result<LadderReport> {
    let start = Instant::now();
    let forms = compile_source(&ladder_source(k), &CompileOptions::default())?;
    let s = &forms[0].schedules[0];
    crate::emitter::emit(s)?;
    Ok(LadderReport {
        rung: k,
        quadrature_points: s.quadrature.map_or(0, |q| q.extent),
        nests: s.nests.len(),
        compile_time: start.elapsed(),
    })
}
