//! Shared fixtures: golden files, the corpus, and a generator of random
//! well-formed GEM expressions.
#![allow(dead_code)]

use std::collections::HashSet;
use std::path::PathBuf;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsfc_mini_core::gem::{census, CmpOp, Gem, Index, IndexGen, IndexItem, MathFn, NodeId};
use tsfc_mini_core::lowering::LoweringOptions;
use tsfc_mini_core::oracle::{eval_gem, eval_schedule, relative_error, Environment};
use tsfc_mini_core::pipeline::CompileOptions;
use tsfc_mini_core::scheduler::{Schedule, ScheduleOptions};

/// Compares `actual` with `tests/golden/<name>`. With `TSFC_MINI_BLESS` set
/// the file is rewritten instead.
pub fn golden(name: &str, actual: &str) -> Result<(), String> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("TSFC_MINI_BLESS").is_some() {
        std::fs::write(&path, actual).map_err(|e| format!("{}: {e}", path.display()))?;
        return Ok(());
    }
    let expected = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if expected == actual {
        return Ok(());
    }
    let line = expected.lines().zip(actual.lines()).position(|(a, b)| a != b).unwrap_or(expected.lines().count().min(actual.lines().count()));
    Err(format!("{name} differs from golden file at line {}", line + 1))
}

pub fn data(name: &str) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Every corpus file, sorted by name.
pub fn corpus() -> Vec<(String, String)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data");
    let mut names: Vec<String> =
        std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    names.sort();
    names.into_iter().map(|n| (n.clone(), data(&n))).collect()
}

/// The worked example is compared with optional optimizations disabled.
pub fn worked_example_options(unroll: Option<usize>) -> CompileOptions {
    CompileOptions { lowering: LoweringOptions::plain(), schedule: ScheduleOptions { unroll_threshold: unroll, fifo: false } }
}

/// One step of a random expression recipe: an operation code, two operand
/// selectors and a free parameter.
pub type Step = (u8, usize, usize, usize);

/// A recipe plus the parameters of its root and inputs.
#[derive(Clone, Debug)]
pub struct Recipe {
    pub steps: Vec<Step>,
    /// Keep up to this many free indices of the root as outputs.
    pub outputs: usize,
    pub seed: u64,
}

pub fn recipe() -> impl Strategy<Value = Recipe> {
    (prop::collection::vec((0u8..14, 0usize..64, 0usize..64, 0usize..8), 4..32), 0usize..3, any::<u64>())
        .prop_map(|(steps, outputs, seed)| Recipe { steps, outputs, seed })
}

/// Indices and inputs shared by all recipes.
pub struct Fixture {
    pub gem: Gem,
    pub indices: [Index; 3],
}

pub fn fixture() -> Fixture {
    let ig = IndexGen::new();
    let indices = [ig.fresh(2), ig.fresh(3), ig.fresh(2)];
    Fixture { gem: Gem::new(ig), indices }
}

/// Builds the recipe in `fx.gem` and returns the root together with its
/// output indices. Every construction goes through the checked builders, so
/// the result is well formed; steps the builders reject are skipped.
pub fn build(fx: &mut Fixture, r: &Recipe) -> (NodeId, Vec<Index>) {
    let g = &mut fx.gem;
    let [a, b, c] = fx.indices;
    let x = g.variable("x", vec![2]);
    let y = g.variable("y", vec![3, 2]);
    let m = g.variable("m", vec![2, 2]);
    let s = g.variable("s", vec![]);
    let table = g.literal(vec![3], vec![0.2, -0.7, 1.3]).unwrap();
    let z = g.zero(vec![2]);
    let mut pool = vec![
        g.indexed(x, vec![IndexItem::Free(a)]).unwrap(),
        g.indexed(y, vec![IndexItem::Free(b), IndexItem::Free(a)]).unwrap(),
        g.indexed(m, vec![IndexItem::Free(a), IndexItem::Free(c)]).unwrap(),
        s,
        g.scalar(0.5),
        g.indexed(table, vec![IndexItem::Free(b)]).unwrap(),
        g.indexed(z, vec![IndexItem::Free(c)]).unwrap(),
        g.indexed(x, vec![IndexItem::Fixed(1)]).unwrap(),
    ];
    for &(op, i, j, p) in &r.steps {
        // The first operand comes from the most recent nodes to grow depth.
        let (u, v) = (pool[pool.len() - 1 - i % pool.len().min(4)], pool[j % pool.len()]);
        let free_u = g.free(u).to_vec();
        let node = match op {
            0 => g.sum(u, v),
            1 => g.product(u, v),
            2 => {
                let two = g.scalar(2.0);
                g.product(v, v).and_then(|vv| g.sum(two, vv)).and_then(|d| g.division(u, d))
            }
            3 => g.math(MathFn::Sin, u),
            4 => g.math(MathFn::Cos, u),
            5 if !free_u.is_empty() => g.index_sum(u, free_u[p % free_u.len()]),
            6 if !free_u.is_empty() => {
                let i = free_u[p % free_u.len()];
                let to = [a, b, c].into_iter().filter(|k| k.extent == i.extent).nth(p % 2).unwrap_or(i);
                g.component_tensor(u, vec![i]).and_then(|ct| g.indexed(ct, vec![IndexItem::Free(to)]))
            }
            7 => {
                let item = if p % 3 == 0 { IndexItem::Fixed(p % 2) } else { IndexItem::Free(if p % 2 == 0 { a } else { c }) };
                g.list_tensor(vec![u, v]).and_then(|lt| g.indexed(lt, vec![item]))
            }
            8 => g.comparison(CmpOp::Lt, u, v).and_then(|cmp| g.conditional(cmp, u, v)),
            9 => {
                let two = g.scalar(2.0);
                g.power(u, two)
            }
            10 => g.max_value(u, v),
            11 => g.sub(u, v),
            12 => g.neg(u),
            _ => g.min_value(u, v),
        };
        if let Ok(n) = node {
            pool.push(n);
        }
    }
    let mut root = pool[pool.len() - 1];
    for n in pool.iter().rev().skip(1).take(2) {
        root = g.sum(root, *n).unwrap();
    }
    let free = g.free(root).to_vec();
    let keep = r.outputs.min(free.len());
    for i in &free[keep..] {
        root = g.index_sum(root, *i).unwrap();
    }
    (root, free[..keep].to_vec())
}

/// Seeded inputs for a recipe's variables.
pub fn environment(seed: u64) -> Environment {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = Environment::default();
    for (name, shape) in [("x", vec![2]), ("y", vec![3, 2]), ("m", vec![2, 2]), ("s", vec![])] {
        let n = shape.iter().product();
        env.bind(name, shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
    }
    env
}

/// Number of distinct nodes reachable from `root`, by plain recursion.
pub fn set_count(g: &Gem, root: NodeId) -> usize {
    fn walk(g: &Gem, n: NodeId, seen: &mut HashSet<NodeId>) {
        if seen.insert(n) {
            for c in g.children(n) {
                walk(g, c, seen);
            }
        }
    }
    let mut seen = HashSet::new();
    walk(g, root, &mut seen);
    seen.len()
}

/// Evaluates the root directly and flattens it in the order of `outputs`.
pub fn reference_values(g: &Gem, root: NodeId, outputs: &[Index], env: &Environment) -> Vec<f64> {
    let t = eval_gem(g, root, env).unwrap();
    let mut assigns = vec![vec![]];
    for i in outputs {
        assigns = assigns.into_iter().flat_map(|p: Vec<(Index, usize)>| (0..i.extent).map(move |v| [p.clone(), vec![(*i, v)]].concat())).collect();
    }
    assigns.iter().map(|asg| t.get(asg, &[])).collect()
}

/// Outcome of scheduling one random expression.
pub struct FusionOutcome {
    pub nests: usize,
    pub storage_before: usize,
    pub storage_after: usize,
    /// Largest deviation of the schedule variants from direct evaluation,
    /// or `None` when the inputs drive the expression out of range.
    pub error: Option<f64>,
}

/// Schedules a recipe with the default options and checks topological
/// validity, then interprets it under each option set.
pub fn schedule_recipe(r: &Recipe) -> Result<FusionOutcome, String> {
    let env = environment(r.seed);
    let opts = [
        ScheduleOptions::default(),
        ScheduleOptions { unroll_threshold: None, fifo: false },
        ScheduleOptions { unroll_threshold: Some(3), fifo: true },
    ];
    let mut out = None;
    let mut error: Option<f64> = Some(0.0);
    for o in &opts {
        let mut fx = fixture();
        let (root, outputs) = build(&mut fx, r);
        let s = Schedule::build(fx.gem, root, None, &outputs, o).map_err(|e| e.to_string())?;
        let layout = s.output().map(|t| t.kept().to_vec()).unwrap_or_default();
        let expect = reference_values(&s.gem, root, &layout, &env);
        s.check_topological().map_err(|e| format!("{r:?}: {e}"))?;
        if census(&s.gem, s.root).contains_key("ComponentTensor") {
            return Err(format!("{r:?}: ComponentTensor survived elimination"));
        }
        if s.storage_after() > s.storage_before() {
            return Err(format!("{r:?}: storage grew from {} to {}", s.storage_before(), s.storage_after()));
        }
        if let Some(t) = s.output() {
            if t.dropped != 0 {
                return Err(format!("{r:?}: output reduced"));
            }
        }
        let got = eval_schedule(&s, &env).map_err(|e| e.to_string())?;
        if expect.iter().all(|v| v.is_finite()) {
            error = error.map(|e| e.max(relative_error(&got, &expect)));
        } else {
            error = None;
        }
        out.get_or_insert((s.nests.len(), s.storage_before(), s.storage_after()));
    }
    let (nests, storage_before, storage_after) = out.unwrap();
    Ok(FusionOutcome { nests, storage_before, storage_after, error })
}
pub mod criteria;
