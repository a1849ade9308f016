//! The acceptance criteria as functions returning a one-line summary on
//! success and a reason on failure.

use std::time::{Duration, Instant};

use proptest::strategy::{Strategy, ValueTree};
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tsfc_mini_core::bench::{linear_visits, run_diamond, run_ladder};
use tsfc_mini_core::emitter::emit;
use tsfc_mini_core::facet_split::{split, RestrictionBlock};
use tsfc_mini_core::form::ast::{self, sum_under_product, FIndex, Terminal};
use tsfc_mini_core::form::{lower_compounds, preprocess};
use tsfc_mini_core::gem::{census, traverse_unique, Op};
use tsfc_mini_core::lowering::{compile_doubled, compile_integrand, LoweringOptions};
use tsfc_mini_core::oracle::{eval_kernel_gem, integrate_physical, kernel_environment, random_cells, relative_error, CellData};
use tsfc_mini_core::pipeline::{
    check_form, compile_source, parse_source, run_schedules, CompileOptions, CompiledForm, ORACLE_TOLERANCE, VARIANT_TOLERANCE,
};
use tsfc_mini_core::scheduler::{LoopTree, Schedule, ScheduleOptions};

use super::{corpus, data, golden, recipe, schedule_recipe, worked_example_options};

pub type Outcome = Result<String, String>;

/// Exact agreement with hand-derived matrices.
pub const EXACT_TOLERANCE: f64 = 1e-12;
pub const WORKED_EXAMPLE_BUDGET: Duration = Duration::from_secs(1);
pub const SCALING_BUDGET: Duration = Duration::from_secs(10);
pub const FORM_BUDGET: Duration = Duration::from_secs(1);
pub const SAMPLES: usize = 50;
pub const RANDOM_EXPRESSIONS: u32 = 200;
pub const SEED: u64 = 20170405;

pub const P1_STIFFNESS: &str = "cell triangle coord_degree 1\nspace V lagrange 1\nargument v test V\nargument u trial V\n\
                                form a = cell integral dot(grad(u), grad(v))\n";
pub const P1_MASS: &str = "cell triangle coord_degree 1\nspace V lagrange 1\nargument v test V\nargument u trial V\n\
                           form m = cell integral u * v\n";
pub const JUMP_AVG: &str = "cell triangle coord_degree 1\nspace V lagrange 1\nargument v test V\nargument u trial V\n\
                            coefficient kappa V\n\
                            form a = interior_facet integral dot(jump(u, n), avg(grad(v)))\n\
                            form b = interior_facet integral avg(kappa) * dot(jump(u, n), avg(grad(v)))\n";

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn compile_one(src: &str, opts: &CompileOptions) -> Result<CompiledForm, String> {
    compile_source(src, opts).map_err(|e| e.to_string())?.into_iter().next().ok_or_else(|| "no form".to_string())
}

pub fn laplace_p2(unroll: Option<usize>) -> Result<CompiledForm, String> {
    compile_one(&data("laplace_p2.dsl"), &worked_example_options(unroll))
}

fn temp_shape(s: &Schedule, name: &str) -> Result<Vec<String>, String> {
    let t = s.temporaries.iter().find(|t| t.name == name).ok_or_else(|| format!("no temporary {name}"))?;
    Ok(t.kept().iter().map(|i| s.names.get(*i)).collect())
}

fn loops_over(tree: &[LoopTree], extent: usize) -> bool {
    tree.iter().any(|it| match it {
        LoopTree::Loop { index, body } => index.extent == extent || loops_over(body, extent),
        LoopTree::Nest(_) => false,
    })
}

pub fn worked_example_gem() -> Outcome {
    let form = laplace_p2(None)?;
    let k = form.lower(&LoweringOptions::plain()).map_err(|e| e.to_string())?.remove(0);
    let c = census(&k.gem, k.root);
    let text: String = c.iter().map(|(kind, n)| format!("{kind} {n}\n")).collect();
    golden("laplace_p2.census", &text)?;
    // adj(J) as a nested list, inv(J) as one ComponentTensor over a division,
    // and a single |det J|.
    for (kind, n) in [("ComponentTensor", 1), ("Division", 1), ("MathFunction", 1), ("Sum", 1)] {
        ensure(c.get(kind) == Some(&n), || format!("census {kind} = {:?}, expected {n}", c.get(kind)))?;
    }
    ensure(c["ListTensor"] >= 3, || "adj(J) is not a 2x2 ListTensor".into())?;
    Ok(format!("{} nodes", traverse_unique(&k.gem, k.root).len()))
}

pub fn worked_example_nests() -> Outcome {
    let form = laplace_p2(None)?;
    let s = &form.schedules[0];
    ensure(s.nests.len() == 21, || format!("{} loop nests, expected 21", s.nests.len()))?;
    golden("laplace_p2.nests", &s.dump_nests(&(0..s.nests.len()).collect::<Vec<_>>()))?;
    golden("laplace_p2.order", &s.dump_nests(&s.order))?;
    Ok("21 nests".into())
}

pub fn worked_example_fused() -> Outcome {
    let form = laplace_p2(None)?;
    let s = &form.schedules[0];
    golden("laplace_p2.schedule", &s.dump())?;
    for (name, shape) in [("t5", vec![]), ("t7", vec!["k", "i3"]), ("t10", vec!["i3"]), ("t11", vec![])] {
        let got = temp_shape(s, name)?;
        ensure(got == shape, || format!("{name} kept {got:?}, expected {shape:?}"))?;
    }
    ensure(s.storage_after() < s.storage_before(), || "fusion did not shrink storage".into())?;
    Ok(format!("storage {} -> {}", s.storage_before(), s.storage_after()))
}

pub fn worked_example_unrolled() -> Outcome {
    let form = laplace_p2(Some(2))?;
    let s = &form.schedules[0];
    golden("laplace_p2_unrolled.schedule", &s.dump())?;
    ensure(!loops_over(&s.tree, 2), || "a loop of extent 2 survived unrolling".into())?;
    ensure(!census(&s.gem, s.root).contains_key("ComponentTensor"), || "ComponentTensor survived".into())?;
    Ok(format!("{} nests", s.nests.len()))
}

/// Criterion 1.
pub fn worked_example() -> Outcome {
    let start = Instant::now();
    let parts = [worked_example_gem()?, worked_example_nests()?, worked_example_fused()?, worked_example_unrolled()?];
    let t = start.elapsed();
    ensure(t < WORKED_EXAMPLE_BUDGET, || format!("took {t:?}"))?;
    Ok(format!("{}; {t:.2?}", parts.join(", ")))
}

const REFERENCE: [f64; 6] = [0.0, 0.0, 1.0, 0.0, 0.0, 1.0];
pub const STRETCHED: [f64; 6] = [0.0, 0.0, 2.0, 0.0, 0.0, 3.0];

fn cell(coords: &[f64]) -> Vec<CellData> {
    vec![CellData { coords: coords.to_vec(), coefficients: vec![], facet: None }]
}

/// Criterion 2.
pub fn ground_truth() -> Outcome {
    let stiffness = [1.0, -0.5, -0.5, -0.5, 0.5, 0.0, -0.5, 0.0, 0.5];
    let mass: Vec<f64> = [2.0, 1.0, 1.0, 1.0, 2.0, 1.0, 1.0, 1.0, 2.0].iter().map(|v| v / 24.0).collect();
    let mut worst_exact: f64 = 0.0;
    let mut worst_physical: f64 = 0.0;
    for (src, expect) in [(P1_STIFFNESS, stiffness.to_vec()), (P1_MASS, mass)] {
        let form = compile_one(src, &CompileOptions::default())?;
        let got = run_schedules(&form, &cell(&REFERENCE)).map_err(|e| e.to_string())?;
        worst_exact = worst_exact.max(relative_error(&got, &expect));
        let got = run_schedules(&form, &cell(&STRETCHED)).map_err(|e| e.to_string())?;
        let phys = integrate_physical(&form.parsed, &cell(&STRETCHED), 6).map_err(|e| e.to_string())?;
        worst_physical = worst_physical.max(relative_error(&got, &phys));
    }
    ensure(worst_exact <= EXACT_TOLERANCE, || format!("reference-cell error {worst_exact:e}"))?;
    ensure(worst_physical <= ORACLE_TOLERANCE, || format!("stretched-cell error {worst_physical:e}"))?;
    Ok(format!("reference {worst_exact:.1e}, stretched {worst_physical:.1e}"))
}

/// Criterion 3.
pub fn splitting_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let (mut worst, mut scale) = (0.0f64, 0.0f64);
    for parsed in parse_source(JUMP_AVG).map_err(|e| e.to_string())? {
        let form = tsfc_mini_core::pipeline::compile_spec(&parsed, &CompileOptions::default()).map_err(|e| e.to_string())?;
        ensure(form.schedules.len() == 4, || format!("{}: {} block kernels", parsed.name, form.schedules.len()))?;
        let before = sum_under_product(&form.spec.integrand);
        for b in &form.blocks {
            let after = sum_under_product(&b.integrand);
            ensure(after <= before, || format!("{}{}: {after} sums under products, input has {before}", parsed.name, b.suffix()))?;
        }
        let doubled = compile_doubled(&form.spec, &LoweringOptions::default()).map_err(|e| e.to_string())?;
        for _ in 0..SAMPLES {
            let cells = random_cells(&parsed, false, &mut rng).map_err(|e| e.to_string())?;
            let blocks = run_schedules(&form, &cells).map_err(|e| e.to_string())?;
            let env = kernel_environment(&doubled.signature, &cells).map_err(|e| e.to_string())?;
            let direct = eval_kernel_gem(&doubled, &env).map_err(|e| e.to_string())?;
            worst = worst.max(relative_error(&blocks, &direct));
            scale = direct.iter().fold(scale, |m, v| m.max(v.abs()));
        }
    }
    ensure(worst <= EXACT_TOLERANCE, || format!("block sum deviates by {worst:e}"))?;
    ensure(scale > 0.0, || "all entries vanish".into())?;
    Ok(format!("max error {worst:.1e} over {SAMPLES} samples per form, largest entry {scale:.2}"))
}

/// Criterion 4.
pub fn triple_agreement() -> Outcome {
    let mut forms = 0;
    let mut oracle: f64 = 0.0;
    let mut variants: f64 = 0.0;
    for (file, src) in corpus() {
        for parsed in parse_source(&src).map_err(|e| format!("{file}: {e}"))? {
            let r = check_form(&parsed, SAMPLES, SEED).map_err(|e| format!("{file}: {e}"))?;
            ensure(r.passed(), || format!("{file}:{} failed: {r:?}", parsed.name))?;
            oracle = oracle.max(r.max_error());
            variants = variants.max(r.variants);
            forms += 1;
        }
    }
    ensure(oracle <= ORACLE_TOLERANCE && variants <= VARIANT_TOLERANCE, || "tolerance exceeded".into())?;
    Ok(format!("{forms} forms, oracle {oracle:.1e}, variants {variants:.1e}"))
}

/// The Jacobian and its determinant as the kernel computes them, read off
/// by integrating each entry and dividing by the integral of one.
pub fn jacobian_on(coords: &[f64], opts: &LoweringOptions) -> Result<([[f64; 2]; 2], f64), String> {
    let parsed = parse_source("cell triangle coord_degree 1\nform one = cell integral 1.0\n").map_err(|e| e.to_string())?.remove(0);
    let spec = preprocess(&parsed).map_err(|e| e.to_string())?;
    let rgrad = ast::modified(Terminal::SpatialCoordinate, None, 1, vec![2, 2]);
    let integrate = |e: ast::Expr| -> Result<f64, String> {
        let block = RestrictionBlock { restrictions: vec![], integrand: e };
        let k = compile_integrand(&spec, &block, opts).map_err(|e| e.to_string())?;
        let s = Schedule::from_kernel(k, &ScheduleOptions::default()).map_err(|e| e.to_string())?;
        let env = kernel_environment(s.signature.as_ref().unwrap(), &cell(coords)).map_err(|e| e.to_string())?;
        Ok(tsfc_mini_core::oracle::eval_schedule(&s, &env).map_err(|e| e.to_string())?[0])
    };
    let measure = integrate(split(&spec).map_err(|e| e.to_string())?.remove(0).integrand)?;
    let mut j = [[0.0; 2]; 2];
    for (a, row) in j.iter_mut().enumerate() {
        for (b, v) in row.iter_mut().enumerate() {
            let e = ast::indexed(&rgrad, vec![FIndex::Fixed(a), FIndex::Fixed(b)]).map_err(|e| e.to_string())?;
            *v = integrate(e)? / measure;
        }
    }
    let mut det_spec = spec.clone();
    det_spec.integrand = ast::determinant(&rgrad).map_err(|e| e.to_string())?;
    let det = integrate(lower_compounds(&det_spec).map_err(|e| e.to_string())?.integrand)? / measure;
    Ok((j, det))
}

/// True when every `coords` subscript in the C source is a literal.
pub fn coordinates_read_directly(c: &str) -> bool {
    c.match_indices("coords[").all(|(at, m)| {
        let rest = &c[at + m.len()..];
        let close = rest.find(']').unwrap_or(0);
        !rest[..close].is_empty() && rest[..close].chars().all(|ch| ch.is_ascii_digit())
    })
}

/// Temporaries that read the coordinates directly yet carry the quadrature
/// index, i.e. geometry recomputed per point.
pub fn pointwise_geometry(s: &Schedule) -> Vec<String> {
    let Some(q) = s.quadrature else { return vec![] };
    let mut out = Vec::new();
    for n in &s.nests {
        let t = &s.temporaries[n.temp];
        if t.output || !t.indices.contains(&q) {
            continue;
        }
        let own: Vec<_> = match n.statement {
            tsfc_mini_core::scheduler::Statement::Accumulate(e) => vec![e],
            tsfc_mini_core::scheduler::Statement::Assign(e) | tsfc_mini_core::scheduler::Statement::ListAssign(e) => vec![e],
            tsfc_mini_core::scheduler::Statement::Init => vec![],
        };
        let reads_coords = own.iter().any(|r| {
            let mut stack = vec![*r];
            let mut seen = std::collections::HashSet::new();
            while let Some(m) = stack.pop() {
                if !seen.insert(m) {
                    continue;
                }
                if m != t.node && s.temp_of(m).is_some() {
                    continue;
                }
                if matches!(s.gem.op(m), Op::Variable { name, .. } if name.starts_with("coords")) {
                    return true;
                }
                stack.extend(s.gem.children(m));
            }
            false
        });
        if reads_coords && !out.contains(&t.name) {
            out.push(t.name.clone());
        }
    }
    out
}

/// Criterion 5.
pub fn optimization_semantics() -> Outcome {
    let fast = LoweringOptions::default();
    let slow = LoweringOptions { fast_jacobian: false, ..Default::default() };
    for opts in [&fast, &slow] {
        let (j, det) = jacobian_on(&STRETCHED, opts)?;
        let expect = [[2.0, 0.0], [0.0, 3.0]];
        let err = (0..4).map(|k| (j[k / 2][k % 2] - expect[k / 2][k % 2]).abs()).fold((det - 6.0).abs(), f64::max);
        ensure(err <= EXACT_TOLERANCE, || format!("J = {j:?}, det = {det}"))?;
    }
    let src = data("laplace_p1.dsl");
    let no_unroll = ScheduleOptions { unroll_threshold: None, fifo: false };
    let fast_c = emit(&compile_one(&src, &CompileOptions { lowering: fast.clone(), schedule: no_unroll.clone() })?.schedules[0])
        .map_err(|e| e.to_string())?
        .source;
    golden("laplace_p1_fast_jacobian.c", &fast_c)?;
    ensure(coordinates_read_directly(&fast_c), || "coordinates read inside a loop with fast Jacobian".into())?;
    let slow_c = emit(&compile_one(&src, &CompileOptions { lowering: slow, schedule: no_unroll.clone() })?.schedules[0])
        .map_err(|e| e.to_string())?
        .source;
    ensure(!coordinates_read_directly(&slow_c), || "control: plain Jacobian has no coordinate loop".into())?;
    for (file, text) in corpus() {
        for f in compile_source(&text, &CompileOptions::default()).map_err(|e| format!("{file}: {e}"))? {
            if f.spec.coord_degree > 1 {
                continue;
            }
            for s in &f.schedules {
                let bad = pointwise_geometry(s);
                ensure(bad.is_empty(), || format!("{file}:{} recomputes geometry per point in {bad:?}", f.parsed.name))?;
            }
        }
    }
    let plain = compile_one(&data("laplace_p2.dsl"), &worked_example_options(None))?;
    ensure(!pointwise_geometry(&plain.schedules[0]).is_empty(), || "control: plain lowering shows no per-point geometry".into())?;
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    for (file, text) in corpus() {
        let toggles = [
            CompileOptions::default(),
            CompileOptions { lowering: LoweringOptions { fast_jacobian: false, ..Default::default() }, ..Default::default() },
            CompileOptions { lowering: LoweringOptions { cellwise_constant: false, ..Default::default() }, ..Default::default() },
            CompileOptions { lowering: LoweringOptions::plain(), ..Default::default() },
        ];
        let compiled: Vec<Vec<CompiledForm>> =
            toggles.iter().map(|o| compile_source(&text, o)).collect::<Result<_, _>>().map_err(|e| format!("{file}: {e}"))?;
        for (n, base) in compiled[0].iter().enumerate() {
            for _ in 0..10 {
                let cells = random_cells(&base.parsed, base.parsed.coord_degree > 1, &mut rng).map_err(|e| e.to_string())?;
                let a = run_schedules(base, &cells).map_err(|e| e.to_string())?;
                for other in &compiled[1..] {
                    let b = run_schedules(&other[n], &cells).map_err(|e| e.to_string())?;
                    worst = worst.max(relative_error(&b, &a));
                }
            }
        }
    }
    ensure(worst <= VARIANT_TOLERANCE, || format!("toggles change outputs by {worst:e}"))?;
    Ok(format!("J exact, toggles agree to {worst:.1e}"))
}

/// Criterion 6.
pub fn compile_time_scaling() -> Outcome {
    let start = Instant::now();
    let reports = (5..=20).map(run_diamond).collect::<Result<Vec<_>, _>>().map_err(|e| e.to_string())?;
    for r in &reports {
        ensure(r.visits == 2 * r.depth + 1, || format!("depth {}: {} visits", r.depth, r.visits))?;
        ensure(r.tree_size >= 1u128 << r.depth, || format!("depth {}: tree size {}", r.depth, r.tree_size))?;
    }
    ensure(linear_visits(&reports), || "visit counts are not linear".into())?;
    let mut slowest = Duration::ZERO;
    for (file, text) in corpus() {
        let t = Instant::now();
        for f in compile_source(&text, &CompileOptions::default()).map_err(|e| format!("{file}: {e}"))? {
            for s in &f.schedules {
                emit(s).map_err(|e| e.to_string())?;
            }
        }
        slowest = slowest.max(t.elapsed());
        ensure(t.elapsed() < FORM_BUDGET, || format!("{file} took {:?}", t.elapsed()))?;
    }
    for k in 0..4 {
        let r = run_ladder(k).map_err(|e| e.to_string())?;
        slowest = slowest.max(r.compile_time);
        ensure(r.compile_time < FORM_BUDGET, || format!("ladder rung {k} took {:?}", r.compile_time))?;
    }
    let total = start.elapsed();
    ensure(total < SCALING_BUDGET, || format!("took {total:?}"))?;
    let last = reports.last().unwrap();
    Ok(format!("depth 20: {} visits, tree {}; slowest form {slowest:.2?}; total {total:.2?}", last.visits, last.tree_size))
}

/// Criterion 7.
pub fn fusion_legality() -> Outcome {
    let config = Config { cases: RANDOM_EXPRESSIONS, ..Config::default() };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    let strategy = recipe();
    let (mut saved, mut nontrivial, mut worst) = (0usize, 0usize, 0.0f64);
    for _ in 0..RANDOM_EXPRESSIONS {
        let r = strategy.new_tree(&mut runner).map_err(|e| e.to_string())?.current();
        let out = schedule_recipe(&r)?;
        ensure(out.storage_after <= out.storage_before, || format!("{r:?}: storage grew"))?;
        saved += out.storage_before - out.storage_after;
        nontrivial += usize::from(out.nests > 2);
        if let Some(e) = out.error {
            worst = worst.max(e);
        }
    }
    ensure(worst <= EXACT_TOLERANCE, || format!("schedule deviates from direct evaluation by {worst:e}"))?;
    Ok(format!("{RANDOM_EXPRESSIONS} expressions ({nontrivial} with more than two nests), {saved} scalars saved"))
}
