//! End-to-end compilation of a form file and the differential check that
//! compares every stage against the oracles.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::facet_split::{split, RestrictionBlock};
use crate::form::{parse, preprocess, IntegralSpec, IntegralType};
use crate::lowering::{compile_doubled, compile_integrand, quadrature_degree, LoweredKernel, LoweringOptions};
use crate::oracle::{eval_kernel_gem, eval_schedule, integrate_physical, kernel_environment, random_cells, relative_error, CellData};
use crate::scheduler::{Schedule, ScheduleOptions};
use crate::Result;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CompileOptions {
    pub lowering: LoweringOptions,
    pub schedule: ScheduleOptions,
}

/// One form of a file after both stages.
#[derive(Debug)]
pub struct CompiledForm {
    /// The integral as parsed, in physical space.
    pub parsed: IntegralSpec,
    /// The integral after preprocessing.
    pub spec: IntegralSpec,
    pub blocks: Vec<RestrictionBlock>,
    /// One schedule per surviving block. Zero blocks of interior-facet
    /// integrals are pruned; other integrals always keep their kernel.
    pub schedules: Vec<Schedule>,
}

impl CompiledForm {
    /// Blocks that produced a kernel, in the same order as `schedules`.
    pub fn surviving_blocks(&self) -> Vec<&RestrictionBlock> {
        let interior = self.spec.integral_type == IntegralType::InteriorFacet;
        self.blocks.iter().filter(|b| !(interior && b.is_zero())).collect()
    }

    /// Lowers the surviving blocks again, for evaluation before scheduling.
    pub fn lower(&self, opts: &LoweringOptions) -> Result<Vec<LoweredKernel>> {
        self.surviving_blocks().into_iter().map(|b| compile_integrand(&self.spec, b, opts)).collect()
    }
}

/// Compiles one parsed integral.
pub fn compile_spec(parsed: &IntegralSpec, opts: &CompileOptions) -> Result<CompiledForm> {
    let spec = preprocess(parsed)?;
    let blocks = split(&spec)?;
    let interior = spec.integral_type == IntegralType::InteriorFacet;
    let mut schedules = Vec::new();
    for b in &blocks {
        if interior && b.is_zero() {
            continue;
        }
        let k = compile_integrand(&spec, b, &opts.lowering)?;
        schedules.push(Schedule::from_kernel(k, &opts.schedule)?);
    }
    Ok(CompiledForm { parsed: parsed.clone(), spec, blocks, schedules })
}

/// Parses and compiles every form of a file.
pub fn compile_source(src: &str, opts: &CompileOptions) -> Result<Vec<CompiledForm>> {
    parse_source(src)?.iter().map(|s| compile_spec(s, opts)).collect()
}

/// Parses a file without compiling it.
pub fn parse_source(src: &str) -> Result<Vec<IntegralSpec>> {
    Ok(parse(src)?.into_iter().map(|(_, s)| s).collect())
}

/// Adds the output arrays of several kernels.
pub fn assemble<'a>(parts: impl IntoIterator<Item = &'a [f64]>) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for p in parts {
        if out.is_empty() {
            out = vec![0.0; p.len()];
        }
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    out
}

/// Evaluates all schedules of a form on one input and sums the blocks.
pub fn run_schedules(form: &CompiledForm, cells: &[CellData]) -> Result<Vec<f64>> {
    let mut parts = Vec::new();
    for s in &form.schedules {
        let env = kernel_environment(s.signature.as_ref().expect("kernel schedule"), cells)?;
        parts.push(eval_schedule(s, &env)?);
    }
    Ok(if parts.is_empty() { vec![0.0; output_len(form)?] } else { assemble(parts.iter().map(|p| p.as_slice())) })
}

/// Evaluates the lowered blocks directly and sums them.
pub fn run_gem(kernels: &[LoweredKernel], cells: &[CellData], len: usize) -> Result<Vec<f64>> {
    let mut parts = Vec::new();
    for k in kernels {
        parts.push(eval_kernel_gem(k, &kernel_environment(&k.signature, cells)?)?);
    }
    Ok(if parts.is_empty() { vec![0.0; len] } else { assemble(parts.iter().map(|p| p.as_slice())) })
}

fn output_len(form: &CompiledForm) -> Result<usize> {
    let interior = form.spec.integral_type == IntegralType::InteriorFacet;
    let mut len = 1;
    for a in &form.spec.arguments {
        let n = crate::element::LagrangeElement::new(form.spec.cell, a.degree)?.space_dim();
        len *= if interior { 2 * n } else { n };
    }
    Ok(len)
}

/// Largest relative errors seen by [`check_form`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub samples: usize,
    /// Schedule interpreter against direct GEM evaluation.
    pub schedule_vs_gem: f64,
    /// Direct GEM evaluation against the physical-space integrator.
    pub gem_vs_physical: f64,
    /// Sum of restriction blocks against the unsplit doubled-basis kernel.
    pub blocks_vs_doubled: Option<f64>,
    /// Largest deviation of any optimization variant from the default.
    pub variants: f64,
}

pub const ORACLE_TOLERANCE: f64 = 1e-10;
pub const VARIANT_TOLERANCE: f64 = 1e-12;

impl CheckReport {
    pub fn max_error(&self) -> f64 {
        [self.schedule_vs_gem, self.gem_vs_physical, self.blocks_vs_doubled.unwrap_or(0.0)].into_iter().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_error() <= ORACLE_TOLERANCE && self.blocks_vs_doubled.unwrap_or(0.0) <= VARIANT_TOLERANCE && self.variants <= VARIANT_TOLERANCE
    }
}

/// Runs the differential check on `samples` seeded random inputs.
///
/// The default compilation is compared against direct GEM evaluation and
/// the physical-space integrator. Variants toggling unrolling, FIFO
/// scheduling, the fast Jacobian and cellwise constants must reproduce the
/// default output.
pub fn check_form(parsed: &IntegralSpec, samples: usize, seed: u64) -> Result<CheckReport> {
    let base = CompileOptions::default();
    let form = compile_spec(parsed, &base)?;
    let kernels = form.lower(&base.lowering)?;
    let interior = form.spec.integral_type == IntegralType::InteriorFacet;
    let doubled = if interior { Some(compile_doubled(&form.spec, &base.lowering)?) } else { None };
    let variant_opts = [
        CompileOptions { schedule: ScheduleOptions { unroll_threshold: None, fifo: false }, ..base.clone() },
        CompileOptions { schedule: ScheduleOptions { unroll_threshold: Some(3), fifo: true }, ..base.clone() },
        CompileOptions { lowering: LoweringOptions { fast_jacobian: false, ..Default::default() }, ..base.clone() },
        CompileOptions { lowering: LoweringOptions { cellwise_constant: false, ..Default::default() }, ..base.clone() },
        CompileOptions { lowering: LoweringOptions::plain(), schedule: ScheduleOptions { unroll_threshold: None, fifo: false } },
    ];
    let variants = variant_opts.iter().map(|o| compile_spec(parsed, o)).collect::<Result<Vec<_>>>()?;
    let degree = quadrature_degree(&form.spec, &base.lowering) + 4;
    let len = output_len(&form)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CheckReport { name: parsed.name.clone(), samples, blocks_vs_doubled: doubled.as_ref().map(|_| 0.0), ..Default::default() };
    for _ in 0..samples {
        let cells = random_cells(parsed, parsed.coord_degree > 1, &mut rng)?;
        let a_sched = run_schedules(&form, &cells)?;
        let a_gem = run_gem(&kernels, &cells, len)?;
        let a_phys = integrate_physical(parsed, &cells, degree)?;
        report.schedule_vs_gem = report.schedule_vs_gem.max(relative_error(&a_sched, &a_gem));
        report.gem_vs_physical = report.gem_vs_physical.max(relative_error(&a_gem, &a_phys));
        if let Some(d) = &doubled {
            let a_d = eval_kernel_gem(d, &kernel_environment(&d.signature, &cells)?)?;
            let e = relative_error(&a_gem, &a_d);
            report.blocks_vs_doubled = Some(report.blocks_vs_doubled.unwrap_or(0.0).max(e));
        }
        for v in &variants {
            report.variants = report.variants.max(relative_error(&run_schedules(v, &cells)?, &a_sched));
        }
    }
    Ok(report)
}

/// Restriction blocks of a form as `label: integrand` lines.
pub fn dump_blocks(form: &CompiledForm) -> String {
    let mut out = String::new();
    for b in &form.blocks {
        let label = if b.restrictions.is_empty() { "()".to_string() } else { b.label() };
        let text = if b.is_zero() { "0".to_string() } else { crate::form::ast::to_text(&b.integrand) };
        out += &format!("{}{} {label}: {text}\n", form.spec.name, b.suffix());
    }
    out
}

/// GEM of every surviving block before scheduling.
pub fn dump_gem(form: &CompiledForm, opts: &LoweringOptions) -> Result<String> {
    let mut out = String::new();
    for k in form.lower(opts)? {
        let mut names = crate::gem::IndexNames::new(Some(k.signature.quadrature_index), &k.signature.argument_indices);
        names.assign(&k.gem, k.root);
        out += &format!("== {}\n{}", k.signature.name, crate::gem::dump(&k.gem, k.root, &names));
    }
    Ok(out)
}

/// Fused schedules of every kernel.
pub fn dump_schedules(form: &CompiledForm) -> String {
    let mut out = String::new();
    for s in &form.schedules {
        let name = s.signature.as_ref().map_or("expr", |sig| sig.name.as_str());
        out += &format!("== {name}\n{}", s.dump());
    }
    out
}
