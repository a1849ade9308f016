//! Command-line driver: compile form files to C, dump intermediate
//! representations, run the differential check and benchmark compile time.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tsfc_mini_core::bench::{linear_visits, run_diamond, run_ladder, DiamondReport};
use tsfc_mini_core::emitter::{emit, emit_header, emit_module, Kernel};
use tsfc_mini_core::lowering::LoweringOptions;
use tsfc_mini_core::pipeline::{
    check_form, compile_spec, dump_blocks, dump_gem, dump_schedules, parse_source, CompileOptions, ORACLE_TOLERANCE,
};
use tsfc_mini_core::scheduler::ScheduleOptions;

const DEFAULT_SEED: u64 = 20170405;

#[derive(Parser)]
#[command(name = "tsfc-mini", version, about = "Two-stage compiler from weak forms to C kernels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compile a form file to a C translation unit.
    Compile(CompileArgs),
    /// Compare every form against the reference evaluators.
    Check(CheckArgs),
    /// Measure compile-time scaling on generated families.
    Bench(BenchArgs),
}

#[derive(Args)]
struct Toggles {
    /// Keep every IndexSum as a loop.
    #[arg(long, conflicts_with = "unroll_threshold")]
    no_unroll: bool,
    /// Unroll IndexSums of at most this extent.
    #[arg(long, value_name = "N", default_value_t = 3)]
    unroll_threshold: usize,
    /// Contract coordinate tables instead of using coordinate differences.
    #[arg(long)]
    no_fast_jacobian: bool,
    /// Evaluate affine geometry at every quadrature point.
    #[arg(long)]
    no_cellwise_const: bool,
    /// Order loop nests first-in first-out instead of by the fusion heuristic.
    #[arg(long)]
    fifo_schedule: bool,
}

impl Toggles {
    fn options(&self) -> CompileOptions {
        CompileOptions {
            lowering: LoweringOptions {
                fast_jacobian: !self.no_fast_jacobian,
                cellwise_constant: !self.no_cellwise_const,
                ..Default::default()
            },
            schedule: ScheduleOptions {
                unroll_threshold: (!self.no_unroll).then_some(self.unroll_threshold),
                fifo: self.fifo_schedule,
            },
        }
    }
}

#[derive(Args)]
struct CompileArgs {
    input: PathBuf,
    /// Output C file. Without it the C code goes to stdout unless a dump
    /// is requested.
    #[arg(short, long, value_name = "FILE")]
    output: Option<PathBuf>,
    /// Also write a header with the kernel prototypes next to the output.
    #[arg(long, requires = "output")]
    header: bool,
    #[command(flatten)]
    toggles: Toggles,
    /// Print the GEM of every kernel before scheduling.
    #[arg(long)]
    dump_gem: bool,
    /// Print the restriction blocks of every form.
    #[arg(long)]
    dump_blocks: bool,
    /// Print the fused loop schedule of every kernel.
    #[arg(long)]
    dump_schedule: bool,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Random inputs per form.
    #[arg(long, default_value_t = 50)]
    samples: usize,
    /// Seed of the random inputs; `TSFC_MINI_SEED` takes precedence.
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    /// Smallest diamond depth.
    #[arg(long, default_value_t = 5)]
    min_depth: usize,
    /// Largest diamond depth.
    #[arg(long, default_value_t = 20)]
    max_depth: usize,
    /// Number of composition-ladder rungs.
    #[arg(long, default_value_t = 4)]
    rungs: usize,
    /// Repeat every measurement this many times.
    #[arg(long, default_value_t = 2)]
    repeat: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Compile(a) => compile(a),
        Command::Check(a) => check(a),
        Command::Bench(a) => bench(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn compile(a: &CompileArgs) -> Result<bool> {
    let src = read(&a.input)?;
    let specs = match parse_source(&src) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{}:{e}", a.input.display());
            return Ok(false);
        }
    };
    let opts = a.toggles.options();
    let mut kernels: Vec<Kernel> = Vec::new();
    let mut dumps = String::new();
    let mut ok = true;
    for spec in &specs {
        let form = match compile_spec(spec, &opts) {
            Ok(f) => f,
            Err(e) => {
                eprintln!("{}: form `{}`: {e}", a.input.display(), spec.name);
                ok = false;
                continue;
            }
        };
        if a.dump_blocks {
            dumps += &dump_blocks(&form);
        }
        if a.dump_gem {
            dumps += &dump_gem(&form, &opts.lowering)?;
        }
        if a.dump_schedule {
            dumps += &dump_schedules(&form);
        }
        for s in &form.schedules {
            kernels.push(emit(s)?);
        }
    }
    if !ok {
        return Ok(false);
    }
    let module = emit_module(&kernels, &format!("Generated by tsfc-mini from {}", file_name(&a.input)))?;
    let mut stdout = std::io::stdout().lock();
    stdout.write_all(dumps.as_bytes())?;
    match &a.output {
        Some(path) => {
            std::fs::write(path, &module).with_context(|| format!("cannot write {}", path.display()))?;
            if a.header {
                let h = path.with_extension("h");
                std::fs::write(&h, emit_header(&kernels, &guard(path))).with_context(|| format!("cannot write {}", h.display()))?;
            }
        }
        None if dumps.is_empty() => stdout.write_all(module.as_bytes())?,
        None => {}
    }
    Ok(true)
}

fn file_name(p: &Path) -> String {
    p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn guard(p: &Path) -> String {
    let stem = p.file_stem().map_or_else(|| "KERNELS".into(), |s| s.to_string_lossy().into_owned());
    let ident: String = stem.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_uppercase() } else { '_' }).collect();
    format!("{ident}_H")
}

fn seed(default: u64) -> Result<u64> {
    match std::env::var("TSFC_MINI_SEED") {
        Ok(v) => v.trim().parse().with_context(|| format!("TSFC_MINI_SEED is not an integer: {v:?}")),
        Err(_) => Ok(default),
    }
}

fn check(a: &CheckArgs) -> Result<bool> {
    let seed = seed(a.seed)?;
    println!("seed {seed}, {} samples per form, tolerance {ORACLE_TOLERANCE:e}", a.samples);
    let mut all = true;
    for path in &a.inputs {
        let src = read(path)?;
        let specs = match parse_source(&src) {
            Ok(s) => s,
            Err(e) => {
                eprintln!("{}:{e}", path.display());
                all = false;
                continue;
            }
        };
        for spec in &specs {
            let name = format!("{}:{}", file_name(path), spec.name);
            match check_form(spec, a.samples, seed) {
                Ok(r) => {
                    let blocks = r.blocks_vs_doubled.map_or("-".into(), |e| format!("{e:.1e}"));
                    println!(
                        "{} {name} max error {:.1e} (schedule/gem {:.1e}, gem/physical {:.1e}, blocks/doubled {blocks}, variants {:.1e})",
                        if r.passed() { "PASS" } else { "FAIL" },
                        r.max_error(),
                        r.schedule_vs_gem,
                        r.gem_vs_physical,
                        r.variants
                    );
                    all &= r.passed();
                }
                Err(e) => {
                    println!("FAIL {name}: {e}");
                    all = false;
                }
            }
        }
    }
    Ok(all)
}

fn bench(a: &BenchArgs) -> Result<bool> {
    if a.min_depth > a.max_depth || a.repeat == 0 {
        bail!("need min-depth <= max-depth and repeat >= 1");
    }
    println!("diamond chain");
    println!("{:>5} {:>7} {:>12} {:>11} {:>12}", "depth", "visits", "tree size", "temporaries", "time");
    let mut runs: Vec<Vec<DiamondReport>> = Vec::new();
    for _ in 0..a.repeat {
        runs.push((a.min_depth..=a.max_depth).map(run_diamond).collect::<Result<_, _>>()?);
    }
    for r in &runs[0] {
        println!("{:>5} {:>7} {:>12} {:>11} {:>12.2?}", r.depth, r.visits, r.tree_size, r.temporaries, r.compile_time);
    }
    let linear = linear_visits(&runs[0]);
    let stable = runs.iter().all(|run| {
        run.iter().zip(&runs[0]).all(|(x, y)| (x.visits, x.tree_size, x.temporaries) == (y.visits, y.tree_size, y.temporaries))
    });
    println!("visits linear in depth: {}", if linear { "yes" } else { "NO" });
    println!("counts identical across {} runs: {}", a.repeat, if stable { "yes" } else { "NO" });
    println!("composition ladder");
    println!("{:>4} {:>7} {:>6} {:>12}", "rung", "points", "nests", "time");
    for k in 0..a.rungs {
        let r = run_ladder(k)?;
        println!("{:>4} {:>7} {:>6} {:>12.2?}", r.rung, r.quadrature_points, r.nests, r.compile_time);
    }
    Ok(linear && stable)
}
