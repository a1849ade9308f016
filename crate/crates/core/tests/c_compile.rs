//! Compiles emitted kernels with the system C compiler and compares them
//! with the schedule interpreter. Skipped when no compiler is found or
//! `TSFC_MINI_SKIP_CC` is set.

use std::fmt::Write;
use std::process::Command;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tsfc_mini_core::emitter::{emit, emit_module};
use tsfc_mini_core::form::Side;
use tsfc_mini_core::lowering::InputRole;
use tsfc_mini_core::oracle::{eval_schedule, kernel_environment, random_cells, relative_error, CellData};
use tsfc_mini_core::pipeline::{compile_source, CompileOptions};

fn compiler() -> Option<String> {
    if std::env::var_os("TSFC_MINI_SKIP_CC").is_some() {
        return None;
    }
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    Command::new(&cc).arg("--version").output().ok().filter(|o| o.status.success()).map(|_| cc)
}

fn c_array(name: &str, ty: &str, vals: &[String]) -> String {
    format!("  {ty} {name}[{}] = {{{}}};\n", vals.len().max(1), if vals.is_empty() { "0".into() } else { vals.join(", ") })
}

fn run_c(cc: &str, module: &str, driver: &str) -> Vec<f64> {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("k.c");
    let exe = dir.path().join("k");
    std::fs::write(&src, format!("{module}\n#include <stdio.h>\n{driver}")).unwrap();
    let out = Command::new(cc).args(["-std=c99", "-O1", "-o"]).arg(&exe).arg(&src).arg("-lm").output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&exe).output().unwrap();
    String::from_utf8(run.stdout).unwrap().split_whitespace().map(|v| v.parse().unwrap()).collect()
}

#[test]
fn compiled_kernels_match_the_interpreter() {
    let Some(cc) = compiler() else {
        eprintln!("no C compiler; skipping");
        return;
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data");
    let mut paths: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    paths.sort();
    for path in paths {
        let forms = compile_source(&std::fs::read_to_string(&path).unwrap(), &CompileOptions::default()).unwrap();
        for form in &forms {
            let kernels: Vec<_> = form.schedules.iter().map(|s| emit(s).unwrap()).collect();
            let module = emit_module(&kernels, "differential test").unwrap();
            let cells: Vec<CellData> = random_cells(&form.parsed, form.parsed.coord_degree > 1, &mut rng).unwrap();
            let mut driver = String::from("int main(void)\n{\n");
            let mut expect = Vec::new();
            for (b, s) in form.schedules.iter().enumerate() {
                let sig = s.signature.as_ref().unwrap();
                let n: usize = sig.output_shape.iter().product();
                let _ = write!(driver, "  {{\n  double A[{n}];\n");
                for v in 0..n {
                    let _ = writeln!(driver, "  A[{v}] = 1.0e300;");
                }
                let mut args = vec!["A".to_string()];
                for input in &sig.inputs {
                    let cell = &cells[if input.side == Some(Side::Minus) { 1 } else { 0 }];
                    let data = match input.role {
                        InputRole::Coordinates => &cell.coords,
                        InputRole::Coefficient(k) => &cell.coefficients[k],
                    };
                    let vals: Vec<String> = data.iter().map(|x| format!("{x:.17e}")).collect();
                    driver += &c_array(&format!("in{b}_{}", input.name), "double", &vals);
                    args.push(format!("in{b}_{}", input.name));
                }
                if !sig.facets.is_empty() {
                    let f: Vec<String> = (0..sig.facets.len()).map(|s| cells[s].facet.unwrap().to_string()).collect();
                    driver += &c_array(&format!("facet{b}"), "unsigned", &f);
                    args.push(format!("facet{b}"));
                }
                let offs: Vec<usize> = sig.output_offsets.clone();
                let _ = writeln!(driver, "  {}({});", sig.name, args.join(", "));
                // Only the block's own entries are defined.
                let a = eval_schedule(s, &kernel_environment(sig, &cells).unwrap()).unwrap();
                let dims: Vec<usize> = sig.arguments.iter().zip(&sig.argument_indices).map(|(_, i)| i.extent).collect();
                let mut flat = vec![vec![]];
                for d in &dims {
                    flat = flat.into_iter().flat_map(|p: Vec<usize>| (0..*d).map(move |v| [p.clone(), vec![v]].concat())).collect();
                }
                for mi in flat {
                    let off = mi.iter().enumerate().fold(0, |acc, (a, v)| acc * sig.output_shape[a] + v + offs[a]);
                    let _ = writeln!(driver, "  printf(\"%.17g\\n\", A[{off}]);");
                    expect.push(a[off]);
                }
                driver += "  }\n";
            }
            driver += "  return 0;\n}\n";
            let got = run_c(&cc, &module, &driver);
            assert_eq!(got.len(), expect.len());
            let err = relative_error(&got, &expect);
            assert!(err <= 1e-12, "{}: {} relative error {err}", path.display(), form.parsed.name);
        }
    }
}

#[test]
fn p1_mass_from_c_on_reference_triangle() {
    let Some(cc) = compiler() else {
        return;
    };
    let src = "cell triangle coord_degree 1\nspace V lagrange 1\nargument v test V\nargument u trial V\n\
               form mass = cell integral u * v\n";
    let forms = compile_source(src, &CompileOptions::default()).unwrap();
    let module = emit_module(&[emit(&forms[0].schedules[0]).unwrap()], "mass").unwrap();
    let driver = "int main(void)\n{\n  double A[9];\n  const double c[6] = {0, 0, 1, 0, 0, 1};\n  mass(A, c);\n  \
                  for (int i = 0; i < 9; ++i)\n    printf(\"%.17g\\n\", A[i]);\n  return 0;\n}\n";
    let got = run_c(&cc, &module, driver);
    let expect: Vec<f64> = [2.0, 1.0, 1.0, 1.0, 2.0, 1.0, 1.0, 1.0, 2.0].iter().map(|v| v / 24.0).collect();
    assert!(relative_error(&got, &expect) < 1e-14, "{got:?}");
}
