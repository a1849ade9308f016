//! Golden dumps of the worked Laplace example and emitted C, plus the
//! optimization scans. Regenerate with `TSFC_MINI_BLESS=1`.

mod common;

use common::criteria::{self, jacobian_on, pointwise_geometry, STRETCHED};
use common::{data, golden};
use tsfc_mini_core::emitter::{emit, emit_module};
use tsfc_mini_core::lowering::LoweringOptions;
use tsfc_mini_core::pipeline::{compile_source, dump_blocks, dump_gem, dump_schedules, CompileOptions};

fn ok(r: criteria::Outcome) {
    if let Err(e) = r {
        panic!("{e}");
    }
}

#[test]
fn laplace_gem_census() {
    ok(criteria::worked_example_gem());
}

#[test]
fn laplace_has_21_nests_in_the_documented_order() {
    ok(criteria::worked_example_nests());
}

#[test]
fn laplace_fused_schedule_and_shapes() {
    ok(criteria::worked_example_fused());
}

#[test]
fn laplace_unrolled_schedule() {
    ok(criteria::worked_example_unrolled());
}

#[test]
fn laplace_gem_dump() {
    let form = criteria::laplace_p2(None).unwrap();
    golden("laplace_p2.gem", &dump_gem(&form, &LoweringOptions::plain()).unwrap()).unwrap();
}

#[test]
fn jump_average_blocks() {
    let forms = compile_source(criteria::JUMP_AVG, &CompileOptions::default()).unwrap();
    let text = dump_blocks(&forms[0]);
    golden("jump_avg.blocks", &text).unwrap();
    // Each block is half of one side's u n paired with one side's grad v.
    for line in text.lines() {
        let label = &line[line.find('(').unwrap()..line.find(')').unwrap() + 1];
        let (v, u) = (label.as_bytes()[1] as char, label.as_bytes()[3] as char);
        assert!(line.contains(&format!("u('{u}') * n('{u}')")), "{line}");
        assert!(line.contains(&format!("rgrad(v)('{v}')")), "{line}");
        assert!(line.contains("0.5"), "{line}");
    }
}

#[test]
fn helmholtz_c_is_golden_and_deterministic() {
    let src = data("helmholtz.dsl");
    let render = || {
        let forms = compile_source(&src, &CompileOptions::default()).unwrap();
        let kernels: Vec<_> = forms.iter().flat_map(|f| f.schedules.iter().map(|s| emit(s).unwrap())).collect();
        emit_module(&kernels, "helmholtz").unwrap()
    };
    let first = render();
    assert_eq!(first, render());
    golden("helmholtz.c", &first).unwrap();
}

#[test]
fn dumps_are_deterministic() {
    let src = data("facet_jump.dsl");
    let render = || {
        let forms = compile_source(&src, &CompileOptions::default()).unwrap();
        forms.iter().map(|f| dump_blocks(f) + &dump_gem(f, &LoweringOptions::default()).unwrap() + &dump_schedules(f)).collect::<String>()
    };
    assert_eq!(render(), render());
}

#[test]
fn jacobian_of_the_stretched_cell() {
    for fast in [true, false] {
        let (j, det) = jacobian_on(&STRETCHED, &LoweringOptions { fast_jacobian: fast, ..Default::default() }).unwrap();
        assert_eq!(j, [[2.0, 0.0], [0.0, 3.0]]);
        assert_eq!(det, 6.0);
    }
}

#[test]
fn fast_jacobian_reads_coordinates_directly() {
    ok(criteria::optimization_semantics());
}

#[test]
fn plain_lowering_recomputes_geometry_per_point() {
    let form = criteria::laplace_p2(None).unwrap();
    assert_eq!(pointwise_geometry(&form.schedules[0]), ["t0", "t1", "t2", "t3"]);
}
