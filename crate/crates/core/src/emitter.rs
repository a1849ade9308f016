//! Second stage, back half: a schedule as a C99 function.
//!
//! Temporaries become stack scalars or arrays sized by their reduced
//! shapes, tables become `static const` arrays and the fused loop tree is
//! printed as nested `for` loops.

use std::collections::HashSet;
use std::fmt::Write;

use crate::error::{Error, Result};
use crate::form::IntegralType;
use crate::gem::Op;
use crate::lowering::{InputRole, KernelSignature};
use crate::scheduler::{LoopTree, Schedule};

/// One emitted C function.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Kernel {
    pub name: String,
    /// Declaration without the trailing semicolon.
    pub prototype: String,
    /// ABI comment and definition.
    pub source: String,
}

fn parameters(sig: &KernelSignature) -> Vec<String> {
    let mut out = vec!["double *restrict A".to_string()];
    for input in &sig.inputs {
        out.push(format!("const double *restrict {}", input.name));
    }
    if !sig.facets.is_empty() {
        out.push("const unsigned *restrict facet".to_string());
    }
    out
}

fn abi_comment(sig: &KernelSignature, s: &Schedule) -> String {
    let mut c = String::from("/*\n");
    let rule_points = s.quadrature.map_or(0, |q| q.extent);
    let _ = writeln!(
        c,
        " * {}: {} integral on the {}, quadrature degree {} ({} point{}).",
        sig.name,
        sig.integral_type.name().replace('_', " "),
        sig.cell.name(),
        sig.quadrature_degree,
        rule_points,
        if rule_points == 1 { "" } else { "s" }
    );
    let dims: Vec<String> = sig.output_shape.iter().map(|n| n.to_string()).collect();
    let layout = if dims.is_empty() { "a single value".to_string() } else { format!("{}, row-major", dims.join(" x ")) };
    let _ = writeln!(c, " * A: output, {layout}. Entries are added to; the kernel zeroes its block first.");
    if sig.integral_type == IntegralType::InteriorFacet && !sig.restrictions.is_empty() {
        let offs: Vec<String> = sig.output_offsets.iter().map(|o| o.to_string()).collect();
        let _ = writeln!(c, " *    This block writes at offsets ({}) per argument.", offs.join(", "));
    }
    for input in &sig.inputs {
        let what = match input.role {
            InputRole::Coordinates => format!("nodal coordinates, {} x {} row-major", input.shape[0], input.shape[1]),
            InputRole::Coefficient(k) => format!("{} dofs of coefficient {k}", input.shape[0]),
        };
        let side = match input.side {
            Some(crate::form::Side::Plus) => " on the + cell",
            Some(crate::form::Side::Minus) => " on the - cell",
            None => "",
        };
        let _ = writeln!(c, " * {}: {what}{side}.", input.name);
    }
    if !sig.facets.is_empty() {
        let which = if sig.facets.len() == 2 { "facet[0] on the + cell, facet[1] on the - cell" } else { "facet[0]" };
        let _ = writeln!(c, " * facet: local facet numbers, {which}.");
    }
    c.push_str(" */\n");
    c
}

fn nested_values(vals: &[f64], shape: &[usize]) -> String {
    if shape.len() <= 1 {
        let v: Vec<String> = vals.iter().map(|x| format!("{:.16e}", x + 0.0)).collect();
        return format!("{{{}}}", v.join(", "));
    }
    let stride: usize = shape[1..].iter().product();
    let rows: Vec<String> = vals.chunks(stride).map(|c| nested_values(c, &shape[1..])).collect();
    format!("{{{}}}", rows.join(", "))
}

fn dims(extents: impl IntoIterator<Item = usize>) -> String {
    extents.into_iter().map(|e| format!("[{e}]")).collect()
}

/// Renders a kernel schedule as one C function.
pub fn emit(s: &Schedule) -> Result<Kernel> {
    let sig = s.signature.as_ref().ok_or_else(|| Error::Unsupported("emitting a schedule without a kernel signature".into()))?;
    let prototype = format!("void {}({})", sig.name, parameters(sig).join(", "));
    let mut body = String::new();
    if s.gem.is_zero(s.root) {
        let n: usize = sig.output_shape.iter().product();
        let _ = writeln!(body, "  for (int i = 0; i < {n}; ++i)\n    A[i] = 0.0;");
    } else {
        for (k, t) in s.tables.iter().enumerate() {
            if let Op::Literal { shape, .. } = s.gem.op(*t) {
                let vals = s.gem.literal_values(*t).unwrap_or_default();
                let _ = writeln!(body, "  static const double T{k}{} = {};", dims(shape.iter().copied()), nested_values(&vals, shape));
            }
        }
        let mut declared = HashSet::new();
        for k in &s.order {
            let t = s.nests[*k].temp;
            let temp = &s.temporaries[t];
            if temp.output || !declared.insert(t) {
                continue;
            }
            let _ = writeln!(body, "  double {}{};", temp.name, dims(temp.kept().iter().map(|i| i.extent).chain(temp.shape.iter().copied())));
        }
        emit_items(s, &s.tree, 1, &mut body);
    }
    let mut unused = String::new();
    let names = sig.inputs.iter().map(|i| i.name.as_str()).chain((!sig.facets.is_empty()).then_some("facet"));
    for name in names {
        if !body.contains(&format!("{name}[")) {
            let _ = writeln!(unused, "  (void){name};");
        }
    }
    let source = format!("{}{prototype}\n{{\n{unused}{body}}}\n", abi_comment(sig, s));
    Ok(Kernel { name: sig.name.clone(), prototype, source })
}

fn emit_items(s: &Schedule, items: &[LoopTree], depth: usize, out: &mut String) {
    let pad = "  ".repeat(depth);
    for it in items {
        match it {
            LoopTree::Loop { index, body } => {
                let v = s.names.get(*index);
                let _ = writeln!(out, "{pad}for (int {v} = 0; {v} < {}; ++{v})\n{pad}{{", index.extent);
                emit_items(s, body, depth + 1, out);
                let _ = writeln!(out, "{pad}}}");
            }
            LoopTree::Nest(k) => {
                for line in s.c_statements(*k) {
                    let _ = writeln!(out, "{pad}{line}");
                }
            }
        }
    }
}

/// A translation unit holding the kernels in the given order.
pub fn emit_module(kernels: &[Kernel], header: &str) -> Result<String> {
    if kernels.is_empty() {
        return Err(Error::Unsupported("a module needs at least one kernel".into()));
    }
    let mut seen = HashSet::new();
    for k in kernels {
        if !seen.insert(k.name.as_str()) {
            return Err(Error::DuplicateKernel(k.name.clone()));
        }
    }
    let mut out = String::new();
    for line in header.lines() {
        let _ = writeln!(out, "/* {line} */");
    }
    out.push_str("#include <math.h>\n");
    for k in kernels {
        out.push('\n');
        out.push_str(&k.source);
    }
    Ok(out)
}

/// A header declaring the kernels, guarded by `guard`.
pub fn emit_header(kernels: &[Kernel], guard: &str) -> String {
    let mut out = format!("#ifndef {guard}\n#define {guard}\n\n");
    for k in kernels {
        let _ = writeln!(out, "{};", k.prototype);
    }
    out.push_str("\n#endif\n");
    out
}

/// Statement lines of the whole schedule in C style, for inspection.
pub fn c_body_lines(s: &Schedule) -> Vec<String> {
    let mut out = String::new();
    emit_items(s, &s.tree, 0, &mut out);
    out.lines().map(str::to_string).collect()
}
