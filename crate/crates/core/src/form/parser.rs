//! Line-oriented form-file parser.
//!
//! ```text
//! cell triangle coord_degree 1
//! space V lagrange 1
//! argument v test V
//! argument u trial V
//! coefficient kappa V
//! form a = cell integral kappa * dot(grad(u), grad(v))
//! L = cell_integral(kappa * v)
//! ```
//!
//! Newlines inside brackets do not end a statement. Besides the core
//! operators the expression language accepts `x`, `^` with a numeric
//! exponent, `sqrt exp ln sin cos tan`, list literals `[a, b]`, free-index
//! names inside `[..]`, `sum(i, e)` and `as_tensor(e, (i, j))`.

use std::collections::{BTreeSet, HashMap};

use super::ast::{self, Expr, FIndex, Kind, Side, Terminal};
use super::{ArgumentInfo, CoefficientInfo, IntegralSpec, IntegralType};
use crate::element::Cell;
use crate::error::{Error, Result};
use crate::gem::{Index, IndexGen, MathFn};

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Number(f64),
    Sym(char),
    Newline,
    Eof,
}

#[derive(Clone, Debug)]
struct Token {
    tok: Tok,
    line: usize,
    col: usize,
}

fn lex(src: &str) -> Result<Vec<Token>> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    for (ln, text) in src.lines().enumerate() {
        let line = ln + 1;
        let chars: Vec<char> = text.chars().collect();
        let mut k = 0;
        while k < chars.len() {
            let c = chars[k];
            let col = k + 1;
            if c == '#' {
                break;
            }
            if c.is_whitespace() {
                k += 1;
                continue;
            }
            if c.is_ascii_alphabetic() || c == '_' {
                let start = k;
                while k < chars.len() && (chars[k].is_ascii_alphanumeric() || chars[k] == '_') {
                    k += 1;
                }
                out.push(Token { tok: Tok::Ident(chars[start..k].iter().collect()), line, col });
                continue;
            }
            if c.is_ascii_digit() || (c == '.' && chars.get(k + 1).is_some_and(|d| d.is_ascii_digit())) {
                let start = k;
                while k < chars.len() && (chars[k].is_ascii_digit() || chars[k] == '.') {
                    k += 1;
                }
                if k < chars.len() && (chars[k] == 'e' || chars[k] == 'E') {
                    let mut m = k + 1;
                    if m < chars.len() && (chars[m] == '+' || chars[m] == '-') {
                        m += 1;
                    }
                    if m < chars.len() && chars[m].is_ascii_digit() {
                        k = m;
                        while k < chars.len() && chars[k].is_ascii_digit() {
                            k += 1;
                        }
                    }
                }
                let s: String = chars[start..k].iter().collect();
                let v: f64 = s
                    .parse()
                    .map_err(|_| Error::Syntax { line, col, msg: format!("malformed number `{s}`") })?;
                out.push(Token { tok: Tok::Number(v), line, col });
                continue;
            }
            match c {
                '(' | '[' => depth += 1,
                ')' | ']' => depth -= 1,
                '+' | '-' | '*' | '/' | '^' | ',' | '=' => {}
                _ => return Err(Error::Syntax { line, col, msg: format!("unexpected character `{c}`") }),
            }
            out.push(Token { tok: Tok::Sym(c), line, col });
            k += 1;
        }
        if depth <= 0 {
            depth = 0;
            out.push(Token { tok: Tok::Newline, line, col: chars.len() + 1 });
        }
    }
    let line = src.lines().count() + 1;
    out.push(Token { tok: Tok::Eof, line, col: 1 });
    Ok(out)
}

struct Decls {
    cell: Option<(Cell, usize)>,
    spaces: HashMap<String, usize>,
    arguments: HashMap<String, (usize, usize)>,
    coefficients: Vec<(String, usize)>,
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
    decls: Decls,
    ig: IndexGen,
    forms: Vec<(String, IntegralSpec)>,
    // Per-form state.
    index_names: HashMap<String, Index>,
}

/// Parses a form file into its named integrals.
pub fn parse(src: &str) -> Result<Vec<(String, IntegralSpec)>> {
    parse_with(src, IndexGen::new())
}

/// Parses with a caller-supplied index generator, shared by all forms.
pub fn parse_with(src: &str, ig: IndexGen) -> Result<Vec<(String, IntegralSpec)>> {
    let mut p = Parser {
        toks: lex(src)?,
        pos: 0,
        decls: Decls { cell: None, spaces: HashMap::new(), arguments: HashMap::new(), coefficients: Vec::new() },
        ig,
        forms: Vec::new(),
        index_names: HashMap::new(),
    };
    p.file()?;
    Ok(p.forms)
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.toks[self.pos]
    }

    fn peek_at(&self, k: usize) -> &Tok {
        &self.toks[(self.pos + k).min(self.toks.len() - 1)].tok
    }

    fn next(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        let t = self.peek();
        Err(Error::Syntax { line: t.line, col: t.col, msg: msg.into() })
    }

    fn describe(t: &Tok) -> String {
        match t {
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Number(v) => format!("number {v}"),
            Tok::Sym(c) => format!("`{c}`"),
            Tok::Newline => "end of line".into(),
            Tok::Eof => "end of input".into(),
        }
    }

    fn expect_sym(&mut self, c: char) -> Result<()> {
        if self.peek().tok == Tok::Sym(c) {
            self.next();
            Ok(())
        } else {
            self.err(format!("expected `{c}`, found {}", Self::describe(&self.peek().tok)))
        }
    }

    fn ident(&mut self) -> Result<String> {
        if let Tok::Ident(s) = &self.peek().tok {
            let s = s.clone();
            self.next();
            Ok(s)
        } else {
            self.err(format!("expected identifier, found {}", Self::describe(&self.peek().tok)))
        }
    }

    fn keyword(&mut self, kw: &str) -> Result<()> {
        match &self.peek().tok {
            Tok::Ident(s) if s == kw => {
                self.next();
                Ok(())
            }
            t => self.err(format!("expected `{kw}`, found {}", Self::describe(t))),
        }
    }

    fn uint(&mut self) -> Result<usize> {
        match self.peek().tok {
            Tok::Number(v) if v >= 0.0 && v.fract() == 0.0 => {
                self.next();
                Ok(v as usize)
            }
            ref t => self.err(format!("expected non-negative integer, found {}", Self::describe(t))),
        }
    }

    fn end_of_statement(&mut self) -> Result<()> {
        match self.peek().tok {
            Tok::Newline => {
                self.next();
                Ok(())
            }
            Tok::Eof => Ok(()),
            ref t => self.err(format!("expected end of line, found {}", Self::describe(t))),
        }
    }

    fn file(&mut self) -> Result<()> {
        loop {
            match self.peek().tok.clone() {
                Tok::Eof => return Ok(()),
                Tok::Newline => {
                    self.next();
                }
                Tok::Ident(kw) => {
                    match kw.as_str() {
                        "cell" if !matches!(self.peek_at(1), Tok::Sym('=')) => self.cell_decl()?,
                        "space" if !matches!(self.peek_at(1), Tok::Sym('=')) => self.space_decl()?,
                        "argument" if !matches!(self.peek_at(1), Tok::Sym('=')) => self.argument_decl()?,
                        "coefficient" if !matches!(self.peek_at(1), Tok::Sym('=')) => self.coefficient_decl()?,
                        "form" if !matches!(self.peek_at(1), Tok::Sym('=')) => {
                            self.next();
                            self.form_decl(false)?
                        }
                        _ => self.form_decl(true)?,
                    }
                    self.end_of_statement()?;
                }
                t => return self.err(format!("expected a declaration, found {}", Self::describe(&t))),
            }
        }
    }

    fn cell_decl(&mut self) -> Result<()> {
        self.next();
        let name_tok = self.peek().clone();
        let name = self.ident()?;
        let cell = Cell::from_name(&name).ok_or(Error::Syntax {
            line: name_tok.line,
            col: name_tok.col,
            msg: format!("unknown cell `{name}`"),
        })?;
        self.keyword("coord_degree")?;
        let deg_tok = self.peek().clone();
        let deg = self.uint()?;
        if !(1..=2).contains(&deg) {
            return Err(Error::Syntax { line: deg_tok.line, col: deg_tok.col, msg: "coord_degree must be 1 or 2".into() });
        }
        if self.decls.cell.is_some() {
            return Err(Error::Syntax { line: name_tok.line, col: name_tok.col, msg: "cell declared twice".into() });
        }
        self.decls.cell = Some((cell, deg));
        Ok(())
    }

    fn space_decl(&mut self) -> Result<()> {
        self.next();
        let name = self.ident()?;
        self.keyword("lagrange")?;
        let deg_tok = self.peek().clone();
        let deg = self.uint()?;
        if !(1..=2).contains(&deg) {
            return Err(Error::Syntax { line: deg_tok.line, col: deg_tok.col, msg: "lagrange degree must be 1 or 2".into() });
        }
        self.decls.spaces.insert(name, deg);
        Ok(())
    }

    fn space_ref(&mut self) -> Result<usize> {
        let t = self.peek().clone();
        let name = self.ident()?;
        self.decls
            .spaces
            .get(&name)
            .copied()
            .ok_or(Error::UnknownIdentifier { line: t.line, col: t.col, name })
    }

    fn argument_decl(&mut self) -> Result<()> {
        self.next();
        let name = self.ident()?;
        let role_tok = self.peek().clone();
        let role = self.ident()?;
        let number = match role.as_str() {
            "test" => 0,
            "trial" => 1,
            _ => {
                return Err(Error::Syntax {
                    line: role_tok.line,
                    col: role_tok.col,
                    msg: format!("expected `test` or `trial`, found `{role}`"),
                })
            }
        };
        let deg = self.space_ref()?;
        self.decls.arguments.insert(name, (number, deg));
        Ok(())
    }

    fn coefficient_decl(&mut self) -> Result<()> {
        self.next();
        let name = self.ident()?;
        let deg = self.space_ref()?;
        self.decls.coefficients.retain(|(n, _)| *n != name);
        self.decls.coefficients.push((name, deg));
        Ok(())
    }

    fn integral_type(&mut self, alias: bool) -> Result<IntegralType> {
        let t = self.peek().clone();
        let word = self.ident()?;
        let base = if alias {
            match word.strip_suffix("_integral") {
                Some(b) => b.to_string(),
                None => return Err(Error::Syntax { line: t.line, col: t.col, msg: format!("expected an integral, found `{word}`") }),
            }
        } else {
            word
        };
        let ty = match base.as_str() {
            "cell" => IntegralType::Cell,
            "exterior_facet" => IntegralType::ExteriorFacet,
            "interior_facet" => IntegralType::InteriorFacet,
            _ => return Err(Error::Syntax { line: t.line, col: t.col, msg: format!("unknown integral type `{base}`") }),
        };
        if !alias {
            self.keyword("integral")?;
        }
        Ok(ty)
    }

    fn form_decl(&mut self, alias: bool) -> Result<()> {
        let name_tok = self.peek().clone();
        let name = self.ident()?;
        self.expect_sym('=')?;
        let Some((cell, coord_degree)) = self.decls.cell else {
            return Err(Error::Syntax { line: name_tok.line, col: name_tok.col, msg: "form declared before `cell`".into() });
        };
        let ty = self.integral_type(alias)?;
        self.index_names.clear();
        let integrand = if alias {
            self.expect_sym('(')?;
            let e = self.expr()?;
            self.expect_sym(')')?;
            e
        } else {
            self.expr()?
        };
        if self.forms.iter().any(|(n, _)| *n == name) {
            return Err(Error::DuplicateKernel(name));
        }
        let spec = self.finish_form(&name, ty, integrand, cell, coord_degree)?;
        self.forms.push((name, spec));
        Ok(())
    }

    fn finish_form(&self, name: &str, ty: IntegralType, integrand: Expr, cell: Cell, coord_degree: usize) -> Result<IntegralSpec> {
        if !integrand.is_scalar() || !integrand.free.is_empty() {
            return Err(Error::Shape {
                kind: "integrand",
                detail: format!("integrand must be scalar with no free indices, got shape {:?}", integrand.shape),
            });
        }
        let nodes = ast::unique_nodes(&integrand);
        for n in &nodes {
            match &n.kind {
                Kind::Restricted(..) | Kind::Jump(..) | Kind::Avg(_) if ty != IntegralType::InteriorFacet => {
                    return Err(Error::Restriction(format!("`{name}`: restriction outside an interior-facet integral")))
                }
                Kind::Terminal(Terminal::FacetNormal) if ty == IntegralType::Cell => {
                    return Err(Error::Unsupported(format!("`{name}`: facet normal in a cell integral")))
                }
                _ => {}
            }
        }
        let used = ast::argument_set(&integrand, name)?.unwrap_or_default();
        let numbers: BTreeSet<usize> = used;
        if numbers.iter().enumerate().any(|(k, n)| k != *n) {
            return Err(Error::Nonlinear {
                form: name.to_string(),
                argument: "argument numbers must be dense from 0 (trial without test)".into(),
            });
        }
        let mut arguments = Vec::new();
        let mut coeff_names = BTreeSet::new();
        for n in &nodes {
            match &n.kind {
                Kind::Terminal(Terminal::Argument { number, name, degree }) if numbers.contains(number) => {
                    if !arguments.iter().any(|a: &ArgumentInfo| a.number == *number) {
                        arguments.push(ArgumentInfo { number: *number, name: name.clone(), degree: *degree });
                    }
                }
                Kind::Terminal(Terminal::Coefficient { name, .. }) => {
                    coeff_names.insert(name.clone());
                }
                _ => {}
            }
        }
        arguments.sort_by_key(|a| a.number);
        let coefficients = self
            .decls
            .coefficients
            .iter()
            .enumerate()
            .filter(|(_, (n, _))| coeff_names.contains(n))
            .map(|(number, (n, d))| CoefficientInfo { number, name: n.clone(), degree: *d })
            .collect();
        Ok(IntegralSpec {
            name: name.to_string(),
            integral_type: ty,
            integrand: integrand.clone(),
            physical: integrand,
            scale: None,
            cell,
            coord_degree,
            arguments,
            coefficients,
            indices: self.ig.clone(),
        })
    }

    fn gdim(&self) -> usize {
        self.decls.cell.map(|(c, _)| c.dim()).unwrap_or(1)
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            let t = self.peek().clone();
            match t.tok {
                Tok::Sym('+') => {
                    self.next();
                    let rhs = self.term()?;
                    lhs = ast::sum(&lhs, &rhs)?;
                }
                Tok::Sym('-') => {
                    self.next();
                    let rhs = self.term()?;
                    lhs = ast::sub(&self.ig, &lhs, &rhs)?;
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            let t = self.peek().clone();
            match t.tok {
                Tok::Sym('*') => {
                    self.next();
                    let rhs = self.unary()?;
                    lhs = ast::mul(&self.ig, &lhs, &rhs)?;
                }
                Tok::Sym('/') => {
                    self.next();
                    let rhs = self.unary()?;
                    lhs = ast::div(&self.ig, &lhs, &rhs)?;
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.peek().tok == Tok::Sym('-') {
            self.next();
            let e = self.unary()?;
            return ast::neg(&self.ig, &e);
        }
        if self.peek().tok == Tok::Sym('+') {
            self.next();
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.postfix()?;
        if self.peek().tok != Tok::Sym('^') {
            return Ok(base);
        }
        self.next();
        let mut sign = 1.0;
        if self.peek().tok == Tok::Sym('-') {
            self.next();
            sign = -1.0;
        }
        match self.peek().tok {
            Tok::Number(p) => {
                self.next();
                ast::power(&base, sign * p)
            }
            ref t => self.err(format!("exponent must be a number, found {}", Self::describe(t))),
        }
    }

    fn postfix(&mut self) -> Result<Expr> {
        let mut e = self.primary()?;
        while self.peek().tok == Tok::Sym('[') {
            self.next();
            let mut items = Vec::new();
            loop {
                let dim = e.shape.get(items.len()).copied();
                let t = self.peek().clone();
                let item = match &t.tok {
                    Tok::Number(v) if *v >= 0.0 && v.fract() == 0.0 => {
                        self.next();
                        FIndex::Fixed(*v as usize)
                    }
                    Tok::Ident(name) => {
                        self.next();
                        let Some(dim) = dim else {
                            return Err(Error::Syntax { line: t.line, col: t.col, msg: "too many indices".into() });
                        };
                        let idx = *self.index_names.entry(name.clone()).or_insert_with(|| self.ig.fresh(dim));
                        if idx.extent != dim {
                            return Err(Error::ExtentMismatch { index: name.clone(), expected: idx.extent, found: dim });
                        }
                        FIndex::Free(idx)
                    }
                    other => return self.err(format!("expected an index, found {}", Self::describe(other))),
                };
                items.push(item);
                if self.peek().tok == Tok::Sym(',') {
                    self.next();
                    continue;
                }
                break;
            }
            self.expect_sym(']')?;
            e = ast::index(&self.ig, &e, items)?;
        }
        Ok(e)
    }

    fn lookup_index(&self, t: &Token, name: &str) -> Result<Index> {
        self.index_names
            .get(name)
            .copied()
            .ok_or(Error::UnknownIdentifier { line: t.line, col: t.col, name: name.to_string() })
    }

    fn args(&mut self, n: std::ops::RangeInclusive<usize>, fname: &str) -> Result<Vec<Expr>> {
        self.expect_sym('(')?;
        let mut out = vec![self.expr()?];
        while self.peek().tok == Tok::Sym(',') {
            self.next();
            out.push(self.expr()?);
        }
        if !n.contains(&out.len()) {
            return self.err(format!("`{fname}` takes {} argument(s), got {}", n.start(), out.len()));
        }
        self.expect_sym(')')?;
        Ok(out)
    }

    fn primary(&mut self) -> Result<Expr> {
        let t = self.peek().clone();
        match t.tok.clone() {
            Tok::Number(v) => {
                self.next();
                Ok(ast::constant(v))
            }
            Tok::Sym('(') => {
                self.next();
                let e = self.expr()?;
                self.expect_sym(')')?;
                Ok(e)
            }
            Tok::Sym('[') => {
                self.next();
                let mut cs = vec![self.expr()?];
                while self.peek().tok == Tok::Sym(',') {
                    self.next();
                    cs.push(self.expr()?);
                }
                self.expect_sym(']')?;
                ast::list_tensor(cs)
            }
            Tok::Ident(name) => {
                self.next();
                if self.peek().tok == Tok::Sym('(') {
                    self.call(&t, &name)
                } else {
                    self.identifier(&t, &name)
                }
            }
            other => self.err(format!("expected an expression, found {}", Self::describe(&other))),
        }
    }

    fn identifier(&mut self, t: &Token, name: &str) -> Result<Expr> {
        let gdim = self.gdim();
        if let Some((number, degree)) = self.decls.arguments.get(name) {
            return Ok(ast::terminal(
                Terminal::Argument { number: *number, name: name.to_string(), degree: *degree },
                vec![],
            ));
        }
        if let Some(k) = self.decls.coefficients.iter().position(|(n, _)| n == name) {
            let degree = self.decls.coefficients[k].1;
            return Ok(ast::terminal(Terminal::Coefficient { number: k, name: name.to_string(), degree }, vec![]));
        }
        match name {
            "x" => Ok(ast::terminal(Terminal::SpatialCoordinate, vec![gdim])),
            "n" => Ok(ast::terminal(Terminal::FacetNormal, vec![gdim])),
            _ => Err(Error::UnknownIdentifier { line: t.line, col: t.col, name: name.to_string() }),
        }
    }

    fn call(&mut self, t: &Token, name: &str) -> Result<Expr> {
        let gdim = self.gdim();
        if let Some(f) = MathFn::from_name(name) {
            let a = self.args(1..=1, name)?;
            return ast::math(f, &a[0]);
        }
        match name {
            "sum" => {
                self.expect_sym('(')?;
                let it = self.peek().clone();
                let iname = self.ident()?;
                self.expect_sym(',')?;
                let e = self.expr()?;
                self.expect_sym(')')?;
                let i = self.lookup_index(&it, &iname)?;
                ast::index_sum(&e, i)
            }
            "as_tensor" => {
                self.expect_sym('(')?;
                let e = self.expr()?;
                self.expect_sym(',')?;
                let paren = self.peek().tok == Tok::Sym('(');
                if paren {
                    self.next();
                }
                let mut ii = Vec::new();
                loop {
                    let it = self.peek().clone();
                    let iname = self.ident()?;
                    ii.push(self.lookup_index(&it, &iname)?);
                    if self.peek().tok == Tok::Sym(',') {
                        self.next();
                        continue;
                    }
                    break;
                }
                if paren {
                    self.expect_sym(')')?;
                }
                self.expect_sym(')')?;
                ast::component_tensor(&e, ii)
            }
            "dot" | "inner" | "outer" => {
                let a = self.args(2..=2, name)?;
                match name {
                    "dot" => ast::dot(&a[0], &a[1]),
                    "inner" => ast::inner(&a[0], &a[1]),
                    _ => ast::outer(&a[0], &a[1]),
                }
            }
            "jump" => {
                let a = self.args(1..=2, name)?;
                ast::jump(&a[0], a.get(1))
            }
            "grad" | "avg" | "det" | "inv" | "pos" | "neg" => {
                let a = self.args(1..=1, name)?;
                match name {
                    "grad" => ast::grad(&a[0], gdim),
                    "avg" => ast::avg(&a[0]),
                    "det" => ast::determinant(&a[0]),
                    "inv" => ast::inverse(&a[0]),
                    "pos" => ast::restricted(Side::Plus, &a[0]),
                    _ => ast::restricted(Side::Minus, &a[0]),
                }
            }
            _ => Err(Error::UnknownIdentifier { line: t.line, col: t.col, name: name.to_string() }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEAT: &str = "\
# stationary heat equation
cell triangle coord_degree 1
space V lagrange 1
argument v test V
argument u trial V
coefficient kappa V
coefficient f V
a = cell_integral(kappa * dot(grad(u), grad(v)))
form L = cell integral f * v
";

    #[test]
    fn heat_equation_forms() {
        let forms = parse(HEAT).unwrap();
        assert_eq!(forms.len(), 2);
        let (name, a) = &forms[0];
        assert_eq!(name, "a");
        assert_eq!(a.integral_type, IntegralType::Cell);
        assert_eq!(a.arguments.len(), 2);
        assert_eq!(a.coefficients.len(), 1);
        assert_eq!(a.coefficients[0].name, "kappa");
        let (_, l) = &forms[1];
        assert_eq!(l.arguments.len(), 1);
        assert_eq!(l.arguments[0].number, 0);
    }

    #[test]
    fn undeclared_trial_is_unknown_identifier() {
        let src = "cell triangle coord_degree 1\nspace V lagrange 1\nargument v test V\nm = cell_integral(u * v)\n";
        match parse(src) {
            Err(Error::UnknownIdentifier { line, col, name }) => {
                assert_eq!((line, col, name.as_str()), (4, 19, "u"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn syntax_error_position() {
        let src = "cell triangle coord_degree 1\nspace V lagrange 1\nargument v test V\nform L = cell integral v * * v\n";
        match parse(src) {
            Err(Error::Syntax { line, col, .. }) => assert_eq!((line, col), (4, 28)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nonlinear_forms_rejected() {
        let base = "cell triangle coord_degree 1\nspace V lagrange 1\nargument v test V\nargument u trial V\n";
        for body in ["v * v", "sin(u) * v", "f / u * v", "u ^ 2 * v", "u * v + v"] {
            let src = format!("{base}coefficient f V\nform a = cell integral {body}\n");
            assert!(matches!(parse(&src), Err(Error::Nonlinear { .. })), "{body}");
        }
        let src = format!("{base}form a = cell integral u\n");
        assert!(matches!(parse(&src), Err(Error::Nonlinear { .. })));
    }

    #[test]
    fn indices_and_multiline() {
        let src = "cell triangle coord_degree 1\nspace V lagrange 1\nargument v test V\nargument u trial V\n\
form a = cell integral (grad(u)[i] *\n    grad(v)[i]) + as_tensor(grad(u)[j], (j))[0] * v\n";
        let forms = parse(src).unwrap();
        assert_eq!(forms[0].1.arguments.len(), 2);
    }

    #[test]
    fn implicit_summation_conflicts_with_explicit_sum() {
        let src = "cell triangle coord_degree 1\nspace V lagrange 1\nargument v test V\nargument u trial V\n\
form a = cell integral sum(i, grad(u)[i] * grad(v)[i])\n";
        assert!(matches!(parse(src), Err(Error::IndexNotFree { .. })));
    }

    #[test]
    fn restriction_outside_interior_facet() {
        let src = "cell triangle coord_degree 1\nspace V lagrange 1\nargument v test V\nform L = cell integral pos(v)\n";
        assert!(matches!(parse(src), Err(Error::Restriction(_))));
        let src = "cell triangle coord_degree 1\nspace V lagrange 1\nargument v test V\nform L = cell integral n[0] * v\n";
        assert!(matches!(parse(src), Err(Error::Unsupported(_))));
    }

    #[test]
    fn shape_errors_surface() {
        let src = "cell triangle coord_degree 1\nspace V lagrange 1\nargument v test V\nform L = cell integral grad(v) + v\n";
        assert!(matches!(parse(src), Err(Error::Shape { .. })));
    }
}
