//! Second stage, front half: GEM to a fused loop schedule.
//!
//! ComponentTensors are beta-reduced away, short IndexSums are optionally
//! unrolled, temporaries are selected and each gets one or two perfect loop
//! nests. Nests are topologically sorted with a fusion-seeking heuristic,
//! fused greedily and temporaries lose the leading dimensions their fused
//! loops make redundant.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};

use crate::error::{Error, Result};
use crate::gem::{fmt_scalar, traverse_unique, Gem, Index, IndexItem, IndexNames, NodeId, Op};
use crate::lowering::{KernelSignature, LoweredKernel};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScheduleOptions {
    /// Unroll IndexSums with extent at most this; `None` disables.
    pub unroll_threshold: Option<usize>,
    /// Plain first-in first-out topological order instead of the heuristic.
    pub fifo: bool,
}

impl Default for ScheduleOptions {
    fn default() -> Self {
        ScheduleOptions { unroll_threshold: Some(3), fifo: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Statement {
    /// `t[..] = 0`
    Init,
    /// `t[..] += summand`
    Accumulate(NodeId),
    /// `t[..] = node`
    Assign(NodeId),
    /// `t[.., c..] = entries of the ListTensor`
    ListAssign(NodeId),
}

#[derive(Clone, Debug)]
pub struct LoopNest {
    pub indices: Vec<Index>,
    pub temp: usize,
    pub statement: Statement,
    /// Temporaries read by the statement.
    pub reads: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Temporary {
    pub name: String,
    pub node: NodeId,
    /// Free indices in global order.
    pub indices: Vec<Index>,
    /// Component shape of ListTensor temporaries.
    pub shape: Vec<usize>,
    /// Leading indices removed by shape reduction.
    pub dropped: usize,
    pub output: bool,
}

impl Temporary {
    pub fn kept(&self) -> &[Index] {
        &self.indices[self.dropped..]
    }

    /// Scalar storage before shape reduction.
    pub fn full_size(&self) -> usize {
        self.indices.iter().map(|i| i.extent).product::<usize>() * self.shape.iter().product::<usize>()
    }

    /// Scalar storage after shape reduction.
    pub fn size(&self) -> usize {
        self.kept().iter().map(|i| i.extent).product::<usize>() * self.shape.iter().product::<usize>()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LoopTree {
    Loop { index: Index, body: Vec<LoopTree> },
    Nest(usize),
}

#[derive(Debug)]
pub struct Schedule {
    pub signature: Option<KernelSignature>,
    pub gem: Gem,
    /// Root after elimination and unrolling.
    pub root: NodeId,
    pub quadrature: Option<Index>,
    pub arguments: Vec<Index>,
    pub index_order: Vec<Index>,
    pub names: IndexNames,
    pub temporaries: Vec<Temporary>,
    /// Nests in build order.
    pub nests: Vec<LoopNest>,
    /// Topological order of `nests`.
    pub order: Vec<usize>,
    pub tree: Vec<LoopTree>,
    /// Non-scalar Literal nodes in order of first use.
    pub tables: Vec<NodeId>,
}

/// Beta-reduces `Indexed(ComponentTensor(e, a), b)` to `e[a -> b]`.
pub fn eliminate_component_tensors(gem: &mut Gem, root: NodeId) -> Result<NodeId> {
    let mut map: HashMap<NodeId, NodeId> = HashMap::new();
    for n in traverse_unique(gem, root) {
        let ch: Vec<NodeId> = gem.children(n).iter().map(|c| map[c]).collect();
        let r = match gem.op(n).clone() {
            Op::Indexed(_, items) => match gem.op(ch[0]).clone() {
                Op::ComponentTensor(e, alpha) => {
                    let m: HashMap<Index, IndexItem> = alpha.into_iter().zip(items).collect();
                    gem.substitute_indices(e, &m)?
                }
                _ => gem.rebuild(n, &ch)?,
            },
            _ => gem.rebuild(n, &ch)?,
        };
        map.insert(n, r);
    }
    Ok(map[&root])
}

/// Expands IndexSums of extent at most `threshold` into explicit Sums,
/// leaving the `exempt` indices alone.
pub fn unroll_index_sums(gem: &mut Gem, root: NodeId, threshold: usize, exempt: &[Index]) -> Result<NodeId> {
    let mut map: HashMap<NodeId, NodeId> = HashMap::new();
    for n in traverse_unique(gem, root) {
        let ch: Vec<NodeId> = gem.children(n).iter().map(|c| map[c]).collect();
        let r = match gem.op(n).clone() {
            Op::IndexSum(_, i) if i.extent <= threshold && !exempt.contains(&i) => {
                let mut acc = gem.zero(vec![]);
                for v in 0..i.extent {
                    let term = gem.substitute_indices(ch[0], &HashMap::from([(i, IndexItem::Fixed(v))]))?;
                    acc = gem.sum(acc, term)?;
                }
                acc
            }
            _ => gem.rebuild(n, &ch)?,
        };
        map.insert(n, r);
    }
    Ok(map[&root])
}

fn parents(gem: &Gem, root: NodeId) -> HashMap<NodeId, Vec<NodeId>> {
    let mut p: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
    for n in traverse_unique(gem, root) {
        p.entry(n).or_default();
        for c in gem.children(n) {
            p.entry(c).or_default().push(n);
        }
    }
    p
}

fn same_set(a: &[Index], b: &[Index]) -> bool {
    a.len() == b.len() && a.iter().all(|i| b.contains(i))
}

/// Nodes that get their own temporary, in traversal order. Terminals and
/// Indexed nodes never do. A single operation on atomic operands is cheap
/// enough to recompute and is exempt from the free-index criterion.
pub fn select_temporaries(gem: &Gem, root: NodeId) -> Vec<NodeId> {
    let par = parents(gem, root);
    let mut selected: HashSet<NodeId> = HashSet::new();
    let atomic = |c: NodeId| {
        let op = gem.op(c);
        op.is_terminal()
            || matches!(op, Op::Indexed(..) | Op::IndexSum(..) | Op::ListTensor(..))
            || par[&c].len() > 1
    };
    let mut out = Vec::new();
    for n in traverse_unique(gem, root) {
        let op = gem.op(n);
        let pick = if n == root {
            true
        } else if op.is_terminal() || matches!(op, Op::Indexed(..)) || is_negated_leaf(gem, n) {
            false
        } else if matches!(op, Op::IndexSum(..)) {
            true
        } else if matches!(op, Op::ListTensor(..)) {
            par[&n].iter().any(|p| !matches!(gem.op(*p), Op::ListTensor(..)))
        } else if par[&n].len() > 1 {
            true
        } else {
            let p = par[&n][0];
            match gem.op(p) {
                Op::ListTensor(..) | Op::IndexSum(..) => false,
                _ => !same_set(gem.free(n), gem.free(p)) && !op.children().into_iter().all(atomic),
            }
        };
        if pick && selected.insert(n) {
            out.push(n);
        }
    }
    out
}

/// `-x` for a terminal or Indexed `x`, which renders inline as a subtraction.
fn is_negated_leaf(gem: &Gem, n: NodeId) -> bool {
    match gem.op(n) {
        Op::Product(m, x) => {
            gem.scalar_value(*m) == Some(-1.0) && (gem.op(*x).is_terminal() || matches!(gem.op(*x), Op::Indexed(..)))
        }
        _ => false,
    }
}

/// Global loop order: quadrature, arguments, then summed indices in
/// post-order of their IndexSums, then any remaining free indices.
pub fn global_index_order(gem: &Gem, root: NodeId, quadrature: Option<Index>, arguments: &[Index]) -> Vec<Index> {
    let mut order: Vec<Index> = quadrature.into_iter().chain(arguments.iter().copied()).collect();
    let nodes = traverse_unique(gem, root);
    for n in &nodes {
        if let Op::IndexSum(_, i) = gem.op(*n) {
            if !order.contains(i) {
                order.push(*i);
            }
        }
    }
    for n in &nodes {
        for i in gem.free(*n) {
            if !order.contains(i) {
                order.push(*i);
            }
        }
    }
    order
}

fn sorted_by(order: &[Index], set: &[Index]) -> Vec<Index> {
    let mut v = set.to_vec();
    v.sort_by_key(|i| order.iter().position(|x| x == i).unwrap_or(usize::MAX));
    v
}

/// Temporaries referenced by the expression rooted at `n`. The defining
/// node itself (`own`) and nested ListTensor structure are looked through.
fn expr_reads(gem: &Gem, n: NodeId, own: Option<NodeId>, temp_of: &HashMap<NodeId, usize>, out: &mut Vec<usize>, seen: &mut HashSet<NodeId>) {
    if !seen.insert(n) {
        return;
    }
    if Some(n) != own {
        if let Some(t) = temp_of.get(&n) {
            if !out.contains(t) {
                out.push(*t);
            }
            return;
        }
    }
    let nested_lt = matches!(gem.op(n), Op::ListTensor(..)) && Some(n) == own;
    for c in gem.children(n) {
        let own = if nested_lt && matches!(gem.op(c), Op::ListTensor(..)) { Some(c) } else { None };
        expr_reads(gem, c, own, temp_of, out, seen);
    }
}

fn lt_shape(gem: &Gem, n: NodeId) -> Vec<usize> {
    if matches!(gem.op(n), Op::ListTensor(..)) {
        gem.shape(n).to_vec()
    } else {
        vec![]
    }
}

/// Builds init/accumulate, assign or list-assign nests for every
/// temporary by a depth-first walk from the root: contraction reads first,
/// then ListTensor reads, then the temporary's own init, then other reads.
/// Loop indices are left unordered (summed index first).
pub fn build_loop_nests(gem: &Gem, root: NodeId, temps: &[NodeId], order: &[Index]) -> (Vec<Temporary>, Vec<LoopNest>) {
    let temp_of: HashMap<NodeId, usize> = temps.iter().enumerate().map(|(k, n)| (*n, k)).collect();
    let temporaries: Vec<Temporary> = temps
        .iter()
        .map(|n| Temporary {
            name: String::new(),
            node: *n,
            indices: sorted_by(order, gem.free(*n)),
            shape: lt_shape(gem, *n),
            dropped: 0,
            output: *n == root,
        })
        .collect();
    let reads: Vec<Vec<usize>> = temps
        .iter()
        .map(|n| {
            let mut out = Vec::new();
            let start = match gem.op(*n) {
                Op::IndexSum(c, _) => (*c, None),
                _ => (*n, Some(*n)),
            };
            expr_reads(gem, start.0, start.1, &temp_of, &mut out, &mut HashSet::new());
            out
        })
        .collect();
    struct Builder<'a> {
        gem: &'a Gem,
        temps: &'a [NodeId],
        reads: &'a [Vec<usize>],
        visited: Vec<bool>,
        nests: Vec<LoopNest>,
    }
    impl Builder<'_> {
        fn visit(&mut self, t: usize) {
            if self.visited[t] {
                return;
            }
            self.visited[t] = true;
            let gem = self.gem;
            let n = self.temps[t];
            let mut rs = self.reads[t].clone();
            rs.sort_by_key(|r| self.temps[*r]);
            let kind = |r: &usize| match gem.op(self.temps[*r]) {
                Op::IndexSum(..) => 0,
                Op::ListTensor(..) => 1,
                _ => 2,
            };
            for r in rs.iter().filter(|r| kind(r) == 0) {
                self.visit(*r);
            }
            for r in rs.iter().filter(|r| kind(r) == 1) {
                self.visit(*r);
            }
            let free = gem.free(n).to_vec();
            if let Op::IndexSum(..) = gem.op(n) {
                self.nests.push(LoopNest { indices: free.clone(), temp: t, statement: Statement::Init, reads: vec![] });
            }
            for r in rs.iter().filter(|r| kind(r) == 2) {
                self.visit(*r);
            }
            let nest = match gem.op(n) {
                Op::IndexSum(c, i) => {
                    let mut idx = vec![*i];
                    idx.extend(free);
                    LoopNest { indices: idx, temp: t, statement: Statement::Accumulate(*c), reads: self.reads[t].clone() }
                }
                Op::ListTensor(..) => {
                    LoopNest { indices: free, temp: t, statement: Statement::ListAssign(n), reads: self.reads[t].clone() }
                }
                Op::Zero { .. } => LoopNest { indices: free, temp: t, statement: Statement::Init, reads: vec![] },
                _ => LoopNest { indices: free, temp: t, statement: Statement::Assign(n), reads: self.reads[t].clone() },
            };
            self.nests.push(nest);
        }
    }
    let mut b = Builder { gem, temps, reads: &reads, visited: vec![false; temps.len()], nests: Vec::new() };
    if let Some(r) = temp_of.get(&root) {
        b.visit(*r);
    }
    for t in 0..temps.len() {
        b.visit(t);
    }
    (temporaries, b.nests)
}

/// Sorts each nest's loops by the global index order.
pub fn order_indices(nests: &mut [LoopNest], order: &[Index]) {
    for n in nests {
        n.indices = sorted_by(order, &n.indices);
    }
}

/// For each nest, the nests whose results it needs.
pub fn dependencies(nests: &[LoopNest]) -> Vec<Vec<usize>> {
    let mut writers: HashMap<usize, Vec<usize>> = HashMap::new();
    for (k, n) in nests.iter().enumerate() {
        writers.entry(n.temp).or_default().push(k);
    }
    nests
        .iter()
        .enumerate()
        .map(|(k, n)| {
            let mut d: BTreeSet<usize> = n.reads.iter().flat_map(|t| writers[t].iter().copied()).collect();
            if let Statement::Accumulate(_) = n.statement {
                d.extend(writers[&n.temp].iter().copied().filter(|w| *w != k));
            }
            d.into_iter().collect()
        })
        .collect()
}

fn lcp(a: &[Index], b: &[Index]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

/// Topological order of the nests. The heuristic runs Kahn's algorithm
/// from the consumers backwards, each time taking the ready nest sharing
/// the longest loop prefix with the previous choice, preferring an exact
/// match and then the latest-built nest. FIFO is forward Kahn with a queue.
pub fn toposort_nests(nests: &[LoopNest], fifo: bool) -> Result<Vec<usize>> {
    let deps = dependencies(nests);
    let n = nests.len();
    let mut out = Vec::with_capacity(n);
    if fifo {
        let mut indeg: Vec<usize> = deps.iter().map(|d| d.len()).collect();
        let mut users: Vec<Vec<usize>> = vec![vec![]; n];
        for (u, d) in deps.iter().enumerate() {
            for v in d {
                users[*v].push(u);
            }
        }
        let mut queue: VecDeque<usize> = (0..n).filter(|u| indeg[*u] == 0).collect();
        while let Some(u) = queue.pop_front() {
            out.push(u);
            for w in &users[u] {
                indeg[*w] -= 1;
                if indeg[*w] == 0 {
                    queue.push_back(*w);
                }
            }
        }
    } else {
        let mut count = vec![0usize; n];
        for d in &deps {
            for v in d {
                count[*v] += 1;
            }
        }
        let mut ready: BTreeSet<usize> = (0..n).filter(|u| count[*u] == 0).collect();
        let mut cursor: Vec<Index> = Vec::new();
        while !ready.is_empty() {
            let u = *ready
                .iter()
                .max_by_key(|u| {
                    let idx = &nests[**u].indices;
                    (lcp(&cursor, idx), *idx == cursor, **u)
                })
                .unwrap();
            ready.remove(&u);
            cursor = nests[u].indices.clone();
            out.push(u);
            for v in &deps[u] {
                count[*v] -= 1;
                if count[*v] == 0 {
                    ready.insert(*v);
                }
            }
        }
        out.reverse();
    }
    if out.len() != n {
        return Err(Error::Cycle);
    }
    Ok(out)
}

/// Greedy maximal fusion of consecutive nests followed by shape reduction.
/// A nest does not join a loop over an index that is summed by a
/// contraction whose temporary it reads and which is still open.
pub fn fuse(nests: &[LoopNest], order: &[usize], temps: &mut [Temporary]) -> Vec<LoopTree> {
    enum Node {
        Loop(Index, Vec<usize>),
        Nest(usize),
    }
    let mut arena: Vec<Node> = Vec::new();
    let mut written: Vec<HashSet<usize>> = Vec::new();
    let mut top: Vec<usize> = Vec::new();
    let mut path: Vec<usize> = Vec::new();
    let mut site_paths: HashMap<usize, Vec<Vec<usize>>> = HashMap::new();
    let index_of = |arena: &Vec<Node>, id: usize| match &arena[id] {
        Node::Loop(i, _) => *i,
        Node::Nest(_) => unreachable!(),
    };
    for &k in order {
        let nest = &nests[k];
        let open: Vec<Index> = path.iter().map(|p| index_of(&arena, *p)).collect();
        let mut common = lcp(&open, &nest.indices);
        for (l, p) in path.iter().enumerate().take(common) {
            let x = open[l];
            if nest.reads.iter().any(|t| written[*p].contains(t) && !temps[*t].indices.contains(&x)) {
                common = l;
                break;
            }
        }
        path.truncate(common);
        for x in &nest.indices[common..] {
            let id = arena.len();
            arena.push(Node::Loop(*x, vec![]));
            written.push(HashSet::new());
            match path.last() {
                Some(p) => {
                    if let Node::Loop(_, body) = &mut arena[*p] {
                        body.push(id)
                    }
                }
                None => top.push(id),
            }
            path.push(id);
        }
        let id = arena.len();
        arena.push(Node::Nest(k));
        written.push(HashSet::new());
        match path.last() {
            Some(p) => {
                if let Node::Loop(_, body) = &mut arena[*p] {
                    body.push(id)
                }
            }
            None => top.push(id),
        }
        for p in &path {
            written[*p].insert(nest.temp);
        }
        for t in nest.reads.iter().chain(std::iter::once(&nest.temp)) {
            site_paths.entry(*t).or_default().push(path.clone());
        }
    }
    for (t, temp) in temps.iter_mut().enumerate() {
        if temp.output {
            continue;
        }
        let Some(paths) = site_paths.get(&t) else { continue };
        let common = paths.iter().skip(1).fold(paths[0].len(), |acc, p| acc.min(lcp_ids(&paths[0], p)));
        let loops: Vec<Index> = paths[0][..common].iter().map(|p| index_of(&arena, *p)).collect();
        temp.dropped = temp.indices.iter().take_while(|i| loops.contains(i)).count();
    }
    fn convert(arena: &[Node], id: usize) -> LoopTree {
        match &arena[id] {
            Node::Loop(i, body) => LoopTree::Loop { index: *i, body: body.iter().map(|b| convert(arena, *b)).collect() },
            Node::Nest(k) => LoopTree::Nest(*k),
        }
    }
    top.iter().map(|id| convert(&arena, *id)).collect()
}

fn lcp_ids(a: &[usize], b: &[usize]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

impl Schedule {
    /// Schedules a lowered kernel.
    pub fn from_kernel(kernel: LoweredKernel, opts: &ScheduleOptions) -> Result<Schedule> {
        let q = kernel.signature.quadrature_index;
        let args = kernel.signature.argument_indices.clone();
        let mut s = Schedule::build(kernel.gem, kernel.root, Some(q), &args, opts)?;
        s.signature = Some(kernel.signature);
        Ok(s)
    }

    /// Schedules an arbitrary scalar-shaped GEM expression.
    pub fn build(mut gem: Gem, root: NodeId, quadrature: Option<Index>, arguments: &[Index], opts: &ScheduleOptions) -> Result<Schedule> {
        let mut root = eliminate_component_tensors(&mut gem, root)?;
        if let Some(th) = opts.unroll_threshold {
            let exempt: Vec<Index> = quadrature.into_iter().collect();
            root = unroll_index_sums(&mut gem, root, th, &exempt)?;
        }
        if !gem.shape(root).is_empty() {
            return Err(Error::Shape { kind: "Schedule", detail: "root must be scalar-shaped".into() });
        }
        let index_order = global_index_order(&gem, root, quadrature, arguments);
        let temps = select_temporaries(&gem, root);
        let (mut temporaries, mut nests) = build_loop_nests(&gem, root, &temps, &index_order);
        order_indices(&mut nests, &index_order);
        let order = toposort_nests(&nests, opts.fifo)?;
        let tree = fuse(&nests, &order, &mut temporaries);
        let mut names = IndexNames::new(quadrature, arguments);
        for i in &index_order {
            names.name(*i);
        }
        let mut counter = 0;
        for k in &order {
            let t = &mut temporaries[nests[*k].temp];
            if t.name.is_empty() {
                t.name = if t.output {
                    "A".to_string()
                } else {
                    counter += 1;
                    format!("t{}", counter - 1)
                };
            }
        }
        let mut s = Schedule {
            signature: None,
            gem,
            root,
            quadrature,
            arguments: arguments.to_vec(),
            index_order,
            names,
            temporaries,
            nests,
            order,
            tree,
            tables: vec![],
        };
        s.tables = s.collect_tables();
        Ok(s)
    }

    fn statement_roots(&self, nest: &LoopNest) -> Vec<NodeId> {
        match nest.statement {
            Statement::Init => vec![],
            Statement::Accumulate(e) => vec![e],
            Statement::Assign(n) => self.gem.children(n),
            Statement::ListAssign(n) => self.list_leaves(n),
        }
    }

    /// Scalar entries of a (nested) ListTensor in row-major order.
    pub fn list_leaves(&self, n: NodeId) -> Vec<NodeId> {
        match self.gem.op(n) {
            Op::ListTensor(cs) => cs.iter().flat_map(|c| self.list_leaves(*c)).collect(),
            _ => vec![n],
        }
    }

    fn collect_tables(&self) -> Vec<NodeId> {
        let temp_nodes: HashSet<NodeId> = self.temporaries.iter().map(|t| t.node).collect();
        let mut out = Vec::new();
        let mut seen = HashSet::new();
        for k in &self.order {
            for r in self.statement_roots(&self.nests[*k]) {
                let mut stack = vec![r];
                while let Some(n) = stack.pop() {
                    if !seen.insert(n) {
                        continue;
                    }
                    if n != r && temp_nodes.contains(&n) {
                        continue;
                    }
                    if let Op::Literal { shape, .. } = self.gem.op(n) {
                        if !shape.is_empty() {
                            out.push(n);
                        }
                    }
                    let mut ch = self.gem.children(n);
                    ch.reverse();
                    stack.extend(ch);
                }
            }
        }
        out
    }

    pub fn temp_of(&self, node: NodeId) -> Option<usize> {
        self.temporaries.iter().position(|t| t.node == node)
    }

    pub fn output(&self) -> Option<&Temporary> {
        self.temporaries.iter().find(|t| t.output)
    }

    /// Scalar storage of all non-output temporaries before fusion.
    pub fn storage_before(&self) -> usize {
        self.temporaries.iter().filter(|t| !t.output).map(|t| t.full_size()).sum()
    }

    /// Scalar storage of all non-output temporaries after shape reduction.
    pub fn storage_after(&self) -> usize {
        self.temporaries.iter().filter(|t| !t.output).map(|t| t.size()).sum()
    }

    /// Checks that every temporary is completely defined before it is read,
    /// walking the fused loop tree in execution order.
    pub fn check_topological(&self) -> Result<()> {
        let mut done: HashSet<usize> = HashSet::new();
        let writers: Vec<usize> = self.nests.iter().map(|n| n.temp).collect();
        let mut remaining: HashMap<usize, usize> = HashMap::new();
        for t in &writers {
            *remaining.entry(*t).or_insert(0) += 1;
        }
        let mut seq = Vec::new();
        flatten(&self.tree, &mut seq);
        if seq.len() != self.nests.len() {
            return Err(Error::Cycle);
        }
        for k in seq {
            let nest = &self.nests[k];
            if nest.reads.iter().any(|t| !done.contains(t)) {
                return Err(Error::Cycle);
            }
            let r = remaining.get_mut(&nest.temp).unwrap();
            *r -= 1;
            if *r == 0 {
                done.insert(nest.temp);
            }
        }
        Ok(())
    }

    /// Renders a scalar expression. Temporaries other than `own` are read
    /// back from storage.
    pub fn render(&self, n: NodeId, own: Option<NodeId>, style: Style) -> String {
        self.render_prec(n, own, style, false).0
    }

    fn index_text(&self, item: &IndexItem, style: Style) -> String {
        match (item, style) {
            (IndexItem::Variable(v), Style::C) => {
                let side = v.name.strip_prefix("facet_").unwrap_or("0");
                format!("facet[{side}]")
            }
            _ => self.names.item(item),
        }
    }

    fn subscript(&self, items: &[String], style: Style) -> String {
        if items.is_empty() {
            return String::new();
        }
        match style {
            Style::Pseudo => format!("[{}]", items.join(",")),
            Style::C => items.iter().map(|s| format!("[{s}]")).collect(),
        }
    }

    /// Access text for temporary `t` with extra component items.
    pub fn temp_access(&self, t: usize, extra: &[String], style: Style) -> String {
        self.access(t, extra, style, false)
    }

    fn access(&self, t: usize, extra: &[String], style: Style, full: bool) -> String {
        let temp = &self.temporaries[t];
        if temp.output {
            if let (Style::C, Some(sig)) = (style, &self.signature) {
                let mut flat = String::new();
                for (a, i) in temp.indices.iter().enumerate() {
                    let idx = self.names.get(*i);
                    let term = if sig.output_offsets[a] == 0 { idx } else { format!("({idx} + {})", sig.output_offsets[a]) };
                    flat = if a == 0 { term } else { format!("{flat} * {} + {term}", sig.output_shape[a]) };
                }
                return if flat.is_empty() { "A[0]".into() } else { format!("A[{flat}]") };
            }
        }
        let kept = if full { &temp.indices[..] } else { temp.kept() };
        let mut items: Vec<String> = kept.iter().map(|i| self.names.get(*i)).collect();
        items.extend(extra.iter().cloned());
        format!("{}{}", temp.name, self.subscript(&items, style))
    }

    fn render_prec(&self, n: NodeId, own: Option<NodeId>, style: Style, full: bool) -> (String, u8) {
        const ATOM: u8 = 9;
        if Some(n) != own {
            if let Some(t) = self.temp_of(n) {
                return (self.access(t, &[], style, full), ATOM);
            }
        }
        let gem = &self.gem;
        let sub = |c: NodeId| self.render_prec(c, None, style, full);
        let wrap = |(s, p): (String, u8), min: u8| if p < min { format!("({s})") } else { s };
        let c_math = |name: &str, args: &[String]| format!("{name}({})", args.join(", "));
        match gem.op(n) {
            Op::Literal { shape, bits } if shape.is_empty() => {
                let v = f64::from_bits(bits[0]);
                (fmt_scalar(v), if v < 0.0 { 3 } else { ATOM })
            }
            Op::Literal { .. } => {
                let k = self.tables.iter().position(|t| *t == n).unwrap_or(usize::MAX);
                (format!("T{k}"), ATOM)
            }
            Op::Zero { .. } => ("0.0".into(), ATOM),
            Op::Identity { .. } => ("I".into(), ATOM),
            Op::Variable { name, .. } => (name.clone(), ATOM),
            Op::Sum(a, b) => {
                if let Op::Product(m, x) = gem.op(*b) {
                    if gem.scalar_value(*m) == Some(-1.0) {
                        return (format!("{} - {}", wrap(sub(*a), 1), wrap(sub(*x), 2)), 1);
                    }
                }
                (format!("{} + {}", wrap(sub(*a), 1), wrap(sub(*b), 1)), 1)
            }
            Op::Product(a, b) => {
                if gem.scalar_value(*a) == Some(-1.0) {
                    return (format!("-{}", wrap(sub(*b), 3)), 3);
                }
                (format!("{} * {}", wrap(sub(*a), 2), wrap(sub(*b), 3)), 2)
            }
            Op::Division(a, b) => (format!("{} / {}", wrap(sub(*a), 2), wrap(sub(*b), 3)), 2),
            Op::Power(a, b) => (c_math("pow", &[sub(*a).0, sub(*b).0]), ATOM),
            Op::MinValue(a, b) => (c_math("fmin", &[sub(*a).0, sub(*b).0]), ATOM),
            Op::MaxValue(a, b) => (c_math("fmax", &[sub(*a).0, sub(*b).0]), ATOM),
            Op::MathFunction(f, a) => {
                let name = if style == Style::C { f.c_name() } else { f.name() };
                (c_math(name, &[sub(*a).0]), ATOM)
            }
            Op::Comparison(c, a, b) => (format!("{} {} {}", wrap(sub(*a), 1), c.symbol(), wrap(sub(*b), 1)), 0),
            Op::LogicalAnd(a, b) => (format!("{} && {}", wrap(sub(*a), 1), wrap(sub(*b), 1)), 0),
            Op::LogicalOr(a, b) => (format!("{} || {}", wrap(sub(*a), 1), wrap(sub(*b), 1)), 0),
            Op::LogicalNot(a) => (format!("!{}", wrap(sub(*a), ATOM)), 3),
            Op::Conditional(c, a, b) => {
                (format!("({} ? {} : {})", wrap(sub(*c), 1), sub(*a).0, sub(*b).0), ATOM)
            }
            Op::Indexed(a, items) => {
                let its: Vec<String> = items.iter().map(|i| self.index_text(i, style)).collect();
                if let Some(t) = self.temp_of(*a) {
                    return (self.access(t, &its, style, full), ATOM);
                }
                match gem.op(*a) {
                    Op::Identity { .. } => {
                        (format!("({} == {} ? 1.0 : 0.0)", its[0], its[1]), ATOM)
                    }
                    Op::Variable { name, shape } if style == Style::C => {
                        (format!("{name}[{}]", flat_index(&its, shape)), ATOM)
                    }
                    _ => (format!("{}{}", sub(*a).0, self.subscript(&its, style)), ATOM),
                }
            }
            Op::ComponentTensor(..) | Op::IndexSum(..) | Op::ListTensor(..) => {
                ("<unscheduled>".into(), ATOM)
            }
        }
    }

    fn statement_text(&self, k: usize, style: Style, full: bool) -> Vec<String> {
        let acc = |t: usize, c: &[String]| self.access(t, c, style, full);
        let expr = |n: NodeId, own: Option<NodeId>| self.render_prec(n, own, style, full).0;
        let nest = &self.nests[k];
        let t = nest.temp;
        let end = if style == Style::C { ";" } else { "" };
        match nest.statement {
            Statement::Init => {
                let temp = &self.temporaries[t];
                let comps: Vec<Vec<String>> = component_items(&temp.shape);
                comps.iter().map(|c| format!("{} = 0.0{end}", acc(t, c))).collect()
            }
            Statement::Accumulate(e) => vec![format!("{} += {}{end}", acc(t, &[]), expr(e, None))],
            Statement::Assign(n) => vec![format!("{} = {}{end}", acc(t, &[]), expr(n, Some(n)))],
            Statement::ListAssign(n) => {
                let leaves = self.list_leaves(n);
                let comps = component_items(&self.temporaries[t].shape);
                match style {
                    Style::C => comps
                        .iter()
                        .zip(&leaves)
                        .map(|(c, l)| format!("{} = {};", acc(t, c), expr(*l, None)))
                        .collect(),
                    Style::Pseudo => {
                        let vals: Vec<String> = leaves.iter().map(|l| expr(*l, None)).collect();
                        let temp = &self.temporaries[t];
                        let kept = if full { &temp.indices[..] } else { temp.kept() };
                        let mut items: Vec<String> = kept.iter().map(|i| self.names.get(*i)).collect();
                        items.push("...".into());
                        vec![format!("{}[{}] = {}", self.temporaries[t].name, items.join(","), nest_values(&vals, &self.temporaries[t].shape))]
                    }
                }
            }
        }
    }

    /// Unfused nests in the given order, one `for` header per nest.
    pub fn dump_nests(&self, order: &[usize]) -> String {
        let mut out = String::new();
        for &k in order {
            let nest = &self.nests[k];
            let names: Vec<String> = nest.indices.iter().map(|i| self.names.get(*i)).collect();
            let stmts = self.statement_text(k, Style::Pseudo, true);
            if names.is_empty() {
                for s in stmts {
                    out += &format!("{s}\n");
                }
            } else {
                out += &format!("for {}:\n", names.join(", "));
                for s in stmts {
                    out += &format!("  {s}\n");
                }
            }
        }
        out
    }

    /// The fused schedule as indented pseudo-code. Chains of loops with a
    /// single child are printed on one line.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        self.dump_items(&self.tree, 0, &mut out);
        out
    }

    fn dump_items(&self, items: &[LoopTree], depth: usize, out: &mut String) {
        let pad = "  ".repeat(depth);
        for it in items {
            match it {
                LoopTree::Nest(k) => {
                    for s in self.statement_text(*k, Style::Pseudo, false) {
                        *out += &format!("{pad}{s}\n");
                    }
                }
                LoopTree::Loop { .. } => {
                    let mut names = Vec::new();
                    let mut cur = it;
                    while let LoopTree::Loop { index, body } = cur {
                        names.push(self.names.get(*index));
                        if body.len() == 1 && matches!(body[0], LoopTree::Loop { .. }) {
                            cur = &body[0];
                        } else {
                            break;
                        }
                    }
                    *out += &format!("{pad}for {}:\n", names.join(", "));
                    if let LoopTree::Loop { body, .. } = cur {
                        self.dump_items(body, depth + 1, out);
                    }
                }
            }
        }
    }

    /// C statements of a nest.
    pub fn c_statements(&self, k: usize) -> Vec<String> {
        self.statement_text(k, Style::C, false)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Style {
    Pseudo,
    C,
}

/// Row-major flat offset expression for a Variable access.
fn flat_index(items: &[String], shape: &[usize]) -> String {
    let fixed: Option<Vec<usize>> = items.iter().map(|s| s.parse::<usize>().ok()).collect();
    if let Some(f) = fixed {
        return f.iter().zip(shape).fold(0, |acc, (v, e)| acc * e + v).to_string();
    }
    let mut terms = Vec::new();
    for (a, it) in items.iter().enumerate() {
        let stride: usize = shape[a + 1..].iter().product();
        if it == "0" {
            continue;
        }
        terms.push(if stride == 1 { it.clone() } else { format!("{stride} * {it}") });
    }
    if terms.is_empty() {
        "0".into()
    } else {
        terms.join(" + ")
    }
}

fn component_items(shape: &[usize]) -> Vec<Vec<String>> {
    let mut out = vec![vec![]];
    for e in shape {
        out = out.into_iter().flat_map(|p: Vec<String>| (0..*e).map(move |v| [p.clone(), vec![v.to_string()]].concat())).collect();
    }
    out
}

fn nest_values(vals: &[String], shape: &[usize]) -> String {
    if shape.len() <= 1 {
        return format!("[{}]", vals.join(", "));
    }
    let stride: usize = shape[1..].iter().product();
    let rows: Vec<String> = vals.chunks(stride).map(|c| nest_values(c, &shape[1..])).collect();
    format!("[{}]", rows.join(", "))
}

fn flatten(items: &[LoopTree], out: &mut Vec<usize>) {
    for it in items {
        match it {
            LoopTree::Nest(k) => out.push(*k),
            LoopTree::Loop { body, .. } => flatten(body, out),
        }
    }
}
