//! Triangle configurations grown on the orbit graph by tree-definable sets,
//! and the reduction of the symmetric non-bipartite case to the pseudoloop
//! driver.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::dianalysis::components_and_algebraic_length;
use crate::error::{Error, Result};
use crate::loopengine::{pseudoloop_driver, Combined, DerivationTrace, DriverOutcome, DriverResult, OrWitness};
use crate::pplogic::{evaluate, Atom, Env, RPPFormula};
use crate::relcore::{compose, quotient_digraph, Digraph, PermGroup, Relation};

/// Sets of orbits built from the full set and singletons by neighbourhoods and intersections.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TreeExpression {
    Full,
    Singleton(usize),
    Neighborhood(Box<TreeExpression>),
    Intersect(Box<TreeExpression>, Box<TreeExpression>),
}

impl TreeExpression {
    /// Evaluates on a symmetric orbit graph.
    pub fn eval(&self, q: &Digraph) -> BTreeSet<usize> {
        match self {
            TreeExpression::Full => (0..q.n()).collect(),
            TreeExpression::Singleton(u) => BTreeSet::from([*u]),
            TreeExpression::Neighborhood(c) => q.plus(&c.eval(q)),
            TreeExpression::Intersect(a, b) => a.eval(q).intersection(&b.eval(q)).copied().collect(),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeExpression::Full | TreeExpression::Singleton(_) => 0,
            TreeExpression::Neighborhood(c) => 1 + c.depth(),
            TreeExpression::Intersect(a, b) => 1 + a.depth().max(b.depth()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StrongConfiguration {
    pub u: [BTreeSet<usize>; 3],
    pub tree_expressions: [TreeExpression; 3],
}

/// One round of the search: the universe it worked on and the power applied.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Level {
    pub universe: BTreeSet<usize>,
    pub power: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TriangleConfiguration {
    pub p: BTreeSet<usize>,
    pub parts: [BTreeSet<usize>; 3],
    /// Product of the powers taken over all levels.
    pub k: usize,
    /// The binary relation the configuration refers to; →ᵏ when there is one level.
    pub relation: Relation,
    pub levels: Vec<Level>,
    /// On the orbit graph of the last level.
    pub strong: StrongConfiguration,
    /// Trace steps defining P, P₀, P₁, P₂ and the relation.
    pub p_step: String,
    pub part_steps: [String; 3],
    pub relation_step: String,
}

fn union_of(classes: &[BTreeSet<usize>], s: &BTreeSet<usize>) -> BTreeSet<usize> {
    s.iter().flat_map(|&u| classes[u].iter().copied()).collect()
}

/// Two-colouring of the undirected graph underlying `edges` on `vertices`.
fn is_bipartite(vertices: &BTreeSet<usize>, edges: &Relation) -> bool {
    let mut adj: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for t in edges.iter() {
        if vertices.contains(&t[0]) && vertices.contains(&t[1]) {
            if t[0] == t[1] {
                return false;
            }
            adj.entry(t[0]).or_default().push(t[1]);
            adj.entry(t[1]).or_default().push(t[0]);
        }
    }
    let mut colour: BTreeMap<usize, bool> = BTreeMap::new();
    for &s in vertices {
        if colour.contains_key(&s) {
            continue;
        }
        colour.insert(s, false);
        let mut queue = VecDeque::from([s]);
        while let Some(v) = queue.pop_front() {
            let c = colour[&v];
            for &w in adj.get(&v).map(Vec::as_slice).unwrap_or(&[]) {
                match colour.get(&w) {
                    Some(&cw) if cw == c => return false,
                    Some(_) => {}
                    None => {
                        colour.insert(w, !c);
                        queue.push_back(w);
                    }
                }
            }
        }
    }
    true
}

/// Length of a shortest odd cycle of a symmetric graph.
fn odd_girth(q: &Digraph) -> Option<usize> {
    let n = q.n();
    let mut best: Option<usize> = None;
    for s in 0..n {
        let mut dist = vec![[usize::MAX; 2]; n];
        dist[s][0] = 0;
        let mut queue = VecDeque::from([(s, 0usize)]);
        while let Some((v, p)) = queue.pop_front() {
            let dv = dist[v][p];
            for &w in q.out(v) {
                if dist[w][1 - p] == usize::MAX {
                    dist[w][1 - p] = dv + 1;
                    queue.push_back((w, 1 - p));
                }
            }
        }
        if dist[s][1] != usize::MAX {
            best = Some(best.map_or(dist[s][1], |b: usize| b.min(dist[s][1])));
        }
    }
    best
}

struct OrbitGraph {
    q: Digraph,
    /// Base vertices of each local orbit.
    classes: Vec<BTreeSet<usize>>,
}

fn orbit_graph(n: usize, r: &Relation, b: &BTreeSet<usize>, g: &PermGroup) -> Result<OrbitGraph> {
    let (sub, order) = Digraph::new(n, r.clone())?.induced(b);
    let gb = g.restrict(&order)?;
    let (q, map) = quotient_digraph(&sub, &gb)?;
    let mut classes = vec![BTreeSet::new(); q.n()];
    for (i, &o) in map.iter().enumerate() {
        classes[o].insert(order[i]);
    }
    Ok(OrbitGraph { q, classes })
}

#[derive(Debug, Clone, Copy)]
enum Node {
    Full,
    Single(usize),
    Nbhd(usize),
    Inter(usize, usize),
}

/// Tree-definable sets with the first expression found for each.
struct Arena {
    nodes: Vec<Node>,
    sets: Vec<BTreeSet<usize>>,
    index: BTreeMap<BTreeSet<usize>, usize>,
}

impl Arena {
    fn add(&mut self, node: Node, set: BTreeSet<usize>) -> usize {
        if let Some(&i) = self.index.get(&set) {
            return i;
        }
        self.nodes.push(node);
        self.sets.push(set.clone());
        self.index.insert(set, self.nodes.len() - 1);
        self.nodes.len() - 1
    }

    fn expr(&self, id: usize) -> TreeExpression {
        match self.nodes[id] {
            Node::Full => TreeExpression::Full,
            Node::Single(u) => TreeExpression::Singleton(u),
            Node::Nbhd(c) => TreeExpression::Neighborhood(Box::new(self.expr(c))),
            Node::Inter(a, b) => TreeExpression::Intersect(Box::new(self.expr(a)), Box::new(self.expr(b))),
        }
    }
}

enum Grow {
    Done([usize; 3]),
    Recurse(usize),
}

struct Grower<'o> {
    og: &'o OrbitGraph,
    arena: Arena,
    full: BTreeSet<usize>,
}

impl Grower<'_> {
    fn new(og: &OrbitGraph) -> Grower<'_> {
        let full: BTreeSet<usize> = (0..og.q.n()).collect();
        let mut arena = Arena { nodes: Vec::new(), sets: Vec::new(), index: BTreeMap::new() };
        arena.add(Node::Full, full.clone());
        for u in 0..og.q.n() {
            arena.add(Node::Single(u), BTreeSet::from([u]));
        }
        Grower { og, arena, full }
    }

    fn set(&self, id: usize) -> &BTreeSet<usize> {
        &self.arena.sets[id]
    }

    fn nb(&mut self, id: usize) -> usize {
        let s = self.og.q.plus(&self.arena.sets[id]);
        self.arena.add(Node::Nbhd(id), s)
    }

    fn inter(&mut self, a: usize, b: usize) -> usize {
        let s = self.arena.sets[a].intersection(&self.arena.sets[b]).copied().collect();
        self.arena.add(Node::Inter(a, b), s)
    }

    fn single(&mut self, u: usize) -> usize {
        self.arena.add(Node::Single(u), BTreeSet::from([u]))
    }

    /// A proper tree-definable set with a non-bipartite restriction.
    fn bad(&self, id: usize) -> bool {
        let s = self.set(id);
        !s.is_empty() && *s != self.full && !is_bipartite(s, self.og.q.edges())
    }

    fn independent(&self, s: &BTreeSet<usize>) -> bool {
        self.og.q.plus(s).is_disjoint(s)
    }

    fn connected(&self, s: &BTreeSet<usize>) -> bool {
        let Some(&start) = s.first() else { return true };
        let mut seen = BTreeSet::from([start]);
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            for &w in self.og.q.out(v).iter().chain(self.og.q.inn(v)) {
                if s.contains(&w) && seen.insert(w) {
                    queue.push_back(w);
                }
            }
        }
        seen.len() == s.len()
    }

    fn is_strong(&self, u: &[usize; 3]) -> bool {
        let sets: Vec<&BTreeSet<usize>> = u.iter().map(|&i| self.set(i)).collect();
        let nbs: Vec<BTreeSet<usize>> = sets.iter().map(|s| self.og.q.plus(s)).collect();
        let indep = sets.iter().all(|s| self.independent(s));
        let cover = (0..3).all(|i| (0..3).all(|j| i == j || sets[j].is_subset(&nbs[i])));
        let u01: BTreeSet<usize> = sets[0].union(sets[1]).copied().collect();
        let u02: BTreeSet<usize> = sets[0].union(sets[2]).copied().collect();
        indep && cover && self.connected(&u01) && self.connected(&u02)
    }

    /// Breadth-first closure of the tree-definable family, up to depth `2m`
    /// and a size cap; reports the first proper non-bipartite set.
    fn safety_net(&mut self, cap: usize) -> Option<usize> {
        let m = self.og.q.n();
        let mut frontier: Vec<usize> = (0..self.arena.nodes.len()).collect();
        for _ in 0..2 * m {
            let mut fresh = Vec::new();
            let before = self.arena.nodes.len();
            for &id in &frontier {
                let nb = self.nb(id);
                if nb >= before && !fresh.contains(&nb) {
                    fresh.push(nb);
                }
            }
            let known = self.arena.nodes.len();
            for &a in &frontier {
                for b in 0..known {
                    let c = self.inter(a, b);
                    if c >= before && !fresh.contains(&c) {
                        fresh.push(c);
                    }
                    if self.arena.nodes.len() > cap {
                        break;
                    }
                }
            }
            if let Some(&id) = fresh.iter().find(|&&id| self.bad(id)) {
                return Some(id);
            }
            if fresh.is_empty() || self.arena.nodes.len() > cap {
                break;
            }
            frontier = fresh;
        }
        None
    }

    fn lex_triangle(&self) -> Option<[usize; 3]> {
        let q = &self.og.q;
        let m = q.n();
        for a in 0..m {
            for b in a + 1..m {
                if !q.has_edge(a, b) {
                    continue;
                }
                for c in b + 1..m {
                    if q.has_edge(b, c) && q.has_edge(a, c) {
                        return Some([a, b, c]);
                    }
                }
            }
        }
        None
    }

    fn grow(&mut self) -> Result<Grow> {
        if let Some(id) = self.safety_net(4096) {
            return Ok(Grow::Recurse(id));
        }
        let t = self.lex_triangle().ok_or_else(|| Error::Internal("orbit graph has no triangle".into()))?;
        let mut u = [self.single(t[0]), self.single(t[1]), self.single(t[2])];
        macro_rules! check {
            ($id:expr) => {{
                let id = $id;
                if self.bad(id) {
                    return Ok(Grow::Recurse(id));
                }
                id
            }};
        }
        let m = self.og.q.n();
        for _ in 0..4 * m + 4 {
            let covered: BTreeSet<usize> = u.iter().flat_map(|&i| self.set(i).iter().copied()).collect();
            if covered == self.full {
                if !self.is_strong(&u) {
                    return Err(Error::Internal("final configuration is not strong".into()));
                }
                return Ok(Grow::Done(u));
            }
            let mut grown = false;
            for i in 0..3 {
                let a = check!(self.nb(u[(i + 2) % 3]));
                let b = check!(self.nb(u[(i + 1) % 3]));
                let c = check!(self.inter(a, b));
                if !self.set(u[i]).is_subset(self.set(c)) {
                    return Err(Error::Internal("blowup lost elements".into()));
                }
                if self.set(c).len() > self.set(u[i]).len() {
                    let mut next = u;
                    next[i] = c;
                    if !self.is_strong(&next) {
                        return Err(Error::Internal("blowup broke the strong configuration".into()));
                    }
                    u = next;
                    grown = true;
                    break;
                }
            }
            if grown {
                continue;
            }
            let nbs: Vec<BTreeSet<usize>> = u.iter().map(|&i| self.og.q.plus(self.set(i))).collect();
            let v: Vec<BTreeSet<usize>> = (0..3)
                .map(|i| {
                    let others: BTreeSet<usize> =
                        self.set(u[(i + 1) % 3]).union(self.set(u[(i + 2) % 3])).copied().collect();
                    nbs[i].difference(&others).copied().collect()
                })
                .collect();
            for i in 0..3 {
                for j in 0..3 {
                    if i != j && !v[i].is_subset(&self.og.q.plus(&v[j])) {
                        return Err(Error::Internal("legs are not adjacent".into()));
                    }
                }
            }
            let v1 = *v[1].first().ok_or_else(|| Error::Internal("empty leg set".into()))?;
            let sv = self.single(v1);
            let nv = check!(self.nb(sv));
            let nu1 = check!(self.nb(u[1]));
            let w = check!(self.inter(nv, nu1));
            let nu0 = check!(self.nb(u[0]));
            let nw = check!(self.nb(w));
            let mut seq = vec![check!(self.inter(nw, nu0))];
            let n_even = loop {
                let last = *seq.last().expect("nonempty");
                let nl = check!(self.nb(last));
                seq.push(check!(self.inter(nl, nu0)));
                let l = seq.len();
                if l >= 3 && (l - 3) % 2 == 0 && self.set(seq[l - 1]) == self.set(seq[l - 3]) {
                    break l - 3;
                }
                if l > 4 * m + 8 {
                    return Err(Error::Internal("S-chain does not stabilise".into()));
                }
            };
            for j in 2..seq.len() {
                if !self.set(seq[j - 2]).is_subset(self.set(seq[j])) {
                    return Err(Error::Internal("S-chain is not monotone".into()));
                }
            }
            let (sn, sn1) = (seq[n_even], seq[n_even + 1]);
            for &s in &[sn, sn1] {
                if !self.independent(self.set(s)) {
                    let both = check!(self.inter(sn, sn1));
                    check!(self.nb(both));
                    return Err(Error::Internal("S-chain member is not independent".into()));
                }
            }
            let next = [u[0], sn, sn1];
            let size = |u: &[usize; 3], g: &Self| u.iter().map(|&i| g.set(i).len()).sum::<usize>();
            if size(&next, self) <= size(&u, self) || !self.is_strong(&next) {
                return Err(Error::Internal("S-chain step did not extend the configuration".into()));
            }
            u = next;
        }
        Err(Error::Internal("configuration growth did not terminate".into()))
    }
}

/// Formulas for the sets and relations found during the search.
struct Lifter<'c, 'a> {
    comb: &'c mut Combined<'a>,
    orbit_of: Vec<usize>,
    orbit_steps: BTreeMap<usize, String>,
    counter: usize,
}

impl Lifter<'_, '_> {
    fn fresh_name(&mut self, tag: &str) -> String {
        self.counter += 1;
        format!("{tag}{}", self.counter)
    }

    fn push(&mut self, tag: &str, lemma: &str, mut f: RPPFormula, want: &Relation) -> Result<String> {
        f.normalize_ranks();
        f.dedup();
        let name = self.fresh_name(tag);
        self.comb.push(&name, lemma, f, Some(want))?;
        Ok(name)
    }

    /// x ranges over the orbit of `rep`.
    fn orbit_step(&mut self, rep: usize) -> Result<String> {
        let o = self.orbit_of[rep];
        if let Some(s) = self.orbit_steps.get(&o) {
            return Ok(s.clone());
        }
        let n = self.orbit_of.len();
        let mut f = RPPFormula::new(&["x"]);
        let zs: Vec<String> = (0..n).map(|i| if i == rep { "x".to_string() } else { f.fresh("z", 0) }).collect();
        f.push(Atom::OrbitO(zs));
        let want = Relation::unary((0..n).filter(|&a| self.orbit_of[a] == o));
        let name = self.push("orb", "orbit", f, &want)?;
        self.orbit_steps.insert(o, name.clone());
        Ok(name)
    }

    fn unary(name: &str) -> RPPFormula {
        let mut f = RPPFormula::new(&["x"]);
        f.rel(name, &["x"]);
        f
    }

    fn tree(
        &mut self,
        arena: &Arena,
        id: usize,
        og: &OrbitGraph,
        ctx: &LevelCtx,
        memo: &mut BTreeMap<usize, String>,
    ) -> Result<String> {
        if let Some(s) = memo.get(&id) {
            return Ok(s.clone());
        }
        let want = Relation::unary(union_of(&og.classes, &arena.sets[id]));
        let name = match arena.nodes[id] {
            Node::Full => match &ctx.b_step {
                Some(b) => b.clone(),
                None => self.push("full", "tree", RPPFormula::new(&["x"]), &want)?,
            },
            Node::Single(u) => {
                let rep = *og.classes[u].first().expect("nonempty orbit");
                self.orbit_step(rep)?
            }
            Node::Nbhd(c) => {
                let cn = self.tree(arena, c, og, ctx, memo)?;
                let mut f = RPPFormula::new(&["x"]);
                let y = f.fresh("y", 0);
                f.set_rank("x", ctx.r_span);
                f.rel_owned(&cn, std::slice::from_ref(&y));
                f.rel_owned(&ctx.r_step, &[y, "x".to_string()]);
                self.push("nb", "tree", f, &want)?
            }
            Node::Inter(a, b) => {
                let an = self.tree(arena, a, og, ctx, memo)?;
                let bn = self.tree(arena, b, og, ctx, memo)?;
                let mut f = Self::unary(&an);
                f.rel(&bn, &["x"]);
                self.push("cap", "tree", f, &want)?
            }
        };
        memo.insert(id, name.clone());
        Ok(name)
    }
}

struct LevelCtx {
    r_step: String,
    /// Rank difference of the relation's two coordinates.
    r_span: i64,
    b_step: Option<String>,
}

fn check_inputs(d: &Digraph, g: &PermGroup) -> Result<Digraph> {
    let n = d.n();
    if n == 0 {
        return Err(Error::pre("empty digraph"));
    }
    if !d.is_smooth() {
        return Err(Error::pre("digraph is not smooth"));
    }
    if g.degree() != n {
        return Err(Error::pre("group degree differs from the digraph size"));
    }
    g.check_automorphisms(&d.to_structure())?;
    let (q, _) = quotient_digraph(d, g)?;
    if !q.is_symmetric() {
        return Err(Error::pre("orbit graph is not symmetric"));
    }
    Ok(q)
}

fn search_in(comb: &mut Combined) -> Result<TriangleConfiguration> {
    let d = comb.d;
    let g = comb.g;
    let n = d.n();
    let (orbit_of, _) = g.orbit_map();
    let mut lift = Lifter { comb, orbit_of, orbit_steps: BTreeMap::new(), counter: 0 };
    let mut r = d.edges().clone();
    let mut b: BTreeSet<usize> = (0..n).collect();
    let mut ctx = LevelCtx { r_step: "E".into(), r_span: 1, b_step: None };
    let mut levels = Vec::new();
    let mut k = 1;
    for _ in 0..=n {
        let og = orbit_graph(n, &r, &b, g)?;
        if !og.q.loops().is_empty() {
            return Err(Error::Internal("orbit graph acquired a loop".into()));
        }
        let girth = odd_girth(&og.q).ok_or_else(|| Error::Internal("orbit graph is bipartite".into()))?;
        let power = girth - 2;
        let og = if power > 1 {
            let mut pr = Relation::diagonal(n).restrict(&b);
            for _ in 0..power {
                pr = compose(&pr, &r)?;
            }
            r = pr;
            let mut f = RPPFormula::new(&["x", "y"]);
            let mut cur = "x".to_string();
            for i in 1..=power {
                let next = if i == power { "y".to_string() } else { f.fresh("p", i as i64 * ctx.r_span) };
                f.rel_owned(&ctx.r_step, &[cur, next.clone()]);
                cur = next;
            }
            f.set_rank("y", power as i64 * ctx.r_span);
            ctx.r_step = lift.push("pow", "power", f, &r)?;
            ctx.r_span *= power as i64;
            k *= power;
            orbit_graph(n, &r, &b, g)?
        } else {
            og
        };
        levels.push(Level { universe: b.clone(), power });
        let mut grower = Grower::new(&og);
        match grower.grow()? {
            Grow::Recurse(id) => {
                let mut memo = BTreeMap::new();
                let s_step = lift.tree(&grower.arena, id, &og, &ctx, &mut memo)?;
                b = union_of(&og.classes, &grower.arena.sets[id]);
                r = r.restrict(&b);
                let mut f = RPPFormula::new(&["x", "y"]);
                f.set_rank("y", ctx.r_span);
                f.rel(&ctx.r_step, &["x", "y"]);
                f.rel(&s_step, &["x"]);
                f.rel(&s_step, &["y"]);
                ctx.r_step = lift.push("res", "restrict", f, &r)?;
                ctx.b_step = Some(s_step);
            }
            Grow::Done(u) => {
                let mut memo = BTreeMap::new();
                let mut part_steps = Vec::new();
                let mut parts = Vec::new();
                for &id in &u {
                    part_steps.push(lift.tree(&grower.arena, id, &og, &ctx, &mut memo)?);
                    parts.push(union_of(&og.classes, &grower.arena.sets[id]));
                }
                let p_step = lift.tree(&grower.arena, 0, &og, &ctx, &mut memo)?;
                let strong = StrongConfiguration {
                    u: [0, 1, 2].map(|i| grower.arena.sets[u[i]].clone()),
                    tree_expressions: [0, 1, 2].map(|i| grower.arena.expr(u[i])),
                };
                let tc = TriangleConfiguration {
                    p: b,
                    parts: [parts[0].clone(), parts[1].clone(), parts[2].clone()],
                    k,
                    relation: r,
                    levels,
                    strong,
                    p_step,
                    part_steps: [part_steps[0].clone(), part_steps[1].clone(), part_steps[2].clone()],
                    relation_step: ctx.r_step,
                };
                if let Err(v) = validate_triangle_config(d, g, &tc) {
                    return Err(Error::Internal(format!("configuration fails: {}", v.join("; "))));
                }
                return Ok(tc);
            }
        }
    }
    Err(Error::Internal("recursion did not shrink the universe".into()))
}

/// Finds a pp-definable triangle configuration with its definitions.
pub fn triangle_config_search(
    d: &Digraph,
    g: &PermGroup,
    budget: u64,
) -> Result<(TriangleConfiguration, DerivationTrace)> {
    let q = check_inputs(d, g)?;
    if !q.loops().is_empty() {
        return Err(Error::pre("orbit graph has a loop"));
    }
    if is_bipartite(&(0..q.n()).collect(), q.edges()) {
        return Err(Error::pre("orbit graph is bipartite"));
    }
    let mut comb = Combined::new(d, g, budget);
    let tc = search_in(&mut comb)?;
    Ok((tc, comb.trace))
}

/// Checks conditions (i)–(iv) for `tc.relation`; returns the violated ones.
pub fn validate_triangle_config(d: &Digraph, g: &PermGroup, tc: &TriangleConfiguration) -> std::result::Result<(), Vec<String>> {
    let n = d.n();
    let mut bad = Vec::new();
    let r = match Digraph::new(n, tc.relation.clone()) {
        Ok(r) => r,
        Err(e) => return Err(vec![format!("relation: {e}")]),
    };
    let union: BTreeSet<usize> = tc.parts.iter().flatten().copied().collect();
    let disjoint = (0..3).all(|i| (i + 1..3).all(|j| tc.parts[i].is_disjoint(&tc.parts[j])));
    if union != tc.p || !disjoint {
        bad.push("(i) P is not the disjoint union of the parts".to_string());
    }
    for i in 0..3 {
        if !r.plus(&tc.parts[i]).is_disjoint(&tc.parts[i]) {
            bad.push(format!("(ii) P{i} is not independent"));
        }
    }
    for i in 0..3 {
        let (plus, minus) = (r.plus(&tc.parts[i]), r.minus(&tc.parts[i]));
        for j in 0..3 {
            if i != j && !(tc.parts[j].is_subset(&plus) && tc.parts[j].is_subset(&minus)) {
                bad.push(format!("(iii) P{j} is not covered by the neighbourhoods of P{i}"));
            }
        }
    }
    let (orbit, count) = g.orbit_map();
    let qe = Relation::collect(
        2,
        tc.relation.iter().filter(|t| tc.p.contains(&t[0]) && tc.p.contains(&t[1])).map(|t| vec![orbit[t[0]], orbit[t[1]]]),
    );
    let qv: BTreeSet<usize> = tc.p.iter().map(|&a| orbit[a]).collect();
    if count == 0 || is_bipartite(&qv, &qe) {
        bad.push("(iv) the restricted orbit graph is bipartite".to_string());
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(bad)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OneBResult {
    pub outcome: DriverOutcome,
    pub config: Option<TriangleConfiguration>,
    /// Classes of the equivalence ∼ on P.
    pub classes: Vec<BTreeSet<usize>>,
    /// (A|_P)/∼ with the induced group.
    pub quotient: Option<(Digraph, PermGroup)>,
    pub inner: Option<DriverResult>,
    /// Definitions over → and orbits.
    pub trace: DerivationTrace,
}

/// {(x,y) : ∃z₁,z₂ ∈ N, z₃ ∈ M with x ← z₁ → z₂ ← z₃ → y}.
fn s_relation(r: &Relation, nj: &BTreeSet<usize>, nj1: &BTreeSet<usize>, n: usize) -> Relation {
    let rd = Digraph::new(n, r.clone()).expect("in domain");
    let mut out = Relation::empty(2);
    for &z1 in nj {
        for &z2 in rd.out(z1).iter().filter(|z| nj.contains(z)) {
            for &z3 in rd.inn(z2).iter().filter(|z| nj1.contains(z)) {
                for &x in rd.out(z1) {
                    for &y in rd.out(z3) {
                        out.insert(vec![x, y]);
                    }
                }
            }
        }
    }
    out
}

fn closure_power(s: &Relation, n: usize) -> Result<(Relation, usize)> {
    let mut cur = s.clone();
    let mut m = 1;
    loop {
        let next = compose(&cur, s)?;
        if next == cur {
            return Ok((cur, m));
        }
        cur = next;
        m += 1;
        if m > n * n + 1 {
            return Err(Error::Internal("closure does not stabilise".into()));
        }
    }
}

/// The symmetric non-bipartite case: a loop in d/G, or OR(α,α) pp-defined
/// from →, orbits and parameters through the quotient by ∼.
pub fn one_b_driver(d: &Digraph, g: &PermGroup, budget: u64) -> Result<OneBResult> {
    let n = d.n();
    let q = check_inputs(d, g)?;
    let (orbit_of, _) = g.orbit_map();
    if let Some(&o) = q.loops().first() {
        let elements = (0..n).filter(|&a| orbit_of[a] == o).collect();
        return Ok(OneBResult {
            outcome: DriverOutcome::QuotientLoop { orbit: o, elements },
            config: None,
            classes: Vec::new(),
            quotient: None,
            inner: None,
            trace: DerivationTrace::default(),
        });
    }
    if is_bipartite(&(0..q.n()).collect(), q.edges()) {
        return Err(Error::pre("orbit graph is bipartite"));
    }
    let mut comb = Combined::new(d, g, budget);
    let tc = search_in(&mut comb)?;
    let span = tc.k as i64;
    let mut counter = 0usize;
    let mut push = |comb: &mut Combined, tag: &str, mut f: RPPFormula, want: &Relation| -> Result<String> {
        f.normalize_ranks();
        f.dedup();
        counter += 1;
        let name = format!("{tag}{counter}");
        comb.push(&name, "equivalence", f, Some(want))?;
        Ok(name)
    };
    let rd = Digraph::new(n, tc.relation.clone())?;
    let mut nbar = Vec::new();
    for i in 0..3 {
        let want = Relation::unary(tc.p.difference(&tc.parts[i]).copied());
        if Relation::unary(rd.plus(&tc.parts[i])) != want {
            return Err(Error::Internal("neighbourhood of a part is not its complement".into()));
        }
        let mut f = RPPFormula::new(&["x"]);
        let w = f.fresh("w", 0);
        f.set_rank("x", span);
        f.rel_owned(&tc.part_steps[i], std::slice::from_ref(&w));
        f.rel_owned(&tc.relation_step, &[w, "x".to_string()]);
        nbar.push(push(&mut comb, "nbar", f, &want)?);
    }
    let within = |a: usize, b: usize| tc.parts.iter().any(|p| p.contains(&a) && p.contains(&b));
    let diag_p = Relation::diagonal(n).restrict(&tc.p);
    let mut sim: Option<(String, Relation)> = None;
    let mut r_step = tc.relation_step.clone();
    let mut r_rel = tc.relation.clone();
    for round in 0..=n {
        let mut sj = Vec::new();
        for j in 0..3 {
            let mut f = RPPFormula::new(&["x", "y"]);
            let z1 = f.fresh("z", 0);
            let z2 = f.fresh("z", span);
            let z3 = f.fresh("z", 0);
            f.set_rank("x", span);
            f.set_rank("y", span);
            f.rel_owned(&r_step, &[z1.clone(), "x".into()]);
            f.rel_owned(&r_step, &[z1.clone(), z2.clone()]);
            f.rel_owned(&r_step, &[z3.clone(), z2.clone()]);
            f.rel_owned(&r_step, &[z3.clone(), "y".into()]);
            f.rel_owned(&nbar[j], &[z1]);
            f.rel_owned(&nbar[j], &[z2]);
            f.rel_owned(&nbar[(j + 1) % 3], &[z3]);
            let want = s_relation(&r_rel, &tc.p.difference(&tc.parts[j]).copied().collect(), &tc.p.difference(&tc.parts[(j + 1) % 3]).copied().collect(), n);
            sj.push((push(&mut comb, "s", f, &want)?, want));
        }
        let s_rel = sj.iter().fold(Relation::full(n, 2), |acc, (_, r)| acc.intersection(r).intersection(&r.inverse()));
        let mut f = RPPFormula::new(&["x", "y"]);
        for (name, _) in &sj {
            f.rel(name, &["x", "y"]);
            f.rel(name, &["y", "x"]);
        }
        let s_step = push(&mut comb, "ssym", f, &s_rel)?;
        if !diag_p.is_subset(&s_rel) || s_rel.iter().any(|t| !within(t[0], t[1])) {
            return Err(Error::Internal("S is not a reflexive relation inside the parts".into()));
        }
        let (closed, m) = closure_power(&s_rel, n)?;
        let same = match &sim {
            Some((_, old)) => *old == closed,
            None => closed == diag_p,
        };
        if same {
            break;
        }
        let mut f = RPPFormula::new(&["x", "y"]);
        let mut prev = "x".to_string();
        for i in 1..=m {
            let next = if i == m { "y".to_string() } else { f.fresh("c", 0) };
            f.rel_owned(&s_step, &[prev, next.clone()]);
            prev = next;
        }
        let sim_step = push(&mut comb, "sim", f, &closed)?;
        r_rel = compose(&compose(&closed, &tc.relation)?, &closed)?;
        let mut f = RPPFormula::new(&["x", "y"]);
        let (xp, yp) = (f.fresh("u", 0), f.fresh("u", span));
        f.set_rank("y", span);
        f.rel_owned(&sim_step, &["x".into(), xp.clone()]);
        f.rel_owned(&tc.relation_step, &[xp, yp.clone()]);
        f.rel_owned(&sim_step, &[yp, "y".into()]);
        r_step = push(&mut comb, "rq", f, &r_rel)?;
        sim = Some((sim_step, closed));
        if round == n {
            return Err(Error::Internal("equivalence refinement does not stabilise".into()));
        }
    }
    let sim_rel = sim.as_ref().map(|s| s.1.clone()).unwrap_or_else(|| diag_p.clone());
    let mut cls_of = vec![usize::MAX; n];
    let mut classes: Vec<BTreeSet<usize>> = Vec::new();
    for &a in &tc.p {
        if cls_of[a] != usize::MAX {
            continue;
        }
        let c: BTreeSet<usize> = tc.p.iter().copied().filter(|&b| sim_rel.contains(&[a, b])).collect();
        for &b in &c {
            cls_of[b] = classes.len();
        }
        classes.push(c);
    }
    let nb = classes.len();
    let be = Relation::collect(2, tc.relation.iter().map(|t| vec![cls_of[t[0]], cls_of[t[1]]]));
    let bd = Digraph::new(nb, be)?;
    let mut gens = Vec::new();
    for p in g.generators() {
        let perm: Vec<usize> = classes.iter().map(|c| cls_of[p[*c.first().expect("nonempty")]]).collect();
        if tc.p.iter().any(|&a| cls_of[p[a]] != perm[cls_of[a]]) {
            return Err(Error::Internal("∼ is not invariant under the group".into()));
        }
        gens.push(perm);
    }
    let h = PermGroup::generate(nb, gens)?;
    if !bd.is_smooth() {
        return Err(Error::Internal("quotient is not smooth".into()));
    }
    let (bq, _) = quotient_digraph(&bd, &h)?;
    if !bq.loops().is_empty() {
        return Err(Error::Internal("quotient modulo the group has a loop".into()));
    }
    if !components_and_algebraic_length(&bq).has_algebraic_length_1.iter().any(|&x| x) {
        return Err(Error::Internal("quotient modulo the group lacks algebraic length 1".into()));
    }
    let part_of = |c: usize| tc.parts.iter().position(|p| p.contains(classes[c].first().expect("nonempty"))).expect("in P");
    for c in 0..nb {
        for nbrs in [bd.out(c), bd.inn(c)] {
            let mut seen = [false; 3];
            for &w in nbrs {
                let pi = part_of(w);
                if seen[pi] {
                    return Err(Error::Internal("two neighbours of a class lie in one part".into()));
                }
                seen[pi] = true;
            }
        }
    }
    let inner = pseudoloop_driver(&bd, &h, budget)?;
    let outcome = match &inner.outcome {
        DriverOutcome::OrWitness { witness, pp_formula: Some(phi) } => {
            let composed = compose_formula(phi, &classes, &tc.p_step, &r_step, sim.as_ref().map(|s| s.0.as_str()));
            let env = Env::bare(n).with_rels(&comb.rels).with_group(g).with_budget(budget);
            let got = evaluate(&composed, &env)?;
            let carrier: BTreeSet<usize> = witness.carrier.iter().flat_map(|&c| classes[c].iter().copied()).collect();
            let alpha = Relation::collect(
                2,
                carrier
                    .iter()
                    .flat_map(|&a| carrier.iter().map(move |&b| vec![a, b]))
                    .filter(|t| witness.alpha.contains(&[cls_of[t[0]], cls_of[t[1]]])),
            );
            let w = OrWitness { relation: got, alpha, carrier, step: "composed".into() };
            w.validate()?;
            DriverOutcome::OrWitness { witness: w, pp_formula: Some(composed) }
        }
        DriverOutcome::OrWitness { .. } => return Err(Error::Internal("pseudoloop certificate has no formula".into())),
        other => other.clone(),
    };
    Ok(OneBResult { outcome, config: Some(tc), classes, quotient: Some((bd, h)), inner: Some(inner), trace: comb.trace })
}

/// Pulls a formula over the quotient back along the factor map.
fn compose_formula(phi: &RPPFormula, classes: &[BTreeSet<usize>], p_step: &str, r_step: &str, sim: Option<&str>) -> RPPFormula {
    let mut f = RPPFormula { free: phi.free.clone(), bound: phi.bound.clone(), atoms: Vec::new(), rank: BTreeMap::new() };
    let vars: Vec<String> = phi.vars().cloned().collect();
    for v in &vars {
        f.rel_owned(p_step, std::slice::from_ref(v));
    }
    for a in &phi.atoms {
        match a {
            Atom::Rel { name, args } if name == "E" => f.rel_owned(r_step, args),
            Atom::Eq(x, y) => match sim {
                Some(s) => f.rel_owned(s, &[x.clone(), y.clone()]),
                None => f.push(Atom::Eq(x.clone(), y.clone())),
            },
            Atom::Param(c, x) => {
                let rep = *classes[*c].first().expect("nonempty");
                match sim {
                    Some(s) => {
                        let p = f.fresh("q", 0);
                        f.push(Atom::Param(rep, p.clone()));
                        f.rel_owned(s, &[x.clone(), p]);
                    }
                    None => f.push(Atom::Param(rep, x.clone())),
                }
            }
            other => f.push(other.clone()),
        }
    }
    f
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_triangles() -> (Digraph, PermGroup) {
        let d = Digraph::symmetric(6, &[(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (5, 3)]).unwrap();
        (d, PermGroup::generate(6, vec![vec![3, 4, 5, 0, 1, 2]]).unwrap())
    }

    #[test]
    fn two_triangles_config() {
        let (d, g) = two_triangles();
        let (tc, trace) = triangle_config_search(&d, &g, 1_000_000).unwrap();
        assert_eq!(tc.k, 1);
        let mut parts = tc.parts.to_vec();
        parts.sort();
        assert_eq!(parts, vec![BTreeSet::from([0, 3]), BTreeSet::from([1, 4]), BTreeSet::from([2, 5])]);
        trace.replay(&d, &g, 1_000_000).unwrap();
    }

    #[test]
    fn hexagon_config() {
        let d = Digraph::cycle(6);
        let g = PermGroup::generate(6, vec![vec![3, 4, 5, 0, 1, 2]]).unwrap();
        let (tc, _) = triangle_config_search(&d, &g, 1_000_000).unwrap();
        assert_eq!(tc.k, 1);
        assert!(tc.parts.contains(&BTreeSet::from([0, 3])));
        assert_eq!(Digraph::cycle(6).plus(&BTreeSet::from([0, 3])), BTreeSet::from([1, 2, 4, 5]));
    }

    #[test]
    fn k3_singletons() {
        let d = Digraph::complete(3);
        let (tc, _) = triangle_config_search(&d, &PermGroup::trivial(3), 1_000_000).unwrap();
        assert!(tc.parts.iter().all(|p| p.len() == 1));
    }

    #[test]
    fn pentagon_uses_a_power() {
        let d = Digraph::cycle(5);
        let (tc, trace) = triangle_config_search(&d, &PermGroup::trivial(5), 1_000_000).unwrap();
        assert_eq!(tc.k, 3);
        assert_eq!(tc.p.len(), 3);
        assert_eq!(tc.levels.len(), 3);
        trace.replay(&d, &PermGroup::trivial(5), 1_000_000).unwrap();
    }

    #[test]
    fn violations_are_reported() {
        let d = Digraph::complete(3);
        let (tc, _) = triangle_config_search(&d, &PermGroup::trivial(3), 1_000_000).unwrap();
        let mut same = tc.clone();
        same.parts[1] = same.parts[0].clone();
        let v = validate_triangle_config(&d, &PermGroup::trivial(3), &same).unwrap_err();
        assert!(v.iter().any(|s| s.starts_with("(i)")));
        let mut edge = tc.clone();
        edge.parts[0] = BTreeSet::from([0, 1]);
        edge.parts[1] = BTreeSet::new();
        let v = validate_triangle_config(&d, &PermGroup::trivial(3), &edge).unwrap_err();
        assert!(v.iter().any(|s| s.starts_with("(ii)")));
    }

    #[test]
    fn bipartite_is_rejected() {
        let d = Digraph::cycle(4);
        assert!(matches!(one_b_driver(&d, &PermGroup::trivial(4), 1_000_000), Err(Error::Precondition(_))));
    }

    #[test]
    fn k3_one_b() {
        let d = Digraph::complete(3);
        let r = one_b_driver(&d, &PermGroup::trivial(3), 10_000_000).unwrap();
        assert!(matches!(r.outcome, DriverOutcome::OrWitness { .. }));
        assert_eq!(r.quotient.unwrap().0, d);
    }

    #[test]
    fn hexagon_one_b() {
        let d = Digraph::cycle(6);
        let g = PermGroup::generate(6, vec![vec![3, 4, 5, 0, 1, 2]]).unwrap();
        let r = one_b_driver(&d, &g, 10_000_000).unwrap();
        match &r.outcome {
            DriverOutcome::OrWitness { witness, pp_formula } => {
                witness.validate().unwrap();
                let rels = r.trace.relations(&d);
                let env = Env::bare(6).with_rels(&rels).with_group(&g);
                assert_eq!(evaluate(pp_formula.as_ref().unwrap(), &env).unwrap(), witness.relation);
            }
            other => panic!("{other:?}"),
        }
    }
}
