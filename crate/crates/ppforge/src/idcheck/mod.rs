//! Equational conditions over polymorphism clones of finite structures.
//!
//! A condition is a list of identities between terms. Satisfaction is decided
//! by the indicator construction: one solver variable per operation symbol and
//! argument tuple, glued along identity instances, constrained by the
//! relations of the structure.

mod csp;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use crate::dianalysis::linkness;
use crate::error::{Error, Result};
use crate::relcore::{
    all_tuples, automorphisms, endomorphisms, non_surjective_endomorphism, perm_identity, Digraph, PermGroup,
    Structure, DEFAULT_SEARCH_BUDGET,
};
use csp::Csp;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Term {
    Var(String),
    App(String, Vec<Term>),
}

impl Term {
    pub fn var(x: &str) -> Term {
        Term::Var(x.to_string())
    }

    pub fn app(f: &str, args: Vec<Term>) -> Term {
        Term::App(f.to_string(), args)
    }

    /// `f(x_1, …, x_n)` over variable names.
    pub fn flat(f: &str, vars: &[&str]) -> Term {
        Term::app(f, vars.iter().map(|x| Term::var(x)).collect())
    }

    fn vars(&self, out: &mut BTreeSet<String>) {
        match self {
            Term::Var(x) => {
                out.insert(x.clone());
            }
            Term::App(_, args) => args.iter().for_each(|a| a.vars(out)),
        }
    }

    fn symbols(&self, out: &mut Vec<(String, usize)>) {
        if let Term::App(f, args) = self {
            out.push((f.clone(), args.len()));
            args.iter().for_each(|a| a.symbols(out));
        }
    }

    fn eval(&self, env: &BTreeMap<String, usize>, tables: &BTreeMap<String, OpTable>) -> usize {
        match self {
            Term::Var(x) => env[x],
            Term::App(f, args) => {
                let vals: Vec<usize> = args.iter().map(|a| a.eval(env, tables)).collect();
                tables[f].apply(&vals)
            }
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Var(x) => write!(f, "{x}"),
            Term::App(g, args) => {
                write!(f, "{g}(")?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{a}")?;
                }
                write!(f, ")")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Condition {
    pub symbols: BTreeMap<String, usize>,
    pub identities: Vec<(Term, Term)>,
}

/// Splits a side into its outer unary chain (outermost first) and the rest.
fn peel(t: &Term) -> (Vec<&str>, &Term) {
    let mut outer = Vec::new();
    let mut cur = t;
    while let Term::App(f, args) = cur {
        if args.len() != 1 {
            break;
        }
        outer.push(f.as_str());
        cur = &args[0];
    }
    (outer, cur)
}

impl Condition {
    pub fn new(identities: Vec<(Term, Term)>) -> Result<Self> {
        let mut symbols = BTreeMap::new();
        for (l, r) in &identities {
            let mut occ = Vec::new();
            l.symbols(&mut occ);
            r.symbols(&mut occ);
            for (f, a) in occ {
                if a == 0 {
                    return Err(Error::pre(format!("symbol {f} has arity 0")));
                }
                if *symbols.entry(f.clone()).or_insert(a) != a {
                    return Err(Error::pre(format!("symbol {f} is used with two arities")));
                }
            }
        }
        Ok(Condition { symbols, identities })
    }

    pub fn operation_symbols(&self) -> Vec<(&str, usize)> {
        self.symbols.iter().filter(|(_, &a)| a > 1).map(|(f, &a)| (f.as_str(), a)).collect()
    }

    pub fn unary_symbols(&self) -> Vec<&str> {
        self.symbols.iter().filter(|(_, &a)| a == 1).map(|(f, _)| f.as_str()).collect()
    }

    /// Each side is one non-unary symbol applied to variables, possibly under
    /// outer unary symbols.
    pub fn is_minor(&self) -> bool {
        let side_ok = |t: &Term| match peel(t).1 {
            Term::App(_, args) => args.len() > 1 && args.iter().all(|a| matches!(a, Term::Var(_))),
            Term::Var(_) => false,
        };
        self.identities.iter().all(|(l, r)| side_ok(l) && side_ok(r))
    }

    pub fn is_balanced(&self) -> bool {
        self.identities.iter().all(|(l, r)| {
            let (mut a, mut b) = (BTreeSet::new(), BTreeSet::new());
            l.vars(&mut a);
            r.vars(&mut b);
            a == b
        })
    }

    /// Adds f(x,…,x) ≈ x for every operation symbol f lacking it.
    pub fn with_idempotence(mut self) -> Self {
        let ops: Vec<(String, usize)> = self.operation_symbols().into_iter().map(|(f, a)| (f.to_string(), a)).collect();
        for (f, a) in ops {
            let id = (Term::flat(&f, &vec!["x"; a]), Term::var("x"));
            if !self.identities.contains(&id) {
                self.identities.push(id);
            }
        }
        self
    }

    /// Every operation symbol f has an identity f(x,…,x) ≈ x.
    pub fn is_idempotent(&self) -> bool {
        let ops = self.operation_symbols();
        !ops.is_empty()
            && ops.iter().all(|&(f, _)| {
                self.identities.iter().any(|(l, r)| {
                    let diag = |t: &Term, x: &Term| match t {
                        Term::App(g, args) => g == f && args.iter().all(|a| a == x) && matches!(x, Term::Var(_)),
                        _ => false,
                    };
                    diag(l, r) || diag(r, l)
                })
            })
    }

    /// Satisfiable by projections, with unary symbols read as the identity.
    pub fn is_trivial(&self) -> bool {
        let ops: Vec<(&str, usize)> = self.operation_symbols();
        let mut choice = vec![0usize; ops.len()];
        fn eval<'t>(t: &'t Term, ops: &[(&str, usize)], choice: &[usize]) -> &'t str {
            match t {
                Term::Var(x) => x,
                Term::App(f, args) if args.len() == 1 => eval(&args[0], ops, choice),
                Term::App(f, args) => {
                    let i = ops.iter().position(|o| o.0 == f).expect("known symbol");
                    eval(&args[choice[i]], ops, choice)
                }
            }
        }
        loop {
            if self.identities.iter().all(|(l, r)| eval(l, &ops, &choice) == eval(r, &ops, &choice)) {
                return true;
            }
            let mut i = 0;
            loop {
                if i == ops.len() {
                    return false;
                }
                choice[i] += 1;
                if choice[i] < ops[i].1 {
                    break;
                }
                choice[i] = 0;
                i += 1;
            }
        }
    }

    /// Equality of single-identity minor conditions up to renaming variables,
    /// permuting argument positions and swapping sides.
    pub fn equivalent(&self, other: &Condition) -> bool {
        fn shape(c: &Condition) -> Option<(usize, usize, Vec<(String, String)>, Vec<String>)> {
            if c.identities.len() != 1 || !c.is_minor() {
                return None;
            }
            let (l, r) = &c.identities[0];
            let (lo, lt) = peel(l);
            let (ro, rt) = peel(r);
            let (Term::App(_, la), Term::App(_, ra)) = (lt, rt) else { return None };
            if la.len() != ra.len() || lo.len() != ro.len() {
                return None;
            }
            let name = |t: &Term| match t {
                Term::Var(x) => x.clone(),
                _ => unreachable!("minor arguments are variables"),
            };
            let cols: Vec<(String, String)> = la.iter().zip(ra).map(|(a, b)| (name(a), name(b))).collect();
            let mut vars = BTreeSet::new();
            l.vars(&mut vars);
            r.vars(&mut vars);
            Some((lo.len(), la.len(), cols, vars.into_iter().collect()))
        }
        let (Some(a), Some(b)) = (shape(self), shape(other)) else { return false };
        if a.0 != b.0 || a.1 != b.1 || a.3.len() != b.3.len() || a.3.len() > 8 {
            return false;
        }
        let mut target: Vec<(String, String)> = b.2.clone();
        target.sort();
        let k = a.3.len();
        let mut perm: Vec<usize> = (0..k).collect();
        loop {
            let ren = |x: &String| b.3[perm[a.3.iter().position(|y| y == x).expect("variable")]].clone();
            for swap in [false, true] {
                let mut cols: Vec<(String, String)> = a
                    .2
                    .iter()
                    .map(|(x, y)| if swap { (ren(y), ren(x)) } else { (ren(x), ren(y)) })
                    .collect();
                cols.sort();
                if cols == target {
                    return true;
                }
            }
            if !next_permutation(&mut perm) {
                return false;
            }
        }
    }
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (l, r)) in self.identities.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{l} ≈ {r}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConditionKind {
    Wnu(usize),
    IdempotentWnu(usize),
    Siggers,
    PseudoSiggers,
    PseudoWnu(usize),
    Pseudoloop(Digraph),
    Ugly(usize),
}

impl ConditionKind {
    /// Parses `wnu:3`, `idempotent_wnu:3`, `siggers`, `pseudo_siggers`,
    /// `pseudo_wnu:3` and `ugly:2`; pseudoloop conditions need a digraph and are
    /// built directly.
    pub fn parse(text: &str) -> Result<Self> {
        let (head, arg) = match text.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (text, None),
        };
        let num = || -> Result<usize> {
            arg.ok_or_else(|| Error::pre(format!("condition {head} needs a numeric parameter")))?
                .parse()
                .map_err(|_| Error::pre(format!("bad parameter in condition `{text}`")))
        };
        Ok(match head {
            "wnu" => ConditionKind::Wnu(num()?),
            "idempotent_wnu" => ConditionKind::IdempotentWnu(num()?),
            "siggers" => ConditionKind::Siggers,
            "pseudo_siggers" => ConditionKind::PseudoSiggers,
            "pseudo_wnu" => ConditionKind::PseudoWnu(num()?),
            "ugly" => ConditionKind::Ugly(num()?),
            _ => return Err(Error::pre(format!("unknown condition `{text}`"))),
        })
    }
}

fn wnu_sides(f: &str, n: usize) -> Vec<Term> {
    (0..n)
        .rev()
        .map(|pos| Term::app(f, (0..n).map(|i| Term::var(if i == pos { "y" } else { "x" })).collect()))
        .collect()
}

const SIGGERS_L: [&str; 6] = ["x", "y", "x", "z", "y", "z"];
const SIGGERS_R: [&str; 6] = ["y", "x", "z", "x", "z", "y"];

pub fn make_condition(kind: &ConditionKind) -> Result<Condition> {
    let ids = match kind {
        ConditionKind::Wnu(n) | ConditionKind::IdempotentWnu(n) | ConditionKind::PseudoWnu(n) if *n < 3 => {
            return Err(Error::pre(format!("near-unanimity arity must be at least 3, got {n}")));
        }
        ConditionKind::Wnu(n) => {
            let sides = wnu_sides("w", *n);
            sides.windows(2).map(|p| (p[0].clone(), p[1].clone())).collect()
        }
        ConditionKind::IdempotentWnu(n) => {
            let sides = wnu_sides("w", *n);
            let mut ids: Vec<(Term, Term)> = sides.windows(2).map(|p| (p[0].clone(), p[1].clone())).collect();
            ids.push((Term::flat("w", &vec!["x"; *n]), Term::var("x")));
            ids
        }
        ConditionKind::PseudoWnu(n) => {
            let sides: Vec<Term> = wnu_sides("w", *n)
                .into_iter()
                .enumerate()
                .map(|(i, t)| Term::app(&format!("u{}", i + 1), vec![t]))
                .collect();
            sides.windows(2).map(|p| (p[0].clone(), p[1].clone())).collect()
        }
        ConditionKind::Siggers => vec![(Term::flat("s", &SIGGERS_L), Term::flat("s", &SIGGERS_R))],
        ConditionKind::PseudoSiggers => vec![(
            Term::app("u", vec![Term::flat("s", &SIGGERS_L)]),
            Term::app("v", vec![Term::flat("s", &SIGGERS_R)]),
        )],
        ConditionKind::Pseudoloop(b) => {
            let edges = b.edges().to_vecs();
            if edges.is_empty() {
                return Err(Error::pre("pseudoloop condition needs a digraph with an edge"));
            }
            let name = |i: usize| Term::var(&format!("x{}", i + 1));
            vec![(
                Term::app("u", vec![Term::app("s", edges.iter().map(|e| name(e[0])).collect())]),
                Term::app("v", vec![Term::app("s", edges.iter().map(|e| name(e[1])).collect())]),
            )]
        }
        ConditionKind::Ugly(m) => {
            if *m == 0 {
                return Err(Error::pre("the automorphism slot count must be at least 1"));
            }
            let mut l: Vec<Term> = (1..=*m).map(|i| Term::app(&format!("a{i}"), vec![Term::var("x")])).collect();
            let mut r: Vec<Term> = vec![Term::var("y"); *m];
            l.extend(SIGGERS_L.iter().map(|x| Term::var(x)));
            r.extend(SIGGERS_R.iter().map(|x| Term::var(x)));
            vec![(Term::app("h", l), Term::app("h", r))]
        }
    };
    Condition::new(ids)
}

/// An operation table indexed by argument tuples in lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OpTable {
    pub arity: usize,
    pub domain: usize,
    pub values: Vec<usize>,
}

impl OpTable {
    pub fn apply(&self, args: &[usize]) -> usize {
        self.values[args.iter().fold(0, |acc, &a| acc * self.domain + a)]
    }

    pub fn is_polymorphism(&self, s: &Structure) -> bool {
        s.relations.values().all(|r| {
            let rows = r.to_vecs();
            all_tuples(rows.len(), self.arity).all(|pick| {
                let img: Vec<usize> = (0..r.arity())
                    .map(|j| self.apply(&pick.iter().map(|&i| rows[i][j]).collect::<Vec<_>>()))
                    .collect();
                r.contains(&img)
            })
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Satisfied(BTreeMap<String, OpTable>),
    Unsatisfied,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum UnaryRange {
    NoUnaries,
    Automorphisms,
    Endomorphisms,
}

#[derive(Debug, Clone)]
pub struct IdentityReport {
    pub verdict: Verdict,
    pub unary_range: UnaryRange,
    /// Unary assignments tried.
    pub instances: usize,
    pub nodes: u64,
}

/// Re-checks a satisfying assignment: every table is a polymorphism and every
/// identity holds pointwise.
pub fn verify_tables(s: &Structure, c: &Condition, tables: &BTreeMap<String, OpTable>) -> std::result::Result<(), String> {
    for (f, &a) in &c.symbols {
        let t = tables.get(f).ok_or_else(|| format!("no table for {f}"))?;
        if t.arity != a || t.domain != s.domain || t.values.len() != s.domain.pow(a as u32) {
            return Err(format!("table for {f} has the wrong shape"));
        }
        if t.values.iter().any(|&v| v >= s.domain) {
            return Err(format!("table for {f} leaves the domain"));
        }
        if !t.is_polymorphism(s) {
            return Err(format!("{f} is not a polymorphism"));
        }
    }
    for (l, r) in &c.identities {
        let mut vars = BTreeSet::new();
        l.vars(&mut vars);
        r.vars(&mut vars);
        let vars: Vec<String> = vars.into_iter().collect();
        for vals in all_tuples(s.domain, vars.len()) {
            let env: BTreeMap<String, usize> = vars.iter().cloned().zip(vals.iter().copied()).collect();
            if l.eval(&env, tables) != r.eval(&env, tables) {
                return Err(format!("{l} ≈ {r} fails at {vals:?}"));
            }
        }
    }
    Ok(())
}

/// One side of an identity instance.
enum Cell {
    Const(usize),
    Op { var: usize, outer: Vec<usize> },
}

struct Indicator<'a> {
    n: usize,
    ops: Vec<(&'a str, usize)>,
    offset: Vec<usize>,
    parent: Vec<usize>,
    label: Vec<Vec<usize>>,
}

fn compose(outer: &[usize], inner: &[usize]) -> Vec<usize> {
    inner.iter().map(|&x| outer[x]).collect()
}

fn invert(m: &[usize]) -> Option<Vec<usize>> {
    let mut inv = vec![usize::MAX; m.len()];
    for (x, &y) in m.iter().enumerate() {
        if inv[y] != usize::MAX {
            return None;
        }
        inv[y] = x;
    }
    Some(inv)
}

impl<'a> Indicator<'a> {
    fn new(n: usize, ops: Vec<(&'a str, usize)>) -> Self {
        let mut offset = Vec::new();
        let mut total = 0;
        for &(_, a) in &ops {
            offset.push(total);
            total += n.pow(a as u32);
        }
        Indicator { n, ops, offset, parent: (0..total).collect(), label: vec![perm_identity(n); total] }
    }

    fn var(&self, f: &str, args: &[usize]) -> usize {
        let i = self.ops.iter().position(|o| o.0 == f).expect("operation symbol");
        self.offset[i] + args.iter().fold(0, |acc, &a| acc * self.n + a)
    }

    /// The root of `v` and the map m with val(v) = m(val(root)).
    fn find(&mut self, v: usize) -> (usize, Vec<usize>) {
        let mut path = Vec::new();
        let mut cur = v;
        while self.parent[cur] != cur {
            path.push(cur);
            cur = self.parent[cur];
        }
        let root = cur;
        let mut acc = perm_identity(self.n);
        for &w in path.iter().rev() {
            acc = compose(&self.label[w], &acc);
            self.label[w] = acc.clone();
            self.parent[w] = root;
        }
        (root, if path.is_empty() { perm_identity(self.n) } else { self.label[v].clone() })
    }
}

struct Instance {
    csp: Csp,
    roots: Vec<usize>,
    resolved: Vec<(usize, Vec<usize>)>,
}

/// Builds the indicator instance for fixed unary interpretations; `None` when
/// some identity instance is already contradictory.
fn build_instance(
    s: &Structure,
    c: &Condition,
    unary: &BTreeMap<String, Vec<usize>>,
    budget: u64,
) -> Result<Option<Instance>> {
    let n = s.domain;
    let mut ind = Indicator::new(n, c.operation_symbols());
    let mut work: u64 = 0;
    let mut charge = |k: u64| -> Result<()> {
        work += k;
        if work > budget {
            return Err(Error::budget(format!("indicator construction exceeded {budget} steps")));
        }
        Ok(())
    };
    let mut restrictions: Vec<(usize, Vec<usize>, usize)> = Vec::new();
    let mut pending: Vec<[(usize, Vec<usize>); 2]> = Vec::new();
    let apply_chain = |chain: &[&str], x: usize| chain.iter().rev().fold(x, |acc, u| unary[*u][acc]);
    for (l, r) in &c.identities {
        let mut vs = BTreeSet::new();
        l.vars(&mut vs);
        r.vars(&mut vs);
        let vs: Vec<String> = vs.into_iter().collect();
        charge(n.pow(vs.len() as u32) as u64)?;
        for vals in all_tuples(n, vs.len()) {
            let cell = |t: &Term| -> Result<Cell> {
                let (outer, core) = peel(t);
                match core {
                    Term::Var(x) => {
                        let v = vals[vs.iter().position(|y| y == x).expect("variable")];
                        Ok(Cell::Const(apply_chain(&outer, v)))
                    }
                    Term::App(f, args) => {
                        let mut point = Vec::with_capacity(args.len());
                        for a in args {
                            let (chain, base) = peel(a);
                            let Term::Var(x) = base else {
                                return Err(Error::pre("nested operation symbols are not supported"));
                            };
                            point.push(apply_chain(&chain, vals[vs.iter().position(|y| y == x).expect("variable")]));
                        }
                        let m: Vec<usize> = (0..n).map(|y| apply_chain(&outer, y)).collect();
                        Ok(Cell::Op { var: ind.var(f, &point), outer: m })
                    }
                }
            };
            match (cell(l)?, cell(r)?) {
                (Cell::Const(a), Cell::Const(b)) => {
                    if a != b {
                        return Ok(None);
                    }
                }
                (Cell::Const(a), Cell::Op { var, outer }) | (Cell::Op { var, outer }, Cell::Const(a)) => {
                    restrictions.push((var, outer, a));
                }
                (Cell::Op { var: va, outer: ua }, Cell::Op { var: vb, outer: ub }) => {
                    let (ra, ma) = ind.find(va);
                    let (rb, mb) = ind.find(vb);
                    let a = compose(&ua, &ma);
                    let b = compose(&ub, &mb);
                    if ra != rb {
                        if let Some(bi) = invert(&b) {
                            ind.parent[rb] = ra;
                            ind.label[rb] = compose(&bi, &a);
                            continue;
                        }
                        if let Some(ai) = invert(&a) {
                            ind.parent[ra] = rb;
                            ind.label[ra] = compose(&ai, &b);
                            continue;
                        }
                    }
                    pending.push([(va, ua), (vb, ub)]);
                }
            }
        }
    }
    let total = ind.parent.len();
    let resolved: Vec<(usize, Vec<usize>)> = (0..total).map(|v| ind.find(v)).collect();
    let mut roots: Vec<usize> = resolved.iter().map(|r| r.0).collect::<BTreeSet<_>>().into_iter().collect();
    roots.sort_unstable();
    let mut index = vec![usize::MAX; total];
    for (i, &r) in roots.iter().enumerate() {
        index[r] = i;
    }
    let mut csp = Csp::new(n, roots.len(), budget)?;
    for (var, outer, value) in restrictions {
        let (root, m) = &resolved[var];
        let full = compose(&outer, m);
        let mask = (0..n).filter(|&x| full[x] == value).fold(0u64, |acc, x| acc | 1 << x);
        csp.restrict(index[*root], mask);
    }
    let diag = csp.add_relation((0..n).map(|x| vec![x, x]).collect());
    for [(va, ua), (vb, ub)] in pending {
        let (ra, ma) = &resolved[va];
        let (rb, mb) = &resolved[vb];
        let ia = csp.map_id(&compose(&ua, ma));
        let ib = csp.map_id(&compose(&ub, mb));
        csp.add(&[(index[*ra], ia), (index[*rb], ib)], diag);
    }
    let mut seen = std::collections::HashSet::new();
    for (name, r) in &s.relations {
        let rows = r.to_vecs();
        let rel = csp.add_relation(rows.clone());
        for (oi, &(f, a)) in ind.ops.iter().enumerate() {
            let count = (rows.len() as u64).checked_pow(a as u32).unwrap_or(u64::MAX);
            charge(count).map_err(|_| {
                Error::budget(format!("preserving {name} under {f} needs {count} constraints, over the budget"))
            })?;
            for pick in all_tuples(rows.len(), a) {
                let mut scope = Vec::with_capacity(r.arity());
                for j in 0..r.arity() {
                    let v = ind.offset[oi] + pick.iter().fold(0, |acc, &i| acc * n + rows[i][j]);
                    let (root, m) = &resolved[v];
                    scope.push((index[*root], csp.map_id(m)));
                }
                if seen.insert((scope.clone(), rel)) {
                    csp.add(&scope, rel);
                }
            }
        }
    }
    Ok(Some(Instance { csp, roots: index, resolved }))
}

fn decode(ind_ops: &[(&str, usize)], n: usize, inst: &Instance, sol: &[usize]) -> BTreeMap<String, OpTable> {
    let mut out = BTreeMap::new();
    let mut base = 0;
    for &(f, a) in ind_ops {
        let size = n.pow(a as u32);
        let values = (base..base + size)
            .map(|v| {
                let (root, m) = &inst.resolved[v];
                m[sol[inst.roots[*root]]]
            })
            .collect();
        out.insert(f.to_string(), OpTable { arity: a, domain: n, values });
        base += size;
    }
    out
}

/// Outer unary symbols that can be normalized to the identity: every side is
/// exactly one unary symbol over an operation applied to variables.
fn normalizable_unary(c: &Condition) -> Option<String> {
    let mut first = None;
    for (l, r) in &c.identities {
        for t in [l, r] {
            let (outer, core) = peel(t);
            let Term::App(_, args) = core else { return None };
            if outer.len() != 1 || args.iter().any(|a| !matches!(a, Term::Var(_))) {
                return None;
            }
            first.get_or_insert_with(|| outer[0].to_string());
        }
    }
    first
}

/// Decides whether polymorphisms of `s` satisfy `c`. Unary symbols range over
/// automorphisms when `s` is a core and over endomorphisms otherwise.
pub fn find_polymorphisms(s: &Structure, c: &Condition, budget: u64) -> Result<IdentityReport> {
    s.validate()?;
    if s.domain > 64 {
        return Err(Error::pre("domains above 64 elements are not supported"));
    }
    let unaries: Vec<String> = c.unary_symbols().into_iter().map(String::from).collect();
    let (range, candidates) = if unaries.is_empty() {
        (UnaryRange::NoUnaries, vec![perm_identity(s.domain)])
    } else if non_surjective_endomorphism(s, DEFAULT_SEARCH_BUDGET)?.is_none() {
        (UnaryRange::Automorphisms, automorphisms(s, DEFAULT_SEARCH_BUDGET)?)
    } else {
        (UnaryRange::Endomorphisms, endomorphisms(s, DEFAULT_SEARCH_BUDGET)?)
    };
    // Composing every outer unary with one automorphism preserves solutions,
    // so the first outer unary can be taken up to that action.
    let normal = normalizable_unary(c);
    let reps: Vec<Vec<usize>> = match (&normal, range) {
        (Some(_), UnaryRange::Automorphisms) => vec![perm_identity(s.domain)],
        (Some(_), UnaryRange::Endomorphisms) => {
            let auts = automorphisms(s, DEFAULT_SEARCH_BUDGET)?;
            let mut seen = BTreeSet::new();
            let mut reps = Vec::new();
            for e in &candidates {
                if seen.contains(e) {
                    continue;
                }
                seen.extend(auts.iter().map(|g| compose(g, e)));
                reps.push(e.clone());
            }
            reps
        }
        _ => Vec::new(),
    };
    let fixed = if reps.is_empty() { None } else { normal };
    let free: Vec<&String> = unaries.iter().filter(|u| Some(*u) != fixed.as_ref()).collect();
    let ops = c.operation_symbols();
    let mut nodes = 0u64;
    let mut instances = 0usize;
    let outer_choices = reps.len().max(1);
    for (rep, pick) in (0..outer_choices).flat_map(|r| all_tuples(candidates.len(), free.len()).map(move |p| (r, p))) {
        instances += 1;
        let mut unary: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        if let Some(u) = &fixed {
            unary.insert(u.clone(), reps[rep].clone());
        }
        for (u, &i) in free.iter().zip(&pick) {
            unary.insert((*u).clone(), candidates[i].clone());
        }
        let left = budget.saturating_sub(nodes);
        let Some(mut inst) = build_instance(s, c, &unary, left)? else { continue };
        let sol = inst.csp.solve();
        nodes += inst.csp.nodes;
        if let Some(sol) = sol? {
            let mut tables = decode(&ops, s.domain, &inst, &sol);
            for (u, m) in unary {
                tables.insert(u, OpTable { arity: 1, domain: s.domain, values: m });
            }
            verify_tables(s, c, &tables).map_err(|e| Error::Internal(format!("decoded tables fail: {e}")))?;
            return Ok(IdentityReport { verdict: Verdict::Satisfied(tables), unary_range: range, instances, nodes });
        }
    }
    Ok(IdentityReport { verdict: Verdict::Unsatisfied, unary_range: range, instances, nodes })
}

/// The least m ≤ `max_m` for which the ugly identity with m slots holds.
pub fn least_ugly_m(s: &Structure, max_m: usize, budget: u64) -> Result<Option<usize>> {
    for m in 1..=max_m {
        let c = make_condition(&ConditionKind::Ugly(m))?;
        if matches!(find_polymorphisms(s, &c, budget)?.verdict, Verdict::Satisfied(_)) {
            return Ok(Some(m));
        }
    }
    Ok(None)
}

#[derive(Debug, Clone)]
pub struct PolymorphismDigraph {
    /// Ternary polymorphisms, in lexicographic order of their tables.
    pub m: Vec<OpTable>,
    pub digraph: Digraph,
    pub group: PermGroup,
    pub smooth: bool,
    pub linked: bool,
}

/// The digraph on ternary polymorphisms generated by the projection triangle
/// and the edges α(π₁) → π₂, with the unary polymorphisms acting on it.
pub fn ternary_polymorphism_digraph(s: &Structure, budget: u64) -> Result<PolymorphismDigraph> {
    s.validate()?;
    let n = s.domain;
    if n > 2 {
        return Err(Error::pre(format!("domain of size {n} is too large for the ternary polymorphism digraph")));
    }
    let cube = n.pow(3);
    let table = |values: Vec<usize>, arity: usize| OpTable { arity, domain: n, values };
    let m: Vec<OpTable> =
        all_tuples(n, cube).map(|v| table(v, 3)).filter(|t| t.is_polymorphism(s)).collect();
    let unary: Vec<Vec<usize>> =
        all_tuples(n, n).filter(|v| table(v.clone(), 1).is_polymorphism(s)).collect();
    let index = |t: &[usize]| m.iter().position(|f| f.values == t);
    let proj = |i: usize| -> Vec<usize> { all_tuples(n, 3).map(|x| x[i]).collect() };
    let mut gens: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                gens.push((proj(i), proj(j)));
            }
        }
    }
    for a in &unary {
        let g = (proj(0).iter().map(|&x| a[x]).collect(), proj(1));
        if !gens.contains(&g) {
            gens.push(g);
        }
    }
    let arity = gens.len();
    let vars = n.pow(arity as u32);
    let mut csp = Csp::new(n, vars, budget)?;
    let mut work = 0u64;
    for r in s.relations.values() {
        let rows = r.to_vecs();
        work += (rows.len() as u64).checked_pow(arity as u32).unwrap_or(u64::MAX);
        if work > budget {
            return Err(Error::budget("polymorphism constraints exceed the budget"));
        }
        let rel = csp.add_relation(rows.clone());
        for pick in all_tuples(rows.len(), arity) {
            let scope: Vec<(usize, usize)> =
                (0..r.arity()).map(|j| (pick.iter().fold(0, |acc, &i| acc * n + rows[i][j]), 0)).collect();
            csp.add(&scope, rel);
        }
    }
    let row = |side: usize, t: usize| -> usize {
        gens.iter().fold(0, |acc, g| acc * n + if side == 0 { g.0[t] } else { g.1[t] })
    };
    let watch: Vec<usize> = (0..2).flat_map(|side| (0..cube).map(move |t| (side, t))).map(|(s, t)| row(s, t)).collect();
    let mut edges = Vec::new();
    for p in csp.project_all(&watch)? {
        let (f, g) = p.split_at(cube);
        match (index(f), index(g)) {
            (Some(a), Some(b)) => edges.push((a, b)),
            _ => return Err(Error::Internal("image of generators is not a ternary polymorphism".into())),
        }
    }
    let digraph = Digraph::from_edges(m.len(), &edges)?;
    let perms: Vec<Vec<usize>> = unary
        .iter()
        .filter(|a| invert(a).is_some())
        .map(|a| {
            m.iter()
                .map(|f| index(&f.values.iter().map(|&v| a[v]).collect::<Vec<_>>()).expect("closed under automorphisms"))
                .collect()
        })
        .collect();
    let group = PermGroup::generate(m.len(), perms)?;
    let smooth = digraph.is_smooth();
    let linked = smooth && linkness(&digraph, 1)?.1;
    let core = unary.iter().all(|a| invert(a).is_some());
    if core && !(smooth && linked) {
        return Err(Error::Internal("polymorphism digraph of a core must be smooth and linked".into()));
    }
    Ok(PolymorphismDigraph { m, digraph, group, smooth, linked })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relcore::Relation;

    fn graph(d: Digraph) -> Structure {
        d.to_structure()
    }

    fn satisfied(s: &Structure, kind: ConditionKind) -> bool {
        let c = make_condition(&kind).unwrap();
        let rep = find_polymorphisms(s, &c, 50_000_000).unwrap();
        match rep.verdict {
            Verdict::Satisfied(t) => {
                verify_tables(s, &c, &t).unwrap();
                true
            }
            Verdict::Unsatisfied => false,
        }
    }

    #[test]
    fn wnu3_shape() {
        let c = make_condition(&ConditionKind::Wnu(3)).unwrap();
        assert_eq!(c.to_string(), "w(x,x,y) ≈ w(x,y,x), w(x,y,x) ≈ w(y,x,x)");
        assert!(c.is_minor() && c.is_balanced() && !c.is_idempotent() && !c.is_trivial());
        let i = make_condition(&ConditionKind::IdempotentWnu(3)).unwrap();
        assert!(i.is_idempotent() && !i.is_minor());
    }

    #[test]
    fn ugly_one_shape() {
        let c = make_condition(&ConditionKind::Ugly(1)).unwrap();
        assert_eq!(c.to_string(), "h(a1(x),x,y,x,z,y,z) ≈ h(y,y,x,z,x,z,y)");
        assert!(!c.is_trivial() && !c.is_minor());
    }

    #[test]
    fn pseudoloop_of_k3_is_pseudo_siggers() {
        let p = make_condition(&ConditionKind::Pseudoloop(Digraph::complete(3))).unwrap();
        let ps = make_condition(&ConditionKind::PseudoSiggers).unwrap();
        assert!(p.equivalent(&ps));
        let c5 = make_condition(&ConditionKind::Pseudoloop(Digraph::cycle(5))).unwrap();
        assert!(!c5.equivalent(&ps));
        assert!(!ps.is_trivial() && !c5.is_trivial());
    }

    #[test]
    fn triviality() {
        let c = Condition::new(vec![(Term::flat("f", &["x", "y"]), Term::flat("f", &["x", "y"]))]).unwrap();
        assert!(c.is_trivial());
        let c = Condition::new(vec![(Term::flat("f", &["x", "y"]), Term::flat("f", &["y", "y"]))]).unwrap();
        assert!(c.is_trivial());
        assert!(!make_condition(&ConditionKind::Siggers).unwrap().is_trivial());
        assert!(make_condition(&ConditionKind::Wnu(2)).is_err());
    }

    #[test]
    fn siggers_on_small_graphs() {
        assert!(satisfied(&graph(Digraph::complete(2)), ConditionKind::Siggers));
        assert!(!satisfied(&graph(Digraph::complete(3)), ConditionKind::Siggers));
    }

    #[test]
    fn hexagon_wnu() {
        let c6 = graph(Digraph::cycle(6));
        assert!(!satisfied(&c6, ConditionKind::IdempotentWnu(3)));
        assert!(satisfied(&c6, ConditionKind::Wnu(3)));
    }

    #[test]
    fn pseudo_conditions_on_cores() {
        let c3 = graph(Digraph::directed_cycle(3));
        assert!(satisfied(&c3, ConditionKind::PseudoSiggers));
        assert!(satisfied(&c3, ConditionKind::Ugly(3)));
        assert!(!satisfied(&graph(Digraph::complete(3)), ConditionKind::PseudoSiggers));
    }

    #[test]
    fn two_triangles_have_no_small_pseudoloop() {
        let t = Digraph::symmetric(6, &[(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (5, 3)]).unwrap();
        let s = graph(t);
        let c = make_condition(&ConditionKind::Pseudoloop(Digraph::directed_cycle(2))).unwrap();
        let rep = find_polymorphisms(&s, &c, 50_000_000).unwrap();
        assert_eq!(rep.unary_range, UnaryRange::Endomorphisms);
        assert_eq!(rep.verdict, Verdict::Unsatisfied);
    }

    #[test]
    fn ugly_on_k2() {
        let k2 = graph(Digraph::complete(2));
        assert!(satisfied(&k2, ConditionKind::Ugly(2)));
        assert_eq!(least_ugly_m(&k2, 2, 10_000_000).unwrap(), Some(1));
    }

    #[test]
    fn ternary_digraph_of_k2() {
        let p = ternary_polymorphism_digraph(&graph(Digraph::complete(2)), 10_000_000).unwrap();
        assert_eq!(p.m.len(), 16);
        assert!(p.smooth && p.linked);
        assert_eq!(p.group.order(), 2);
    }

    #[test]
    fn ternary_digraph_of_constants() {
        let s = Structure::new(2).with("C0", Relation::unary([0])).with("C1", Relation::unary([1]));
        let p = ternary_polymorphism_digraph(&s, 10_000_000).unwrap();
        assert_eq!(p.m.len(), 64);
        assert!(p.smooth);
        let one = Structure::new(1).with("E", Relation::collect(2, [vec![0, 0]]));
        let p = ternary_polymorphism_digraph(&one, 1000).unwrap();
        assert_eq!(p.m.len(), 1);
        assert_eq!(p.digraph.loops(), vec![0]);
    }
}
