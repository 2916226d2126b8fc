//! Ranked primitive-positive formulas: representation, text format, rank
//! validation, evaluation and the rpp→pp translation.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::relcore::{perm_pow, Digraph, PermGroup, Relation, Structure, Tuple};

pub const DEFAULT_EVAL_BUDGET: u64 = 10_000_000;
/// Evaluation keeps variable domains in a 128-bit mask.
pub const MAX_EVAL_DOMAIN: usize = 128;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Atom {
    Rel { name: String, args: Vec<String> },
    Eq(String, String),
    Param(usize, String),
    OrbitO(Vec<String>),
}

impl Atom {
    pub fn rel(name: &str, args: &[&str]) -> Atom {
        Atom::Rel { name: name.to_string(), args: args.iter().map(|s| s.to_string()).collect() }
    }

    pub fn vars(&self) -> Vec<&String> {
        match self {
            Atom::Rel { args, .. } | Atom::OrbitO(args) => args.iter().collect(),
            Atom::Eq(a, b) => vec![a, b],
            Atom::Param(_, x) => vec![x],
        }
    }

    fn rename(&self, f: &impl Fn(&str) -> String) -> Atom {
        match self {
            Atom::Rel { name, args } => {
                Atom::Rel { name: name.clone(), args: args.iter().map(|a| f(a)).collect() }
            }
            Atom::Eq(a, b) => Atom::Eq(f(a), f(b)),
            Atom::Param(c, x) => Atom::Param(*c, f(x)),
            Atom::OrbitO(args) => Atom::OrbitO(args.iter().map(|a| f(a)).collect()),
        }
    }

    fn write(&self, out: &mut String) {
        match self {
            Atom::Rel { name, args } => {
                let _ = write!(out, "(atom {name}");
                for a in args {
                    let _ = write!(out, " {a}");
                }
                out.push(')');
            }
            Atom::Eq(a, b) => {
                let _ = write!(out, "(eq {a} {b})");
            }
            Atom::Param(c, x) => {
                let _ = write!(out, "(param {c} {x})");
            }
            Atom::OrbitO(args) => {
                out.push_str("(orbitO");
                for a in args {
                    let _ = write!(out, " {a}");
                }
                out.push(')');
            }
        }
    }
}

/// An existential-conjunctive formula with integer variable ranks.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RPPFormula {
    pub free: Vec<String>,
    pub bound: Vec<String>,
    pub atoms: Vec<Atom>,
    /// Absent entries have rank 0.
    pub rank: BTreeMap<String, i64>,
}

impl RPPFormula {
    pub fn new(free: &[&str]) -> Self {
        RPPFormula { free: free.iter().map(|s| s.to_string()).collect(), ..Default::default() }
    }

    pub fn with_free(free: Vec<String>) -> Self {
        RPPFormula { free, ..Default::default() }
    }

    pub fn arity(&self) -> usize {
        self.free.len()
    }

    pub fn equality_free(&self) -> bool {
        !self.atoms.iter().any(|a| matches!(a, Atom::Eq(..)))
    }

    pub fn rank_of(&self, v: &str) -> i64 {
        self.rank.get(v).copied().unwrap_or(0)
    }

    pub fn set_rank(&mut self, v: &str, r: i64) {
        if r == 0 {
            self.rank.remove(v);
        } else {
            self.rank.insert(v.to_string(), r);
        }
    }

    pub fn free_ranking(&self) -> Vec<i64> {
        self.free.iter().map(|v| self.rank_of(v)).collect()
    }

    pub fn is_zero_ranked(&self) -> bool {
        self.free.iter().all(|v| self.rank_of(v) == 0)
    }

    pub fn vars(&self) -> impl Iterator<Item = &String> {
        self.free.iter().chain(self.bound.iter())
    }

    fn has_var(&self, v: &str) -> bool {
        self.free.iter().any(|x| x == v) || self.bound.iter().any(|x| x == v)
    }

    /// Adds a bound variable with a fresh name and the given rank.
    pub fn fresh(&mut self, prefix: &str, rank: i64) -> String {
        let mut i = self.bound.len() + self.free.len();
        loop {
            let name = format!("{prefix}{i}");
            if !self.has_var(&name) {
                self.bound.push(name.clone());
                self.set_rank(&name, rank);
                return name;
            }
            i += 1;
        }
    }

    pub fn push(&mut self, a: Atom) {
        self.atoms.push(a);
    }

    pub fn rel(&mut self, name: &str, args: &[&str]) {
        self.atoms.push(Atom::rel(name, args));
    }

    pub fn rel_owned(&mut self, name: &str, args: &[String]) {
        self.atoms.push(Atom::Rel { name: name.to_string(), args: args.to_vec() });
    }

    /// Conjoins a copy of `other` with its free variables bound to `args`,
    /// its bound variables renamed apart and every rank shifted by `shift`.
    pub fn embed(&mut self, other: &RPPFormula, args: &[String], shift: i64) {
        let mut names = self.var_names();
        self.embed_into(other, args, shift, &mut names);
    }

    pub(crate) fn var_names(&self) -> HashSet<String> {
        self.vars().cloned().collect()
    }

    /// `embed` with the set of names in use maintained by the caller.
    pub(crate) fn embed_into(&mut self, other: &RPPFormula, args: &[String], shift: i64, names: &mut HashSet<String>) {
        assert_eq!(args.len(), other.free.len(), "embed arity mismatch");
        let mut map: HashMap<&str, String> = HashMap::new();
        for (f, a) in other.free.iter().zip(args) {
            map.insert(f, a.clone());
        }
        let mut counter = names.len();
        for b in &other.bound {
            let name = loop {
                let cand = format!("w{counter}");
                counter += 1;
                if !names.contains(&cand) {
                    break cand;
                }
            };
            names.insert(name.clone());
            self.bound.push(name.clone());
            self.set_rank(&name, other.rank_of(b) + shift);
            map.insert(b, name);
        }
        for a in &other.atoms {
            self.atoms.push(a.rename(&|v: &str| map[v].clone()));
        }
    }

    /// Drops duplicate atoms, keeping first occurrences.
    pub fn dedup(&mut self) {
        let mut seen = HashSet::new();
        self.atoms.retain(|a| seen.insert(a.clone()));
    }

    /// Shifts ranks so the least free-variable rank is 0.
    pub fn normalize_ranks(&mut self) {
        let Some(m) = self.free.iter().map(|v| self.rank_of(v)).min() else { return };
        if m != 0 {
            let vars: Vec<String> = self.vars().cloned().collect();
            for v in vars {
                let r = self.rank_of(&v);
                self.set_rank(&v, r - m);
            }
        }
    }

    /// Names of relation symbols used.
    pub fn relation_names(&self) -> BTreeSet<String> {
        self.atoms
            .iter()
            .filter_map(|a| match a {
                Atom::Rel { name, .. } => Some(name.clone()),
                _ => None,
            })
            .collect()
    }

    pub fn check_declared(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for v in self.vars() {
            if !seen.insert(v) {
                return Err(Error::pre(format!("variable {v} declared twice")));
            }
        }
        for a in &self.atoms {
            for v in a.vars() {
                if !seen.contains(v) {
                    return Err(Error::pre(format!("variable {v} is not declared")));
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("(pp (free");
        for v in &self.free {
            let _ = write!(out, " {v}");
        }
        out.push_str(") (exist");
        for v in &self.bound {
            let _ = write!(out, " {v}");
        }
        out.push(')');
        let ranked: Vec<(&String, i64)> =
            self.vars().filter(|v| self.rank_of(v) != 0).map(|v| (v, self.rank_of(v))).collect();
        if !ranked.is_empty() {
            out.push_str(" (rank");
            for (v, r) in ranked {
                let _ = write!(out, " ({v} {r})");
            }
            out.push(')');
        }
        out.push_str(" (and");
        for a in &self.atoms {
            out.push(' ');
            a.write(&mut out);
        }
        out.push_str("))");
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let sx = parse_sexpr(text)?;
        formula_from_sexpr(&sx)
    }
}

impl std::fmt::Display for RPPFormula {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.to_text())
    }
}

#[derive(Debug, Clone)]
enum SExpr {
    Word(String, usize, usize),
    List(Vec<SExpr>, usize, usize),
}

impl SExpr {
    fn pos(&self) -> (usize, usize) {
        match self {
            SExpr::Word(_, l, c) | SExpr::List(_, l, c) => (*l, *c),
        }
    }
}

fn perr(line: usize, col: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, col, msg: msg.into() }
}

fn parse_sexpr(text: &str) -> Result<SExpr> {
    let mut stack: Vec<(Vec<SExpr>, usize, usize)> = Vec::new();
    let mut result: Option<SExpr> = None;
    let (mut line, mut col) = (1, 0);
    let mut word = String::new();
    let mut wpos = (0, 0);
    let chars = text.chars().peekable();
    let flush = |word: &mut String, wpos: (usize, usize), stack: &mut Vec<(Vec<SExpr>, usize, usize)>| -> Result<()> {
        if word.is_empty() {
            return Ok(());
        }
        let w = SExpr::Word(std::mem::take(word), wpos.0, wpos.1);
        match stack.last_mut() {
            Some(top) => {
                top.0.push(w);
                Ok(())
            }
            None => Err(perr(wpos.0, wpos.1, "expected `(`")),
        }
    };
    for ch in chars {
        col += 1;
        match ch {
            '(' => {
                flush(&mut word, wpos, &mut stack)?;
                if result.is_some() {
                    return Err(perr(line, col, "trailing input after formula"));
                }
                stack.push((Vec::new(), line, col));
            }
            ')' => {
                flush(&mut word, wpos, &mut stack)?;
                let (items, l, c) = stack.pop().ok_or_else(|| perr(line, col, "unbalanced `)`"))?;
                let list = SExpr::List(items, l, c);
                match stack.last_mut() {
                    Some(top) => top.0.push(list),
                    None => result = Some(list),
                }
            }
            c if c.is_whitespace() => {
                flush(&mut word, wpos, &mut stack)?;
                if c == '\n' {
                    line += 1;
                    col = 0;
                }
            }
            c => {
                if word.is_empty() {
                    wpos = (line, col);
                }
                if result.is_some() && stack.is_empty() {
                    return Err(perr(line, col, "trailing input after formula"));
                }
                word.push(c);
            }
        }
    }
    if let Some((_, l, c)) = stack.last() {
        return Err(perr(*l, *c, "unclosed `(`"));
    }
    if !word.is_empty() {
        return Err(perr(wpos.0, wpos.1, "expected `(`"));
    }
    result.ok_or_else(|| perr(1, 1, "empty input"))
}

fn is_ident(s: &str) -> bool {
    let mut cs = s.chars();
    matches!(cs.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && cs.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '\'' || c == '~' || c == '@')
}

fn word_of(e: &SExpr) -> Result<(&str, usize, usize)> {
    match e {
        SExpr::Word(w, l, c) => Ok((w, *l, *c)),
        SExpr::List(_, l, c) => Err(perr(*l, *c, "expected a word")),
    }
}

fn ident_of(e: &SExpr) -> Result<String> {
    let (w, l, c) = word_of(e)?;
    if !is_ident(w) {
        return Err(perr(l, c, format!("`{w}` is not an identifier")));
    }
    Ok(w.to_string())
}

fn list_with_head<'e>(e: &'e SExpr, head: &str) -> Result<&'e [SExpr]> {
    match e {
        SExpr::List(items, l, c) => match items.first() {
            Some(SExpr::Word(w, ..)) if w == head => Ok(&items[1..]),
            _ => Err(perr(*l, *c, format!("expected `({head} ...)`"))),
        },
        SExpr::Word(_, l, c) => Err(perr(*l, *c, format!("expected `({head} ...)`"))),
    }
}

fn formula_from_sexpr(e: &SExpr) -> Result<RPPFormula> {
    let items = list_with_head(e, "pp")?;
    let (l, c) = e.pos();
    let mut it = items.iter();
    let free = it.next().ok_or_else(|| perr(l, c, "missing (free ...)"))?;
    let exist = it.next().ok_or_else(|| perr(l, c, "missing (exist ...)"))?;
    let mut f = RPPFormula {
        free: list_with_head(free, "free")?.iter().map(ident_of).collect::<Result<_>>()?,
        bound: list_with_head(exist, "exist")?.iter().map(ident_of).collect::<Result<_>>()?,
        ..Default::default()
    };
    let mut next = it.next().ok_or_else(|| perr(l, c, "missing (and ...)"))?;
    if let Ok(ranks) = list_with_head(next, "rank") {
        for entry in ranks {
            let (rl, rc) = entry.pos();
            match entry {
                SExpr::List(pair, ..) if pair.len() == 2 => {
                    let v = ident_of(&pair[0])?;
                    let (w, wl, wc) = word_of(&pair[1])?;
                    let r = w.parse::<i64>().map_err(|_| perr(wl, wc, format!("bad rank `{w}`")))?;
                    f.set_rank(&v, r);
                }
                _ => return Err(perr(rl, rc, "rank entries have the form (var n)")),
            }
        }
        next = it.next().ok_or_else(|| perr(l, c, "missing (and ...)"))?;
    }
    for a in list_with_head(next, "and")? {
        f.atoms.push(atom_from_sexpr(a)?);
    }
    if let Some(extra) = it.next() {
        let (el, ec) = extra.pos();
        return Err(perr(el, ec, "unexpected trailing block"));
    }
    f.check_declared().map_err(|e| perr(l, c, e.to_string()))?;
    for v in f.rank.keys() {
        if !f.has_var(v) {
            return Err(perr(l, c, format!("rank given for undeclared variable {v}")));
        }
    }
    Ok(f)
}

fn atom_from_sexpr(e: &SExpr) -> Result<Atom> {
    let (l, c) = e.pos();
    let items = match e {
        SExpr::List(items, ..) if !items.is_empty() => items,
        _ => return Err(perr(l, c, "expected an atom")),
    };
    let (head, ..) = word_of(&items[0])?;
    let rest = &items[1..];
    match head {
        "atom" => {
            if rest.len() < 2 {
                return Err(perr(l, c, "atom needs a name and at least one variable"));
            }
            Ok(Atom::Rel {
                name: ident_of(&rest[0])?,
                args: rest[1..].iter().map(ident_of).collect::<Result<_>>()?,
            })
        }
        "eq" if rest.len() == 2 => Ok(Atom::Eq(ident_of(&rest[0])?, ident_of(&rest[1])?)),
        "param" if rest.len() == 2 => {
            let (w, wl, wc) = word_of(&rest[0])?;
            let a = w.parse::<usize>().map_err(|_| perr(wl, wc, format!("bad element `{w}`")))?;
            Ok(Atom::Param(a, ident_of(&rest[1])?))
        }
        "orbitO" if !rest.is_empty() => Ok(Atom::OrbitO(rest.iter().map(ident_of).collect::<Result<_>>()?)),
        _ => Err(perr(l, c, format!("unknown or malformed atom `{head}`"))),
    }
}

/// A relation with a ranking of its coordinates, normalized to minimum 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedRelation {
    pub relation: Relation,
    pub ranking: Vec<i64>,
}

impl RankedRelation {
    pub fn new(relation: Relation, ranking: Vec<i64>) -> Self {
        assert_eq!(relation.arity(), ranking.len(), "ranking length must equal arity");
        let m = ranking.iter().copied().min().unwrap_or(0);
        RankedRelation { relation, ranking: ranking.into_iter().map(|r| r - m).collect() }
    }

    pub fn zero(relation: Relation) -> Self {
        let k = relation.arity();
        RankedRelation { relation, ranking: vec![0; k] }
    }

    /// The digraph relation with ranking (0, 1).
    pub fn arrow01(d: &Digraph) -> Self {
        RankedRelation { relation: d.edges().clone(), ranking: vec![0, 1] }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankViolation {
    pub atom_index: usize,
    pub atom: String,
    pub reason: String,
}

/// Checks rank consistency against declared rankings (by relation name).
/// `O` atoms and parameters are 0-ranked.
pub fn validate_ranking(
    f: &RPPFormula,
    declared: &BTreeMap<String, Vec<i64>>,
) -> std::result::Result<(), RankViolation> {
    for (i, a) in f.atoms.iter().enumerate() {
        let fail = |reason: String| {
            let mut s = String::new();
            a.write(&mut s);
            RankViolation { atom_index: i, atom: s, reason }
        };
        match a {
            Atom::Rel { name, args } => {
                let decl = declared.get(name).ok_or_else(|| fail(format!("no ranking declared for {name}")))?;
                if decl.len() != args.len() {
                    return Err(fail(format!("{name} has arity {}", decl.len())));
                }
                let shifts: BTreeSet<i64> =
                    args.iter().zip(decl).map(|(v, d)| f.rank_of(v) - d).collect();
                if shifts.len() > 1 {
                    return Err(fail("rank vector is not a shift of the declared ranking".into()));
                }
            }
            Atom::Eq(x, y) => {
                if f.rank_of(x) != f.rank_of(y) {
                    return Err(fail("equality between variables of different rank".into()));
                }
            }
            Atom::OrbitO(args) => {
                let ranks: BTreeSet<i64> = args.iter().map(|v| f.rank_of(v)).collect();
                if ranks.len() > 1 {
                    return Err(fail("orbit atom spans several ranks".into()));
                }
            }
            Atom::Param(..) => {}
        }
    }
    Ok(())
}

/// Interpretation of relation names, plus the group behind `orbitO`.
#[derive(Clone)]
pub struct Env<'a> {
    pub domain: usize,
    rels: BTreeMap<String, &'a Relation>,
    group: Option<&'a PermGroup>,
    pub budget: u64,
}

impl<'a> Env<'a> {
    pub fn new(s: &'a Structure) -> Self {
        Env {
            domain: s.domain,
            rels: s.relations.iter().map(|(k, v)| (k.clone(), v)).collect(),
            group: None,
            budget: DEFAULT_EVAL_BUDGET,
        }
    }

    pub fn bare(domain: usize) -> Self {
        Env { domain, rels: BTreeMap::new(), group: None, budget: DEFAULT_EVAL_BUDGET }
    }

    pub fn with_rel(mut self, name: &str, r: &'a Relation) -> Self {
        self.rels.insert(name.to_string(), r);
        self
    }

    pub fn with_rels(mut self, rels: &'a BTreeMap<String, Relation>) -> Self {
        for (k, v) in rels {
            self.rels.insert(k.clone(), v);
        }
        self
    }

    pub fn with_group(mut self, g: &'a PermGroup) -> Self {
        self.group = Some(g);
        self
    }

    pub fn with_budget(mut self, b: u64) -> Self {
        self.budget = b;
        self
    }

    pub fn relation(&self, name: &str) -> Result<&'a Relation> {
        self.rels.get(name).copied().ok_or_else(|| Error::Unresolved(name.to_string()))
    }

    pub fn group(&self) -> Option<&'a PermGroup> {
        self.group
    }
}

type Dom = u128;

fn bit(a: usize) -> Dom {
    1u128 << a
}

enum Con<'a> {
    Table { vars: Vec<usize>, tuples: Vec<&'a [usize]>, reps: Vec<(usize, usize)> },
    Eq(usize, usize),
}

impl Con<'_> {
    fn vars(&self) -> Vec<usize> {
        match self {
            Con::Table { vars, .. } => vars.clone(),
            Con::Eq(a, b) => vec![*a, *b],
        }
    }

    /// Narrows domains; returns the changed variables or `None` on a wipe-out.
    fn revise(&self, dom: &mut [Dom], changed: &mut Vec<usize>) -> bool {
        match self {
            Con::Eq(a, b) => {
                let m = dom[*a] & dom[*b];
                if m == 0 {
                    return false;
                }
                for &v in [a, b] {
                    if dom[v] != m {
                        dom[v] = m;
                        changed.push(v);
                    }
                }
                true
            }
            Con::Table { vars, tuples, reps } => {
                let k = vars.len();
                let mut supp = [0u128; 16];
                let mut supp_vec;
                let supp: &mut [Dom] = if k <= 16 {
                    &mut supp[..k]
                } else {
                    supp_vec = vec![0; k];
                    &mut supp_vec
                };
                'tuples: for t in tuples {
                    for i in 0..k {
                        if dom[vars[i]] & bit(t[i]) == 0 {
                            continue 'tuples;
                        }
                    }
                    for &(i, j) in reps {
                        if t[i] != t[j] {
                            continue 'tuples;
                        }
                    }
                    for i in 0..k {
                        supp[i] |= bit(t[i]);
                    }
                }
                for i in 0..k {
                    let v = vars[i];
                    let m = dom[v] & supp[i];
                    if m == 0 {
                        return false;
                    }
                    if m != dom[v] {
                        dom[v] = m;
                        changed.push(v);
                    }
                }
                true
            }
        }
    }
}

struct Compiled<'a> {
    nfree: usize,
    init: Vec<Dom>,
    cons: Vec<Con<'a>>,
    watch: Vec<Vec<usize>>,
}

fn compile<'a>(f: &RPPFormula, env: &Env<'a>) -> Result<Compiled<'a>> {
    f.check_declared()?;
    let n = env.domain;
    if n > MAX_EVAL_DOMAIN {
        return Err(Error::pre(format!("evaluation supports domains up to {MAX_EVAL_DOMAIN}")));
    }
    let index: HashMap<&str, usize> = f.vars().enumerate().map(|(i, v)| (v.as_str(), i)).collect();
    let nvars = index.len();
    let full: Dom = if n == 128 { !0 } else { bit(n) - 1 };
    let mut init = vec![full; nvars];
    let mut cons = Vec::new();
    let mut seen = HashSet::new();
    for a in &f.atoms {
        if !seen.insert(a) {
            continue;
        }
        match a {
            Atom::Param(c, x) => {
                if *c >= n {
                    return Err(Error::pre(format!("parameter {c} outside the domain")));
                }
                init[index[x.as_str()]] &= bit(*c);
            }
            Atom::Eq(x, y) => {
                let (i, j) = (index[x.as_str()], index[y.as_str()]);
                if i != j {
                    cons.push(Con::Eq(i, j));
                }
            }
            Atom::Rel { name, args } => {
                let r = env.relation(name)?;
                if r.arity() != args.len() {
                    return Err(Error::pre(format!(
                        "{name} has arity {} but is applied to {} variables",
                        r.arity(),
                        args.len()
                    )));
                }
                if r.max_entry().is_some_and(|m| m >= n) {
                    return Err(Error::pre(format!("{name} has entries outside the domain")));
                }
                cons.push(table(args, r.iter().map(|t| t.as_slice()).collect(), &index));
            }
            Atom::OrbitO(args) => {
                let g = env.group().ok_or_else(|| Error::Unresolved("O".into()))?;
                if g.degree() != args.len() {
                    return Err(Error::pre(format!("O has arity {} but got {} variables", g.degree(), args.len())));
                }
                cons.push(table(args, g.elements().iter().map(|t| t.as_slice()).collect(), &index));
            }
        }
    }
    let mut watch = vec![Vec::new(); nvars];
    for (ci, c) in cons.iter().enumerate() {
        let mut vs = c.vars();
        vs.sort_unstable();
        vs.dedup();
        for v in vs {
            watch[v].push(ci);
        }
    }
    Ok(Compiled { nfree: f.free.len(), init, cons, watch })
}

fn table<'a>(args: &[String], tuples: Vec<&'a [usize]>, index: &HashMap<&str, usize>) -> Con<'a> {
    let vars: Vec<usize> = args.iter().map(|a| index[a.as_str()]).collect();
    let mut reps = Vec::new();
    for i in 0..vars.len() {
        if let Some(j) = (0..i).find(|&j| vars[j] == vars[i]) {
            reps.push((j, i));
        }
    }
    Con::Table { vars, tuples, reps }
}

struct Search<'c, 'a> {
    c: &'c Compiled<'a>,
    nodes: u64,
    budget: u64,
}

impl Search<'_, '_> {
    fn propagate(&self, dom: &mut [Dom], start: Option<usize>) -> bool {
        let ncons = self.c.cons.len();
        let mut queued = vec![false; ncons];
        let mut queue: std::collections::VecDeque<usize> = match start {
            Some(v) => self.c.watch[v].iter().copied().collect(),
            None => (0..ncons).collect(),
        };
        for &ci in &queue {
            queued[ci] = true;
        }
        let mut changed = Vec::new();
        while let Some(ci) = queue.pop_front() {
            queued[ci] = false;
            changed.clear();
            if !self.c.cons[ci].revise(dom, &mut changed) {
                return false;
            }
            for &v in &changed {
                for &cj in &self.c.watch[v] {
                    if cj != ci && !queued[cj] {
                        queued[cj] = true;
                        queue.push_back(cj);
                    }
                }
            }
        }
        true
    }

    fn pick(&self, dom: &[Dom], range: std::ops::Range<usize>) -> Option<usize> {
        range
            .filter(|&v| dom[v].count_ones() > 1)
            .min_by_key(|&v| (dom[v].count_ones(), v))
    }

    fn tick(&mut self) -> Result<()> {
        self.nodes += 1;
        if self.nodes > self.budget {
            return Err(Error::budget(format!("evaluation exceeded {} search nodes", self.budget)));
        }
        Ok(())
    }

    /// Depth-first search over the bound variables with an explicit stack.
    fn exists(&mut self, dom: &[Dom]) -> Result<bool> {
        let range = self.c.nfree..dom.len();
        let mut stack: Vec<(Vec<Dom>, usize, Dom)> = Vec::new();
        let mut cur = dom.to_vec();
        loop {
            let Some(v) = self.pick(&cur, range.clone()) else { return Ok(true) };
            let vals = cur[v];
            stack.push((cur, v, vals));
            cur = loop {
                let Some(top) = stack.last_mut() else { return Ok(false) };
                if top.2 == 0 {
                    stack.pop();
                    continue;
                }
                let a = top.2.trailing_zeros() as usize;
                top.2 &= top.2 - 1;
                let mut d2 = top.0.clone();
                d2[top.1] = bit(a);
                let v = top.1;
                self.tick()?;
                if self.propagate(&mut d2, Some(v)) {
                    break d2;
                }
            };
        }
    }

    fn enumerate(&mut self, dom: &mut Vec<Dom>, out: &mut BTreeSet<Tuple>) -> Result<()> {
        match self.pick(dom, 0..self.c.nfree) {
            None => {
                if self.exists(dom)? {
                    out.insert(dom[..self.c.nfree].iter().map(|d| d.trailing_zeros() as usize).collect());
                }
                Ok(())
            }
            Some(v) => {
                let mut vals = dom[v];
                while vals != 0 {
                    let a = vals.trailing_zeros() as usize;
                    vals &= vals - 1;
                    self.tick()?;
                    let mut d2 = dom.clone();
                    d2[v] = bit(a);
                    if self.propagate(&mut d2, Some(v)) {
                        self.enumerate(&mut d2, out)?;
                    }
                }
                Ok(())
            }
        }
    }
}

/// The relation defined on the free variables, in their declared order.
pub fn evaluate(f: &RPPFormula, env: &Env) -> Result<Relation> {
    let c = compile(f, env)?;
    let mut s = Search { c: &c, nodes: 0, budget: env.budget };
    let mut dom = c.init.clone();
    let mut out = BTreeSet::new();
    if dom.iter().all(|&d| d != 0) && s.propagate(&mut dom, None) {
        s.enumerate(&mut dom, &mut out)?;
    }
    Ok(Relation::collect(f.free.len(), out))
}

/// The pair (L, closure) for k-linkness: L(x0,x1) = ∃z x0 →ᵏ z ∧ x1 →ᵏ z, and
/// the closure chains `n` intermediate links between x0 and x1.
pub fn make_link_formulas(k: usize, n: usize) -> (RPPFormula, RPPFormula) {
    let link = link_formula("E", k);
    let mut closure = RPPFormula::new(&["x0", "x1"]);
    let mut prev = "x0".to_string();
    for _ in 0..n {
        let z = closure.fresh("c", 0);
        closure.embed(&link, &[prev.clone(), z.clone()], 0);
        prev = z;
    }
    closure.embed(&link, &[prev, "x1".to_string()], 0);
    (link, closure)
}

/// Adds a path of `k` edges over `edge` from `from` (at rank `r0`) and returns its end.
pub fn add_path(f: &mut RPPFormula, edge: &str, from: &str, k: usize, r0: i64) -> String {
    let mut cur = from.to_string();
    for i in 0..k {
        let next = f.fresh("p", r0 + i as i64 + 1);
        f.rel_owned(edge, &[cur, next.clone()]);
        cur = next;
    }
    cur
}

/// ∃z x0 →ᵏ z ∧ x1 →ᵏ z over the named edge relation.
pub fn link_formula(edge: &str, k: usize) -> RPPFormula {
    let mut f = RPPFormula::new(&["x0", "x1"]);
    if k == 0 {
        f.push(Atom::Eq("x0".into(), "x1".into()));
        return f;
    }
    let mut cur0 = "x0".to_string();
    let mut cur1 = "x1".to_string();
    for i in 1..k {
        let a = f.fresh("p", i as i64);
        let b = f.fresh("p", i as i64);
        f.rel_owned(edge, &[cur0, a.clone()]);
        f.rel_owned(edge, &[cur1, b.clone()]);
        cur0 = a;
        cur1 = b;
    }
    let z = f.fresh("z", k as i64);
    f.rel_owned(edge, &[cur0, z.clone()]);
    f.rel_owned(edge, &[cur1, z]);
    f
}

/// Substitutes named definitions into `f` until only base symbols remain.
/// Each definition's free-variable ranks fix the shift of its copy.
pub fn inline_definitions(f: &RPPFormula, defs: &BTreeMap<String, RPPFormula>) -> Result<RPPFormula> {
    inline_at_depth(f, defs, 0)
}

fn inline_at_depth(f: &RPPFormula, defs: &BTreeMap<String, RPPFormula>, depth: usize) -> Result<RPPFormula> {
    let mut out = RPPFormula { free: f.free.clone(), bound: f.bound.clone(), atoms: Vec::new(), rank: f.rank.clone() };
    inline_into(&mut out, &f.atoms, defs, depth)?;
    Ok(out)
}

fn inline_into(
    out: &mut RPPFormula,
    atoms: &[Atom],
    defs: &BTreeMap<String, RPPFormula>,
    depth: usize,
) -> Result<()> {
    if depth > 64 {
        return Err(Error::pre("definitions are cyclic"));
    }
    for a in atoms {
        match a {
            Atom::Rel { name, args } if defs.contains_key(name) => {
                let def = &defs[name];
                if def.free.len() != args.len() {
                    return Err(Error::pre(format!("{name} applied with wrong arity")));
                }
                let shift = out.rank_of(&args[0]) - def.rank_of(&def.free[0]);
                let inner = inline_at_depth(def, defs, depth + 1)?;
                out.embed(&inner, args, shift);
            }
            other => out.atoms.push(other.clone()),
        }
    }
    Ok(())
}

/// Translates an rpp-formula over `edge` read as →′ = → + g into a plain pp-formula
/// over `edge` read as →. Auxiliary 0-ranked relations at rank r are replaced by
/// their images under g^(−r), returned under new names.
pub fn rpp_to_pp(
    f: &RPPFormula,
    edge: &str,
    d: &Digraph,
    g: &[usize],
    aux: &BTreeMap<String, Relation>,
) -> Result<(RPPFormula, BTreeMap<String, Relation>)> {
    if g.len() != d.n() || d.edges().image(g) != *d.edges() {
        return Err(Error::pre("g is not an automorphism of the digraph"));
    }
    if !f.is_zero_ranked() {
        return Err(Error::pre("formula must be 0-ranked on its free variables"));
    }
    let mut declared: BTreeMap<String, Vec<i64>> = BTreeMap::new();
    declared.insert(edge.to_string(), vec![0, 1]);
    for (name, r) in aux {
        declared.insert(name.clone(), vec![0; r.arity()]);
    }
    validate_ranking(f, &declared).map_err(|v| Error::pre(format!("rank violation at {}: {}", v.atom, v.reason)))?;
    if f.atoms.iter().any(|a| matches!(a, Atom::OrbitO(_))) {
        return Err(Error::pre("orbit atoms must be expanded before translation"));
    }
    let mut out = RPPFormula { free: f.free.clone(), bound: f.bound.clone(), atoms: Vec::new(), rank: BTreeMap::new() };
    let mut moved: BTreeMap<String, Relation> = BTreeMap::new();
    for a in &f.atoms {
        match a {
            Atom::Param(c, x) => {
                let r = f.rank_of(x);
                out.push(Atom::Param(perm_pow(g, -r)[*c], x.clone()));
            }
            Atom::Rel { name, args } if name != edge => {
                let r = f.rank_of(&args[0]);
                let new_name = if r == 0 { name.clone() } else { format!("{name}@{r}") };
                moved.entry(new_name.clone()).or_insert_with(|| aux[name].image(&perm_pow(g, -r)));
                out.push(Atom::Rel { name: new_name, args: args.clone() });
            }
            other => out.push(other.clone()),
        }
    }
    Ok((out, moved))
}

/// A d-dimensional pp-interpretation given by formulas over the source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PPInterpretation {
    pub dimension: usize,
    pub domain_formula: RPPFormula,
    pub value_map: BTreeMap<Tuple, usize>,
    /// Keyed by target relation name; `=` is the kernel of the map.
    pub preimage_formulas: BTreeMap<String, RPPFormula>,
}

impl PPInterpretation {
    /// Checks each preimage formula against the target structure.
    pub fn verify(&self, env: &Env, target: &Structure) -> Result<()> {
        let dom = evaluate(&self.domain_formula, env)?;
        let keys: BTreeSet<Tuple> = self.value_map.keys().cloned().collect();
        if *dom.tuples() != keys {
            return Err(Error::Internal("domain formula does not match the value map".into()));
        }
        let image: BTreeSet<usize> = self.value_map.values().copied().collect();
        if image.len() != target.domain || image.iter().any(|&b| b >= target.domain) {
            return Err(Error::Internal("value map is not onto the target".into()));
        }
        for (name, f) in &self.preimage_formulas {
            let got = evaluate(f, env)?;
            let d = self.dimension;
            let want = if name == "=" {
                Relation::collect(
                    2 * d,
                    self.value_map.iter().flat_map(|(a, x)| {
                        self.value_map.iter().filter(move |(_, y)| *y == x).map(move |(b, _)| [a.clone(), b.clone()].concat())
                    }),
                )
            } else {
                let r = target.relation(name)?;
                let blocks = f.free.len() / d;
                let entries: Vec<(&Tuple, &usize)> = self.value_map.iter().collect();
                let mut want = Relation::empty(f.free.len());
                for t in r.iter() {
                    let mut partial: Vec<Tuple> = vec![Vec::new()];
                    for &b in t.iter().take(blocks) {
                        let pre: Vec<&Tuple> = entries.iter().filter(|(_, &v)| v == b).map(|(k, _)| *k).collect();
                        partial = partial
                            .iter()
                            .flat_map(|p| pre.iter().map(move |k| [p.clone(), (*k).clone()].concat()))
                            .collect();
                    }
                    for p in partial {
                        want.insert(p);
                    }
                }
                want
            };
            if got != want {
                return Err(Error::Internal(format!("preimage formula for {name} is wrong")));
            }
        }
        Ok(())
    }
}
