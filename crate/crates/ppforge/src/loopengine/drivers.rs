//! Drivers: repeated finite constructions on shrinking subsets, for loops
//! (group orbits as O) and pseudoloops (shifted digraph with parameters).

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use super::second::smooth_part_formula;
use super::{main_finite, DerivationTrace, MainFiniteOutcome, OrWitness, Step};
use crate::dianalysis::{components_and_algebraic_length, linkness, minimal_k, smooth_part};
use crate::error::{Error, Result};
use crate::pplogic::{evaluate, make_link_formulas, rpp_to_pp, validate_ranking, Atom, Env, RPPFormula};
use crate::relcore::{quotient_digraph, Digraph, Perm, PermGroup, RankedGroup, Relation};

/// Summary of one finite round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Round {
    /// Universe of the round in base numbering.
    pub universe: Vec<usize>,
    pub k: usize,
    /// `subset`, `or`, `loop` or `fallback`.
    pub result: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DriverOutcome {
    Loop { b: BTreeSet<usize>, step: Option<String> },
    QuotientLoop { orbit: usize, elements: Vec<usize> },
    /// For pseudoloops `pp_formula` is the parameter-using formula over →; for
    /// the symmetric case it may also use the steps of the trace.
    OrWitness { witness: OrWitness, pp_formula: Option<RPPFormula> },
    FallbackFailed { diagnostics: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DriverResult {
    pub outcome: DriverOutcome,
    /// All definitions, over the base digraph (→′ for pseudoloops) and base group.
    pub trace: DerivationTrace,
    pub rounds: Vec<Round>,
    /// The automorphism g with →′ = → + g.
    pub shift: Option<Perm>,
    /// The lifted walk a₀ … aₙ.
    pub walk: Vec<usize>,
}

/// Definitions over the base digraph, built by lifting round traces.
pub(crate) struct Combined<'a> {
    pub d: &'a Digraph,
    pub g: &'a PermGroup,
    pub trace: DerivationTrace,
    pub rels: BTreeMap<String, Relation>,
    ranks: BTreeMap<String, Vec<i64>>,
    budget: u64,
}

impl<'a> Combined<'a> {
    pub fn new(d: &'a Digraph, g: &'a PermGroup, budget: u64) -> Self {
        let mut rels = BTreeMap::new();
        rels.insert("E".to_string(), d.edges().clone());
        let mut ranks = BTreeMap::new();
        ranks.insert("E".to_string(), vec![0, 1]);
        Combined { d, g, trace: DerivationTrace::default(), rels, ranks, budget }
    }

    pub fn push(&mut self, name: &str, lemma: &str, f: RPPFormula, expect: Option<&Relation>) -> Result<Relation> {
        validate_ranking(&f, &self.ranks)
            .map_err(|v| Error::Internal(format!("lifted {name}: rank violation at {}: {}", v.atom, v.reason)))?;
        let env = Env::bare(self.d.n()).with_rels(&self.rels).with_group(self.g).with_budget(self.budget);
        let rel = evaluate(&f, &env)?;
        if let Some(e) = expect {
            if *e != rel {
                return Err(Error::Internal(format!("lifted step {name} does not define the lifted relation")));
            }
        }
        let ranking = f.free_ranking();
        self.rels.insert(name.to_string(), rel.clone());
        self.ranks.insert(name.to_string(), ranking.clone());
        self.trace.steps.push(Step { name: name.to_string(), lemma: lemma.to_string(), formula: f, ranking, relation: rel.clone() });
        Ok(rel)
    }
}

/// How round-local `orbitO` atoms are lifted.
#[derive(Clone, Copy)]
enum OrbitLift {
    /// Orbit of the restricted base group: widen to full arity.
    Widen,
    /// Trivial group: the orbit is a tuple of parameters.
    Params,
}

struct Universe {
    /// Step naming the universe in the combined trace, if proper.
    step: Option<String>,
    order: Vec<usize>,
    /// Closed under adjacency of the base digraph.
    closed: bool,
}

fn union_find_roots(vars: &[String], links: &[(String, String)]) -> BTreeMap<String, String> {
    let mut parent: BTreeMap<String, String> = vars.iter().map(|v| (v.clone(), v.clone())).collect();
    fn find(p: &mut BTreeMap<String, String>, x: &str) -> String {
        let mut r = x.to_string();
        while p[&r] != r {
            r = p[&r].clone();
        }
        r
    }
    for (a, b) in links {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            parent.insert(hi, lo);
        }
    }
    vars.iter().map(|v| (v.clone(), find(&mut parent, v))).collect()
}

/// Lifts a round-local formula to base numbering and adds universe atoms
/// where membership is not already implied.
fn lift_formula(
    f: &RPPFormula,
    u: &Universe,
    names: &BTreeMap<String, String>,
    n_base: usize,
    orbit: OrbitLift,
) -> RPPFormula {
    let mut out = RPPFormula { free: f.free.clone(), bound: f.bound.clone(), atoms: Vec::new(), rank: f.rank.clone() };
    let mut guaranteed: BTreeSet<String> = BTreeSet::new();
    let mut links: Vec<(String, String)> = Vec::new();
    let mut in_edge: BTreeSet<String> = BTreeSet::new();
    // Padding variables of widened orbits range outside the universe.
    let mut padding: BTreeSet<String> = BTreeSet::new();
    for a in &f.atoms {
        match a {
            Atom::Rel { name, args } if name == "E" => {
                out.push(a.clone());
                links.push((args[0].clone(), args[1].clone()));
                in_edge.extend(args.iter().cloned());
            }
            Atom::Rel { name, args } => {
                out.push(Atom::Rel { name: names.get(name).cloned().unwrap_or_else(|| name.clone()), args: args.clone() });
                guaranteed.extend(args.iter().cloned());
            }
            Atom::Eq(x, y) => {
                out.push(a.clone());
                links.push((x.clone(), y.clone()));
            }
            Atom::Param(c, x) => {
                out.push(Atom::Param(u.order[*c], x.clone()));
                guaranteed.insert(x.clone());
            }
            Atom::OrbitO(args) => {
                guaranteed.extend(args.iter().cloned());
                match orbit {
                    OrbitLift::Params => {
                        for (i, x) in args.iter().enumerate() {
                            out.push(Atom::Param(u.order[i], x.clone()));
                        }
                    }
                    OrbitLift::Widen => {
                        let rank = f.rank_of(&args[0]);
                        let mut full: Vec<Option<String>> = vec![None; n_base];
                        for (i, x) in args.iter().enumerate() {
                            full[u.order[i]] = Some(x.clone());
                        }
                        let full: Vec<String> = full
                            .into_iter()
                            .map(|v| {
                                v.unwrap_or_else(|| {
                                    let o = out.fresh("o", rank);
                                    padding.insert(o.clone());
                                    o
                                })
                            })
                            .collect();
                        out.push(Atom::OrbitO(full));
                    }
                }
            }
        }
    }
    if let Some(us) = &u.step {
        let vars: Vec<String> = out.vars().filter(|v| !padding.contains(*v)).cloned().collect();
        let mut need: Vec<String> = Vec::new();
        if u.closed {
            let roots = union_find_roots(&vars, &links);
            let mut covered: BTreeSet<String> = BTreeSet::new();
            for v in &guaranteed {
                if let Some(r) = roots.get(v) {
                    covered.insert(r.clone());
                }
            }
            for v in &vars {
                let r = &roots[v];
                if !covered.contains(r) {
                    covered.insert(r.clone());
                    need.push(v.clone());
                }
            }
        } else {
            for v in &vars {
                if !guaranteed.contains(v) {
                    need.push(v.clone());
                }
            }
        }
        for v in need {
            out.push(Atom::Rel { name: us.clone(), args: vec![v] });
        }
    }
    out
}

fn lift_relation(r: &Relation, order: &[usize]) -> Relation {
    Relation::collect(r.arity(), r.iter().map(|t| t.iter().map(|&a| order[a]).collect()))
}

/// Lifts every step of a round trace into the combined trace; returns the name map.
fn lift_trace(
    comb: &mut Combined,
    trace: &DerivationTrace,
    u: &Universe,
    round: usize,
    orbit: OrbitLift,
) -> Result<BTreeMap<String, String>> {
    let mut names: BTreeMap<String, String> = BTreeMap::new();
    for s in &trace.steps {
        let lifted = lift_formula(&s.formula, u, &names, comb.d.n(), orbit);
        let new_name = format!("r{round}_{}", s.name);
        let want = lift_relation(&s.relation, &u.order);
        comb.push(&new_name, &s.lemma, lifted, Some(&want))?;
        names.insert(s.name.clone(), new_name);
    }
    Ok(names)
}

fn full_power(d: &Digraph, k: usize) -> bool {
    d.power(k).edges().len() == d.n() * d.n()
}

/// Expands definitions one level at a time, removing duplicate atoms between levels.
pub(crate) fn flatten(f: &RPPFormula, defs: &BTreeMap<String, RPPFormula>) -> Result<RPPFormula> {
    let mut cur = f.clone();
    cur.dedup();
    for _ in 0..256 {
        if !cur.atoms.iter().any(|a| matches!(a, Atom::Rel { name, .. } if defs.contains_key(name))) {
            return Ok(cur);
        }
        let atoms = std::mem::take(&mut cur.atoms);
        let mut names = cur.var_names();
        for a in atoms {
            match &a {
                Atom::Rel { name, args } if defs.contains_key(name) => {
                    let def = &defs[name];
                    let shift = cur.rank_of(&args[0]) - def.rank_of(&def.free[0]);
                    cur.embed_into(def, args, shift, &mut names);
                }
                _ => cur.atoms.push(a),
            }
        }
        cur.dedup();
    }
    Err(Error::Internal("definition nesting too deep".into()))
}

/// Repeats the finite construction with k = 1 and the group as O, shrinking to
/// subsets, until a loop set or an OR witness.
pub fn loop_driver(d: &Digraph, g: &PermGroup, budget: u64) -> Result<DriverResult> {
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
    let (_, linked) = linkness(d, 1)?;
    if !linked {
        return Err(Error::pre("digraph is not linked"));
    }
    let mut comb = Combined::new(d, g, budget);
    let mut u = Universe { step: None, order: (0..n).collect(), closed: false };
    let mut rounds = Vec::new();
    loop {
        let set: BTreeSet<usize> = u.order.iter().copied().collect();
        let (cur_d, _) = d.induced(&set);
        if full_power(&cur_d, 1) {
            rounds.push(Round { universe: u.order.clone(), k: 1, result: "loop".into() });
            let outcome = DriverOutcome::Loop { b: set, step: u.step.clone() };
            return Ok(DriverResult { outcome, trace: comb.trace, rounds, shift: None, walk: Vec::new() });
        }
        let cur_g = g.restrict(&u.order)?;
        let h = RankedGroup::constant(&cur_g, 1);
        let (out, trace) = main_finite(&cur_d, &h, 1, budget)?;
        let round = rounds.len();
        let names = lift_trace(&mut comb, &trace, &u, round, OrbitLift::Widen)?;
        match out {
            MainFiniteOutcome::Subset { set: sub, step } => {
                rounds.push(Round { universe: u.order.clone(), k: 1, result: "subset".into() });
                let order: Vec<usize> = sub.iter().map(|&a| u.order[a]).collect();
                u = Universe { step: Some(names[&step].clone()), order, closed: false };
            }
            MainFiniteOutcome::OrWitness(w) => {
                rounds.push(Round { universe: u.order.clone(), k: 1, result: "or".into() });
                let witness = lift_witness(&w, &u.order, &names);
                witness.validate()?;
                let outcome = DriverOutcome::OrWitness { witness, pp_formula: None };
                return Ok(DriverResult { outcome, trace: comb.trace, rounds, shift: None, walk: Vec::new() });
            }
        }
    }
}

fn lift_witness(w: &OrWitness, order: &[usize], names: &BTreeMap<String, String>) -> OrWitness {
    OrWitness {
        relation: lift_relation(&w.relation, order),
        alpha: lift_relation(&w.alpha, order),
        carrier: w.carrier.iter().map(|&a| order[a]).collect(),
        step: names[&w.step].clone(),
    }
}

/// A closed walk of algebraic length 1 in `q` from `root`, as vertices with
/// directions (+1 forward).
fn alg_length_one_walk(q: &Digraph, root: usize) -> Option<(Vec<usize>, Vec<i8>)> {
    let n = q.n() as i64;
    let bound = n * n + n + 1;
    let key = |v: usize, off: i64| (v, off);
    let mut prev: BTreeMap<(usize, i64), ((usize, i64), i8)> = BTreeMap::new();
    let mut seen: BTreeSet<(usize, i64)> = BTreeSet::from([key(root, 0)]);
    let mut queue = VecDeque::from([key(root, 0)]);
    let target = key(root, 1);
    while let Some((v, off)) = queue.pop_front() {
        if (v, off) == target {
            let mut verts = vec![v];
            let mut dirs = Vec::new();
            let mut cur = (v, off);
            while let Some(&(p, dir)) = prev.get(&cur) {
                verts.push(p.0);
                dirs.push(dir);
                cur = p;
            }
            verts.reverse();
            dirs.reverse();
            return Some((verts, dirs));
        }
        let steps = q.out(v).iter().map(|&w| (w, off + 1, 1i8)).chain(q.inn(v).iter().map(|&w| (w, off - 1, -1i8)));
        for (w, o, dir) in steps {
            if o.abs() <= bound && seen.insert((w, o)) {
                prev.insert((w, o), ((v, off), dir));
                queue.push_back((w, o));
            }
        }
    }
    None
}

/// →′ = → + g: a →′ g(c) whenever a → c.
pub fn shifted_digraph(d: &Digraph, g: &[usize]) -> Digraph {
    let edges = Relation::collect(2, d.edges().iter().map(|t| vec![t[0], g[t[1]]]));
    Digraph::new(d.n(), edges).expect("in domain")
}

fn weak_component(d: &Digraph, a: usize) -> BTreeSet<usize> {
    let mut seen = BTreeSet::from([a]);
    let mut queue = VecDeque::from([a]);
    while let Some(v) = queue.pop_front() {
        for &w in d.out(v).iter().chain(d.inn(v)) {
            if seen.insert(w) {
                queue.push_back(w);
            }
        }
    }
    seen
}

/// Unary formula for the k-link class of a parameter.
fn component_formula(param: usize, k: usize, n: usize) -> RPPFormula {
    let (_, closure) = make_link_formulas(k, n);
    let mut f = closure;
    f.free = vec!["x1".to_string()];
    f.bound.insert(0, "x0".to_string());
    f.push(Atom::Param(param, "x0".into()));
    f
}

/// Searches parameter-rooted subsets ({a}+m·→′ and pairwise intersections)
/// of the universe for one whose smooth part has a component of algebraic
/// length 1; defines that component.
fn fallback(comb: &mut Combined, u: &Universe, round: usize) -> Result<Option<(Universe, usize)>> {
    let dp = comb.d;
    let n = dp.n();
    let uset: BTreeSet<usize> = u.order.iter().copied().collect();
    let mut bases: Vec<((usize, usize), BTreeSet<usize>)> = Vec::new();
    for &a in &u.order {
        let mut s = BTreeSet::from([a]);
        for m in 1..=n {
            s = dp.plus(&s).intersection(&uset).copied().collect();
            bases.push(((a, m), s.clone()));
        }
    }
    let mut cands: Vec<(Vec<(usize, usize)>, BTreeSet<usize>)> = bases.iter().map(|(k, s)| (vec![*k], s.clone())).collect();
    for i in 0..bases.len() {
        for j in i + 1..bases.len() {
            let s: BTreeSet<usize> = bases[i].1.intersection(&bases[j].1).copied().collect();
            cands.push((vec![bases[i].0, bases[j].0], s));
        }
    }
    for (roots, s) in cands {
        if s.is_empty() || s.len() == uset.len() {
            continue;
        }
        let sp = smooth_part(dp, &s);
        if sp.is_empty() {
            continue;
        }
        let (sub, order) = dp.induced(&sp);
        let rep = components_and_algebraic_length(&sub);
        let Some(ci) = rep.has_algebraic_length_1.iter().position(|&b| b) else { continue };
        let comp: Vec<usize> = rep.components[ci].iter().map(|&i| order[i]).collect();
        let comp_set: BTreeSet<usize> = comp.iter().copied().collect();
        let (cd, _) = dp.induced(&comp_set);
        let Some(k) = minimal_k(&cd)? else { continue };
        let mut sf = RPPFormula::new(&["x"]);
        for (idx, &(a, m)) in roots.iter().enumerate() {
            let start = sf.fresh(&format!("s{idx}_"), -(m as i64));
            sf.push(Atom::Param(a, start.clone()));
            let mut cur = start;
            for step in 1..=m {
                let next = if step == m { "x".to_string() } else { sf.fresh(&format!("s{idx}_"), step as i64 - m as i64) };
                sf.rel_owned("E", &[cur.clone(), next.clone()]);
                cur = next;
            }
        }
        if let Some(us) = &u.step {
            let vars: Vec<String> = sf.vars().cloned().collect();
            for v in vars {
                sf.rel_owned(us, &[v]);
            }
        }
        let s_name = format!("r{round}_fb_set");
        comb.push(&s_name, "fallback", sf, Some(&Relation::unary(s.iter().copied())))?;
        let sp_name = format!("r{round}_fb_smooth");
        comb.push(&sp_name, "fallback", smooth_part_formula(&s_name, s.len()), Some(&Relation::unary(sp.iter().copied())))?;
        let mut cf = component_formula(comp[0], k, n);
        let vars: Vec<String> = cf.vars().cloned().collect();
        for v in vars {
            cf.rel_owned(&sp_name, &[v]);
        }
        let c_name = format!("r{round}_fb_component");
        comb.push(&c_name, "fallback", cf, Some(&Relation::unary(comp.iter().copied())))?;
        let mut order = comp;
        order.sort_unstable();
        return Ok(Some((Universe { step: Some(c_name), order, closed: false }, k)));
    }
    Ok(None)
}

/// Pseudoloop construction: a loop in the quotient, or OR(α,α) pp-defined
/// from → with parameters.
pub fn pseudoloop_driver(d: &Digraph, g: &PermGroup, budget: u64) -> Result<DriverResult> {
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
    let (q, map) = quotient_digraph(d, g)?;
    if let Some(&o) = q.loops().first() {
        let elements = (0..n).filter(|&a| map[a] == o).collect();
        let outcome = DriverOutcome::QuotientLoop { orbit: o, elements };
        return Ok(DriverResult { outcome, trace: DerivationTrace::default(), rounds: Vec::new(), shift: None, walk: Vec::new() });
    }
    let rep = components_and_algebraic_length(&q);
    let ci = rep
        .has_algebraic_length_1
        .iter()
        .position(|&b| b)
        .ok_or_else(|| Error::pre("the quotient has no closed walk of algebraic length 1"))?;
    let root = rep.components[ci][0];
    let (qwalk, dirs) =
        alg_length_one_walk(&q, root).ok_or_else(|| Error::Internal("no closed walk of algebraic length 1 found".into()))?;
    let mut walk = vec![(0..n).find(|&a| map[a] == qwalk[0]).expect("orbit nonempty")];
    for (i, &dir) in dirs.iter().enumerate() {
        let a = *walk.last().expect("nonempty");
        let next = (0..n)
            .find(|&b| map[b] == qwalk[i + 1] && if dir > 0 { d.has_edge(a, b) } else { d.has_edge(b, a) })
            .ok_or_else(|| Error::Internal("walk does not lift".into()))?;
        walk.push(next);
    }
    let (a0, an) = (walk[0], *walk.last().expect("nonempty"));
    let shift: Perm = g
        .elements()
        .iter()
        .find(|p| p[an] == a0)
        .cloned()
        .ok_or_else(|| Error::Internal("endpoints of the lifted walk are not in one orbit".into()))?;
    let dp = shifted_digraph(d, &shift);
    let trivial = PermGroup::trivial(n);
    let mut comb = Combined::new(&dp, &trivial, budget);
    let comp = weak_component(&dp, a0);
    let (cd, _) = dp.induced(&comp);
    let mut k = minimal_k(&cd)?.ok_or_else(|| Error::Internal("shifted component is not linked".into()))?;
    let dname = "Dprime".to_string();
    comb.push(&dname, "component", component_formula(a0, k, n), Some(&Relation::unary(comp.iter().copied())))?;
    let mut u = Universe { step: Some(dname), order: comp.iter().copied().collect(), closed: true };
    let mut rounds = Vec::new();
    let done = |outcome, comb: Combined, rounds, walk| DriverResult { outcome, trace: comb.trace, rounds, shift: Some(shift.clone()), walk };
    loop {
        let round = rounds.len();
        let set: BTreeSet<usize> = u.order.iter().copied().collect();
        let (cur_d, _) = dp.induced(&set);
        if full_power(&cur_d, k) {
            rounds.push(Round { universe: u.order.clone(), k, result: "fallback".into() });
            match fallback(&mut comb, &u, round)? {
                Some((nu, nk)) => {
                    u = nu;
                    k = nk;
                    continue;
                }
                None => {
                    let diagnostics = format!(
                        "→′^{k} is full on {:?} and no parameter-rooted subset of out-neighbourhoods up to length {n} helps",
                        u.order
                    );
                    return Ok(done(DriverOutcome::FallbackFailed { diagnostics }, comb, rounds, walk));
                }
            }
        }
        let h = RankedGroup::trivial(cur_d.n());
        let (out, trace) = main_finite(&cur_d, &h, k, budget)?;
        let names = lift_trace(&mut comb, &trace, &u, round, OrbitLift::Params)?;
        match out {
            MainFiniteOutcome::Subset { set: sub, step } => {
                rounds.push(Round { universe: u.order.clone(), k, result: "subset".into() });
                let order: Vec<usize> = sub.iter().map(|&a| u.order[a]).collect();
                u = Universe { step: Some(names[&step].clone()), order, closed: false };
            }
            MainFiniteOutcome::OrWitness(w) => {
                rounds.push(Round { universe: u.order.clone(), k, result: "or".into() });
                let witness = lift_witness(&w, &u.order, &names);
                witness.validate()?;
                let f = comb.trace.get(&witness.step).expect("lifted").formula.clone();
                let flat = flatten(&f, &comb.trace.defs())?;
                let (pp, moved) = rpp_to_pp(&flat, "E", d, &shift, &BTreeMap::new())?;
                if !moved.is_empty() {
                    return Err(Error::Internal("flattened formula kept auxiliary relations".into()));
                }
                let env = Env::bare(n).with_rel("E", d.edges()).with_budget(budget);
                if evaluate(&pp, &env)? != witness.relation {
                    return Err(Error::Internal("translated formula does not define the witness over →".into()));
                }
                let outcome = DriverOutcome::OrWitness { witness, pp_formula: Some(pp) };
                return Ok(done(outcome, comb, rounds, walk));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_loop_vertex() {
        let d = Digraph::from_edges(1, &[(0, 0)]).unwrap();
        let r = loop_driver(&d, &PermGroup::trivial(1), 1_000_000).unwrap();
        assert_eq!(r.outcome, DriverOutcome::Loop { b: BTreeSet::from([0]), step: None });
    }

    #[test]
    fn k3_loop_driver_or() {
        let d = Digraph::complete(3);
        let r = loop_driver(&d, &PermGroup::trivial(3), 10_000_000).unwrap();
        assert!(matches!(r.outcome, DriverOutcome::OrWitness { .. }));
        r.trace.replay(&d, &PermGroup::trivial(3), 10_000_000).unwrap();
    }

    #[test]
    fn k3_with_a_loop() {
        let mut e = Digraph::complete(3).edges().clone();
        e.insert(vec![0, 0]);
        let d = Digraph::new(3, e).unwrap();
        let r = loop_driver(&d, &PermGroup::trivial(3), 10_000_000).unwrap();
        match r.outcome {
            DriverOutcome::Loop { b, .. } => {
                assert!(b.contains(&0));
                assert!(b.iter().all(|&x| b.iter().all(|&y| d.has_edge(x, y))));
            }
            other => panic!("{other:?}"),
        }
        r.trace.replay(&d, &PermGroup::trivial(3), 10_000_000).unwrap();
    }

    #[test]
    fn rotated_directed_triangle() {
        let d = Digraph::directed_cycle(3);
        let g = PermGroup::generate(3, vec![vec![1, 2, 0]]).unwrap();
        let r = pseudoloop_driver(&d, &g, 1_000_000).unwrap();
        assert!(matches!(r.outcome, DriverOutcome::QuotientLoop { orbit: 0, .. }));
    }

    #[test]
    fn hexagon_with_antipodal_shift() {
        let d = Digraph::cycle(6);
        let g = PermGroup::generate(6, vec![vec![3, 4, 5, 0, 1, 2]]).unwrap();
        let r = pseudoloop_driver(&d, &g, 10_000_000).unwrap();
        assert_eq!(r.shift, Some(vec![3, 4, 5, 0, 1, 2]));
        match &r.outcome {
            DriverOutcome::OrWitness { witness, pp_formula } => {
                witness.validate().unwrap();
                assert!(pp_formula.as_ref().unwrap().atoms.iter().any(|a| matches!(a, Atom::Param(..))));
            }
            other => panic!("{other:?}"),
        }
        let dp = shifted_digraph(&d, r.shift.as_ref().unwrap());
        r.trace.replay(&dp, &PermGroup::trivial(6), 10_000_000).unwrap();
    }

    #[test]
    fn two_triangles_with_swap() {
        let d = Digraph::symmetric(6, &[(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (5, 3)]).unwrap();
        let g = PermGroup::generate(6, vec![vec![3, 4, 5, 0, 1, 2]]).unwrap();
        let r = pseudoloop_driver(&d, &g, 10_000_000).unwrap();
        match &r.outcome {
            DriverOutcome::OrWitness { witness, pp_formula } => {
                witness.validate().unwrap();
                let pp = pp_formula.as_ref().unwrap();
                assert!(pp.atoms.iter().any(|a| matches!(a, Atom::Param(..))));
                let env = Env::bare(6).with_rel("E", d.edges());
                assert_eq!(evaluate(pp, &env).unwrap(), witness.relation);
            }
            other => panic!("{other:?}"),
        }
    }
}
