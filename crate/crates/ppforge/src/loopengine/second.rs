//! Second step: OR(T,T) from a Q-central relation, or from a central one
//! via the walking lemma and conjunct release.

use std::collections::BTreeSet;

use super::{Ctx, DerivationTrace};
use crate::dianalysis::{closure_classes, linkness};
use crate::error::{Error, Result};
use crate::pplogic::{Atom, RPPFormula};
use crate::relcore::{all_tuples, or_relation, Digraph, PermGroup, RankedGroup, Relation};

/// A 0-ranked OR(T,T) step together with T.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrTT {
    pub step: String,
    pub t: Relation,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SecondStep {
    Subset { set: BTreeSet<usize>, step: String },
    Or(OrTT),
}

/// Least k such that some k-subset lies in no g(I), and the tuples whose
/// entries lie in some g(I).
fn coverage(i_set: &BTreeSet<usize>, g: &PermGroup, n: usize) -> (usize, Relation) {
    let images: BTreeSet<BTreeSet<usize>> =
        g.elements().iter().map(|p| i_set.iter().map(|&a| p[a]).collect()).collect();
    let covered = |s: &BTreeSet<usize>| images.iter().any(|im| s.is_subset(im));
    let k = (1..=n)
        .find(|&k| super::subsets(n, k).iter().any(|s| !covered(&s.iter().copied().collect())))
        .expect("I is proper");
    let t = Relation::collect(k, all_tuples(n, k).filter(|t| covered(&t.iter().copied().collect())));
    (k, t)
}

/// Among candidates (key, I), the lexicographically first with I maximal under inclusion.
fn first_maximal<K: Clone + Ord>(cands: &[(K, BTreeSet<usize>)]) -> Option<(K, BTreeSet<usize>)> {
    let mut sorted: Vec<&(K, BTreeSet<usize>)> = cands.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    sorted
        .iter()
        .find(|(_, i)| !cands.iter().any(|(_, j)| i.is_subset(j) && i != j))
        .map(|c| (*c).clone())
}

fn or_free_vars(f: &mut RPPFormula, k: usize, rank: i64) -> [Vec<String>; 2] {
    let mk = |j: usize| (1..=k).map(|i| format!("x{j}_{i}")).collect::<Vec<_>>();
    let xs = [mk(1), mk(2)];
    for x in xs.iter().flatten() {
        f.free.push(x.clone());
        f.set_rank(x, rank);
    }
    xs
}

pub(crate) fn from_q(ctx: &mut Ctx, r_step: &str, alpha: &Relation) -> Result<OrTT> {
    let n = ctx.n;
    let r = ctx.rel(r_step).clone();
    if alpha.len() == n * n {
        return Err(Error::pre("central equivalence is full, the relation is not proper"));
    }
    let cands: Vec<((usize, usize), BTreeSet<usize>)> = all_tuples(n, 2)
        .filter(|p| !alpha.contains(p))
        .map(|p| ((p[0], p[1]), (0..n).filter(|&i| r.contains(&[p[0], p[1], i])).collect()))
        .collect();
    let ((a, b), i_set) = first_maximal(&cands).ok_or_else(|| Error::Internal("no pair outside α".into()))?;
    let (k, t) = coverage(&i_set, &ctx.g, n);
    let mut f = RPPFormula::default();
    let xs = or_free_vars(&mut f, k, 0);
    let zs: Vec<String> = (0..n).map(|_| f.fresh("z", 0)).collect();
    let y1 = f.fresh("y", 0);
    f.push(Atom::OrbitO(zs.clone()));
    let ys = [zs[a].clone(), y1, zs[b].clone()];
    for j in 0..2 {
        for x in &xs[j] {
            f.rel_owned(r_step, &[ys[j].clone(), ys[j + 1].clone(), x.clone()]);
        }
        for &i in &i_set {
            f.rel_owned(r_step, &[ys[j].clone(), ys[j + 1].clone(), zs[i].clone()]);
        }
    }
    let step = ctx.define("orq", "orfromQ", f)?;
    if *ctx.rel(&step) != or_relation(&t, &t, n) {
        return Err(Error::Internal("Q-central OR formula does not define OR(T,T)".into()));
    }
    Ok(OrTT { step, t })
}

/// Walk pattern of the k-linkness closure for n-element digraphs:
/// n+1 links, each k steps forward then k back. +1 means vⱼ → vⱼ₊₁.
pub(crate) fn linkness_walk(k: usize, n: usize) -> Vec<i8> {
    let mut dirs = Vec::new();
    for _ in 0..=n {
        dirs.extend(std::iter::repeat_n(1, k));
        dirs.extend(std::iter::repeat_n(-1, k));
    }
    dirs
}

fn step_set(d: &Digraph, s: &BTreeSet<usize>, dir: i8) -> BTreeSet<usize> {
    if dir > 0 {
        d.plus(s)
    } else {
        d.minus(s)
    }
}

/// Output of the walking lemma.
pub(crate) struct Walking {
    pub dirs: Vec<i8>,
    pub c_set: BTreeSet<usize>,
    /// Prefix length of ψᵢ.
    pub i: usize,
    pub bprime: String,
    pub bprime_set: BTreeSet<usize>,
    pub b: String,
    pub b_set: BTreeSet<usize>,
}

/// The smooth-part formula over a unary step: x with backward and forward
/// walks of length m inside it.
pub(crate) fn smooth_part_formula(name: &str, m: usize) -> RPPFormula {
    let mut f = RPPFormula::new(&["x"]);
    f.rel(name, &["x"]);
    let back: Vec<String> = (1..=m).map(|j| f.fresh("b", j as i64 - m as i64 - 1)).collect();
    let fwd: Vec<String> = (1..=m).map(|j| f.fresh("f", j as i64)).collect();
    let chain: Vec<String> = back.iter().cloned().chain(std::iter::once("x".to_string())).chain(fwd.iter().cloned()).collect();
    for v in back.iter().chain(&fwd) {
        f.rel_owned(name, std::slice::from_ref(v));
    }
    for w in chain.windows(2) {
        f.rel_owned("E", &[w[0].clone(), w[1].clone()]);
    }
    f
}

/// Adds the walk prefix from `start` along `dirs`, returning the last variable.
fn add_walk(f: &mut RPPFormula, start: &str, dirs: &[i8], prefix: &str) -> String {
    let mut cur = start.to_string();
    for &dir in dirs {
        let next = f.fresh(prefix, f.rank_of(&cur) + dir as i64);
        if dir > 0 {
            f.rel_owned("E", &[cur.clone(), next.clone()]);
        } else {
            f.rel_owned("E", &[next.clone(), cur.clone()]);
        }
        cur = next;
    }
    cur
}

pub(crate) fn walking(ctx: &mut Ctx, c_step: &str) -> Result<Walking> {
    let n = ctx.n;
    let c: BTreeSet<usize> = ctx.rel(c_step).elements().into_iter().collect();
    if c.is_empty() || c.len() == n {
        return Err(Error::pre("walking needs a nonempty proper subset"));
    }
    let dirs = linkness_walk(ctx.k, n);
    let mut cur = c.clone();
    let mut i = 0;
    loop {
        let next = step_set(ctx.d, &cur, dirs[i]);
        if next.len() == n {
            break;
        }
        cur = next;
        i += 1;
        if i == dirs.len() {
            return Err(Error::Internal("walk never covers the domain".into()));
        }
    }
    let mut psi = RPPFormula::new(&["x0"]);
    psi.rel(c_step, &["x0"]);
    let end = add_walk(&mut psi, "x0", &dirs[..i], "x");
    if end != "x0" {
        psi.bound.retain(|v| v != &end);
        psi.bound.insert(0, "x0".to_string());
        psi.free = vec![end];
    }
    let bprime = ctx.define("walk", "walking", psi)?;
    let bprime_set: BTreeSet<usize> = ctx.rel(&bprime).elements().into_iter().collect();
    debug_assert_eq!(bprime_set, cur);
    let b = ctx.define("smooth", "walking", smooth_part_formula(&bprime, bprime_set.len()))?;
    let b_set: BTreeSet<usize> = ctx.rel(&b).elements().into_iter().collect();
    if b_set.is_empty() || b_set.len() == n {
        return Err(Error::Internal("smooth part is empty or full".into()));
    }
    Ok(Walking { dirs, c_set: c, i, bprime, bprime_set, b, b_set })
}

/// k-linkness equivalence of the restriction to `b`, as pairs of original elements.
pub(crate) fn restricted_linkness(d: &Digraph, b: &BTreeSet<usize>, k: usize) -> Result<(Relation, bool)> {
    let (sub, order) = d.induced(b);
    let (eq, linked) = linkness(&sub, k)?;
    Ok((Relation::collect(2, eq.iter().map(|t| vec![order[t[0]], order[t[1]]])), linked))
}

pub(crate) enum Criterion<'r> {
    /// Stop when the relation leaves α.
    Exceeds(&'r Relation),
    /// Stop when the equivalence generated on B is everything.
    Linked,
}

pub(crate) struct Release {
    pub s_step: String,
    pub before: Relation,
}

/// Vertices of one ψ-copy when its first r B′-conjuncts are dropped.
/// Positions: 0 = centre, 1..=m backward chain, m+1..=2m forward chain.
fn copy_set(d: &Digraph, bprime: &BTreeSet<usize>, all: &BTreeSet<usize>, m: usize, r: usize) -> BTreeSet<usize> {
    let allowed = |pos: usize| if pos < r { all } else { bprime };
    let mut w = allowed(1).clone();
    for j in 2..=m {
        w = d.plus(&w).intersection(allowed(j)).copied().collect();
    }
    let mut x: BTreeSet<usize> = d.plus(&w).intersection(allowed(0)).copied().collect();
    let mut f = allowed(2 * m).clone();
    for j in (m + 1..2 * m).rev() {
        f = d.minus(&f).intersection(allowed(j)).copied().collect();
    }
    x = x.intersection(&d.minus(&f)).copied().collect();
    x
}

fn walk_relation(d: &Digraph, dirs: &[i8], u: &[BTreeSet<usize>]) -> Relation {
    let mut out = Relation::empty(2);
    for &a in &u[0] {
        let mut s = BTreeSet::from([a]);
        for (j, &dir) in dirs.iter().enumerate() {
            s = step_set(d, &s, dir).intersection(&u[j + 1]).copied().collect();
        }
        for b in s {
            out.insert(vec![a, b]);
        }
    }
    out
}

fn linked_on(rel: &Relation, b: &BTreeSet<usize>, n: usize) -> bool {
    let cls = closure_classes(n, rel);
    let first = b.iter().next().map(|&x| cls[x]);
    b.iter().all(|&x| Some(cls[x]) == first)
}

/// Releases B′-conjuncts of the ψ-copies attached to the quantified
/// variables of the k-linkness walk over B, in construction order, until
/// the criterion fires; defines the ternary S(y, y′, X) for that conjunct.
pub(crate) fn release(ctx: &mut Ctx, w: &Walking, crit: Criterion) -> Result<Release> {
    let n = ctx.n;
    let all = ctx.all();
    let dirs = &w.dirs;
    let nn = dirs.len();
    let m = w.bprime_set.len();
    let stage = |p: usize, r: usize| -> Relation {
        let u: Vec<BTreeSet<usize>> = (0..=nn)
            .map(|j| {
                if j == 0 || j == nn || j > p {
                    w.b_set.clone()
                } else if j < p {
                    all.clone()
                } else {
                    copy_set(ctx.d, &w.bprime_set, &all, m, r)
                }
            })
            .collect();
        walk_relation(ctx.d, dirs, &u)
    };
    let fires = |rel: &Relation| match &crit {
        Criterion::Exceeds(alpha) => rel != *alpha,
        Criterion::Linked => linked_on(rel, &w.b_set, n),
    };
    let initial = stage(1, 0);
    if fires(&initial) {
        return Err(Error::Internal("release criterion holds before any release".into()));
    }
    let mut before = initial;
    let mut found = None;
    'outer: for p in 1..nn {
        for r in 1..=2 * m + 1 {
            let cur = stage(p, r);
            if fires(&cur) {
                found = Some((p, r, cur));
                break 'outer;
            }
            before = cur;
        }
    }
    let (p, r, after) = found.ok_or_else(|| Error::Internal("conjunct release never crosses the threshold".into()))?;

    let mut f = RPPFormula::new(&["y", "yp", "X"]);
    let mut vs = vec!["y".to_string()];
    for j in 1..nn {
        let rank = f.rank_of(&vs[j - 1]) + dirs[j - 1] as i64;
        vs.push(f.fresh("v", rank));
    }
    vs.push("yp".to_string());
    for (j, &dir) in dirs.iter().enumerate() {
        let (a, b) = if dir > 0 { (&vs[j], &vs[j + 1]) } else { (&vs[j + 1], &vs[j]) };
        f.rel_owned("E", &[a.clone(), b.clone()]);
    }
    f.rel_owned(&w.b, &["y".to_string()]);
    f.rel_owned(&w.b, &["yp".to_string()]);
    for v in &vs[p + 1..nn] {
        f.rel_owned(&w.b, std::slice::from_ref(v));
    }
    let centre = vs[p].clone();
    let rc = f.rank_of(&centre);
    let sel = r - 1;
    let walk_len: i64 = dirs[..w.i].iter().map(|&d| d as i64).sum();
    let mut pos_vars = vec![centre.clone()];
    for j in 1..=m {
        if j == sel && w.i == 0 {
            pos_vars.push("X".into());
        } else {
            pos_vars.push(f.fresh("b", rc + j as i64 - m as i64 - 1));
        }
    }
    for j in 1..=m {
        if m + j == sel && w.i == 0 {
            pos_vars.push("X".into());
        } else {
            pos_vars.push(f.fresh("f", rc + j as i64));
        }
    }
    let sel_rank = if sel == 0 {
        rc
    } else if sel <= m {
        rc + sel as i64 - m as i64 - 1
    } else {
        rc + (sel - m) as i64
    };
    f.set_rank("X", sel_rank - walk_len);
    if sel == 0 && w.i == 0 {
        f.push(Atom::Eq("X".into(), centre.clone()));
    }
    let chain: Vec<String> = pos_vars[1..=m]
        .iter()
        .cloned()
        .chain(std::iter::once(centre.clone()))
        .chain(pos_vars[m + 1..].iter().cloned())
        .collect();
    for c in chain.windows(2) {
        f.rel_owned("E", &[c[0].clone(), c[1].clone()]);
    }
    for v in &pos_vars[r..] {
        f.rel_owned(&w.bprime, std::slice::from_ref(v));
    }
    if w.i > 0 {
        let end = add_walk(&mut f, "X", &dirs[..w.i], "q");
        f.push(Atom::Eq(end, pos_vars[sel].clone()));
    }
    let s_step = ctx.define("rel", "release", f)?;
    let s = ctx.rel(&s_step);
    let with_c = s.filter(|t| w.c_set.contains(&t[2])).project(&[0, 1]);
    if s.project(&[0, 1]) != after || with_c != before {
        return Err(Error::Internal("S does not project to the released relations".into()));
    }
    Ok(Release { s_step, before })
}

pub(crate) fn from_center(ctx: &mut Ctx, r_step: &str) -> Result<SecondStep> {
    let n = ctx.n;
    let rk = ctx.ranking(r_step).to_vec();
    let c_step = ctx.define("center", "centerispp", super::first::strip_last(r_step, &rk, n))?;
    if ctx.rel(&c_step).len() == n {
        return Err(Error::pre("center is the whole domain"));
    }
    let w = walking(ctx, &c_step)?;
    let (alpha, linked) = restricted_linkness(ctx.d, &w.b_set, ctx.k)?;
    if linked {
        return Ok(SecondStep::Subset { set: w.b_set.clone(), step: w.b.clone() });
    }
    let rel = release(ctx, &w, Criterion::Exceeds(&alpha))?;
    let s = ctx.rel(&rel.s_step).clone();
    let r = ctx.rel(r_step).clone();
    let cands: Vec<((usize, usize, usize), BTreeSet<usize>)> = s
        .iter()
        .filter(|t| !alpha.contains(&t[..2]))
        .map(|t| ((t[0], t[1], t[2]), (0..n).filter(|&i| r.contains(&[t[2], i])).collect()))
        .collect();
    let ((a, b, _), i_set) = first_maximal(&cands).ok_or_else(|| Error::Internal("S never leaves α".into()))?;
    if i_set.len() == n {
        return Err(Error::Internal("witness lies in the center".into()));
    }
    let (k, t) = coverage(&i_set, &ctx.g, n);
    let srk = ctx.ranking(&rel.s_step).to_vec();
    let x_rank = srk[2] - srk[0];
    let l = x_rank + rk[1] - rk[0];
    let mut f = RPPFormula::default();
    let xs = or_free_vars(&mut f, k, l);
    let zs: Vec<String> = (0..n).map(|_| f.fresh("z", 0)).collect();
    let zps: Vec<String> = (0..n).map(|_| f.fresh("u", l)).collect();
    let y1 = f.fresh("y", 0);
    let xx = [f.fresh("X", x_rank), f.fresh("X", x_rank)];
    f.push(Atom::OrbitO(zs.clone()));
    f.push(Atom::OrbitO(zps.clone()));
    let ys = [zs[a].clone(), y1, zs[b].clone()];
    for j in 0..2 {
        f.rel_owned(&rel.s_step, &[ys[j].clone(), ys[j + 1].clone(), xx[j].clone()]);
        for x in &xs[j] {
            f.rel_owned(r_step, &[xx[j].clone(), x.clone()]);
        }
        for &i in &i_set {
            f.rel_owned(r_step, &[xx[j].clone(), zps[i].clone()]);
        }
    }
    let step = ctx.define("orc", "orfromcenter", f)?;
    if *ctx.rel(&step) != or_relation(&t, &t, n) {
        return Err(Error::Internal("central OR formula does not define OR(T,T)".into()));
    }
    Ok(SecondStep::Or(OrTT { step, t }))
}

/// A Q-central relation and O define OR(T,T); returns the relation, T and the trace.
pub fn or_from_q(r: &Relation, g: &PermGroup, budget: u64) -> Result<(Relation, Relation, DerivationTrace)> {
    let n = g.degree();
    if r.arity() != 3 || !super::first::is_pq_central(r, n) {
        return Err(Error::pre("relation is not Q-central"));
    }
    if !g.is_invariant(r) {
        return Err(Error::pre("relation is not invariant under the group"));
    }
    let alpha = super::first::central_equivalence(r, n);
    let d = Digraph::new(n, Relation::empty(2))?;
    let h = RankedGroup::constant(g, 0);
    let mut ctx = Ctx::new(&d, &h, 1, budget)?;
    ctx.add_base("R", r.clone(), vec![0; 3]);
    let out = from_q(&mut ctx, "R", &alpha)?;
    let rel = ctx.rel(&out.step).clone();
    Ok((rel, out.t, ctx.trace))
}

/// From a central ranked relation: a k-linked subset or OR(T,T).
pub fn or_from_center(
    d: &Digraph,
    h: &RankedGroup,
    k: usize,
    r: &Relation,
    ranking: &[i64],
    budget: u64,
) -> Result<(SecondStep, DerivationTrace)> {
    let n = d.n();
    if r.arity() != 2 || !super::first::is_p_central(r, n) {
        return Err(Error::pre("relation is not central"));
    }
    if r.len() == n * n {
        return Err(Error::pre("center is the whole domain"));
    }
    let mut ctx = Ctx::new(d, h, k, budget)?;
    ctx.add_base("R", r.clone(), ranking.to_vec());
    let out = from_center(&mut ctx, "R")?;
    Ok((out, ctx.trace))
}

/// The walking lemma alone: from a nonempty proper C, the smooth part B of
/// some definable B′.
pub fn walking_subset(d: &Digraph, k: usize, c: &BTreeSet<usize>, budget: u64) -> Result<(BTreeSet<usize>, DerivationTrace)> {
    let h = RankedGroup::trivial(d.n());
    let mut ctx = Ctx::new(d, &h, k, budget)?;
    ctx.add_base("C", Relation::unary(c.iter().copied()), vec![0]);
    let w = walking(&mut ctx, "C")?;
    Ok((w.b_set, ctx.trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn non_surjective(n: usize, k: usize) -> Relation {
        Relation::collect(k, all_tuples(n, k).filter(|t| t.iter().collect::<BTreeSet<_>>().len() < n))
    }

    #[test]
    fn or_from_q_trivial_group() {
        let r = non_surjective(3, 3);
        let (or, t, _) = or_from_q(&r, &PermGroup::trivial(3), 1_000_000).unwrap();
        assert_eq!(t, Relation::unary([0, 1]));
        assert_eq!(or, or_relation(&t, &t, 3));
    }

    #[test]
    fn or_from_q_symmetric_group() {
        let r = non_surjective(3, 3);
        let g = PermGroup::generate(3, vec![vec![1, 2, 0], vec![1, 0, 2]]).unwrap();
        let (or, t, _) = or_from_q(&r, &g, 1_000_000).unwrap();
        assert_eq!(t, non_surjective(3, 3));
        assert_eq!(or.arity(), 6);
    }

    #[test]
    fn or_from_q_rejects_degenerate() {
        assert!(or_from_q(&Relation::full(3, 3), &PermGroup::trivial(3), 1000).is_err());
    }

    #[test]
    fn walking_on_k3() {
        let d = Digraph::complete(3);
        let (b, _) = walking_subset(&d, 1, &BTreeSet::from([0, 1]), 1_000_000).unwrap();
        assert_eq!(b, BTreeSet::from([0, 1]));
        assert!(walking_subset(&d, 1, &BTreeSet::new(), 1000).is_err());
    }

    #[test]
    fn linkness_walk_shape() {
        assert_eq!(linkness_walk(1, 1), vec![1, -1, 1, -1]);
        assert_eq!(linkness_walk(2, 0), vec![1, 1, -1, -1]);
    }

    #[test]
    fn center_full_is_rejected() {
        let d = Digraph::complete(3);
        let h = RankedGroup::trivial(3);
        assert!(or_from_center(&d, &h, 1, &Relation::full(3, 2), &[0, 1], 1000).is_err());
    }
}
