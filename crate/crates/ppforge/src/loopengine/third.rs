//! Third step: from OR(T,T) to OR(α,α) for a proper equivalence α, or to a
//! linked subset.

use std::collections::BTreeSet;

use super::first::{central_equivalence, nabla_formula, p_center, rosenberg, RosenbergEnd};
use super::second::{release, restricted_linkness, walking, Criterion, OrTT};
use super::{or_relation_on, Ctx, DerivationTrace, MainFiniteOutcome, OrWitness};
use crate::dianalysis::{closure_classes, equivalence_closure};
use crate::error::{Error, Result};
use crate::pplogic::{Atom, RPPFormula};
use crate::relcore::{all_tuples, Digraph, RankedGroup, Relation};

/// Rewrites an equality-free formula over `sym` (standing for one side of the
/// OR relation `or_name`) into a definition of the OR with that side replaced.
fn change_or(phi: &RPPFormula, sym: &str, or_name: &str, other_arity: usize, left: bool) -> RPPFormula {
    let others: Vec<String> = (1..=other_arity).map(|i| format!("o{i}")).collect();
    let free = if left {
        phi.free.iter().cloned().chain(others.iter().cloned()).collect()
    } else {
        others.iter().cloned().chain(phi.free.iter().cloned()).collect()
    };
    let mut f = RPPFormula { free, bound: phi.bound.clone(), atoms: Vec::new(), rank: phi.rank.clone() };
    for a in &phi.atoms {
        match a {
            Atom::Rel { name, args } if name == sym => {
                let args = if left {
                    args.iter().chain(others.iter()).cloned().collect()
                } else {
                    others.iter().chain(args.iter()).cloned().collect()
                };
                f.push(Atom::Rel { name: or_name.to_string(), args });
            }
            other => f.push(other.clone()),
        }
    }
    f
}

/// ∃z̄ O(z̄) ∧ ⋀_f OR(x̄_head, z_f, x̄_tail) with f ranging over all fillings of
/// `holes` consecutive positions after the first `head` free variables.
fn strip_or(or_name: &str, n: usize, head: usize, holes: usize, tail: usize) -> RPPFormula {
    let xs: Vec<String> = (1..=head + tail).map(|i| format!("x{i}")).collect();
    let mut f = RPPFormula::with_free(xs.clone());
    let zs: Vec<String> = (0..n).map(|_| f.fresh("z", 0)).collect();
    f.push(Atom::OrbitO(zs.clone()));
    for fill in all_tuples(n, holes) {
        let args: Vec<String> = xs[..head]
            .iter()
            .cloned()
            .chain(fill.iter().map(|&c| zs[c].clone()))
            .chain(xs[head..].iter().cloned())
            .collect();
        f.push(Atom::Rel { name: or_name.to_string(), args });
    }
    f
}

fn is_proper_equivalence(t: &Relation, n: usize) -> bool {
    t.arity() == 2 && equivalence_closure(n, t) == *t && t.len() < n * n
}

pub(crate) fn run(ctx: &mut Ctx, or: &OrTT) -> Result<MainFiniteOutcome> {
    let n = ctx.n;
    let t = &or.t;
    let all: BTreeSet<usize> = ctx.all();
    match t.arity() {
        1 => return final_or(ctx, &or.step, t),
        2 if is_proper_equivalence(t, n) => {
            return Ok(MainFiniteOutcome::OrWitness(OrWitness {
                relation: ctx.rel(&or.step).clone(),
                alpha: t.clone(),
                carrier: all,
                step: or.step.clone(),
            }));
        }
        2 if equivalence_closure(n, t).len() < n * n => {
            let alpha = equivalence_closure(n, t);
            let mut chain = RPPFormula::new(&["x1", "x2"]);
            let mut prev = "x1".to_string();
            for _ in 0..n.saturating_sub(2) {
                let z = chain.fresh("z", 0);
                chain.rel_owned("P", &[prev, z.clone()]);
                prev = z;
            }
            chain.rel_owned("P", &[prev, "x2".to_string()]);
            let l = ctx.define("or", "changeOR", change_or(&chain, "P", &or.step, 2, true))?;
            let s = ctx.define("or", "changeOR", change_or(&chain, "P", &l, 2, false))?;
            let w = OrWitness { relation: ctx.rel(&s).clone(), alpha, carrier: all, step: s };
            return Ok(MainFiniteOutcome::OrWitness(w));
        }
        _ => {}
    }
    let (chain, end) = rosenberg(t, n)?;
    let k0 = t.arity();
    let mut cur = or.step.clone();
    let mut arity = k0;
    for (k, _) in &chain {
        let phi = nabla_formula("P", arity, &vec![0; arity], *k);
        cur = ctx.define("or", "changeOR", change_or(&phi, "P", &cur, k0, true))?;
        arity = *k;
    }
    let m = arity;
    let s_rel = chain.last().map(|c| c.1.clone()).unwrap_or_else(|| t.clone());
    let mut right = k0;
    for (k, _) in &chain {
        let phi = nabla_formula("P", right, &vec![0; right], *k);
        cur = ctx.define("or", "changeOR", change_or(&phi, "P", &cur, m, false))?;
        right = *k;
    }
    match end {
        RosenbergEnd::PQCentral => {
            let alpha = central_equivalence(&s_rel, n);
            let a_s = ctx.define("or", "noP", strip_or(&cur, n, 2, m - 2, m))?;
            let a_a = ctx.define("or", "noP", strip_or(&a_s, n, 4, m - 2, 0))?;
            let w = OrWitness { relation: ctx.rel(&a_a).clone(), alpha, carrier: all, step: a_a };
            Ok(MainFiniteOutcome::OrWitness(w))
        }
        RosenbergEnd::PCentral => {
            let c = Relation::unary(p_center(&s_rel, n));
            let c_s = ctx.define("or", "noP", strip_or(&cur, n, 1, m - 1, m))?;
            let c_c = ctx.define("or", "noP", strip_or(&c_s, n, 2, m - 1, 0))?;
            final_or(ctx, &c_c, &c)
        }
    }
}

/// From OR(C,C) with C a nonempty proper subset: a linked subset or OR(α,α)
/// on the smooth part of a set reached by walking.
fn final_or(ctx: &mut Ctx, orcc: &str, c: &Relation) -> Result<MainFiniteOutcome> {
    let n = ctx.n;
    let mut cf = RPPFormula::new(&["x"]);
    cf.rel(orcc, &["x", "x"]);
    let c_step = ctx.define("c", "finalOR", cf)?;
    if ctx.rel(&c_step) != c {
        return Err(Error::Internal("diagonal of OR(C,C) is not C".into()));
    }
    let w = walking(ctx, &c_step)?;
    let (_, linked) = restricted_linkness(ctx.d, &w.b_set, ctx.k)?;
    if linked {
        return Ok(MainFiniteOutcome::Subset { set: w.b_set.clone(), step: w.b.clone() });
    }
    let rel = release(ctx, &w, Criterion::Linked)?;
    let cls = closure_classes(n, &rel.before);
    let b: Vec<usize> = w.b_set.iter().copied().collect();
    let alpha = Relation::collect(
        2,
        b.iter().flat_map(|&x| b.iter().map(move |&y| (x, y))).filter(|&(x, y)| cls[x] == cls[y]).map(|(x, y)| vec![x, y]),
    );
    let p = (2 * (b.len() - 1)).max(1);
    let srk = ctx.ranking(&rel.s_step).to_vec();
    let xr = srk[2] - srk[0];
    let mut f = RPPFormula::new(&["y", "yp", "z", "zp"]);
    let chain_vars = |f: &mut RPPFormula, from: &str, to: &str, tag: &str| -> Vec<String> {
        let mut nodes = vec![from.to_string()];
        for _ in 1..p {
            nodes.push(f.fresh("c", 0));
        }
        nodes.push(to.to_string());
        let mut xs = Vec::new();
        for i in 1..=p {
            let x = f.fresh(tag, xr);
            let (a, bb) = if i % 2 == 1 { (&nodes[i - 1], &nodes[i]) } else { (&nodes[i], &nodes[i - 1]) };
            f.rel_owned(&rel.s_step, &[a.clone(), bb.clone(), x.clone()]);
            xs.push(x);
        }
        xs
    };
    let xs = chain_vars(&mut f, "y", "yp", "X");
    let ys = chain_vars(&mut f, "z", "zp", "Y");
    for x in &xs {
        for y in &ys {
            f.rel_owned(orcc, &[x.clone(), y.clone()]);
        }
    }
    let step = ctx.define("or", "finalOR", f)?;
    let w = OrWitness { relation: ctx.rel(&step).clone(), alpha, carrier: w.b_set.clone(), step };
    Ok(MainFiniteOutcome::OrWitness(w))
}

/// The third step on its own, for an OR(T,T) with T a proper TSR relation.
pub fn or_upgrade(
    d: &Digraph,
    k: usize,
    t: &Relation,
    g: &crate::relcore::PermGroup,
    budget: u64,
) -> Result<(MainFiniteOutcome, DerivationTrace)> {
    let n = d.n();
    if !super::first::is_tsr(t, n) || t.len() == n.pow(t.arity() as u32) || t.is_empty() {
        return Err(Error::pre("T must be a nonempty proper TSR relation"));
    }
    let h = RankedGroup::constant(g, 0);
    let mut ctx = Ctx::new(d, &h, k, budget)?;
    let or = crate::relcore::or_relation(t, t, n);
    ctx.add_base("ORTT", or, vec![0; 2 * t.arity()]);
    let out = run(&mut ctx, &OrTT { step: "ORTT".into(), t: t.clone() })?;
    if let MainFiniteOutcome::OrWitness(w) = &out {
        w.validate()?;
        if w.relation != or_relation_on(&w.alpha, &w.carrier) {
            return Err(Error::Internal("witness shape".into()));
        }
    }
    Ok((out, ctx.trace))
}
