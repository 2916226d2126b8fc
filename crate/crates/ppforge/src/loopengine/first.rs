//! First step: from →ᵏ to a ranked central or a 0-ranked Q-central relation.

use std::collections::BTreeSet;

use super::{subsets, Ctx, DerivationTrace};
use crate::error::{Error, Result};
use crate::pplogic::{add_path, Atom, RPPFormula};
use crate::relcore::{all_tuples, is_subdirect, Digraph, RankedGroup, Relation};

/// ∇ᵏR(x₁..x_k) = ∃y ⋀ R(y, x_I) over all increasing (arity−1)-subsets I.
pub fn uprel(r: &Relation, k: usize, n: usize) -> Relation {
    let m = r.arity();
    let idx = subsets(k, m - 1);
    Relation::collect(
        k,
        all_tuples(n, k).filter(|x| {
            (0..n).any(|y| {
                idx.iter().all(|sub| {
                    let mut t = Vec::with_capacity(m);
                    t.push(y);
                    t.extend(sub.iter().map(|&i| x[i]));
                    r.contains(&t)
                })
            })
        }),
    )
}

/// The formula for ∇ᵏ over the named relation with the given ranking.
/// Only the rank difference of the first two coordinates matters.
pub fn nabla_formula(name: &str, arity: usize, ranking: &[i64], k: usize) -> RPPFormula {
    let l = if arity >= 2 { ranking[1] - ranking[0] } else { 0 };
    let xs: Vec<String> = (1..=k).map(|i| format!("x{i}")).collect();
    let mut f = RPPFormula::with_free(xs.clone());
    for x in &xs {
        f.set_rank(x, l);
    }
    f.bound.push("y".into());
    for sub in subsets(k, arity - 1) {
        let mut args = vec!["y".to_string()];
        args.extend(sub.iter().map(|&i| xs[i].clone()));
        f.push(Atom::Rel { name: name.to_string(), args });
    }
    f
}

fn is_totally_reflexive(r: &Relation, n: usize) -> bool {
    all_tuples(n, r.arity()).all(|t| {
        let distinct: BTreeSet<usize> = t.iter().copied().collect();
        distinct.len() == t.len() || r.contains(&t)
    })
}

fn is_totally_symmetric(r: &Relation) -> bool {
    let m = r.arity();
    if m < 2 {
        return true;
    }
    r.iter().all(|t| {
        let mut sw = t.clone();
        sw.swap(0, 1);
        let mut rot = t.clone();
        rot.rotate_left(1);
        r.contains(&sw) && r.contains(&rot)
    })
}

pub fn is_tsr(r: &Relation, n: usize) -> bool {
    is_totally_symmetric(r) && is_totally_reflexive(r, n)
}

/// {a : (a, a₂, …) ∈ R for all a₂, …}.
pub fn p_center(r: &Relation, n: usize) -> BTreeSet<usize> {
    let m = r.arity();
    (0..n)
        .filter(|&a| {
            all_tuples(n, m - 1).all(|rest| {
                let mut t = vec![a];
                t.extend(rest);
                r.contains(&t)
            })
        })
        .collect()
}

pub fn is_p_central(r: &Relation, n: usize) -> bool {
    r.arity() >= 2 && is_subdirect(r, n) && !p_center(r, n).is_empty()
}

/// {(a,a′) : (a, a′, a₃, …) ∈ R for all a₃, …}.
pub fn central_equivalence(r: &Relation, n: usize) -> Relation {
    let m = r.arity();
    Relation::collect(
        2,
        all_tuples(n, 2).filter(|p| {
            all_tuples(n, m - 2).all(|rest| {
                let mut t = p.clone();
                t.extend(rest);
                r.contains(&t)
            })
        }),
    )
}

pub fn is_pq_central(r: &Relation, n: usize) -> bool {
    let m = r.arity();
    if m < 3 {
        return false;
    }
    let full2 = subsets(m, 2).iter().all(|c| r.project(c).len() == n * n);
    let alpha = central_equivalence(r, n);
    full2 && is_equivalence(&alpha, n)
}

fn is_equivalence(a: &Relation, n: usize) -> bool {
    (0..n).all(|x| a.contains(&[x, x])) && crate::relcore::is_equivalence_on_carrier(a)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RosenbergEnd {
    PCentral,
    PQCentral,
}

/// Iterates ∇ from a proper TSR relation (linked if binary). Returns the
/// arities chosen with the resulting relations, and how the iteration ended.
pub fn rosenberg(t: &Relation, n: usize) -> Result<(Vec<(usize, Relation)>, RosenbergEnd)> {
    if !is_tsr(t, n) || t.len() == n.pow(t.arity() as u32) {
        return Err(Error::pre("Rosenberg iteration needs a proper TSR relation"));
    }
    let mut chain: Vec<(usize, Relation)> = Vec::new();
    let mut cur = t.clone();
    loop {
        let m = cur.arity();
        if uprel(&cur, m, n) == cur {
            if m == 2 {
                return Err(Error::Internal("Rosenberg iteration reached a binary equivalence".into()));
            }
            return Ok((chain, RosenbergEnd::PQCentral));
        }
        let next = (m..=n).find_map(|k| {
            let u = uprel(&cur, k, n);
            (u.len() != n.pow(k as u32)).then_some((k, u))
        });
        match next {
            None => return Ok((chain, RosenbergEnd::PCentral)),
            Some((k, u)) => {
                chain.push((k, u.clone()));
                cur = u;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FirstStep {
    /// A binary central relation, possibly ranked.
    Central { step: String },
    /// A ternary 0-ranked Q-central relation with its central equivalence.
    QCentral { step: String, alpha: Relation },
}

/// Drops the last coordinate: ∃ȳ O(ȳ) ∧ ⋀ᵢ R(x̄, yᵢ).
pub(crate) fn strip_last(name: &str, ranking: &[i64], n: usize) -> RPPFormula {
    let m = ranking.len();
    let xs: Vec<String> = (1..m).map(|i| format!("x{i}")).collect();
    let mut f = RPPFormula::with_free(xs.clone());
    for (x, &r) in xs.iter().zip(ranking) {
        f.set_rank(x, r);
    }
    let ys: Vec<String> = (0..n).map(|_| f.fresh("y", ranking[m - 1])).collect();
    f.push(Atom::OrbitO(ys.clone()));
    for y in &ys {
        let mut args = xs.clone();
        args.push(y.clone());
        f.push(Atom::Rel { name: name.to_string(), args });
    }
    f
}

pub(crate) fn run(ctx: &mut Ctx) -> Result<FirstStep> {
    let n = ctx.n;
    let pk = if ctx.k == 1 {
        "E".to_string()
    } else {
        let mut f = RPPFormula::new(&["x0"]);
        let end = add_path(&mut f, "E", "x0", ctx.k, 0);
        f.bound.retain(|v| v != &end);
        f.free.push(end);
        ctx.define("pow", "power", f)?
    };
    if is_p_central(ctx.rel(&pk), n) {
        return Ok(FirstStep::Central { step: pk });
    }
    let r = ctx.rel(&pk).clone();
    let k2 = (2..=n)
        .find(|&k| uprel(&r, k, n).len() != n.pow(k as u32))
        .ok_or_else(|| Error::Internal("subdirect linked relation without a proper ∇ᵏ is central".into()))?;
    let rk = ctx.ranking(&pk).to_vec();
    let mut cur = ctx.define("tsr", "gettingTSR", nabla_formula(&pk, 2, &rk, k2))?;
    debug_assert!(is_tsr(ctx.rel(&cur), n));
    let (chain, end) = rosenberg(&ctx.rel(&cur).clone(), n)?;
    for (k, want) in chain {
        let m = ctx.rel(&cur).arity();
        cur = ctx.define("ros", "Rosenberg", nabla_formula(&cur, m, &vec![0; m], k))?;
        if *ctx.rel(&cur) != want {
            return Err(Error::Internal("∇ formula disagrees with direct computation".into()));
        }
    }
    match end {
        RosenbergEnd::PCentral => {
            while ctx.rel(&cur).arity() > 2 {
                let rk = ctx.ranking(&cur).to_vec();
                cur = ctx.define("cen", "centerispp", strip_last(&cur, &rk, n))?;
            }
            if !is_p_central(ctx.rel(&cur), n) {
                return Err(Error::Internal("stripped relation is not central".into()));
            }
            Ok(FirstStep::Central { step: cur })
        }
        RosenbergEnd::PQCentral => {
            while ctx.rel(&cur).arity() > 3 {
                let rk = ctx.ranking(&cur).to_vec();
                cur = ctx.define("pq", "PQtoQ", strip_last(&cur, &rk, n))?;
            }
            let rk = ctx.ranking(&cur).to_vec();
            let a = ctx.define("alpha", "PQtoQ", strip_last(&cur, &rk, n))?;
            let alpha = ctx.rel(&a).clone();
            if !is_pq_central(ctx.rel(&cur), n) || alpha != central_equivalence(ctx.rel(&cur), n) {
                return Err(Error::Internal("stripped relation is not Q-central".into()));
            }
            Ok(FirstStep::QCentral { step: cur, alpha })
        }
    }
}

/// The first step on its own: a central (ranked) or Q-central relation, with its trace.
pub fn refine_to_central_or_q(
    d: &Digraph,
    h: &RankedGroup,
    k: usize,
    budget: u64,
) -> Result<(FirstStep, DerivationTrace)> {
    if !d.is_smooth() {
        return Err(Error::pre("digraph is not smooth"));
    }
    let (_, linked) = crate::dianalysis::linkness(d, k)?;
    if !linked {
        return Err(Error::pre(format!("digraph is not {k}-linked")));
    }
    if d.power(k).edges().len() == d.n() * d.n() {
        return Err(Error::pre(format!("→^{k} is already the full relation")));
    }
    let mut ctx = Ctx::new(d, h, k, budget)?;
    let out = run(&mut ctx)?;
    Ok((out, ctx.trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uprel_matches_formula() {
        let d = Digraph::complete(3);
        let e = d.edges();
        assert_eq!(uprel(e, 2, 3).len(), 9);
        let t = uprel(e, 3, 3);
        assert_eq!(t.len(), 27 - 6);
        assert!(is_tsr(&t, 3));
        let f = nabla_formula("E", 2, &[0, 1], 3);
        let env = crate::pplogic::Env::bare(3).with_rel("E", e);
        assert_eq!(crate::pplogic::evaluate(&f, &env).unwrap(), t);
    }

    #[test]
    fn k3_is_q_central() {
        let d = Digraph::complete(3);
        let (out, trace) = refine_to_central_or_q(&d, &RankedGroup::trivial(3), 1, 1_000_000).unwrap();
        match out {
            FirstStep::QCentral { alpha, .. } => assert_eq!(alpha, Relation::diagonal(3)),
            other => panic!("{other:?}"),
        }
        assert_eq!(trace.lemmas()[0], "gettingTSR");
    }

    #[test]
    fn central_when_power_has_center() {
        let mut e = Digraph::complete(3).edges().clone();
        e.insert(vec![0, 0]);
        let d = Digraph::new(3, e).unwrap();
        let (out, trace) = refine_to_central_or_q(&d, &RankedGroup::trivial(3), 1, 1_000_000).unwrap();
        assert_eq!(out, FirstStep::Central { step: "E".into() });
        assert!(trace.steps.is_empty());
    }

    #[test]
    fn centrality_validators() {
        let n = 3;
        let nonsurj = Relation::collect(3, all_tuples(3, 3).filter(|t| t.iter().collect::<BTreeSet<_>>().len() < 3));
        assert!(is_tsr(&nonsurj, n) && is_pq_central(&nonsurj, n));
        assert_eq!(central_equivalence(&nonsurj, n), Relation::diagonal(3));
        let star = Relation::collect(2, all_tuples(3, 2).filter(|t| t[0] == 0 || t[1] == 0 || t[0] == t[1]));
        assert!(is_p_central(&star, n));
        assert_eq!(p_center(&star, n), BTreeSet::from([0]));
        let (chain, end) = rosenberg(&nonsurj, n).unwrap();
        assert!(chain.is_empty() && end == RosenbergEnd::PQCentral);
    }
}
