mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::{perm, relation};
use ppforge::loopengine::shifted_digraph;
use ppforge::pplogic::{evaluate, rpp_to_pp, Atom, Env, RPPFormula};
use ppforge::relcore::{all_tuples, Digraph, Relation};
use proptest::prelude::*;

#[derive(Debug, Clone)]
struct Case {
    n: usize,
    nfree: usize,
    ranks: Vec<i64>,
    raw: Vec<(u8, usize, usize, usize)>,
    e: Relation,
    a: Relation,
    b: Relation,
}

fn case(max_n: usize, max_vars: usize) -> impl Strategy<Value = Case> {
    (1..=max_n, 1..=3usize, 0..=max_vars - 3).prop_flat_map(|(n, nfree, nbound)| {
        let m = nfree + nbound;
        (
            proptest::collection::vec(-2i64..=2, m),
            proptest::collection::vec((0u8..5, 0..m, 0..m, 0..n), 0..=7),
            relation(n, 2),
            relation(n, 1),
            relation(n, 2),
        )
            .prop_map(move |(ranks, raw, e, a, b)| Case { n, nfree, ranks, raw, e, a, b })
    })
}

fn var(i: usize) -> String {
    format!("v{i}")
}

/// Builds the formula; with `ranked` set, atoms violating the ranking are dropped
/// and free variables sit at rank 0.
fn build(c: &Case, ranked: bool) -> RPPFormula {
    build_with(c, ranked, ranked, c.nfree)
}

fn build_with(c: &Case, ranked: bool, zero_free: bool, nfree: usize) -> RPPFormula {
    let m = c.ranks.len();
    let mut f = RPPFormula::with_free((0..nfree).map(var).collect());
    f.bound = (nfree..m).map(var).collect();
    let rank = |i: usize| if zero_free && i < nfree { 0 } else { c.ranks[i] };
    for i in 0..m {
        f.set_rank(&var(i), rank(i));
    }
    for &(kind, i, j, k) in &c.raw {
        let ok = !ranked
            || match kind {
                0 => rank(j) == rank(i) + 1,
                1 | 4 => rank(i) == rank(j),
                _ => true,
            };
        if !ok {
            continue;
        }
        f.push(match kind {
            0 => Atom::Rel { name: "E".into(), args: vec![var(i), var(j)] },
            1 => Atom::Eq(var(i), var(j)),
            2 => Atom::Param(k, var(i)),
            3 => Atom::Rel { name: "A".into(), args: vec![var(i)] },
            _ => Atom::Rel { name: "B".into(), args: vec![var(i), var(j)] },
        });
    }
    f
}

fn holds(f: &RPPFormula, rels: &BTreeMap<String, Relation>, asg: &BTreeMap<&str, usize>) -> bool {
    f.atoms.iter().all(|a| match a {
        Atom::Rel { name, args } => {
            let t: Vec<usize> = args.iter().map(|v| asg[v.as_str()]).collect();
            rels[name].contains(&t)
        }
        Atom::Eq(x, y) => asg[x.as_str()] == asg[y.as_str()],
        Atom::Param(c, x) => asg[x.as_str()] == *c,
        Atom::OrbitO(_) => unreachable!(),
    })
}

fn brute(f: &RPPFormula, n: usize, rels: &BTreeMap<String, Relation>) -> Relation {
    let vars: Vec<&str> = f.vars().map(|s| s.as_str()).collect();
    let mut out = BTreeSet::new();
    for t in all_tuples(n, vars.len()) {
        let asg: BTreeMap<&str, usize> = vars.iter().copied().zip(t.iter().copied()).collect();
        if holds(f, rels, &asg) {
            out.insert(f.free.iter().map(|v| asg[v.as_str()]).collect::<Vec<_>>());
        }
    }
    Relation::collect(f.free.len(), out)
}

fn rels(c: &Case, e: &Relation) -> BTreeMap<String, Relation> {
    BTreeMap::from([("E".to_string(), e.clone()), ("A".to_string(), c.a.clone()), ("B".to_string(), c.b.clone())])
}

fn pow(g: &[usize], k: i64) -> Vec<usize> {
    let n = g.len();
    let mut inv = vec![0; n];
    for (i, &x) in g.iter().enumerate() {
        inv[x] = i;
    }
    let step = if k >= 0 { g.to_vec() } else { inv };
    let mut p: Vec<usize> = (0..n).collect();
    for _ in 0..k.unsigned_abs() {
        p = p.iter().map(|&x| step[x]).collect();
    }
    p
}

/// A digraph closed under `g`, so `g` is an automorphism.
fn invariant_digraph(n: usize, e: &Relation, g: &[usize]) -> Digraph {
    let mut edges = BTreeSet::new();
    for k in 0..n.max(1) as i64 * 2 {
        let p = pow(g, k);
        for t in e.iter() {
            edges.insert(vec![p[t[0]], p[t[1]]]);
        }
    }
    Digraph::new(n, Relation::collect(2, edges)).unwrap()
}

fn with_perm(max_n: usize, max_vars: usize) -> impl Strategy<Value = (Case, Vec<usize>)> {
    case(max_n, max_vars).prop_flat_map(|c| {
        let n = c.n;
        (Just(c), perm(n))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn text_round_trip(c in case(4, 6)) {
        let f = build(&c, false);
        let text = f.to_text();
        let back = RPPFormula::parse(&text).unwrap();
        prop_assert_eq!(back.to_text(), text);
        prop_assert_eq!(back, f);
    }

    #[test]
    fn evaluation_matches_exhaustive_search(c in case(5, 6)) {
        let f = build(&c, false);
        let r = rels(&c, &c.e);
        let got = evaluate(&f, &Env::bare(c.n).with_rels(&r)).unwrap();
        prop_assert_eq!(got, brute(&f, c.n, &r));
    }

    #[test]
    fn rpp_translation_is_sound((c, g) in with_perm(6, 6)) {
        let d = invariant_digraph(c.n, &c.e, &g);
        let f = build(&c, true);
        let aux = BTreeMap::from([("A".to_string(), c.a.clone()), ("B".to_string(), c.b.clone())]);
        let shifted = shifted_digraph(&d, &g);
        let want = evaluate(&f, &Env::bare(c.n).with_rels(&rels(&c, shifted.edges()))).unwrap();
        let (pp, moved) = rpp_to_pp(&f, "E", &d, &g, &aux).unwrap();
        let mut all = aux.clone();
        all.extend(moved);
        all.insert("E".into(), d.edges().clone());
        let got = evaluate(&pp, &Env::bare(c.n).with_rels(&all)).unwrap();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn ranked_assignments_transport((c, g) in with_perm(4, 5)) {
        // All variables free; b(v) = g^-rank(v)(a(v)) maps solutions over →′ to
        // solutions of the rank-shifted formula over →.
        let d = invariant_digraph(c.n, &c.e, &g);
        let m = c.ranks.len();
        let f = build_with(&c, true, false, m);
        let shifted = shifted_digraph(&d, &g);
        let primed = evaluate(&f, &Env::bare(c.n).with_rels(&rels(&c, shifted.edges()))).unwrap();

        let mut plain = RPPFormula::with_free(f.free.clone());
        let mut moved = BTreeMap::from([("E".to_string(), d.edges().clone())]);
        for a in &f.atoms {
            plain.push(match a {
                Atom::Param(k, x) => Atom::Param(pow(&g, -f.rank_of(x))[*k], x.clone()),
                Atom::Rel { name, args } if name != "E" => {
                    let r = f.rank_of(&args[0]);
                    let key = format!("{name}{r}");
                    let base = if name == "A" { &c.a } else { &c.b };
                    moved.entry(key.clone()).or_insert_with(|| base.image(&pow(&g, -r)));
                    Atom::Rel { name: key, args: args.clone() }
                }
                other => other.clone(),
            });
        }
        let target = evaluate(&plain, &Env::bare(c.n).with_rels(&moved)).unwrap();
        let transported = Relation::collect(
            m,
            primed.iter().map(|t| (0..m).map(|i| pow(&g, -f.rank_of(&var(i)))[t[i]]).collect::<Vec<_>>()),
        );
        prop_assert_eq!(transported, target);
    }
}
