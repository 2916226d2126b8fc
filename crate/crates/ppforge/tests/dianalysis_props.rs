mod common;

use std::collections::BTreeSet;

use common::{digraph, perm, relation, weak_components};
use ppforge::dianalysis::{components_and_algebraic_length, linkness, minimal_k, smooth_part};
use ppforge::pplogic::{evaluate, make_link_formulas, Env};
use ppforge::relcore::{Digraph, Relation};
use proptest::prelude::*;

/// Random digraphs containing a permutation's graph, hence smooth.
fn smooth_digraph(max_n: usize) -> impl Strategy<Value = Digraph> {
    (1..=max_n).prop_flat_map(|n| {
        (relation(n, 2), perm(n), proptest::collection::vec(0.0f64..1.0, n * n), 0.0f64..1.0).prop_map(
            move |(_, p, coins, density)| {
                let mut edges: BTreeSet<Vec<usize>> = (0..n).map(|v| vec![v, p[v]]).collect();
                for (i, c) in coins.iter().enumerate() {
                    if *c < density * 0.5 {
                        edges.insert(vec![i / n, i % n]);
                    }
                }
                Digraph::new(n, Relation::collect(2, edges)).unwrap()
            },
        )
    })
}

fn is_smooth_on(d: &Digraph, s: &BTreeSet<usize>) -> bool {
    s.iter().all(|&v| {
        s.iter().any(|&w| d.has_edge(v, w)) && s.iter().any(|&w| d.has_edge(w, v))
    })
}

fn bool_power(d: &Digraph, k: usize) -> Vec<Vec<bool>> {
    let n = d.n();
    let mut m: Vec<Vec<bool>> = (0..n).map(|i| (0..n).map(|j| i == j).collect()).collect();
    for _ in 0..k {
        m = (0..n).map(|i| (0..n).map(|j| (0..n).any(|l| m[i][l] && d.has_edge(l, j))).collect()).collect();
    }
    m
}

/// k-linkness classes by union-find on pairs sharing a k-step successor.
fn brute_link_classes(d: &Digraph, k: usize) -> Vec<usize> {
    let n = d.n();
    let pk = bool_power(d, k);
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut Vec<usize>, x: usize) -> usize {
        if p[x] != x {
            let r = find(p, p[x]);
            p[x] = r;
        }
        p[x]
    }
    for a in 0..n {
        for b in 0..n {
            if (0..n).any(|z| pk[a][z] && pk[b][z]) {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                parent[ra] = rb;
            }
        }
    }
    (0..n).map(|x| find(&mut parent, x)).collect()
}

fn classes_to_relation(c: &[usize]) -> Relation {
    let n = c.len();
    Relation::collect(2, (0..n).flat_map(|a| (0..n).filter(move |&b| c[a] == c[b]).map(move |b| vec![a, b])))
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 { a } else { gcd(b, a % b) }
}

/// gcd of algebraic lengths of closed walks in each weak component, via potentials.
fn brute_gcd(d: &Digraph) -> Vec<(usize, u64)> {
    let n = d.n();
    let comp = weak_components(d);
    let mut pot: Vec<Option<i64>> = vec![None; n];
    for s in 0..n {
        if pot[s].is_some() {
            continue;
        }
        pot[s] = Some(0);
        let mut stack = vec![s];
        while let Some(v) = stack.pop() {
            for w in 0..n {
                for (fwd, step) in [(d.has_edge(v, w), 1), (d.has_edge(w, v), -1)] {
                    if fwd && pot[w].is_none() {
                        pot[w] = Some(pot[v].unwrap() + step);
                        stack.push(w);
                    }
                }
            }
        }
    }
    let reps: BTreeSet<usize> = comp.iter().copied().collect();
    reps.into_iter()
        .map(|r| {
            let g = d
                .edges()
                .iter()
                .filter(|t| comp[t[0]] == r)
                .fold(0, |g, t| gcd(g, (pot[t[0]].unwrap() + 1 - pot[t[1]].unwrap()).unsigned_abs()));
            (r, g)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn smooth_part_is_largest_smooth_subset((d, mask) in digraph(7).prop_flat_map(|d| { let n = d.n(); (Just(d), 0u32..(1 << n)) })) {
        let n = d.n();
        let subset: BTreeSet<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
        let mut union = BTreeSet::new();
        for m in 0u32..(1 << n) {
            if m & !mask != 0 {
                continue;
            }
            let s: BTreeSet<usize> = (0..n).filter(|i| m >> i & 1 == 1).collect();
            if is_smooth_on(&d, &s) {
                union.extend(s);
            }
        }
        prop_assert!(is_smooth_on(&d, &union));
        prop_assert_eq!(smooth_part(&d, &subset), union);
    }

    #[test]
    fn algebraic_length_matches_potentials(d in digraph(7)) {
        let rep = components_and_algebraic_length(&d);
        let want = brute_gcd(&d);
        prop_assert_eq!(rep.components.len(), want.len());
        let mut got: Vec<u64> = rep.algebraic_length_gcd.iter().map(|&g| g as u64).collect();
        let mut exp: Vec<u64> = want.iter().map(|p| p.1).collect();
        got.sort();
        exp.sort();
        prop_assert_eq!(got, exp);
    }

    #[test]
    fn linked_iff_connected_with_gcd_one(d in smooth_digraph(8)) {
        let n = d.n();
        let first = (1..=n * n).find(|&k| brute_link_classes(&d, k).iter().all(|&c| c == brute_link_classes(&d, k)[0]));
        let comps = brute_gcd(&d);
        let structural = comps.len() == 1 && comps[0].1 == 1;
        prop_assert_eq!(first.is_some(), structural);
        prop_assert_eq!(minimal_k(&d).unwrap(), first);
    }

    #[test]
    fn linkness_matches_closure_formula(d in smooth_digraph(5), k in 1usize..=3) {
        let n = d.n();
        let (eq, linked) = linkness(&d, k).unwrap();
        let want = classes_to_relation(&brute_link_classes(&d, k));
        prop_assert_eq!(&eq, &want);
        prop_assert_eq!(linked, want.len() == n * n);
        let (_, closure) = make_link_formulas(k, n);
        let got = evaluate(&closure, &Env::bare(n).with_rel("E", d.edges())).unwrap();
        prop_assert_eq!(got, eq);
    }
}
