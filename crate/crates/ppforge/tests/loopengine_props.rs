mod common;

use std::collections::BTreeSet;

use common::{perm, permutations, relation};
use ppforge::dianalysis::linkness;
use ppforge::loopengine::{
    central_equivalence, is_p_central, is_pq_central, is_tsr, loop_driver, nabla_formula, p_center, uprel,
    DriverOutcome,
};
use ppforge::pplogic::{evaluate, Env};
use ppforge::relcore::{all_tuples, Digraph, PermGroup, Relation};
use proptest::prelude::*;

const BUDGET: u64 = 50_000_000;

fn smooth_linked(max_n: usize) -> impl Strategy<Value = Digraph> {
    (1..=max_n)
        .prop_flat_map(|n| (Just(n), perm(n), proptest::collection::vec(any::<bool>(), n * n)))
        .prop_map(|(n, p, bits)| {
            let mut edges: BTreeSet<Vec<usize>> = (0..n).map(|v| vec![v, p[v]]).collect();
            edges.extend((0..n * n).filter(|&i| bits[i]).map(|i| vec![i / n, i % n]));
            Digraph::new(n, Relation::collect(2, edges)).unwrap()
        })
        .prop_filter("1-linked", |d| linkness(d, 1).map(|l| l.1).unwrap_or(false))
}

/// Relations biased towards symmetry and reflexivity so the predicates fire.
fn shaped(max_n: usize) -> impl Strategy<Value = (usize, Relation)> {
    (1..=max_n, 2..=3usize).prop_flat_map(|(n, m)| {
        (Just(n), relation(n, m), any::<bool>(), any::<bool>()).prop_map(move |(n, r, sym, refl)| {
            let mut ts: BTreeSet<Vec<usize>> = r.iter().cloned().collect();
            if refl {
                ts.extend(all_tuples(n, m).filter(|t| t.iter().collect::<BTreeSet<_>>().len() < m));
            }
            if sym {
                let base: Vec<Vec<usize>> = ts.iter().cloned().collect();
                for t in base {
                    for p in permutations(m) {
                        ts.insert(p.iter().map(|&i| t[i]).collect());
                    }
                }
            }
            (n, Relation::collect(m, ts))
        })
    })
}

fn brute_tsr(r: &Relation, n: usize) -> bool {
    let m = r.arity();
    let sym = r.iter().all(|t| permutations(m).iter().all(|p| r.contains(&p.iter().map(|&i| t[i]).collect::<Vec<_>>())));
    let refl = all_tuples(n, m).all(|t| t.iter().collect::<BTreeSet<_>>().len() == m || r.contains(&t));
    sym && refl
}

fn brute_projection_full(r: &Relation, n: usize, coords: &[usize]) -> bool {
    let seen: BTreeSet<Vec<usize>> = r.iter().map(|t| coords.iter().map(|&i| t[i]).collect()).collect();
    seen.len() == n.pow(coords.len() as u32)
}

fn brute_center(r: &Relation, n: usize) -> BTreeSet<usize> {
    let m = r.arity();
    (0..n)
        .filter(|&a| all_tuples(n, m - 1).all(|rest| r.contains(&[vec![a], rest].concat())))
        .collect()
}

fn brute_p_central(r: &Relation, n: usize) -> bool {
    let m = r.arity();
    m >= 2 && (0..m).all(|i| brute_projection_full(r, n, &[i])) && !brute_center(r, n).is_empty()
}

fn brute_pq_central(r: &Relation, n: usize) -> bool {
    let m = r.arity();
    if m < 3 {
        return false;
    }
    let pairs = (0..m).all(|i| (i + 1..m).all(|j| brute_projection_full(r, n, &[i, j])));
    let alpha = |a: usize, b: usize| all_tuples(n, m - 2).all(|rest| r.contains(&[vec![a, b], rest].concat()));
    let refl = (0..n).all(|a| alpha(a, a));
    let sym = (0..n).all(|a| (0..n).all(|b| !alpha(a, b) || alpha(b, a)));
    let trans =
        (0..n).all(|a| (0..n).all(|b| (0..n).all(|c| !(alpha(a, b) && alpha(b, c)) || alpha(a, c))));
    pairs && refl && sym && trans
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(120))]

    #[test]
    fn loop_driver_results_validate(d in smooth_linked(7)) {
        let n = d.n();
        let g = PermGroup::trivial(n);
        let res = loop_driver(&d, &g, BUDGET).unwrap();
        res.trace.replay(&d, &g, BUDGET).unwrap();
        let has_loop = (0..n).any(|v| d.has_edge(v, v));
        match &res.outcome {
            DriverOutcome::Loop { b, step } => {
                prop_assert!(!b.is_empty());
                for &x in b {
                    for &y in b {
                        prop_assert!(d.has_edge(x, y));
                    }
                }
                if let Some(s) = step {
                    prop_assert_eq!(res.trace.relation(s).unwrap(), &Relation::unary(b.iter().copied()));
                }
            }
            DriverOutcome::OrWitness { witness, .. } => {
                witness.validate().unwrap();
                prop_assert_eq!(res.trace.relation(&witness.step).unwrap(), &witness.relation);
            }
            other => prop_assert!(false, "unexpected outcome {:?}", other),
        }
        if !has_loop {
            let is_or = matches!(res.outcome, DriverOutcome::OrWitness { .. });
            prop_assert!(is_or);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn tsr_matches_definition((n, r) in shaped(3)) {
        prop_assert_eq!(is_tsr(&r, n), brute_tsr(&r, n));
    }

    #[test]
    fn p_central_matches_definition((n, r) in shaped(3)) {
        prop_assert_eq!(p_center(&r, n), brute_center(&r, n));
        prop_assert_eq!(is_p_central(&r, n), brute_p_central(&r, n));
    }

    #[test]
    fn pq_central_matches_definition((n, r) in shaped(3)) {
        prop_assert_eq!(is_pq_central(&r, n), brute_pq_central(&r, n));
        if r.arity() >= 2 {
            let m = r.arity();
            let want = Relation::collect(2, all_tuples(n, 2).filter(|p| {
                all_tuples(n, m - 2).all(|rest| r.contains(&[p.clone(), rest].concat()))
            }));
            prop_assert_eq!(central_equivalence(&r, n), want);
        }
    }

    #[test]
    fn nabla_of_subdirect_is_reflexive((n, r) in shaped(5)) {
        let m = r.arity();
        if m == 2 && (0..m).all(|i| brute_projection_full(&r, n, &[i])) {
            let n2 = uprel(&r, 2, n);
            prop_assert!((0..n).all(|a| n2.contains(&[a, a])));
        }
    }

    #[test]
    fn full_nabla_steps_up_to_totally_reflexive((n, r) in shaped(4), k in 1usize..=3) {
        let m = r.arity();
        let refl_r = all_tuples(n, m).all(|t| t.iter().collect::<BTreeSet<_>>().len() == m || r.contains(&t));
        let sym_r = r.iter().all(|t| permutations(m).iter().all(|p| r.contains(&p.iter().map(|&i| t[i]).collect::<Vec<_>>())));
        if (m == 2 || (refl_r && sym_r)) && uprel(&r, k, n).len() == n.pow(k as u32) {
            let up = uprel(&r, k + 1, n);
            let refl = all_tuples(n, k + 1).all(|t| t.iter().collect::<BTreeSet<_>>().len() == k + 1 || up.contains(&t));
            prop_assert!(refl);
        }
    }

    #[test]
    fn totally_reflexive_relation_sits_inside_nabla((n, r) in shaped(5)) {
        let m = r.arity();
        let refl = all_tuples(n, m).all(|t| t.iter().collect::<BTreeSet<_>>().len() == m || r.contains(&t));
        if refl {
            let up = uprel(&r, m, n);
            prop_assert!(r.iter().all(|t| up.contains(t)));
            prop_assert_eq!(uprel(&r, m - 1, n).len(), n.pow(m as u32 - 1));
        }
    }

    #[test]
    fn nabla_preserves_total_symmetry((n, r) in shaped(4), k in 1usize..=3) {
        let m = r.arity();
        let sym = r.iter().all(|t| permutations(m).iter().all(|p| r.contains(&p.iter().map(|&i| t[i]).collect::<Vec<_>>())));
        if sym {
            let up = uprel(&r, k, n);
            for t in up.iter() {
                for p in permutations(k) {
                    prop_assert!(up.contains(&p.iter().map(|&i| t[i]).collect::<Vec<_>>()));
                }
            }
        }
    }

    #[test]
    fn nabla_formula_defines_nabla((n, r) in shaped(4), extra in 0..=1usize) {
        let m = r.arity();
        let k = m - 1 + extra;
        let f = nabla_formula("R", m, &vec![0; m], k);
        let got = evaluate(&f, &Env::bare(n).with_rel("R", &r)).unwrap();
        prop_assert_eq!(got, uprel(&r, k, n));
    }
}

/// Above arity 2 the step from a full ∇ᵏ to a totally reflexive ∇ᵏ⁺¹ needs symmetry.
#[test]
fn full_nabla_step_fails_without_symmetry() {
    let words = "000 001 002 003 010 011 020 022 030 032 033 100 101 110 111 112 113 121 122 131 133 \
                 200 201 202 203 210 211 212 220 221 222 223 232 233 300 301 303 310 311 312 313 320 321 \
                 322 323 330 331 332 333";
    let r = Relation::collect(
        3,
        words.split_whitespace().map(|w| w.bytes().map(|b| (b - b'0') as usize).collect::<Vec<_>>()),
    );
    let refl = all_tuples(4, 3).all(|t| t.iter().collect::<BTreeSet<_>>().len() == 3 || r.contains(&t));
    assert!(refl);
    assert_eq!(uprel(&r, 3, 4).len(), 64);
    assert!(!uprel(&r, 4, 4).contains(&[0, 2, 3, 0]));
}
