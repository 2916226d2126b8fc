#![allow(dead_code)]

use std::collections::BTreeSet;

use ppforge::relcore::{all_tuples, Digraph, Relation};
use proptest::prelude::*;

pub fn relation(n: usize, arity: usize) -> impl Strategy<Value = Relation> {
    proptest::collection::vec(any::<bool>(), n.pow(arity as u32)).prop_map(move |bits| {
        Relation::collect(arity, all_tuples(n, arity).zip(bits).filter(|(_, b)| *b).map(|(t, _)| t))
    })
}

pub fn digraph(max_n: usize) -> impl Strategy<Value = Digraph> {
    (1..=max_n).prop_flat_map(|n| relation(n, 2).prop_map(move |r| Digraph::new(n, r).unwrap()))
}

pub fn perm(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<usize>>()).prop_shuffle()
}

pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(cur: &mut Vec<usize>, used: &mut Vec<bool>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == used.len() {
            out.push(cur.clone());
            return;
        }
        for x in 0..used.len() {
            if !used[x] {
                used[x] = true;
                cur.push(x);
                rec(cur, used, out);
                cur.pop();
                used[x] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

/// Closure of a set of permutations under composition.
pub fn closure(n: usize, gens: &[Vec<usize>]) -> BTreeSet<Vec<usize>> {
    let mut seen: BTreeSet<Vec<usize>> = BTreeSet::from([(0..n).collect()]);
    let mut frontier: Vec<Vec<usize>> = seen.iter().cloned().collect();
    while let Some(p) = frontier.pop() {
        for g in gens {
            let q: Vec<usize> = (0..n).map(|i| g[p[i]]).collect();
            if seen.insert(q.clone()) {
                frontier.push(q);
            }
        }
    }
    seen
}

/// Automorphisms of a digraph by trying every permutation.
pub fn digraph_automorphisms(d: &Digraph) -> Vec<Vec<usize>> {
    permutations(d.n()).into_iter().filter(|p| d.edges().iter().all(|t| d.has_edge(p[t[0]], p[t[1]]))).collect()
}

/// Weak components by repeated relaxation.
pub fn weak_components(d: &Digraph) -> Vec<usize> {
    let n = d.n();
    let mut comp: Vec<usize> = (0..n).collect();
    loop {
        let mut changed = false;
        for t in d.edges().iter() {
            let m = comp[t[0]].min(comp[t[1]]);
            for v in [t[0], t[1]] {
                if comp[v] != m {
                    comp[v] = m;
                    changed = true;
                }
            }
        }
        if !changed {
            return comp;
        }
    }
}
