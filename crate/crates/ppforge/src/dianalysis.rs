//! Connectivity analytics: smooth parts, weak components, algebraic length,
//! k-linkness and odd girth.

use std::collections::{BTreeSet, VecDeque};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::relcore::{power, Digraph, Relation};

/// Largest subset of `subset` on which the induced edge relation is subdirect.
pub fn smooth_part(d: &Digraph, subset: &BTreeSet<usize>) -> BTreeSet<usize> {
    let mut s = subset.clone();
    loop {
        let next: BTreeSet<usize> = s
            .iter()
            .copied()
            .filter(|&v| d.out(v).iter().any(|w| s.contains(w)) && d.inn(v).iter().any(|w| s.contains(w)))
            .collect();
        if next.len() == s.len() {
            return s;
        }
        s = next;
    }
}

pub fn smooth_part_rel(d: &Digraph, subset: &Relation) -> Relation {
    Relation::unary(smooth_part(d, &subset.elements().into_iter().collect()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ComponentReport {
    pub components: Vec<Vec<usize>>,
    /// 0 when the component has no closed walk of nonzero algebraic length.
    pub algebraic_length_gcd: Vec<usize>,
    pub has_algebraic_length_1: Vec<bool>,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Weak components with the gcd of closed-walk algebraic lengths, by potentials.
pub fn components_and_algebraic_length(d: &Digraph) -> ComponentReport {
    let n = d.n();
    let mut level: Vec<Option<i64>> = vec![None; n];
    let mut comp_of = vec![usize::MAX; n];
    let mut components = Vec::new();
    let mut gcds = Vec::new();
    for root in 0..n {
        if level[root].is_some() {
            continue;
        }
        let cid = components.len();
        let mut members = Vec::new();
        let mut g = 0usize;
        level[root] = Some(0);
        comp_of[root] = cid;
        let mut queue = VecDeque::from([root]);
        while let Some(u) = queue.pop_front() {
            members.push(u);
            let lu = level[u].unwrap();
            let steps = d.out(u).iter().map(|&w| (w, lu + 1)).chain(d.inn(u).iter().map(|&w| (w, lu - 1)));
            for (w, want) in steps {
                match level[w] {
                    None => {
                        level[w] = Some(want);
                        comp_of[w] = cid;
                        queue.push_back(w);
                    }
                    Some(lw) => g = gcd(g, (lw - want).unsigned_abs() as usize),
                }
            }
        }
        members.sort_unstable();
        components.push(members);
        gcds.push(g);
    }
    let has1 = gcds.iter().map(|&g| g == 1).collect();
    ComponentReport { components, algebraic_length_gcd: gcds, has_algebraic_length_1: has1 }
}

/// Partition into classes of the reflexive-transitive closure of a symmetric relation.
pub fn closure_classes(n: usize, r: &Relation) -> Vec<usize> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        let mut y = x;
        while p[y] != r {
            let nx = p[y];
            p[y] = r;
            y = nx;
        }
        r
    }
    for t in r.iter() {
        let (a, b) = (find(&mut parent, t[0]), find(&mut parent, t[1]));
        if a != b {
            parent[a.max(b)] = a.min(b);
        }
    }
    (0..n).map(|x| find(&mut parent, x)).collect()
}

/// The equivalence generated by a binary relation.
pub fn equivalence_closure(n: usize, r: &Relation) -> Relation {
    let cls = closure_classes(n, r);
    Relation::collect(2, (0..n).flat_map(|a| (0..n).map(move |b| (a, b))).filter(|&(a, b)| cls[a] == cls[b]).map(|(a, b)| vec![a, b]))
}

/// The link relation of a binary relation: pairs with a common out-neighbour.
pub fn link_relation(r: &Relation, n: usize) -> Relation {
    let mut ins: Vec<Vec<usize>> = vec![Vec::new(); n];
    for t in r.iter() {
        ins[t[1]].push(t[0]);
    }
    let mut out = BTreeSet::new();
    for preds in &ins {
        for &a in preds {
            for &b in preds {
                out.insert(vec![a, b]);
            }
        }
    }
    Relation::collect(2, out)
}

/// The k-linkness equivalence of a smooth digraph and whether it is everything.
pub fn linkness(d: &Digraph, k: usize) -> Result<(Relation, bool)> {
    if !d.is_smooth() {
        return Err(Error::pre("linkness needs a smooth digraph (the link relation is not reflexive)"));
    }
    if k == 0 {
        return Err(Error::pre("k must be at least 1"));
    }
    let pk = power(d.edges(), k, d.n())?;
    let eq = equivalence_closure(d.n(), &link_relation(&pk, d.n()));
    let linked = eq.len() == d.n() * d.n();
    Ok((eq, linked))
}

/// Least k ≤ n² for which the digraph is k-linked.
pub fn minimal_k(d: &Digraph) -> Result<Option<usize>> {
    let n = d.n();
    if !d.is_smooth() {
        return Err(Error::pre("linkness needs a smooth digraph"));
    }
    let rep = components_and_algebraic_length(d);
    if rep.components.len() != 1 || rep.algebraic_length_gcd[0] != 1 {
        return Ok(None);
    }
    let mut pk = Relation::diagonal(n);
    for k in 1..=n * n {
        pk = crate::relcore::compose(&pk, d.edges())?;
        if equivalence_closure(n, &link_relation(&pk, n)).len() == n * n {
            return Ok(Some(k));
        }
    }
    Ok(None)
}

/// Bipartiteness and the length of a shortest odd cycle of a symmetric digraph.
pub fn bipartite_and_odd_girth(d: &Digraph) -> Result<(bool, Option<usize>)> {
    if !d.is_symmetric() {
        return Err(Error::pre("bipartiteness test needs a symmetric relation"));
    }
    let n = d.n();
    let mut best: Option<usize> = None;
    for s in 0..n {
        let mut dist = vec![usize::MAX; n];
        dist[s] = 0;
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            for &w in d.out(u) {
                if dist[w] == usize::MAX {
                    dist[w] = dist[u] + 1;
                    queue.push_back(w);
                } else if dist[w] == dist[u] {
                    let len = 2 * dist[u] + 1;
                    best = Some(best.map_or(len, |b| b.min(len)));
                }
            }
        }
    }
    Ok((best.is_none(), best))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AnalyzeReport {
    pub smooth: bool,
    pub components: Vec<Vec<usize>>,
    pub alg_length_gcd: Vec<usize>,
    pub linked: bool,
    pub linked_k: Option<usize>,
    pub bipartite: Option<bool>,
    pub odd_girth: Option<usize>,
}

pub fn analyze(d: &Digraph) -> AnalyzeReport {
    let rep = components_and_algebraic_length(d);
    let smooth = d.is_smooth();
    let linked_k = if smooth { minimal_k(d).ok().flatten() } else { None };
    let (bipartite, odd_girth) = match bipartite_and_odd_girth(d) {
        Ok((b, g)) => (Some(b), g),
        Err(_) => (None, None),
    };
    AnalyzeReport {
        smooth,
        components: rep.components,
        alg_length_gcd: rep.algebraic_length_gcd,
        linked: linked_k.is_some(),
        linked_k,
        bipartite,
        odd_girth,
    }
}
