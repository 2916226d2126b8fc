//! Finite members of the class of structures on injective k-tuples whose
//! ∼-classes are named by the elements of a base structure, with strong
//! amalgamation.
//!
//! Encoding: relation `simK` of arity 2k, `P1..Pn` of arity k and `RK_<name>`
//! of arity k·r for every base relation `name` of arity r. A layer prefix can
//! be put in front of every name for superpositions.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::relcore::{all_tuples, Relation, Structure, Tuple};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassParams {
    pub base: Structure,
    pub k: usize,
    pub prefix: String,
}

impl ClassParams {
    pub fn new(base: Structure, k: usize) -> Result<Self> {
        base.validate()?;
        if k < 2 {
            return Err(Error::pre(format!("k must be at least 2, got {k}")));
        }
        Ok(ClassParams { base, k, prefix: String::new() })
    }

    pub fn with_prefix(mut self, prefix: &str) -> Self {
        self.prefix = prefix.to_string();
        self
    }

    pub fn n(&self) -> usize {
        self.base.domain
    }

    pub fn sim_name(&self) -> String {
        format!("{}simK", self.prefix)
    }

    /// Name of the class with 0-based index `i`.
    pub fn p_name(&self, i: usize) -> String {
        format!("{}P{}", self.prefix, i + 1)
    }

    pub fn rk_name(&self, rel: &str) -> String {
        format!("{}RK_{rel}", self.prefix)
    }

    pub fn signature(&self) -> BTreeMap<String, usize> {
        let mut sig = BTreeMap::new();
        sig.insert(self.sim_name(), 2 * self.k);
        for i in 0..self.n() {
            sig.insert(self.p_name(i), self.k);
        }
        for (name, r) in &self.base.relations {
            sig.insert(self.rk_name(name), self.k * r.arity());
        }
        sig
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Membership {
    /// Class (0-based) of every injective k-tuple, and how many of them were
    /// classified by the completion search rather than by the input.
    Member { classes: BTreeMap<Tuple, usize>, completed: usize },
    Violation(String),
}

impl Membership {
    pub fn is_member(&self) -> bool {
        matches!(self, Membership::Member { .. })
    }
}

pub fn injective_tuples(m: usize, k: usize) -> Vec<Tuple> {
    all_tuples(m, k).filter(|t| is_injective(t)).collect()
}

fn is_injective(t: &[usize]) -> bool {
    t.iter().collect::<BTreeSet<_>>().len() == t.len()
}

/// The structure on `m` points determined by a class for every injective k-tuple.
pub fn member_from_classes(m: usize, classes: &BTreeMap<Tuple, usize>, p: &ClassParams) -> Structure {
    let inj = injective_tuples(m, p.k);
    let mut s = Structure::new(m);
    let mut parts = vec![Vec::new(); p.n()];
    for t in &inj {
        parts[classes[t]].push(t.clone());
    }
    for (i, part) in parts.into_iter().enumerate() {
        s.relations.insert(p.p_name(i), Relation::collect(p.k, part));
    }
    let sim = inj
        .iter()
        .flat_map(|a| inj.iter().filter(|b| classes[*b] == classes[a]).map(move |b| [a.clone(), b.clone()].concat()));
    s.relations.insert(p.sim_name(), Relation::collect(2 * p.k, sim));
    for (name, r) in &p.base.relations {
        let rk = all_tuples(inj.len(), r.arity())
            .filter(|pick| r.contains(&pick.iter().map(|&i| classes[&inj[i]]).collect::<Vec<_>>()))
            .map(|pick| pick.iter().flat_map(|&i| inj[i].iter().copied()).collect::<Tuple>());
        s.relations.insert(p.rk_name(name), Relation::collect(p.k * r.arity(), rk));
    }
    s
}

fn check_signature(b: &Structure, sig: &BTreeMap<String, usize>) -> Result<()> {
    for (name, r) in &b.relations {
        r.check_domain(b.domain).map_err(|e| Error::pre(format!("relation {name}: {e}")))?;
        match sig.get(name) {
            None => return Err(Error::pre(format!("relation {name} is not in the class signature"))),
            Some(&a) if a != r.arity() => {
                return Err(Error::pre(format!("relation {name} has arity {}, expected {a}", r.arity())))
            }
            _ => {}
        }
    }
    Ok(())
}

const COMPLETION_BUDGET: u64 = 1_000_000;

/// Decides whether `b` is a member of the class, completing unclassified
/// ∼-classes with unused class names when needed.
pub fn class_membership(b: &Structure, p: &ClassParams) -> Result<Membership> {
    check_signature(b, &p.signature())?;
    let (k, n, m) = (p.k, p.n(), b.domain);
    let empty = |a| Relation::empty(a);
    let inj = injective_tuples(m, k);
    let pos: BTreeMap<&Tuple, usize> = inj.iter().enumerate().map(|(i, t)| (t, i)).collect();
    let violation = |msg: String| Ok(Membership::Violation(msg));

    let mut label: Vec<Option<usize>> = vec![None; inj.len()];
    for i in 0..n {
        let name = p.p_name(i);
        for t in b.relations.get(&name).unwrap_or(&empty(k)).iter() {
            let Some(&j) = pos.get(t) else {
                return violation(format!("{name} contains the non-injective tuple {t:?}"));
            };
            if let Some(prev) = label[j] {
                return violation(format!("{t:?} lies in both {} and {name}", p.p_name(prev)));
            }
            label[j] = Some(i);
        }
    }

    let sim_name = p.sim_name();
    let sim = b.relations.get(&sim_name).cloned().unwrap_or_else(|| empty(2 * k));
    let mut related = vec![BTreeSet::new(); inj.len()];
    for t in sim.iter() {
        let (x, y) = t.split_at(k);
        let (Some(&i), Some(&j)) = (pos.get(&x.to_vec()), pos.get(&y.to_vec())) else {
            return violation(format!("{sim_name} relates the non-injective tuple {t:?}"));
        };
        related[i].insert(j);
    }
    for i in 0..inj.len() {
        if !related[i].contains(&i) {
            return violation(format!("{sim_name} is not reflexive at {:?}", inj[i]));
        }
        for &j in &related[i] {
            if !related[j].contains(&i) {
                return violation(format!("{sim_name} is not symmetric at {:?}, {:?}", inj[i], inj[j]));
            }
            if let Some(&l) = related[j].iter().find(|l| !related[i].contains(l)) {
                return violation(format!(
                    "{sim_name} is not transitive at {:?}, {:?}, {:?}",
                    inj[i], inj[j], inj[l]
                ));
            }
        }
    }
    let mut block = vec![usize::MAX; inj.len()];
    let mut blocks: Vec<Vec<usize>> = Vec::new();
    for i in 0..inj.len() {
        if block[i] == usize::MAX {
            for &j in &related[i] {
                block[j] = blocks.len();
            }
            blocks.push(related[i].iter().copied().collect());
        }
    }
    if blocks.len() > n {
        return violation(format!("{sim_name} has {} classes, more than {n}", blocks.len()));
    }
    let mut name_of: Vec<Option<usize>> = vec![None; blocks.len()];
    for (bi, members) in blocks.iter().enumerate() {
        let names: BTreeSet<usize> = members.iter().filter_map(|&j| label[j]).collect();
        if names.len() > 1 {
            return violation(format!("a {sim_name} class meets several P relations: {:?}", inj[members[0]]));
        }
        name_of[bi] = names.into_iter().next();
    }
    let used: BTreeSet<usize> = name_of.iter().flatten().copied().collect();
    if used.len() != name_of.iter().flatten().count() {
        return violation("one P relation meets two ∼-classes".to_string());
    }
    for (i, t) in inj.iter().enumerate() {
        if label[i].is_none() && name_of[block[i]].is_some() {
            return violation(format!("{t:?} is unclassified although its ∼-class is named"));
        }
    }

    // Constraints of the completion: every r-tuple of injective tuples must be
    // in RK exactly when its classes form a tuple of the base relation.
    let mut checks: Vec<(Vec<usize>, &Relation, bool)> = Vec::new();
    for (name, r) in &p.base.relations {
        let rk_name = p.rk_name(name);
        let rk = b.relations.get(&rk_name).cloned().unwrap_or_else(|| empty(k * r.arity()));
        for t in rk.iter() {
            if t.chunks(k).any(|c| !is_injective(c)) {
                return violation(format!("{rk_name} holds on {t:?}, which has a non-injective component"));
            }
        }
        for pick in all_tuples(inj.len(), r.arity()) {
            let flat: Tuple = pick.iter().flat_map(|&i| inj[i].iter().copied()).collect();
            checks.push((pick.iter().map(|&i| block[i]).collect(), r, rk.contains(&flat)));
        }
    }
    let free: Vec<usize> = (0..blocks.len()).filter(|&bi| name_of[bi].is_none()).collect();
    let unused: Vec<usize> = (0..n).filter(|c| !used.contains(c)).collect();
    let mut order = vec![0usize; blocks.len()];
    for (d, &bi) in free.iter().enumerate() {
        order[bi] = d + 1;
    }
    let mut by_depth: Vec<Vec<usize>> = vec![Vec::new(); free.len() + 1];
    for (ci, (blk, _, _)) in checks.iter().enumerate() {
        by_depth[blk.iter().map(|&bi| order[bi]).max().unwrap_or(0)].push(ci);
    }
    let ok = |names: &[Option<usize>], depth: usize| -> Option<String> {
        by_depth[depth].iter().find_map(|&ci| {
            let (blk, r, present) = &checks[ci];
            let classes: Vec<usize> = blk.iter().map(|&bi| names[bi].expect("assigned")).collect();
            (r.contains(&classes) != *present).then(|| format!("RK disagrees with the base relation on classes {classes:?}"))
        })
    };
    if let Some(msg) = ok(&name_of, 0) {
        return violation(msg);
    }
    let mut nodes = 0u64;
    let mut names = name_of.clone();
    let mut taken = vec![false; unused.len()];
    fn complete(
        d: usize,
        free: &[usize],
        unused: &[usize],
        taken: &mut [bool],
        names: &mut [Option<usize>],
        nodes: &mut u64,
        ok: &dyn Fn(&[Option<usize>], usize) -> Option<String>,
    ) -> Result<bool> {
        if d == free.len() {
            return Ok(true);
        }
        for c in 0..unused.len() {
            if taken[c] {
                continue;
            }
            *nodes += 1;
            if *nodes > COMPLETION_BUDGET {
                return Err(Error::budget("class completion search exceeded its node limit"));
            }
            names[free[d]] = Some(unused[c]);
            taken[c] = true;
            if ok(names, d + 1).is_none() && complete(d + 1, free, unused, taken, names, nodes, ok)? {
                return Ok(true);
            }
            taken[c] = false;
            names[free[d]] = None;
        }
        Ok(false)
    }
    if !complete(0, &free, &unused, &mut taken, &mut names, &mut nodes, &ok)? {
        return violation("no naming of the unclassified ∼-classes satisfies the RK rule".to_string());
    }
    let classes: BTreeMap<Tuple, usize> =
        inj.iter().enumerate().map(|(i, t)| (t.clone(), names[block[i]].expect("completed"))).collect();
    let completed = label.iter().filter(|l| l.is_none()).count();
    Ok(Membership::Member { classes, completed })
}

/// Whether `f` embeds `from` into `to` as an induced substructure.
pub fn is_embedding(f: &[usize], from: &Structure, to: &Structure) -> bool {
    if f.len() != from.domain || f.iter().any(|&x| x >= to.domain) || !is_injective(f) {
        return false;
    }
    let names: BTreeSet<&String> = from.relations.keys().chain(to.relations.keys()).collect();
    let image: BTreeSet<usize> = f.iter().copied().collect();
    names.into_iter().all(|name| match (from.relations.get(name), to.relations.get(name)) {
        (Some(r), Some(s)) => {
            let mapped = Relation::collect(r.arity(), r.iter().map(|t| t.iter().map(|&x| f[x]).collect()));
            mapped == s.filter(|t| t.iter().all(|x| image.contains(x)))
        }
        (Some(r), None) => r.is_empty(),
        (None, Some(s)) => s.filter(|t| t.iter().all(|x| image.contains(x))).is_empty(),
        (None, None) => true,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Amalgam {
    pub d: Structure,
    pub e1: Vec<usize>,
    pub e2: Vec<usize>,
}

fn classes_of(s: &Structure, p: &ClassParams, what: &str) -> Result<BTreeMap<Tuple, usize>> {
    match class_membership(s, p)? {
        Membership::Member { classes, .. } => Ok(classes),
        Membership::Violation(v) => Err(Error::pre(format!("{what} is not in the class: {v}"))),
    }
}

/// Strong amalgam of `c1` and `c2` over `b`: C1 keeps its numbering, the points
/// of C2 outside f2(B) follow, and new tuples get the first class.
pub fn strong_amalgam(
    b: &Structure,
    c1: &Structure,
    c2: &Structure,
    f1: &[usize],
    f2: &[usize],
    p: &ClassParams,
) -> Result<Amalgam> {
    classes_of(b, p, "B")?;
    let k1 = classes_of(c1, p, "C1")?;
    let k2 = classes_of(c2, p, "C2")?;
    if !is_embedding(f1, b, c1) || !is_embedding(f2, b, c2) {
        return Err(Error::pre("f1 and f2 must be embeddings of B"));
    }
    let e1: Vec<usize> = (0..c1.domain).collect();
    let mut e2 = vec![usize::MAX; c2.domain];
    for (&y1, &y2) in f1.iter().zip(f2) {
        e2[y2] = e1[y1];
    }
    let mut next = c1.domain;
    for slot in e2.iter_mut().filter(|s| **s == usize::MAX) {
        *slot = next;
        next += 1;
    }
    let size = next;
    let mut classes: BTreeMap<Tuple, usize> = injective_tuples(size, p.k).into_iter().map(|t| (t, 0)).collect();
    for (t, &c) in &k1 {
        classes.insert(t.iter().map(|&x| e1[x]).collect(), c);
    }
    for (t, &c) in &k2 {
        let img: Tuple = t.iter().map(|&x| e2[x]).collect();
        if t.iter().all(|x| f2.contains(x)) && classes[&img] != c {
            return Err(Error::Internal("C1 and C2 disagree on the shared part".into()));
        }
        classes.insert(img, c);
    }
    let d = member_from_classes(size, &classes, p);
    if !class_membership(&d, p)?.is_member() {
        return Err(Error::Internal("amalgam left the class".into()));
    }
    if !is_embedding(&e1, c1, &d) || !is_embedding(&e2, c2, &d) {
        return Err(Error::Internal("amalgam maps are not embeddings".into()));
    }
    if !sap_holds(f1, f2, &e1, &e2) {
        return Err(Error::Internal("strong amalgamation equality fails".into()));
    }
    Ok(Amalgam { d, e1, e2 })
}

/// e1∘f1 = e2∘f2 and e1(C1) ∩ e2(C2) = e1(f1(B)).
pub fn sap_holds(f1: &[usize], f2: &[usize], e1: &[usize], e2: &[usize]) -> bool {
    let commutes = f1.iter().zip(f2).all(|(&a, &b)| e1[a] == e2[b]);
    let i1: BTreeSet<usize> = e1.iter().copied().collect();
    let i2: BTreeSet<usize> = e2.iter().copied().collect();
    let shared: BTreeSet<usize> = f1.iter().map(|&x| e1[x]).collect();
    commutes && i1.intersection(&i2).copied().collect::<BTreeSet<_>>() == shared
}

/// An amalgamation problem with fully classified members.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SapInstance {
    pub b: Structure,
    pub c1: Structure,
    pub c2: Structure,
    pub f1: Vec<usize>,
    pub f2: Vec<usize>,
}

fn random_extension<R: Rng>(rng: &mut R, m: usize, f: &[usize], base: &BTreeMap<Tuple, usize>, p: &ClassParams) -> Structure {
    let mut inv = vec![None; m];
    for (x, &y) in f.iter().enumerate() {
        inv[y] = Some(x);
    }
    let classes = injective_tuples(m, p.k)
        .into_iter()
        .map(|t| {
            let pre: Option<Tuple> = t.iter().map(|&y| inv[y]).collect();
            let c = match pre {
                Some(pre) => base[&pre],
                None => rng.gen_range(0..p.n()),
            };
            (t, c)
        })
        .collect();
    member_from_classes(m, &classes, p)
}

/// Random B, C1, C2 with at most `max_size` points each and random embeddings.
pub fn random_sap_instance<R: Rng>(rng: &mut R, p: &ClassParams, max_size: usize) -> SapInstance {
    let m1 = rng.gen_range(0..=max_size);
    let m2 = rng.gen_range(0..=max_size);
    let mb = rng.gen_range(0..=m1.min(m2));
    let b_classes: BTreeMap<Tuple, usize> =
        injective_tuples(mb, p.k).into_iter().map(|t| (t, rng.gen_range(0..p.n()))).collect();
    let b = member_from_classes(mb, &b_classes, p);
    let mut pick = |m: usize| {
        let mut pts: Vec<usize> = (0..m).collect();
        pts.shuffle(rng);
        pts.truncate(mb);
        pts
    };
    let f1 = pick(m1);
    let f2 = pick(m2);
    let c1 = random_extension(rng, m1, &f1, &b_classes, p);
    let c2 = random_extension(rng, m2, &f2, &b_classes, p);
    SapInstance { b, c1, c2, f1, f2 }
}

/// Membership of every layer reduct; layers must have disjoint signatures that
/// together cover the relations of `b`.
pub fn superposition_membership(b: &Structure, layers: &[ClassParams]) -> Result<Vec<Membership>> {
    let mut all: BTreeMap<String, usize> = BTreeMap::new();
    for p in layers {
        for (name, a) in p.signature() {
            if all.insert(name.clone(), a).is_some() {
                return Err(Error::pre(format!("layers share the symbol {name}")));
            }
        }
    }
    check_signature(b, &all)?;
    layers
        .iter()
        .map(|p| {
            let sig = p.signature();
            let mut reduct = Structure::new(b.domain);
            for (name, r) in &b.relations {
                if sig.contains_key(name) {
                    reduct.relations.insert(name.clone(), r.clone());
                }
            }
            class_membership(&reduct, p)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relcore::Digraph;

    fn params(n: usize) -> ClassParams {
        ClassParams::new(Digraph::complete(n).to_structure(), 2).unwrap()
    }

    fn classify(m: usize, p: &ClassParams, f: impl Fn(&Tuple) -> usize) -> Structure {
        let classes = injective_tuples(m, p.k).into_iter().map(|t| {
            let c = f(&t);
            (t, c)
        });
        member_from_classes(m, &classes.collect(), p)
    }

    #[test]
    fn full_classification_is_a_member() {
        let p = params(2);
        let s = classify(3, &p, |t| usize::from(t[0] < t[1]));
        assert_eq!(p.signature().len(), 4);
        match class_membership(&s, &p).unwrap() {
            Membership::Member { classes, completed } => {
                assert_eq!(classes.len(), 6);
                assert_eq!(completed, 0);
            }
            other => panic!("{other:?}"),
        }
        let rk = s.relation("RK_E").unwrap();
        assert!(rk.contains(&[0, 1, 1, 0]) && !rk.contains(&[0, 1, 0, 2]));
    }

    #[test]
    fn non_transitive_sim_is_rejected() {
        let p = params(2);
        let mut s = classify(3, &p, |_| 0);
        let sim = s.relations.get_mut("simK").unwrap();
        *sim = sim.filter(|t| !(t[..2] == [0, 1] && t[2..] == [0, 2]) && !(t[..2] == [0, 2] && t[2..] == [0, 1]));
        let m = class_membership(&s, &p).unwrap();
        assert!(matches!(m, Membership::Violation(ref v) if v.contains("transitive")), "{m:?}");
    }

    #[test]
    fn rk_on_a_non_injective_tuple_is_rejected() {
        let p = params(2);
        let mut s = classify(2, &p, |t| t[0]);
        s.relations.get_mut("RK_E").unwrap().insert(vec![0, 0, 0, 1]);
        let m = class_membership(&s, &p).unwrap();
        assert!(matches!(m, Membership::Violation(ref v) if v.contains("non-injective")), "{m:?}");
    }

    #[test]
    fn unnamed_classes_are_completed() {
        let p = params(3);
        let mut s = classify(3, &p, |t| t[0]);
        s.relations.insert("P3".into(), Relation::empty(2));
        match class_membership(&s, &p).unwrap() {
            Membership::Member { completed, classes } => {
                assert_eq!(completed, 2);
                assert_eq!(classes[&vec![2, 0]], 2);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn signature_mismatch_is_an_error() {
        let p = params(2);
        let s = Structure::new(2).with("E", Relation::empty(2));
        assert!(class_membership(&s, &p).is_err());
    }

    #[test]
    fn amalgam_over_empty_base() {
        let p = params(2);
        let b = classify(0, &p, |_| 0);
        let c = classify(1, &p, |_| 0);
        let a = strong_amalgam(&b, &c, &c, &[], &[], &p).unwrap();
        assert_eq!(a.d.domain, 2);
        assert_eq!(a.d.relation("P1").unwrap().len(), 2);
        assert_eq!((a.e1, a.e2), (vec![0], vec![1]));
    }

    #[test]
    fn amalgam_of_base_with_itself() {
        let p = params(2);
        let b = classify(2, &p, |t| t[0]);
        let a = strong_amalgam(&b, &b, &b, &[0, 1], &[0, 1], &p).unwrap();
        assert_eq!(a.d, b);
        assert_eq!(a.e1, a.e2);
    }

    #[test]
    fn two_point_base_three_point_sides() {
        let p = params(2);
        let c1 = classify(3, &p, |t| usize::from(t[0] + t[1] == 3));
        // B sits on {1, 2} in C1 and on {0, 1} in C2.
        let f1 = [1, 2];
        let b1 = classify(2, &p, |t| usize::from(t[0] + t[1] == 1));
        assert!(is_embedding(&f1, &b1, &c1));
        let c2 = classify(3, &p, |t| if t[0].max(t[1]) <= 1 { usize::from(t[0] + t[1] == 1) } else { usize::from(t[0] > t[1]) });
        let a = strong_amalgam(&b1, &c1, &c2, &f1, &[0, 1], &p).unwrap();
        assert_eq!(a.d.domain, 4);
        assert!(class_membership(&a.d, &p).unwrap().is_member());
        assert!(sap_holds(&f1, &[0, 1], &a.e1, &a.e2));
    }

    #[test]
    fn superposition_layers() {
        let p = params(2).with_prefix("A.");
        let q = params(3).with_prefix("B.");
        let mut s = classify(3, &p, |t| t[0] % 2);
        s.relations.extend(classify(3, &q, |t| t[1]).relations);
        let out = superposition_membership(&s, &[p.clone(), q.clone()]).unwrap();
        assert!(out.iter().all(Membership::is_member));
        s.relations.get_mut("B.RK_E").unwrap().insert(vec![0, 1, 2, 1]);
        let out = superposition_membership(&s, &[p.clone(), q]).unwrap();
        assert!(out[0].is_member() && !out[1].is_member());
        assert!(superposition_membership(&Structure::new(0), &[]).unwrap().is_empty());
        assert!(superposition_membership(&s, &[p.clone(), p]).is_err());
    }
}
