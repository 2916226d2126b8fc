//! Finite relational structures, relation algebra, permutation groups, orbits,
//! quotients and core tests.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Tuple = Vec<usize>;
pub type Perm = Vec<usize>;

pub const DEFAULT_GROUP_CAP: usize = 100_000;
/// Above this arity the orbit relation O is never materialized.
pub const O_VIRTUAL_ARITY: usize = 8;

/// A finite relation stored as a sorted tuple set.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Relation {
    arity: usize,
    tuples: BTreeSet<Tuple>,
}

impl Relation {
    pub fn empty(arity: usize) -> Self {
        Relation { arity, tuples: BTreeSet::new() }
    }

    pub fn from_tuples<I: IntoIterator<Item = Tuple>>(arity: usize, tuples: I) -> Result<Self> {
        let mut r = Relation::empty(arity);
        for t in tuples {
            if t.len() != arity {
                return Err(Error::pre(format!(
                    "tuple {t:?} has length {} but arity is {arity}",
                    t.len()
                )));
            }
            r.tuples.insert(t);
        }
        Ok(r)
    }

    /// Builds a relation from tuples already known to have the right length.
    pub fn collect<I: IntoIterator<Item = Tuple>>(arity: usize, tuples: I) -> Self {
        let tuples: BTreeSet<Tuple> = tuples.into_iter().collect();
        debug_assert!(tuples.iter().all(|t| t.len() == arity));
        Relation { arity, tuples }
    }

    pub fn unary<I: IntoIterator<Item = usize>>(elems: I) -> Self {
        Relation::collect(1, elems.into_iter().map(|a| vec![a]))
    }

    pub fn full(n: usize, arity: usize) -> Self {
        Relation::collect(arity, all_tuples(n, arity))
    }

    pub fn diagonal(n: usize) -> Self {
        Relation::collect(2, (0..n).map(|a| vec![a, a]))
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn contains(&self, t: &[usize]) -> bool {
        self.tuples.contains(t)
    }

    pub fn insert(&mut self, t: Tuple) {
        assert_eq!(t.len(), self.arity, "tuple length must match arity");
        self.tuples.insert(t);
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tuple> {
        self.tuples.iter()
    }

    pub fn tuples(&self) -> &BTreeSet<Tuple> {
        &self.tuples
    }

    /// Elements of a unary relation.
    pub fn elements(&self) -> Vec<usize> {
        self.tuples.iter().map(|t| t[0]).collect()
    }

    pub fn max_entry(&self) -> Option<usize> {
        self.tuples.iter().flat_map(|t| t.iter().copied()).max()
    }

    pub fn check_domain(&self, n: usize) -> Result<()> {
        match self.tuples.iter().find(|t| t.iter().any(|&a| a >= n)) {
            Some(t) => Err(Error::pre(format!("tuple {t:?} leaves the domain 0..{n}"))),
            None => Ok(()),
        }
    }

    pub fn project(&self, coords: &[usize]) -> Relation {
        Relation::collect(
            coords.len(),
            self.tuples.iter().map(|t| coords.iter().map(|&c| t[c]).collect()),
        )
    }

    /// Set of values occurring at one coordinate.
    pub fn coordinate(&self, c: usize) -> BTreeSet<usize> {
        self.tuples.iter().map(|t| t[c]).collect()
    }

    pub fn inverse(&self) -> Relation {
        Relation::collect(self.arity, self.tuples.iter().map(|t| t.iter().rev().copied().collect()))
    }

    pub fn union(&self, other: &Relation) -> Relation {
        assert_eq!(self.arity, other.arity);
        Relation::collect(self.arity, self.tuples.union(&other.tuples).cloned())
    }

    pub fn intersection(&self, other: &Relation) -> Relation {
        assert_eq!(self.arity, other.arity);
        Relation::collect(self.arity, self.tuples.intersection(&other.tuples).cloned())
    }

    pub fn is_subset(&self, other: &Relation) -> bool {
        self.arity == other.arity && self.tuples.is_subset(&other.tuples)
    }

    pub fn filter(&self, mut keep: impl FnMut(&[usize]) -> bool) -> Relation {
        Relation::collect(self.arity, self.tuples.iter().filter(|t| keep(t)).cloned())
    }

    /// Image under a permutation applied to every coordinate.
    pub fn image(&self, p: &[usize]) -> Relation {
        Relation::collect(self.arity, self.tuples.iter().map(|t| t.iter().map(|&a| p[a]).collect()))
    }

    /// Restriction to tuples with all entries in `subset`.
    pub fn restrict(&self, subset: &BTreeSet<usize>) -> Relation {
        self.filter(|t| t.iter().all(|a| subset.contains(a)))
    }

    /// Renames entries through `map`, dropping tuples with unmapped entries.
    pub fn rename(&self, map: &[Option<usize>]) -> Relation {
        Relation::collect(
            self.arity,
            self.tuples.iter().filter_map(|t| t.iter().map(|&a| map[a]).collect::<Option<Tuple>>()),
        )
    }

    pub fn to_vecs(&self) -> Vec<Tuple> {
        self.tuples.iter().cloned().collect()
    }
}

/// All tuples of the given arity over 0..n in lexicographic order.
pub fn all_tuples(n: usize, arity: usize) -> impl Iterator<Item = Tuple> {
    let total = if arity == 0 { 1 } else { n.checked_pow(arity as u32).unwrap_or(usize::MAX) };
    let total = if n == 0 && arity > 0 { 0 } else { total };
    (0..total).map(move |mut idx| {
        let mut t = vec![0; arity];
        for slot in t.iter_mut().rev() {
            *slot = idx % n;
            idx /= n;
        }
        t
    })
}

fn require_binary(r: &Relation, what: &str) -> Result<()> {
    if r.arity() != 2 {
        return Err(Error::pre(format!("{what} must be binary, got arity {}", r.arity())));
    }
    Ok(())
}

/// Relational composition {(x,z) : ∃y R(x,y) ∧ S(y,z)}.
pub fn compose(r: &Relation, s: &Relation) -> Result<Relation> {
    require_binary(r, "left operand")?;
    require_binary(s, "right operand")?;
    let mut by_first: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for t in s.iter() {
        by_first.entry(t[0]).or_default().push(t[1]);
    }
    let mut out = BTreeSet::new();
    for t in r.iter() {
        if let Some(zs) = by_first.get(&t[1]) {
            for &z in zs {
                out.insert(vec![t[0], z]);
            }
        }
    }
    Ok(Relation { arity: 2, tuples: out })
}

/// k-fold composition of R with itself; the 0-th power is the diagonal.
pub fn power(r: &Relation, k: usize, n: usize) -> Result<Relation> {
    require_binary(r, "relation")?;
    let mut acc = Relation::diagonal(n);
    for _ in 0..k {
        acc = compose(&acc, r)?;
    }
    Ok(acc)
}

/// B + R = {y : ∃x B(x) ∧ R(x,y)}.
pub fn shift(b: &Relation, r: &Relation) -> Result<Relation> {
    if b.arity() != 1 {
        return Err(Error::pre("shifted set must be unary"));
    }
    require_binary(r, "relation")?;
    Ok(Relation::collect(1, r.iter().filter(|t| b.contains(&t[..1])).map(|t| vec![t[1]])))
}

/// R − B style backward shift {x : ∃y R(x,y) ∧ B(y)}.
pub fn shift_back(b: &Relation, r: &Relation) -> Result<Relation> {
    shift(b, &r.inverse())
}

/// True iff every coordinate projection is the whole domain.
pub fn is_subdirect(r: &Relation, n: usize) -> bool {
    (0..r.arity()).all(|c| r.coordinate(c).len() == n && (n == 0 || r.coordinate(c).iter().all(|&a| a < n)))
}

/// OR(R,S): tuples a⊕b with a ∈ R or b ∈ S.
pub fn or_relation(r: &Relation, s: &Relation, n: usize) -> Relation {
    let (p, q) = (r.arity(), s.arity());
    let tuples = all_tuples(n, p + q).filter(|t| r.contains(&t[..p]) || s.contains(&t[p..]));
    Relation::collect(p + q, tuples)
}

/// True iff `r` is an equivalence on its carrier {a : (a,a) ∈ r} and lives inside it.
pub fn is_equivalence_on_carrier(r: &Relation) -> bool {
    if r.arity() != 2 {
        return false;
    }
    let carrier: BTreeSet<usize> = r.iter().filter(|t| t[0] == t[1]).map(|t| t[0]).collect();
    r.iter().all(|t| carrier.contains(&t[0]) && carrier.contains(&t[1]))
        && r.iter().all(|t| r.contains(&[t[1], t[0]]))
        && r.iter().all(|t| r.iter().filter(|u| u[0] == t[1]).all(|u| r.contains(&[t[0], u[1]])))
}

pub fn carrier(r: &Relation) -> BTreeSet<usize> {
    r.iter().filter(|t| t[0] == t[1]).map(|t| t[0]).collect()
}

/// A finite structure with domain 0..n and named relations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Structure {
    pub domain: usize,
    pub relations: BTreeMap<String, Relation>,
}

#[derive(Serialize, Deserialize)]
struct RelationJson {
    arity: usize,
    tuples: Vec<Tuple>,
}

#[derive(Serialize, Deserialize)]
struct StructureJson {
    domain: usize,
    relations: BTreeMap<String, RelationJson>,
}

impl Structure {
    pub fn new(domain: usize) -> Self {
        Structure { domain, relations: BTreeMap::new() }
    }

    pub fn with(mut self, name: &str, r: Relation) -> Self {
        self.relations.insert(name.to_string(), r);
        self
    }

    pub fn relation(&self, name: &str) -> Result<&Relation> {
        self.relations.get(name).ok_or_else(|| Error::Unresolved(name.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.domain == 0 {
            return Err(Error::pre("domain must be nonempty"));
        }
        for (name, r) in &self.relations {
            if r.arity() == 0 {
                return Err(Error::pre(format!("relation {name} has arity 0")));
            }
            r.check_domain(self.domain)
                .map_err(|e| Error::pre(format!("relation {name}: {e}")))?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: StructureJson = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            col: e.column(),
            msg: e.to_string(),
        })?;
        let mut s = Structure::new(raw.domain);
        for (name, r) in raw.relations {
            s.relations.insert(name, Relation::from_tuples(r.arity, r.tuples)?);
        }
        s.validate()?;
        Ok(s)
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        let raw = StructureJson {
            domain: self.domain,
            relations: self
                .relations
                .iter()
                .map(|(k, r)| (k.clone(), RelationJson { arity: r.arity(), tuples: r.to_vecs() }))
                .collect(),
        };
        serde_json::to_value(raw).expect("structure serializes")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_json_value()).expect("structure serializes")
    }

    /// Induced substructure on `subset`, renumbered in increasing order.
    pub fn induced(&self, subset: &BTreeSet<usize>) -> (Structure, Vec<usize>) {
        let order: Vec<usize> = subset.iter().copied().collect();
        let mut map = vec![None; self.domain];
        for (i, &a) in order.iter().enumerate() {
            map[a] = Some(i);
        }
        let mut s = Structure::new(order.len());
        for (name, r) in &self.relations {
            s.relations.insert(name.clone(), r.rename(&map));
        }
        (s, order)
    }

    pub fn preserved_by(&self, p: &[usize]) -> std::result::Result<(), (String, Tuple)> {
        for (name, r) in &self.relations {
            for t in r.iter() {
                let img: Tuple = t.iter().map(|&a| p[a]).collect();
                if !r.contains(&img) {
                    return Err((name.clone(), t.clone()));
                }
            }
        }
        Ok(())
    }
}

/// A structure with a single binary relation `E`, plus adjacency lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Digraph {
    n: usize,
    edges: Relation,
    out: Vec<Vec<usize>>,
    inn: Vec<Vec<usize>>,
}

impl Digraph {
    pub fn new(n: usize, edges: Relation) -> Result<Self> {
        require_binary(&edges, "edge relation")?;
        edges.check_domain(n)?;
        let mut out = vec![Vec::new(); n];
        let mut inn = vec![Vec::new(); n];
        for t in edges.iter() {
            out[t[0]].push(t[1]);
            inn[t[1]].push(t[0]);
        }
        Ok(Digraph { n, edges, out, inn })
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let rel = Relation::from_tuples(2, edges.iter().map(|&(u, v)| vec![u, v]))?;
        Digraph::new(n, rel)
    }

    pub fn symmetric(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut all: Vec<(usize, usize)> = edges.to_vec();
        all.extend(edges.iter().map(|&(u, v)| (v, u)));
        Digraph::from_edges(n, &all)
    }

    pub fn cycle(n: usize) -> Self {
        Digraph::symmetric(n, &(0..n).map(|i| (i, (i + 1) % n)).collect::<Vec<_>>()).unwrap()
    }

    pub fn directed_cycle(n: usize) -> Self {
        Digraph::from_edges(n, &(0..n).map(|i| (i, (i + 1) % n)).collect::<Vec<_>>()).unwrap()
    }

    pub fn complete(n: usize) -> Self {
        let e: Vec<(usize, usize)> =
            (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).collect();
        Digraph::from_edges(n, &e).unwrap()
    }

    pub fn from_structure(s: &Structure) -> Result<Self> {
        if s.relations.len() != 1 || !s.relations.contains_key("E") {
            return Err(Error::pre("a digraph has exactly one relation named E"));
        }
        Digraph::new(s.domain, s.relation("E")?.clone())
    }

    pub fn to_structure(&self) -> Structure {
        Structure::new(self.n).with("E", self.edges.clone())
    }

    /// Parses the text format: `#` comments, a `digraph n` or `graph n` header, `u v` lines.
    pub fn parse(text: &str) -> Result<Self> {
        let mut header: Option<(bool, usize)> = None;
        let mut edges = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let body = line.split('#').next().unwrap_or("");
            let trimmed = body.trim();
            if trimmed.is_empty() {
                continue;
            }
            let col = body.find(trimmed).unwrap_or(0) + 1;
            let err = |msg: String| Error::Parse { line: lineno + 1, col, msg };
            let words: Vec<&str> = trimmed.split_whitespace().collect();
            match header {
                None => {
                    let sym = match words.first() {
                        Some(&"digraph") => false,
                        Some(&"graph") => true,
                        _ => return Err(err("expected `digraph <n>` or `graph <n>`".into())),
                    };
                    if words.len() != 2 {
                        return Err(err("header takes exactly one size".into()));
                    }
                    let n = words[1].parse::<usize>().map_err(|e| err(format!("bad size: {e}")))?;
                    if n == 0 {
                        return Err(err("domain must be nonempty".into()));
                    }
                    header = Some((sym, n));
                }
                Some((_, n)) => {
                    if words.len() != 2 {
                        return Err(err("edge lines have the form `u v`".into()));
                    }
                    let u = words[0].parse::<usize>().map_err(|e| err(format!("bad vertex: {e}")))?;
                    let v = words[1].parse::<usize>().map_err(|e| err(format!("bad vertex: {e}")))?;
                    if u >= n || v >= n {
                        return Err(err(format!("vertex out of range 0..{n}")));
                    }
                    edges.push((u, v));
                }
            }
        }
        let (sym, n) = header.ok_or(Error::Parse { line: 1, col: 1, msg: "missing header".into() })?;
        if sym {
            Digraph::symmetric(n, &edges)
        } else {
            Digraph::from_edges(n, &edges)
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("digraph {}\n", self.n);
        for t in self.edges.iter() {
            s.push_str(&format!("{} {}\n", t[0], t[1]));
        }
        s
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &Relation {
        &self.edges
    }

    pub fn out(&self, v: usize) -> &[usize] {
        &self.out[v]
    }

    pub fn inn(&self, v: usize) -> &[usize] {
        &self.inn[v]
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.edges.contains(&[u, v])
    }

    pub fn is_symmetric(&self) -> bool {
        self.edges.iter().all(|t| self.has_edge(t[1], t[0]))
    }

    pub fn loops(&self) -> Vec<usize> {
        (0..self.n).filter(|&v| self.has_edge(v, v)).collect()
    }

    pub fn is_smooth(&self) -> bool {
        is_subdirect(&self.edges, self.n)
    }

    /// Digraph whose edge relation is the k-th power.
    pub fn power(&self, k: usize) -> Digraph {
        Digraph::new(self.n, power(&self.edges, k, self.n).expect("binary")).expect("in domain")
    }

    /// Induced subdigraph on `subset`, renumbered in increasing order.
    pub fn induced(&self, subset: &BTreeSet<usize>) -> (Digraph, Vec<usize>) {
        let (s, order) = self.to_structure().induced(subset);
        (Digraph::from_structure(&s).expect("digraph"), order)
    }

    /// Out-neighbourhood B⁺ of a set.
    pub fn plus(&self, b: &BTreeSet<usize>) -> BTreeSet<usize> {
        b.iter().flat_map(|&v| self.out[v].iter().copied()).collect()
    }

    /// In-neighbourhood B⁻ of a set.
    pub fn minus(&self, b: &BTreeSet<usize>) -> BTreeSet<usize> {
        b.iter().flat_map(|&v| self.inn[v].iter().copied()).collect()
    }
}

pub fn perm_identity(n: usize) -> Perm {
    (0..n).collect()
}

/// (a ∘ b)(x) = a(b(x)).
pub fn perm_compose(a: &[usize], b: &[usize]) -> Perm {
    b.iter().map(|&x| a[x]).collect()
}

pub fn perm_inverse(p: &[usize]) -> Perm {
    let mut inv = vec![0; p.len()];
    for (i, &x) in p.iter().enumerate() {
        inv[x] = i;
    }
    inv
}

/// p^e for any integer exponent.
pub fn perm_pow(p: &[usize], e: i64) -> Perm {
    let base = if e < 0 { perm_inverse(p) } else { p.to_vec() };
    let mut acc = perm_identity(p.len());
    for _ in 0..e.unsigned_abs() {
        acc = perm_compose(&base, &acc);
    }
    acc
}

pub fn is_perm(p: &[usize], n: usize) -> bool {
    if p.len() != n {
        return false;
    }
    let mut seen = vec![false; n];
    for &x in p {
        if x >= n || seen[x] {
            return false;
        }
        seen[x] = true;
    }
    true
}

/// A permutation group given by generators, closed naively.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermGroup {
    n: usize,
    generators: Vec<Perm>,
    elements: Vec<Perm>,
}

impl PermGroup {
    pub fn trivial(n: usize) -> Self {
        PermGroup { n, generators: Vec::new(), elements: vec![perm_identity(n)] }
    }

    pub fn generate(n: usize, generators: Vec<Perm>) -> Result<Self> {
        PermGroup::generate_capped(n, generators, DEFAULT_GROUP_CAP)
    }

    pub fn generate_capped(n: usize, generators: Vec<Perm>, cap: usize) -> Result<Self> {
        for g in &generators {
            if !is_perm(g, n) {
                return Err(Error::pre(format!("{g:?} is not a permutation of 0..{n}")));
            }
        }
        let id = perm_identity(n);
        let mut seen: BTreeSet<Perm> = BTreeSet::from([id.clone()]);
        let mut queue = VecDeque::from([id]);
        while let Some(p) = queue.pop_front() {
            for g in &generators {
                let q = perm_compose(g, &p);
                if seen.insert(q.clone()) {
                    if seen.len() > cap {
                        return Err(Error::budget(format!("group exceeds {cap} elements")));
                    }
                    queue.push_back(q);
                }
            }
        }
        let generators: Vec<Perm> = generators.into_iter().filter(|g| *g != perm_identity(n)).collect();
        Ok(PermGroup { n, generators, elements: seen.into_iter().collect() })
    }

    /// Parses lines `perm <n>: i0 … i(n-1)`; `#` starts a comment.
    pub fn parse(text: &str, n: usize) -> Result<Self> {
        let mut gens = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let body = line.split('#').next().unwrap_or("");
            let trimmed = body.trim();
            if trimmed.is_empty() {
                continue;
            }
            let col = body.find(trimmed).unwrap_or(0) + 1;
            let err = |msg: String| Error::Parse { line: lineno + 1, col, msg };
            let rest = trimmed.strip_prefix("perm").ok_or_else(|| err("expected `perm <n>: ...`".into()))?;
            let (size, images) = rest.split_once(':').ok_or_else(|| err("missing `:`".into()))?;
            let size = size.trim().parse::<usize>().map_err(|e| err(format!("bad size: {e}")))?;
            if size != n {
                return Err(err(format!("permutation on {size} points, structure has {n}")));
            }
            let p = images
                .split_whitespace()
                .map(|w| w.parse::<usize>().map_err(|e| err(format!("bad image: {e}"))))
                .collect::<Result<Perm>>()?;
            if !is_perm(&p, n) {
                return Err(err(format!("{p:?} is not a permutation of 0..{n}")));
            }
            gens.push(p);
        }
        PermGroup::generate(n, gens)
    }

    pub fn to_text(&self) -> String {
        self.generators
            .iter()
            .map(|g| {
                let imgs: Vec<String> = g.iter().map(|x| x.to_string()).collect();
                format!("perm {}: {}\n", self.n, imgs.join(" "))
            })
            .collect()
    }

    pub fn degree(&self) -> usize {
        self.n
    }

    pub fn generators(&self) -> &[Perm] {
        &self.generators
    }

    pub fn elements(&self) -> &[Perm] {
        &self.elements
    }

    pub fn order(&self) -> usize {
        self.elements.len()
    }

    pub fn contains(&self, p: &[usize]) -> bool {
        self.elements.binary_search_by(|e| e.as_slice().cmp(p)).is_ok()
    }

    pub fn is_trivial(&self) -> bool {
        self.elements.len() == 1
    }

    /// Orbit of a tuple under the coordinatewise action.
    pub fn orbit_of(&self, t: &[usize]) -> BTreeSet<Tuple> {
        self.elements.iter().map(|g| t.iter().map(|&a| g[a]).collect()).collect()
    }

    /// The k-orbits, ordered by their least tuple; they partition all k-tuples.
    pub fn n_orbits(&self, k: usize) -> Vec<Relation> {
        let mut seen: BTreeSet<Tuple> = BTreeSet::new();
        let mut orbits = Vec::new();
        for t in all_tuples(self.n, k) {
            if seen.contains(&t) {
                continue;
            }
            let orb = self.orbit_of(&t);
            seen.extend(orb.iter().cloned());
            orbits.push(Relation::collect(k, orb));
        }
        orbits
    }

    /// Orbit index of each element.
    pub fn orbit_map(&self) -> (Vec<usize>, usize) {
        let mut map = vec![usize::MAX; self.n];
        let mut count = 0;
        for a in 0..self.n {
            if map[a] != usize::MAX {
                continue;
            }
            for g in &self.elements {
                map[g[a]] = count;
            }
            count += 1;
        }
        (map, count)
    }

    pub fn is_invariant(&self, r: &Relation) -> bool {
        self.generators.iter().all(|g| r.image(g) == *r)
    }

    /// Checks that every generator preserves every relation of `s`.
    pub fn check_automorphisms(&self, s: &Structure) -> Result<()> {
        if s.domain != self.n {
            return Err(Error::pre(format!("group acts on {} points, structure has {}", self.n, s.domain)));
        }
        for g in &self.generators {
            if let Err((name, t)) = s.preserved_by(g) {
                let img: Tuple = t.iter().map(|&a| g[a]).collect();
                return Err(Error::pre(format!(
                    "generator {g:?} maps {name}{t:?} to {img:?}, which is not in {name}"
                )));
            }
        }
        Ok(())
    }

    /// Setwise stabilizer action restricted to an invariant subset.
    pub fn restrict(&self, order: &[usize]) -> Result<PermGroup> {
        let mut map = vec![usize::MAX; self.n];
        for (i, &a) in order.iter().enumerate() {
            map[a] = i;
        }
        let mut gens = Vec::new();
        for g in &self.generators {
            let img: Option<Perm> =
                order.iter().map(|&a| Some(map[g[a]]).filter(|&x| x != usize::MAX)).collect();
            match img {
                Some(p) => gens.push(p),
                None => return Err(Error::pre("subset is not invariant under the group")),
            }
        }
        PermGroup::generate(order.len(), gens)
    }
}

/// A ranked family of permutations indexed by ℤ.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Family {
    /// The family (g)ᵢ.
    Constant(Perm),
    /// The family (gⁱ)ᵢ.
    Geometric(Perm),
}

impl Family {
    pub fn at(&self, rank: i64) -> Perm {
        match self {
            Family::Constant(g) => g.clone(),
            Family::Geometric(g) => perm_pow(g, rank),
        }
    }

    pub fn base(&self) -> &Perm {
        match self {
            Family::Constant(g) | Family::Geometric(g) => g,
        }
    }
}

/// Ranked automorphism families, materialized on the window [−W, W].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedGroup {
    pub n: usize,
    pub families: Vec<Family>,
    pub window: i64,
}

impl RankedGroup {
    pub fn trivial(n: usize) -> Self {
        RankedGroup { n, families: Vec::new(), window: 0 }
    }

    pub fn constant(g: &PermGroup, window: i64) -> Self {
        RankedGroup {
            n: g.degree(),
            families: g.generators().iter().cloned().map(Family::Constant).collect(),
            window,
        }
    }

    pub fn projection(&self) -> Result<PermGroup> {
        PermGroup::generate(self.n, self.families.iter().map(|f| f.at(0)).collect())
    }

    /// Checks each family member in the window maps →₀₁ into itself.
    pub fn check_ranked_automorphisms(&self, d: &Digraph) -> Result<()> {
        for f in &self.families {
            for i in -self.window..=self.window {
                let (a, b) = (f.at(i), f.at(i + 1));
                for t in d.edges().iter() {
                    if !d.has_edge(a[t[0]], b[t[1]]) {
                        return Err(Error::pre(format!(
                            "ranked family fails on edge {t:?} at rank {i}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Whether a ranked relation is invariant under every family member in the window.
    pub fn preserves(&self, r: &Relation, ranking: &[i64]) -> bool {
        self.families.iter().all(|f| {
            (-self.window..=self.window).all(|s| {
                let perms: Vec<Perm> = ranking.iter().map(|&rk| f.at(rk + s)).collect();
                r.iter().all(|t| {
                    let img: Tuple = t.iter().zip(&perms).map(|(&a, p)| p[a]).collect();
                    r.contains(&img)
                })
            })
        })
    }
}

/// The 0-ranked orbit O of (0,1,…,n−1) under a group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrbitRelationO {
    pub group: PermGroup,
}

impl OrbitRelationO {
    pub fn new(group: PermGroup) -> Self {
        OrbitRelationO { group }
    }

    pub fn arity(&self) -> usize {
        self.group.degree()
    }

    pub fn contains(&self, t: &[usize]) -> bool {
        self.group.contains(t)
    }

    pub fn is_virtual(&self) -> bool {
        self.arity() > O_VIRTUAL_ARITY
    }

    /// Explicit tuple set; `None` when virtual.
    pub fn materialize(&self) -> Option<Relation> {
        if self.is_virtual() {
            None
        } else {
            Some(Relation::collect(self.arity(), self.group.elements().iter().cloned()))
        }
    }

    /// Tuples of O; each is a group element read as an image list.
    pub fn members(&self) -> &[Perm] {
        self.group.elements()
    }
}

/// Quotient by the 1-orbits of a group of automorphisms, with the element→orbit map.
pub fn quotient(s: &Structure, g: &PermGroup) -> Result<(Structure, Vec<usize>)> {
    g.check_automorphisms(s)?;
    let (map, count) = g.orbit_map();
    let mut q = Structure::new(count);
    for (name, r) in &s.relations {
        q.relations.insert(name.clone(), Relation::collect(r.arity(), r.iter().map(|t| t.iter().map(|&a| map[a]).collect())));
    }
    Ok((q, map))
}

/// Quotient of a digraph by a group of automorphisms.
pub fn quotient_digraph(d: &Digraph, g: &PermGroup) -> Result<(Digraph, Vec<usize>)> {
    let (q, map) = quotient(&d.to_structure(), g)?;
    Ok((Digraph::from_structure(&q)?, map))
}

/// Backtracking homomorphism search from `a` to `b` with forward checking.
/// Stops after `limit` solutions; `budget` bounds search nodes.
pub fn homomorphisms(
    a: &Structure,
    b: &Structure,
    limit: usize,
    budget: u64,
    injective: bool,
) -> Result<Vec<Vec<usize>>> {
    let mut constraints: Vec<(Vec<usize>, &Relation)> = Vec::new();
    for (name, r) in &a.relations {
        let target = b.relation(name)?;
        if target.arity() != r.arity() {
            return Err(Error::pre(format!("relation {name} has different arities")));
        }
        for t in r.iter() {
            constraints.push((t.clone(), target));
        }
    }
    let mut watch: Vec<Vec<usize>> = vec![Vec::new(); a.domain];
    for (ci, (t, _)) in constraints.iter().enumerate() {
        for &x in t {
            if !watch[x].contains(&ci) {
                watch[x].push(ci);
            }
        }
    }
    struct Search<'s> {
        constraints: &'s [(Vec<usize>, &'s Relation)],
        watch: &'s [Vec<usize>],
        assign: Vec<Option<usize>>,
        used: Vec<bool>,
        injective: bool,
        nb: usize,
        out: Vec<Vec<usize>>,
        limit: usize,
        nodes: u64,
        budget: u64,
    }
    impl Search<'_> {
        fn consistent(&self, x: usize) -> bool {
            self.watch[x].iter().all(|&ci| {
                let (t, rel) = &self.constraints[ci];
                let partial: Vec<Option<usize>> = t.iter().map(|&v| self.assign[v]).collect();
                if partial.iter().all(|p| p.is_some()) {
                    let full: Tuple = partial.into_iter().map(|p| p.unwrap()).collect();
                    rel.contains(&full)
                } else {
                    rel.iter().any(|u| partial.iter().zip(u).all(|(p, &v)| p.is_none_or(|p| p == v)))
                }
            })
        }
        fn go(&mut self, x: usize) -> Result<()> {
            if self.out.len() >= self.limit {
                return Ok(());
            }
            if x == self.assign.len() {
                self.out.push(self.assign.iter().map(|v| v.unwrap()).collect());
                return Ok(());
            }
            for v in 0..self.nb {
                if self.injective && self.used[v] {
                    continue;
                }
                self.nodes += 1;
                if self.nodes > self.budget {
                    return Err(Error::budget(format!("homomorphism search exceeded {} nodes", self.budget)));
                }
                self.assign[x] = Some(v);
                if self.consistent(x) {
                    self.used[v] = true;
                    self.go(x + 1)?;
                    self.used[v] = false;
                }
                self.assign[x] = None;
                if self.out.len() >= self.limit {
                    break;
                }
            }
            Ok(())
        }
    }
    let mut s = Search {
        constraints: &constraints,
        watch: &watch,
        assign: vec![None; a.domain],
        used: vec![false; b.domain],
        injective,
        nb: b.domain,
        out: Vec::new(),
        limit,
        nodes: 0,
        budget,
    };
    s.go(0)?;
    Ok(s.out)
}

pub const DEFAULT_SEARCH_BUDGET: u64 = 10_000_000;

/// All endomorphisms, in lexicographic order.
pub fn endomorphisms(s: &Structure, budget: u64) -> Result<Vec<Vec<usize>>> {
    homomorphisms(s, s, usize::MAX, budget, false)
}

/// All automorphisms, in lexicographic order.
pub fn automorphisms(s: &Structure, budget: u64) -> Result<Vec<Vec<usize>>> {
    homomorphisms(s, s, usize::MAX, budget, true)
        .map(|v| v.into_iter().filter(|p| s.preserved_by(&perm_inverse(p)).is_ok()).collect())
}

/// A non-surjective endomorphism, if any.
pub fn non_surjective_endomorphism(s: &Structure, budget: u64) -> Result<Option<Vec<usize>>> {
    for e in endomorphisms(s, budget)? {
        let img: BTreeSet<usize> = e.iter().copied().collect();
        if img.len() < s.domain {
            return Ok(Some(e));
        }
    }
    Ok(None)
}

/// True iff every endomorphism is an automorphism.
pub fn is_core(s: &Structure, budget: u64) -> Result<bool> {
    // Finite: an endomorphism is an automorphism iff it is a bijection.
    Ok(non_surjective_endomorphism(s, budget)?.is_none())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel2(pairs: &[(usize, usize)]) -> Relation {
        Relation::collect(2, pairs.iter().map(|&(a, b)| vec![a, b]))
    }

    #[test]
    fn compose_examples() {
        let r = rel2(&[(0, 1), (1, 2)]);
        let s = rel2(&[(1, 5)]);
        assert_eq!(compose(&r, &s).unwrap(), rel2(&[(0, 5)]));
        let c3 = Digraph::directed_cycle(3);
        assert_eq!(power(c3.edges(), 3, 3).unwrap(), Relation::diagonal(3));
        assert_eq!(shift(&Relation::unary([2]), c3.edges()).unwrap(), Relation::unary([0]));
        assert!(compose(&Relation::unary([0]), &s).is_err());
    }

    #[test]
    fn subdirect_examples() {
        assert!(is_subdirect(Digraph::directed_cycle(3).edges(), 3));
        assert!(!is_subdirect(&rel2(&[(0, 1)]), 2));
        assert!(is_subdirect(Digraph::cycle(6).edges(), 6));
    }

    #[test]
    fn or_examples() {
        let r = or_relation(&Relation::unary([0]), &Relation::unary([1]), 2);
        assert_eq!(r, rel2(&[(0, 0), (0, 1), (1, 1)]));
        let s = rel2(&[(0, 1)]);
        let r = or_relation(&Relation::empty(1), &s, 2);
        assert_eq!(r, Relation::collect(3, vec![vec![0, 0, 1], vec![1, 0, 1]]));
        let eq = Relation::diagonal(2);
        // Frozen from enumerating all 16 quadruples: fails iff a≠b and c≠d.
        assert_eq!(or_relation(&eq, &eq, 2).len(), 12);
    }

    #[test]
    fn group_orbits() {
        let g = PermGroup::generate(3, vec![vec![1, 2, 0]]).unwrap();
        assert_eq!(g.order(), 3);
        assert_eq!(g.n_orbits(1), vec![Relation::unary([0, 1, 2])]);
        let two = g.n_orbits(2);
        assert_eq!(two.len(), 3);
        assert!(two.contains(&Relation::diagonal(3)));
        assert!(two.contains(&rel2(&[(0, 1), (1, 2), (2, 0)])));
        assert!(two.contains(&rel2(&[(0, 2), (1, 0), (2, 1)])));
        let t = PermGroup::generate(4, vec![]).unwrap();
        assert!(t.n_orbits(2).iter().all(|o| o.len() == 1));
        assert_eq!(t.n_orbits(2).len(), 16);
    }

    #[test]
    fn group_cap() {
        let gens = vec![vec![1, 0, 2, 3, 4, 5, 6, 7], vec![1, 2, 3, 4, 5, 6, 7, 0]];
        assert!(matches!(PermGroup::generate_capped(8, gens, 1000), Err(Error::Budget(_))));
    }

    #[test]
    fn quotient_examples() {
        let c6 = Digraph::cycle(6);
        let anti = PermGroup::generate(6, vec![vec![3, 4, 5, 0, 1, 2]]).unwrap();
        let (q, map) = quotient_digraph(&c6, &anti).unwrap();
        assert_eq!(q, Digraph::complete(3));
        assert_eq!(map, vec![0, 1, 2, 0, 1, 2]);

        let two = Digraph::symmetric(6, &[(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (5, 3)]).unwrap();
        let swap = PermGroup::generate(6, vec![vec![3, 4, 5, 0, 1, 2]]).unwrap();
        assert_eq!(quotient_digraph(&two, &swap).unwrap().0, Digraph::complete(3));

        let bad = PermGroup::generate(6, vec![vec![1, 0, 2, 3, 4, 5]]).unwrap();
        let err = quotient_digraph(&c6, &bad).unwrap_err();
        assert!(err.to_string().contains("E["), "{err}");

        let (q, _) = quotient_digraph(&c6, &PermGroup::trivial(6)).unwrap();
        assert_eq!(q, c6);
    }

    #[test]
    fn core_examples() {
        let b = DEFAULT_SEARCH_BUDGET;
        assert!(is_core(&Digraph::complete(3).to_structure(), b).unwrap());
        assert!(!is_core(&Digraph::cycle(6).to_structure(), b).unwrap());
        let lp = Digraph::from_edges(1, &[(0, 0)]).unwrap();
        assert!(is_core(&lp.to_structure(), b).unwrap());
        assert_eq!(automorphisms(&Digraph::complete(3).to_structure(), b).unwrap().len(), 6);
    }

    #[test]
    fn parse_formats() {
        let d = Digraph::parse("# c3\ndigraph 3\n0 1\n1 2\n2 0\n").unwrap();
        assert_eq!(d, Digraph::directed_cycle(3));
        let g = Digraph::parse("graph 3\n0 1\n1 2\n2 0\n").unwrap();
        assert_eq!(g, Digraph::complete(3));
        match Digraph::parse("digraph 2\n0 5\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let grp = PermGroup::parse("perm 3: 1 2 0\n", 3).unwrap();
        assert_eq!(grp.order(), 3);
        assert!(PermGroup::parse("perm 3: 1 1 0\n", 3).is_err());
        let s = Structure::from_json(r#"{"domain":2,"relations":{"E":{"arity":2,"tuples":[[1,0],[0,1]]}}}"#).unwrap();
        assert_eq!(s.to_json(), r#"{"domain":2,"relations":{"E":{"arity":2,"tuples":[[0,1],[1,0]]}}}"#);
    }

    #[test]
    fn orbit_relation_membership() {
        let g = PermGroup::generate(4, vec![vec![1, 0, 2, 3]]).unwrap();
        let o = OrbitRelationO::new(g);
        assert!(o.contains(&[0, 1, 2, 3]));
        assert!(o.contains(&[1, 0, 2, 3]));
        assert!(!o.contains(&[0, 1, 3, 2]));
        assert_eq!(o.materialize().unwrap().len(), 2);
    }
}
