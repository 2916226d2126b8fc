//! The loop engine: rpp-constructions that turn a smooth linked digraph with
//! a group of automorphisms into a pp-definable subset, an OR relation or a
//! loop, recorded as replayable derivation traces.

mod collapse;
mod drivers;
mod first;
mod second;
mod third;

use std::collections::{BTreeMap, BTreeSet};

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::dianalysis::linkness;
use crate::error::{Error, Result};
use crate::pplogic::{evaluate, validate_ranking, Env, RPPFormula};
use crate::relcore::{Digraph, PermGroup, RankedGroup, Relation};

pub use collapse::{or_collapse, or_eq, polymorphisms, ArityReport, CollapseOutcome};
pub(crate) use drivers::Combined;
pub use drivers::{loop_driver, pseudoloop_driver, shifted_digraph, DriverOutcome, DriverResult, Round};
pub use first::{
    central_equivalence, is_p_central, is_pq_central, is_tsr, nabla_formula, p_center, refine_to_central_or_q,
    rosenberg, uprel, FirstStep, RosenbergEnd,
};
pub use second::{or_from_center, or_from_q, walking_subset, OrTT, SecondStep};
pub use third::or_upgrade;

/// Hex SHA-256 of a relation's canonical serialization.
pub fn relation_hash(r: &Relation) -> String {
    let mut h = Sha256::new();
    h.update(format!("{}:", r.arity()).as_bytes());
    for t in r.iter() {
        let s: Vec<String> = t.iter().map(|a| a.to_string()).collect();
        h.update(s.join(",").as_bytes());
        h.update(b";");
    }
    hex::encode(h.finalize())
}

/// One named definition of a derivation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub name: String,
    pub lemma: String,
    pub formula: RPPFormula,
    pub ranking: Vec<i64>,
    pub relation: Relation,
}

/// Definitions in order; each formula may use `E`, `orbitO`, parameters and
/// earlier steps.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DerivationTrace {
    pub steps: Vec<Step>,
}

impl DerivationTrace {
    pub fn get(&self, name: &str) -> Option<&Step> {
        self.steps.iter().find(|s| s.name == name)
    }

    pub fn relation(&self, name: &str) -> Result<&Relation> {
        self.get(name).map(|s| &s.relation).ok_or_else(|| Error::Unresolved(name.to_string()))
    }

    pub fn defs(&self) -> BTreeMap<String, RPPFormula> {
        self.steps.iter().map(|s| (s.name.clone(), s.formula.clone())).collect()
    }

    /// `E` and every step's relation, keyed by name.
    pub fn relations(&self, d: &Digraph) -> BTreeMap<String, Relation> {
        let mut rels: BTreeMap<String, Relation> = self.steps.iter().map(|s| (s.name.clone(), s.relation.clone())).collect();
        rels.insert("E".into(), d.edges().clone());
        rels
    }

    pub fn lemmas(&self) -> Vec<&str> {
        self.steps.iter().map(|s| s.lemma.as_str()).collect()
    }

    /// Steps reference relations by hash; relation contents are stored once in `store`.
    pub fn to_json(&self, store: &mut BTreeMap<String, Value>) -> Value {
        let steps: Vec<Value> = self
            .steps
            .iter()
            .map(|s| {
                let h = relation_hash(&s.relation);
                store.entry(h.clone()).or_insert_with(|| relation_json(&s.relation));
                json!({
                    "name": s.name,
                    "lemma": s.lemma,
                    "formula": s.formula.to_text(),
                    "ranking": s.ranking,
                    "relation": h,
                })
            })
            .collect();
        Value::Array(steps)
    }

    pub fn from_json(v: &Value, store: &BTreeMap<String, Value>) -> Result<Self> {
        let arr = v.as_array().ok_or_else(|| Error::pre("trace must be an array"))?;
        let mut steps = Vec::new();
        for s in arr {
            let field = |k: &str| s.get(k).ok_or_else(|| Error::pre(format!("trace step lacks `{k}`")));
            let name = field("name")?.as_str().unwrap_or_default().to_string();
            let lemma = field("lemma")?.as_str().unwrap_or_default().to_string();
            let formula = RPPFormula::parse(field("formula")?.as_str().unwrap_or_default())?;
            let ranking: Vec<i64> = serde_json::from_value(field("ranking")?.clone())
                .map_err(|e| Error::pre(format!("bad ranking: {e}")))?;
            let h = field("relation")?.as_str().unwrap_or_default();
            let rel = store.get(h).ok_or_else(|| Error::pre(format!("relation {h} missing from store")))?;
            let relation = relation_from_json(rel)?;
            if relation_hash(&relation) != h {
                return Err(Error::pre(format!("stored relation does not match hash {h}")));
            }
            steps.push(Step { name, lemma, formula, ranking, relation });
        }
        Ok(DerivationTrace { steps })
    }

    /// Re-evaluates every step over `d` and `g` and compares with the record.
    pub fn replay(&self, d: &Digraph, g: &PermGroup, budget: u64) -> Result<()> {
        let mut rels: BTreeMap<String, Relation> = BTreeMap::new();
        let mut ranks: BTreeMap<String, Vec<i64>> = BTreeMap::new();
        rels.insert("E".into(), d.edges().clone());
        ranks.insert("E".into(), vec![0, 1]);
        for s in &self.steps {
            validate_ranking(&s.formula, &ranks)
                .map_err(|v| Error::pre(format!("step {}: rank violation at {}: {}", s.name, v.atom, v.reason)))?;
            if s.formula.free_ranking() != s.ranking {
                return Err(Error::pre(format!("step {}: declared ranking differs from formula", s.name)));
            }
            let env = Env::bare(d.n()).with_rels(&rels).with_group(g).with_budget(budget);
            let got = evaluate(&s.formula, &env)?;
            if got != s.relation {
                return Err(Error::pre(format!("step {} does not replay to its recorded relation", s.name)));
            }
            rels.insert(s.name.clone(), got);
            ranks.insert(s.name.clone(), s.ranking.clone());
        }
        Ok(())
    }
}

pub fn relation_json(r: &Relation) -> Value {
    json!({ "arity": r.arity(), "tuples": r.to_vecs() })
}

pub fn relation_from_json(v: &Value) -> Result<Relation> {
    let arity = v.get("arity").and_then(Value::as_u64).ok_or_else(|| Error::pre("relation lacks arity"))? as usize;
    let tuples: Vec<Vec<usize>> = serde_json::from_value(v.get("tuples").cloned().unwrap_or(Value::Null))
        .map_err(|e| Error::pre(format!("bad tuples: {e}")))?;
    Relation::from_tuples(arity, tuples)
}

/// OR(α,α) restricted to a carrier: 4-tuples over the carrier with α on the
/// first pair or on the second.
pub fn or_relation_on(alpha: &Relation, carrier: &BTreeSet<usize>) -> Relation {
    let c: Vec<usize> = carrier.iter().copied().collect();
    let mut out = Relation::empty(4);
    for &a in &c {
        for &b in &c {
            for &x in &c {
                for &y in &c {
                    if alpha.contains(&[a, b]) || alpha.contains(&[x, y]) {
                        out.insert(vec![a, b, x, y]);
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrWitness {
    /// OR(α,α) on the carrier, a 4-ary relation.
    pub relation: Relation,
    pub alpha: Relation,
    pub carrier: BTreeSet<usize>,
    /// Name of the defining step.
    pub step: String,
}

impl OrWitness {
    /// α is a proper equivalence on the carrier and the relation is OR(α,α) there.
    pub fn validate(&self) -> Result<()> {
        let c = &self.carrier;
        let eq_ok = crate::relcore::is_equivalence_on_carrier(&self.alpha)
            && crate::relcore::carrier(&self.alpha) == *c;
        if !eq_ok {
            return Err(Error::Internal("α is not an equivalence on the carrier".into()));
        }
        if self.alpha.len() == c.len() * c.len() {
            return Err(Error::Internal("α is not proper".into()));
        }
        if self.relation != or_relation_on(&self.alpha, c) {
            return Err(Error::Internal("witness is not OR(α,α) on the carrier".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MainFiniteOutcome {
    Subset { set: BTreeSet<usize>, step: String },
    OrWitness(OrWitness),
}

/// Working state of one run: the digraph, the group behind `O`, and the trace.
pub(crate) struct Ctx<'a> {
    pub d: &'a Digraph,
    pub n: usize,
    pub k: usize,
    pub h: &'a RankedGroup,
    pub g: PermGroup,
    pub trace: DerivationTrace,
    rels: BTreeMap<String, Relation>,
    ranks: BTreeMap<String, Vec<i64>>,
    pub budget: u64,
}

impl<'a> Ctx<'a> {
    pub fn new(d: &'a Digraph, h: &'a RankedGroup, k: usize, budget: u64) -> Result<Self> {
        let g = h.projection()?;
        let mut rels = BTreeMap::new();
        rels.insert("E".to_string(), d.edges().clone());
        let mut ranks = BTreeMap::new();
        ranks.insert("E".to_string(), vec![0, 1]);
        Ok(Ctx { d, n: d.n(), k, h, g, trace: DerivationTrace::default(), rels, ranks, budget })
    }

    /// Registers an input relation under a name.
    pub fn add_base(&mut self, name: &str, r: Relation, ranking: Vec<i64>) {
        self.rels.insert(name.to_string(), r);
        self.ranks.insert(name.to_string(), ranking);
    }

    pub fn rel(&self, name: &str) -> &Relation {
        &self.rels[name]
    }

    pub fn ranking(&self, name: &str) -> &[i64] {
        &self.ranks[name]
    }

    pub fn eval(&self, f: &RPPFormula) -> Result<Relation> {
        let env = Env::bare(self.n).with_rels(&self.rels).with_group(&self.g).with_budget(self.budget);
        evaluate(f, &env)
    }

    /// Records a definition: normalizes ranks, checks them, evaluates.
    pub fn define(&mut self, tag: &str, lemma: &str, mut f: RPPFormula) -> Result<String> {
        f.normalize_ranks();
        f.dedup();
        validate_ranking(&f, &self.ranks)
            .map_err(|v| Error::Internal(format!("{lemma}: rank violation at {}: {} in {}", v.atom, v.reason, f.to_text())))?;
        let relation = self.eval(&f)?;
        let ranking = f.free_ranking();
        if !self.h.preserves(&relation, &ranking) {
            return Err(Error::Internal(format!("{lemma}: defined relation is not invariant")));
        }
        let name = format!("{tag}{}", self.trace.steps.len() + 1);
        self.rels.insert(name.clone(), relation.clone());
        self.ranks.insert(name.clone(), ranking.clone());
        self.trace.steps.push(Step { name: name.clone(), lemma: lemma.to_string(), formula: f, ranking, relation });
        Ok(name)
    }

    pub fn all(&self) -> BTreeSet<usize> {
        (0..self.n).collect()
    }
}

/// The finite loop construction. Requires a smooth k-linked digraph whose
/// k-th power is not full, and ranked automorphism families `h`.
pub fn main_finite(d: &Digraph, h: &RankedGroup, k: usize, budget: u64) -> Result<(MainFiniteOutcome, DerivationTrace)> {
    let n = d.n();
    if n == 0 {
        return Err(Error::pre("empty digraph"));
    }
    if n > crate::pplogic::MAX_EVAL_DOMAIN {
        return Err(Error::pre(format!("domain larger than {}", crate::pplogic::MAX_EVAL_DOMAIN)));
    }
    if !d.is_smooth() {
        return Err(Error::pre("digraph is not smooth"));
    }
    let (_, linked) = linkness(d, k)?;
    if !linked {
        return Err(Error::pre(format!("digraph is not {k}-linked")));
    }
    if d.power(k).edges().len() == n * n {
        return Err(Error::pre(format!("→^{k} is already the full relation")));
    }
    h.check_ranked_automorphisms(d)?;
    let mut ctx = Ctx::new(d, h, k, budget)?;
    let out = match first::run(&mut ctx)? {
        FirstStep::Central { step } => match second::from_center(&mut ctx, &step)? {
            SecondStep::Subset { set, step } => MainFiniteOutcome::Subset { set, step },
            SecondStep::Or(or) => third::run(&mut ctx, &or)?,
        },
        FirstStep::QCentral { step, alpha } => {
            let or = second::from_q(&mut ctx, &step, &alpha)?;
            third::run(&mut ctx, &or)?
        }
    };
    if let MainFiniteOutcome::OrWitness(w) = &out {
        w.validate()?;
    }
    Ok((out, ctx.trace))
}

/// All k-subsets of 0..n in lexicographic order.
pub(crate) fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut cur, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k3_gives_or_witness() {
        let d = Digraph::complete(3);
        let (out, trace) = main_finite(&d, &RankedGroup::trivial(3), 1, 10_000_000).unwrap();
        match out {
            MainFiniteOutcome::OrWitness(w) => {
                w.validate().unwrap();
                assert_eq!(w.carrier.len(), 2);
            }
            other => panic!("unexpected {other:?}"),
        }
        trace.replay(&d, &PermGroup::trivial(3), 10_000_000).unwrap();
    }

    #[test]
    fn k3_full_symmetric_group() {
        let d = Digraph::complete(3);
        let g = PermGroup::generate(3, vec![vec![1, 2, 0], vec![1, 0, 2]]).unwrap();
        let h = RankedGroup::constant(&g, 1);
        let (out, trace) = main_finite(&d, &h, 1, 10_000_000).unwrap();
        assert!(matches!(out, MainFiniteOutcome::OrWitness(_)));
        trace.replay(&d, &g, 10_000_000).unwrap();
    }

    #[test]
    fn preconditions() {
        let c4 = Digraph::cycle(4);
        assert!(matches!(main_finite(&c4, &RankedGroup::trivial(4), 1, 1_000_000), Err(Error::Precondition(_))));
        let mut e = Digraph::complete(3).edges().clone();
        for a in 0..3 {
            e.insert(vec![a, a]);
        }
        let full = Digraph::new(3, e).unwrap();
        assert!(matches!(main_finite(&full, &RankedGroup::trivial(3), 1, 1_000_000), Err(Error::Precondition(_))));
    }

    #[test]
    fn hash_is_stable() {
        let r = Relation::diagonal(2);
        assert_eq!(relation_hash(&r), relation_hash(&Relation::diagonal(2)));
        assert_ne!(relation_hash(&r), relation_hash(&Relation::full(2, 2)));
    }
}
