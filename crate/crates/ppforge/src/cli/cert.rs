//! Certificate files: construction and independent replay.

use std::collections::{BTreeMap, BTreeSet};

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::loopengine::{
    or_collapse, relation_hash, relation_json, relation_from_json, shifted_digraph, CollapseOutcome, DerivationTrace,
    DriverOutcome, DriverResult, OrWitness,
};
use crate::pplogic::{evaluate, Env, RPPFormula};
use crate::relcore::{quotient_digraph, Digraph, PermGroup, Relation};
use crate::triangle::{validate_triangle_config, Level, StrongConfiguration, TreeExpression, TriangleConfiguration};

pub const FORMAT: &str = "ppforge-cert";
pub const FORMAT_VERSION: &str = "1.0";

pub type Store = BTreeMap<String, Value>;

pub fn input_digest(d: &Digraph, g: &PermGroup) -> String {
    let mut h = Sha256::new();
    h.update(d.to_text().as_bytes());
    h.update(b"--\n");
    h.update(g.to_text().as_bytes());
    hex::encode(h.finalize())
}

fn set_json(s: &BTreeSet<usize>) -> Value {
    json!(s.iter().collect::<Vec<_>>())
}

fn get<'a>(v: &'a Value, key: &str) -> Result<&'a Value> {
    v.get(key).ok_or_else(|| Error::pre(format!("certificate lacks `{key}`")))
}

fn get_str<'a>(v: &'a Value, key: &str) -> Result<&'a str> {
    get(v, key)?.as_str().ok_or_else(|| Error::pre(format!("`{key}` must be a string")))
}

fn get_usize(v: &Value, key: &str) -> Result<usize> {
    get(v, key)?.as_u64().map(|x| x as usize).ok_or_else(|| Error::pre(format!("`{key}` must be a number")))
}

fn parse_as<T: serde::de::DeserializeOwned>(v: &Value, key: &str) -> Result<T> {
    serde_json::from_value(get(v, key)?.clone()).map_err(|e| Error::pre(format!("bad `{key}`: {e}")))
}

fn store_rel(store: &mut Store, r: &Relation) -> String {
    let h = relation_hash(r);
    store.entry(h.clone()).or_insert_with(|| relation_json(r));
    h
}

fn load_rel(store: &Store, h: &str) -> Result<Relation> {
    let v = store.get(h).ok_or_else(|| Error::pre(format!("relation {h} missing from store")))?;
    let r = relation_from_json(v)?;
    if relation_hash(&r) != h {
        return Err(Error::pre(format!("stored relation does not match hash {h}")));
    }
    Ok(r)
}

/// Common fields of every certificate.
pub fn header(kind: &str, d: &Digraph, g: &PermGroup) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("format".into(), json!(FORMAT));
    m.insert("format_version".into(), json!(FORMAT_VERSION));
    m.insert("tool_version".into(), json!(env!("CARGO_PKG_VERSION")));
    m.insert("kind".into(), json!(kind));
    m.insert("input_digest".into(), json!(input_digest(d, g)));
    m.insert("digraph".into(), json!(d.to_text()));
    m.insert("group".into(), json!(g.to_text()));
    m.insert("relations".into(), json!({}));
    m
}

fn witness_json(w: &OrWitness, store: &mut Store) -> Value {
    json!({
        "relation": store_rel(store, &w.relation),
        "alpha": store_rel(store, &w.alpha),
        "carrier": set_json(&w.carrier),
        "step": w.step,
    })
}

fn witness_from_json(v: &Value, store: &Store) -> Result<OrWitness> {
    Ok(OrWitness {
        relation: load_rel(store, get_str(v, "relation")?)?,
        alpha: load_rel(store, get_str(v, "alpha")?)?,
        carrier: parse_as(v, "carrier")?,
        step: get_str(v, "step")?.to_string(),
    })
}

pub fn outcome_json(o: &DriverOutcome, store: &mut Store) -> Value {
    match o {
        DriverOutcome::Loop { b, step } => json!({ "type": "LOOP", "set": set_json(b), "step": step }),
        DriverOutcome::QuotientLoop { orbit, elements } => {
            json!({ "type": "QUOTIENT_LOOP", "orbit": orbit, "elements": elements })
        }
        DriverOutcome::OrWitness { witness, pp_formula } => json!({
            "type": "OR_WITNESS",
            "witness": witness_json(witness, store),
            "pp_formula": pp_formula.as_ref().map(RPPFormula::to_text),
        }),
        DriverOutcome::FallbackFailed { diagnostics } => json!({ "type": "FALLBACK_FAILED", "diagnostics": diagnostics }),
    }
}

pub fn outcome_from_json(v: &Value, store: &Store) -> Result<DriverOutcome> {
    Ok(match get_str(v, "type")? {
        "LOOP" => DriverOutcome::Loop {
            b: parse_as(v, "set")?,
            step: get(v, "step")?.as_str().map(String::from),
        },
        "QUOTIENT_LOOP" => DriverOutcome::QuotientLoop { orbit: get_usize(v, "orbit")?, elements: parse_as(v, "elements")? },
        "OR_WITNESS" => DriverOutcome::OrWitness {
            witness: witness_from_json(get(v, "witness")?, store)?,
            pp_formula: match get(v, "pp_formula")? {
                Value::Null => None,
                f => Some(RPPFormula::parse(f.as_str().ok_or_else(|| Error::pre("pp_formula must be text"))?)?),
            },
        },
        "FALLBACK_FAILED" => DriverOutcome::FallbackFailed { diagnostics: get_str(v, "diagnostics")?.to_string() },
        other => return Err(Error::pre(format!("unknown outcome type `{other}`"))),
    })
}

pub fn outcome_label(o: &DriverOutcome) -> &'static str {
    match o {
        DriverOutcome::Loop { .. } => "LOOP",
        DriverOutcome::QuotientLoop { .. } => "QUOTIENT_LOOP",
        DriverOutcome::OrWitness { .. } => "OR_WITNESS",
        DriverOutcome::FallbackFailed { .. } => "FALLBACK_FAILED",
    }
}

/// Certificate of a loop or pseudoloop run.
pub fn driver_cert(kind: &str, d: &Digraph, g: &PermGroup, r: &DriverResult) -> Value {
    let mut m = header(kind, d, g);
    let mut store = Store::new();
    m.insert("outcome".into(), outcome_json(&r.outcome, &mut store));
    m.insert("trace".into(), r.trace.to_json(&mut store));
    m.insert("shift".into(), json!(r.shift));
    m.insert("walk".into(), json!(r.walk));
    m.insert(
        "rounds".into(),
        json!(r.rounds.iter().map(|x| json!({ "universe": x.universe, "k": x.k, "result": x.result })).collect::<Vec<_>>()),
    );
    m.insert("relations".into(), json!(store));
    Value::Object(m)
}

fn tree_json(t: &TreeExpression) -> Value {
    match t {
        TreeExpression::Full => json!("full"),
        TreeExpression::Singleton(u) => json!({ "single": u }),
        TreeExpression::Neighborhood(c) => json!({ "nbhd": tree_json(c) }),
        TreeExpression::Intersect(a, b) => json!({ "meet": [tree_json(a), tree_json(b)] }),
    }
}

fn tree_from_json(v: &Value) -> Result<TreeExpression> {
    if v.as_str() == Some("full") {
        return Ok(TreeExpression::Full);
    }
    if let Some(u) = v.get("single").and_then(Value::as_u64) {
        return Ok(TreeExpression::Singleton(u as usize));
    }
    if let Some(c) = v.get("nbhd") {
        return Ok(TreeExpression::Neighborhood(Box::new(tree_from_json(c)?)));
    }
    if let Some(Value::Array(ab)) = v.get("meet") {
        if ab.len() == 2 {
            return Ok(TreeExpression::Intersect(Box::new(tree_from_json(&ab[0])?), Box::new(tree_from_json(&ab[1])?)));
        }
    }
    Err(Error::pre(format!("bad tree expression {v}")))
}

pub fn config_json(tc: &TriangleConfiguration, store: &mut Store) -> Value {
    json!({
        "p": set_json(&tc.p),
        "parts": tc.parts.iter().map(set_json).collect::<Vec<_>>(),
        "k": tc.k,
        "relation": store_rel(store, &tc.relation),
        "levels": tc.levels.iter().map(|l| json!({ "universe": set_json(&l.universe), "power": l.power })).collect::<Vec<_>>(),
        "strong": {
            "u": tc.strong.u.iter().map(set_json).collect::<Vec<_>>(),
            "tree_expressions": tc.strong.tree_expressions.iter().map(tree_json).collect::<Vec<_>>(),
        },
        "p_step": tc.p_step,
        "part_steps": tc.part_steps,
        "relation_step": tc.relation_step,
    })
}

fn triple<T>(v: Vec<T>, what: &str) -> Result<[T; 3]> {
    v.try_into().map_err(|_| Error::pre(format!("`{what}` must have three entries")))
}

pub fn config_from_json(v: &Value, store: &Store) -> Result<TriangleConfiguration> {
    let strong = get(v, "strong")?;
    let trees: Vec<Value> = parse_as(strong, "tree_expressions")?;
    let trees = trees.iter().map(tree_from_json).collect::<Result<Vec<_>>>()?;
    let levels: Vec<Value> = parse_as(v, "levels")?;
    Ok(TriangleConfiguration {
        p: parse_as(v, "p")?,
        parts: triple(parse_as(v, "parts")?, "parts")?,
        k: get_usize(v, "k")?,
        relation: load_rel(store, get_str(v, "relation")?)?,
        levels: levels
            .iter()
            .map(|l| Ok(Level { universe: parse_as(l, "universe")?, power: get_usize(l, "power")? }))
            .collect::<Result<_>>()?,
        strong: StrongConfiguration { u: triple(parse_as(strong, "u")?, "u")?, tree_expressions: triple(trees, "tree_expressions")? },
        p_step: get_str(v, "p_step")?.to_string(),
        part_steps: triple(parse_as(v, "part_steps")?, "part_steps")?,
        relation_step: get_str(v, "relation_step")?.to_string(),
    })
}

pub fn triangle_cert(d: &Digraph, g: &PermGroup, tc: &TriangleConfiguration, trace: &DerivationTrace) -> Value {
    let mut m = header("triangle", d, g);
    let mut store = Store::new();
    m.insert("config".into(), config_json(tc, &mut store));
    m.insert("trace".into(), trace.to_json(&mut store));
    m.insert("relations".into(), json!(store));
    Value::Object(m)
}

pub fn collapse_json(c: &CollapseOutcome) -> Value {
    json!({
        "classes": c.classes.iter().map(set_json).collect::<Vec<_>>(),
        "report": c.report.iter().map(|r| json!({
            "arity": r.arity,
            "polymorphisms": r.polymorphisms,
            "essentially_unary": r.essentially_unary,
        })).collect::<Vec<_>>(),
        "all_essentially_unary": c.all_essentially_unary(),
        "factor_dimension": c.factor.dimension,
        "k3_dimension": c.k3.dimension,
        "k3_domain_formula": c.k3.domain_formula.to_text(),
        "k3_edge_formula": c.k3.preimage_formulas.get("E").map(RPPFormula::to_text),
    })
}

/// Checks a certificate and returns a report of the checks made.
pub fn replay(text: &str, budget: u64) -> Result<Value> {
    let v: Value = serde_json::from_str(text).map_err(|e| Error::Parse { line: e.line(), col: e.column(), msg: e.to_string() })?;
    if get_str(&v, "format")? != FORMAT {
        return Err(Error::pre("not a ppforge certificate"));
    }
    let version = get_str(&v, "format_version")?;
    let major = |s: &str| s.split('.').next().unwrap_or("").to_string();
    if major(version) != major(FORMAT_VERSION) {
        return Err(Error::pre(format!("certificate format {version} is incompatible with {FORMAT_VERSION}")));
    }
    let d = Digraph::parse(get_str(&v, "digraph")?)?;
    let g = PermGroup::parse(get_str(&v, "group")?, d.n())?;
    if get_str(&v, "input_digest")? != input_digest(&d, &g) {
        return Err(Error::pre("input digest does not match the recorded digraph and group"));
    }
    g.check_automorphisms(&d.to_structure())?;
    let store: Store = parse_as(&v, "relations")?;
    let kind = get_str(&v, "kind")?;
    let mut checks: Vec<String> = Vec::new();
    match kind {
        "loop" | "pseudoloop" => replay_driver(kind, &v, &d, &g, &store, budget, &mut checks)?,
        "triangle" => {
            let trace = DerivationTrace::from_json(get(&v, "trace")?, &store)?;
            trace.replay(&d, &g, budget)?;
            checks.push(format!("{} trace steps replayed", trace.steps.len()));
            let tc = config_from_json(get(&v, "config")?, &store)?;
            check_config(&d, &g, &tc, &trace, &mut checks)?;
        }
        "classify" => replay_classify(&v, &d, &g, &store, budget, &mut checks)?,
        other => return Err(Error::pre(format!("unknown certificate kind `{other}`"))),
    }
    Ok(json!({ "kind": kind, "status": "VALID", "checks": checks }))
}

fn context(stage: &str, e: Error) -> Error {
    match e {
        Error::Budget(m) => Error::Budget(format!("{stage}: {m}")),
        other => Error::pre(format!("{stage}: {other}")),
    }
}

fn check_config(
    d: &Digraph,
    g: &PermGroup,
    tc: &TriangleConfiguration,
    trace: &DerivationTrace,
    checks: &mut Vec<String>,
) -> Result<()> {
    let resolve = |name: &str| if name == "E" { Ok(d.edges()) } else { trace.relation(name) };
    if *resolve(&tc.p_step)? != Relation::unary(tc.p.iter().copied()) {
        return Err(Error::pre("P differs from its defining step"));
    }
    for i in 0..3 {
        if *resolve(&tc.part_steps[i])? != Relation::unary(tc.parts[i].iter().copied()) {
            return Err(Error::pre(format!("P{i} differs from its defining step")));
        }
    }
    if *resolve(&tc.relation_step)? != tc.relation {
        return Err(Error::pre("configuration relation differs from its defining step"));
    }
    validate_triangle_config(d, g, tc).map_err(|v| Error::pre(format!("triangle configuration invalid: {}", v.join("; "))))?;
    checks.push("triangle configuration satisfies (i)-(iv) and matches its definitions".into());
    Ok(())
}

fn check_witness(w: &OrWitness, trace: &DerivationTrace, checks: &mut Vec<String>) -> Result<()> {
    w.validate().map_err(|e| Error::pre(e.to_string()))?;
    if let Some(step) = trace.get(&w.step) {
        if step.relation != w.relation {
            return Err(Error::pre("witness differs from its defining step"));
        }
    }
    checks.push("witness is OR(α,α) for a proper equivalence α".into());
    Ok(())
}

/// Evaluates the witness formula over the input, with the replayed steps of
/// `trace` available as defined relations.
fn check_formula(
    f: &RPPFormula,
    d: &Digraph,
    g: &PermGroup,
    trace: &DerivationTrace,
    want: &Relation,
    budget: u64,
    checks: &mut Vec<String>,
) -> Result<()> {
    let rels = trace.relations(d);
    let env = Env::bare(d.n()).with_rels(&rels).with_group(g).with_budget(budget);
    if evaluate(f, &env)? != *want {
        return Err(Error::pre("pp-formula over the input does not define the witness"));
    }
    checks.push("pp-formula over the input defines the witness".into());
    Ok(())
}

fn replay_driver(
    kind: &str,
    v: &Value,
    d: &Digraph,
    g: &PermGroup,
    store: &Store,
    budget: u64,
    checks: &mut Vec<String>,
) -> Result<()> {
    let outcome = outcome_from_json(get(v, "outcome")?, store)?;
    let trace = DerivationTrace::from_json(get(v, "trace")?, store)?;
    let shift: Option<Vec<usize>> = parse_as(v, "shift")?;
    let trivial = PermGroup::trivial(d.n());
    let (base, group) = match (&shift, kind) {
        (Some(s), "pseudoloop") => {
            if !g.contains(s) {
                return Err(Error::pre("shift is not in the group"));
            }
            (shifted_digraph(d, s), &trivial)
        }
        _ => (d.clone(), g),
    };
    trace.replay(&base, group, budget)?;
    checks.push(format!("{} trace steps replayed", trace.steps.len()));
    match &outcome {
        DriverOutcome::Loop { b, step } => {
            if b.is_empty() || b.iter().any(|&x| b.iter().any(|&y| !d.has_edge(x, y))) {
                return Err(Error::pre("loop set is not a nonempty set with all edges"));
            }
            if let Some(s) = step {
                if *trace.relation(s)? != Relation::unary(b.iter().copied()) {
                    return Err(Error::pre("loop set differs from its defining step"));
                }
            }
            checks.push("loop set induces a complete subgraph with loops".into());
        }
        DriverOutcome::QuotientLoop { orbit, elements } => check_quotient_loop(d, g, *orbit, elements, checks)?,
        DriverOutcome::OrWitness { witness, pp_formula } => {
            check_witness(witness, &trace, checks)?;
            if let Some(f) = pp_formula {
                check_formula(f, d, g, &DerivationTrace::default(), &witness.relation, budget, checks)?;
            }
        }
        DriverOutcome::FallbackFailed { .. } => checks.push("undecided run; only the trace was checked".into()),
    }
    Ok(())
}

fn check_quotient_loop(d: &Digraph, g: &PermGroup, orbit: usize, elements: &[usize], checks: &mut Vec<String>) -> Result<()> {
    let (q, map) = quotient_digraph(d, g)?;
    let members: Vec<usize> = (0..d.n()).filter(|&a| map[a] == orbit).collect();
    if orbit >= q.n() || !q.has_edge(orbit, orbit) || members != elements {
        return Err(Error::pre("recorded orbit is not a loop of the quotient"));
    }
    checks.push("orbit carries a loop in the quotient".into());
    Ok(())
}

fn replay_classify(v: &Value, d: &Digraph, g: &PermGroup, store: &Store, budget: u64, checks: &mut Vec<String>) -> Result<()> {
    if !g.is_trivial() {
        return Err(Error::pre("classification certificates use the trivial group"));
    }
    match get_str(v, "classification")? {
        "LOOP" => {
            let x = get_usize(v, "vertex")?;
            if x >= d.n() || !d.has_edge(x, x) {
                return Err(Error::pre("recorded vertex has no loop"));
            }
            checks.push(format!("vertex {x} has a loop"));
        }
        "BIPARTITE_TRACTABLE" => {
            let colour: Vec<u8> = parse_as(v, "coloring")?;
            if colour.len() != d.n() || colour.iter().any(|&c| c > 1) || d.edges().iter().any(|t| colour[t[0]] == colour[t[1]]) {
                return Err(Error::pre("recorded colouring is not a proper 2-colouring"));
            }
            checks.push("2-colouring is proper".into());
        }
        "QUOTIENT_LOOP" => {
            let c = get(v, "certificate")?;
            check_quotient_loop(d, g, get_usize(c, "orbit")?, &parse_as::<Vec<usize>>(c, "elements")?, checks)?;
        }
        "HARDNESS_WITNESS" => {
            let c = get(v, "certificate")?;
            let trace = DerivationTrace::from_json(get(c, "trace")?, store)?;
            trace.replay(d, g, budget).map_err(|e| context("trace", e))?;
            checks.push(format!("{} trace steps replayed", trace.steps.len()));
            let tc = config_from_json(get(c, "config")?, store)?;
            check_config(d, g, &tc, &trace, checks)?;
            let DriverOutcome::OrWitness { witness, pp_formula: Some(f) } = outcome_from_json(get(c, "outcome")?, store)? else {
                return Err(Error::pre("hardness certificate needs an OR witness with a formula"));
            };
            check_witness(&witness, &trace, checks)?;
            check_formula(&f, d, g, &trace, &witness.relation, budget, checks).map_err(|e| context("pp-formula", e))?;
            let s = d.to_structure().with("OR", witness.relation.clone());
            let fresh = collapse_json(&or_collapse(&s, "OR", budget).map_err(|e| context("collapse", e))?);
            if fresh != *get(c, "collapse")? {
                return Err(Error::pre("recomputed collapse differs from the recorded one"));
            }
            if fresh["all_essentially_unary"] != json!(true) {
                return Err(Error::pre("collapse does not show essential unarity"));
            }
            checks.push("factor and K3 interpretations verified; small polymorphisms essentially unary".into());
        }
        "UNDECIDED" => checks.push("undecided classification; nothing to check".into()),
        other => return Err(Error::pre(format!("unknown classification `{other}`"))),
    }
    Ok(())
}
