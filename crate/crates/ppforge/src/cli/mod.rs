//! The `ppforge` command line.

pub mod cert;

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

use crate::dianalysis::analyze;
use crate::error::{Error, Result};
use crate::fraisse::{class_membership, random_sap_instance, sap_holds, strong_amalgam, ClassParams, Membership};
use crate::idcheck::{find_polymorphisms, make_condition, verify_tables, ConditionKind, Verdict};
use crate::loopengine::{loop_driver, or_collapse, pseudoloop_driver, DriverOutcome};
use crate::relcore::{quotient_digraph, Digraph, PermGroup, Structure};
use crate::triangle::{one_b_driver, triangle_config_search};

pub const DEFAULT_BUDGET: u64 = 200_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Text,
}

#[derive(Parser, Debug)]
#[command(name = "ppforge", version, about = "Loop lemmas, pp-constructions and polymorphism identities on finite digraphs")]
struct Cli {
    /// Output format.
    #[arg(long, global = true, value_enum, default_value = "json")]
    format: Format,
    /// Search budget in nodes.
    #[arg(long, global = true, env = "PPFORGE_BUDGET", default_value_t = DEFAULT_BUDGET)]
    budget: u64,
    /// Worker threads across input files.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Seed for randomized corpora.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Smoothness, components, algebraic length and linkness.
    Analyze {
        #[arg(long, required = true)]
        input: Vec<PathBuf>,
    },
    /// The orbit digraph modulo a group.
    Quotient {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        group: PathBuf,
    },
    /// Bipartite, loop or hardness verdict for a symmetric digraph.
    Classify {
        #[arg(long, required = true)]
        input: Vec<PathBuf>,
    },
    /// Loop driver with the group acting as orbits.
    Loop {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        group: Option<PathBuf>,
    },
    /// Pseudoloop driver: a quotient loop or OR with parameters.
    Pseudoloop {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        group: Option<PathBuf>,
    },
    /// Triangle configuration search.
    Triangle {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        group: Option<PathBuf>,
    },
    /// Polymorphism identity check.
    Identity {
        /// Structure JSON.
        #[arg(long, conflicts_with = "input")]
        structure: Option<PathBuf>,
        /// Digraph file.
        #[arg(long)]
        input: Option<PathBuf>,
        /// wnu:N, idempotent_wnu:N, siggers, pseudo_siggers, pseudo_wnu:N, ugly:M or pseudoloop:<digraph file>.
        #[arg(long)]
        condition: String,
        /// Adds f(x,…,x) ≈ x for every operation symbol.
        #[arg(long)]
        idempotent: bool,
    },
    /// Membership in the Fraïssé class, or randomized strong amalgamation.
    FraisseCheck {
        #[arg(long)]
        structure: Option<PathBuf>,
        /// Base structure JSON, or K2 / K3.
        #[arg(long)]
        base: Option<String>,
        #[arg(long, default_value_t = 2)]
        k: usize,
        /// Number of random amalgamation instances.
        #[arg(long)]
        random: Option<usize>,
        #[arg(long, default_value_t = 4)]
        max_size: usize,
    },
    /// Re-checks a certificate.
    Replay {
        #[arg(long)]
        replay: Option<PathBuf>,
        file: Option<PathBuf>,
    },
}

/// Runs the command line; returns the exit code and the text for stdout
/// (for stderr when the code is nonzero).
pub fn run(args: &[String]) -> (i32, String) {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => 0,
                _ => 2,
            };
            return (code, e.render().to_string());
        }
    };
    match execute(&cli) {
        Ok((code, v)) => (code, render(&v, cli.format)),
        Err(e) => (e.exit_code(), format!("error: {e}\n")),
    }
}

fn render(v: &Value, format: Format) -> String {
    match format {
        Format::Json => format!("{}\n", serde_json::to_string_pretty(v).expect("json values serialize")),
        Format::Text => {
            let mut out = String::new();
            render_text(v, &mut out, "");
            out
        }
    }
}

fn render_text(v: &Value, out: &mut String, indent: &str) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                match x {
                    Value::String(s) if s.contains('\n') => {
                        out.push_str(&format!("{indent}{k}:\n"));
                        for line in s.lines() {
                            out.push_str(&format!("{indent}  {line}\n"));
                        }
                    }
                    Value::String(s) => out.push_str(&format!("{indent}{k}: {s}\n")),
                    Value::Object(_) => {
                        out.push_str(&format!("{indent}{k}:\n"));
                        render_text(x, out, &format!("{indent}  "));
                    }
                    other => out.push_str(&format!("{indent}{k}: {other}\n")),
                }
            }
        }
        Value::Array(items) => {
            for (i, x) in items.iter().enumerate() {
                out.push_str(&format!("{indent}[{i}]\n"));
                render_text(x, out, &format!("{indent}  "));
            }
        }
        other => out.push_str(&format!("{indent}{other}\n")),
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// A digraph from the text format or from structure JSON with one relation `E`.
pub fn load_digraph(path: &Path) -> Result<Digraph> {
    digraph_from_text(&read(path)?)
}

pub fn digraph_from_text(text: &str) -> Result<Digraph> {
    if text.trim_start().starts_with('{') {
        Digraph::from_structure(&Structure::from_json(text)?)
    } else {
        Digraph::parse(text)
    }
}

fn load_group(path: Option<&PathBuf>, n: usize) -> Result<PermGroup> {
    match path {
        Some(p) => PermGroup::parse(&read(p)?, n),
        None => Ok(PermGroup::trivial(n)),
    }
}

fn execute(cli: &Cli) -> Result<(i32, Value)> {
    let budget = cli.budget;
    match &cli.cmd {
        Cmd::Analyze { input } => Ok(per_file(input, cli.jobs, analyze_file)),
        Cmd::Classify { input } => Ok(per_file(input, cli.jobs, |p| classify(&load_digraph(p)?, budget))),
        Cmd::Quotient { input, group } => {
            let d = load_digraph(input)?;
            let g = load_group(Some(group), d.n())?;
            g.check_automorphisms(&d.to_structure())?;
            let (q, map) = quotient_digraph(&d, &g)?;
            Ok((0, json!({ "quotient": q.to_text(), "orbit_of": map, "orbits": q.n(), "loops": q.loops() })))
        }
        Cmd::Loop { input, group } => {
            let d = load_digraph(input)?;
            let g = load_group(group.as_ref(), d.n())?;
            let r = loop_driver(&d, &g, budget)?;
            Ok((0, cert::driver_cert("loop", &d, &g, &r)))
        }
        Cmd::Pseudoloop { input, group } => {
            let d = load_digraph(input)?;
            let g = load_group(group.as_ref(), d.n())?;
            g.check_automorphisms(&d.to_structure())?;
            let r = pseudoloop_driver(&d, &g, budget)?;
            Ok((0, cert::driver_cert("pseudoloop", &d, &g, &r)))
        }
        Cmd::Triangle { input, group } => {
            let d = load_digraph(input)?;
            let g = load_group(group.as_ref(), d.n())?;
            let (tc, trace) = triangle_config_search(&d, &g, budget)?;
            Ok((0, cert::triangle_cert(&d, &g, &tc, &trace)))
        }
        Cmd::Identity { structure, input, condition, idempotent } => {
            let s = match (structure, input) {
                (Some(p), _) => Structure::from_json(&read(p)?)?,
                (None, Some(p)) => load_digraph(p)?.to_structure(),
                (None, None) => return Err(Error::pre("identity needs --structure or --input")),
            };
            identity(&s, condition, *idempotent, budget).map(|v| (0, v))
        }
        Cmd::FraisseCheck { structure, base, k, random, max_size } => {
            fraisse_check(structure.as_deref(), base.as_deref(), *k, *random, *max_size, cli.seed).map(|v| (0, v))
        }
        Cmd::Replay { replay, file } => {
            let path = replay.as_ref().or(file.as_ref()).ok_or_else(|| Error::pre("replay needs a certificate file"))?;
            cert::replay(&read(path)?, budget).map(|v| (0, v))
        }
    }
}

/// Applies `f` to every file on up to `jobs` threads; one file gives a single
/// object, several give an array in input order.
fn per_file<F>(inputs: &[PathBuf], jobs: usize, f: F) -> (i32, Value)
where
    F: Fn(&Path) -> Result<Value> + Sync,
{
    let jobs = jobs.clamp(1, inputs.len().max(1));
    let mut results: Vec<Option<Result<Value>>> = (0..inputs.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunk = inputs.len().div_ceil(jobs);
        for (paths, slots) in inputs.chunks(chunk.max(1)).zip(results.chunks_mut(chunk.max(1))) {
            let f = &f;
            scope.spawn(move || {
                for (p, slot) in paths.iter().zip(slots.iter_mut()) {
                    *slot = Some(f(p));
                }
            });
        }
    });
    let mut code = 0;
    let mut values = Vec::new();
    for (p, r) in inputs.iter().zip(results) {
        match r.expect("every slot is filled") {
            Ok(v) => values.push(v),
            Err(e) => {
                if code == 0 {
                    code = e.exit_code();
                }
                values.push(json!({ "input": p.display().to_string(), "error": e.to_string() }));
            }
        }
    }
    if values.len() == 1 {
        (code, values.pop().expect("one value"))
    } else {
        (code, Value::Array(values))
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn analyze_file(path: &Path) -> Result<Value> {
    let mut v = analyze_digraph(&load_digraph(path)?);
    v["input"] = json!(path.display().to_string());
    Ok(v)
}

pub fn analyze_digraph(d: &Digraph) -> Value {
    let r = analyze(d);
    json!({
        "vertices": d.n(),
        "edges": d.edges().len(),
        "smooth": r.smooth,
        "linked": r.linked,
        "linked_k": r.linked_k,
        "alg_gcd": r.alg_length_gcd.iter().fold(0, |a, &b| gcd(a, b)),
        "alg_gcd_by_component": r.alg_length_gcd,
        "components": r.components,
        "bipartite": r.bipartite,
        "odd_girth": r.odd_girth,
    })
}

fn two_colouring(d: &Digraph) -> Option<Vec<u8>> {
    let mut colour = vec![u8::MAX; d.n()];
    for s in 0..d.n() {
        if colour[s] != u8::MAX {
            continue;
        }
        colour[s] = 0;
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            for &w in d.out(u) {
                if colour[w] == u8::MAX {
                    colour[w] = 1 - colour[u];
                    queue.push_back(w);
                } else if colour[w] == colour[u] {
                    return None;
                }
            }
        }
    }
    Some(colour)
}

/// Hell–Nešetřil style verdict with a replayable certificate.
pub fn classify(d: &Digraph, budget: u64) -> Result<Value> {
    if !d.is_symmetric() {
        return Err(Error::pre("classify needs a symmetric digraph"));
    }
    let g = PermGroup::trivial(d.n());
    let mut m = cert::header("classify", d, &g);
    m.insert("budget".into(), json!(budget));
    if let Some(&x) = d.loops().first() {
        m.insert("classification".into(), json!("LOOP"));
        m.insert("vertex".into(), json!(x));
        return Ok(Value::Object(m));
    }
    if let Some(c) = two_colouring(d) {
        m.insert("classification".into(), json!("BIPARTITE_TRACTABLE"));
        m.insert("coloring".into(), json!(c));
        return Ok(Value::Object(m));
    }
    let r = one_b_driver(d, &g, budget)?;
    let mut store = cert::Store::new();
    match &r.outcome {
        DriverOutcome::OrWitness { witness, pp_formula: Some(_) } => {
            let s = d.to_structure().with("OR", witness.relation.clone());
            let collapse = or_collapse(&s, "OR", budget)?;
            let tc = r.config.as_ref().ok_or_else(|| Error::Internal("hardness run without a configuration".into()))?;
            let mut c = Map::new();
            c.insert("outcome".into(), cert::outcome_json(&r.outcome, &mut store));
            c.insert("config".into(), cert::config_json(tc, &mut store));
            c.insert("trace".into(), r.trace.to_json(&mut store));
            c.insert("sim_classes".into(), json!(r.classes));
            c.insert("collapse".into(), cert::collapse_json(&collapse));
            m.insert("classification".into(), json!("HARDNESS_WITNESS"));
            m.insert("certificate".into(), Value::Object(c));
        }
        DriverOutcome::QuotientLoop { .. } => {
            m.insert("classification".into(), json!("QUOTIENT_LOOP"));
            m.insert("certificate".into(), cert::outcome_json(&r.outcome, &mut store));
        }
        DriverOutcome::FallbackFailed { diagnostics } => {
            m.insert("classification".into(), json!("UNDECIDED"));
            m.insert("reason".into(), json!(diagnostics));
        }
        other => {
            m.insert("classification".into(), json!("UNDECIDED"));
            m.insert("reason".into(), json!(format!("unexpected outcome {}", cert::outcome_label(other))));
        }
    }
    m.insert("relations".into(), json!(store));
    Ok(Value::Object(m))
}

/// Parses a condition name; `pseudoloop:<file>` reads the digraph from a file.
pub fn condition_kind(text: &str) -> Result<ConditionKind> {
    match text.strip_prefix("pseudoloop:") {
        Some(path) => Ok(ConditionKind::Pseudoloop(load_digraph(Path::new(path))?)),
        None => ConditionKind::parse(text),
    }
}

pub fn identity(s: &Structure, condition: &str, idempotent: bool, budget: u64) -> Result<Value> {
    let mut c = make_condition(&condition_kind(condition)?)?;
    if idempotent {
        c = c.with_idempotence();
    }
    let report = find_polymorphisms(s, &c, budget)?;
    let mut m = Map::new();
    m.insert("condition".into(), json!(c.to_string()));
    m.insert("trivial".into(), json!(c.is_trivial()));
    m.insert("idempotent".into(), json!(c.is_idempotent()));
    m.insert("domain".into(), json!(s.domain));
    m.insert("unary_range".into(), json!(report.unary_range));
    m.insert("instances".into(), json!(report.instances));
    m.insert("nodes".into(), json!(report.nodes));
    match &report.verdict {
        Verdict::Satisfied(tables) => {
            verify_tables(s, &c, tables).map_err(Error::Internal)?;
            m.insert("verdict".into(), json!("SATISFIED"));
            m.insert("verified".into(), json!(true));
            m.insert("tables".into(), json!(tables));
        }
        Verdict::Unsatisfied => {
            m.insert("verdict".into(), json!("UNSATISFIED"));
        }
    }
    Ok(Value::Object(m))
}

fn load_base(spec: &str) -> Result<Structure> {
    match spec {
        "K2" => Ok(Digraph::complete(2).to_structure()),
        "K3" => Ok(Digraph::complete(3).to_structure()),
        path => Structure::from_json(&read(Path::new(path))?),
    }
}

fn fraisse_check(
    structure: Option<&Path>,
    base: Option<&str>,
    k: usize,
    random: Option<usize>,
    max_size: usize,
    seed: u64,
) -> Result<Value> {
    if let Some(path) = structure {
        let p = ClassParams::new(load_base(base.unwrap_or("K2"))?, k)?;
        let b = Structure::from_json(&read(path)?)?;
        return Ok(match class_membership(&b, &p)? {
            Membership::Member { classes, completed } => json!({
                "membership": "MEMBER",
                "classified_tuples": classes.len(),
                "completed": completed,
            }),
            Membership::Violation(reason) => json!({ "membership": "VIOLATION", "reason": reason }),
        });
    }
    let count = random.ok_or_else(|| Error::pre("fraisse-check needs --structure or --random"))?;
    let bases: Vec<String> = match base {
        Some(b) => vec![b.to_string()],
        None => vec!["K2".into(), "K3".into()],
    };
    let params = bases.iter().map(|b| ClassParams::new(load_base(b)?, k)).collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    let mut largest = 0;
    for i in 0..count {
        let p = &params[i % params.len()];
        let inst = random_sap_instance(&mut rng, p, max_size);
        let ok = match strong_amalgam(&inst.b, &inst.c1, &inst.c2, &inst.f1, &inst.f2, p) {
            Ok(a) => {
                largest = largest.max(a.d.domain);
                class_membership(&a.d, p)?.is_member() && sap_holds(&inst.f1, &inst.f2, &a.e1, &a.e2)
            }
            Err(_) => false,
        };
        if !ok {
            failures.push(i);
        }
    }
    Ok(json!({
        "instances": count,
        "bases": bases,
        "k": k,
        "seed": seed,
        "failures": failures,
        "largest_amalgam": largest,
    }))
}
