//! From OR(α,α) on a core to the factor structure, its small polymorphisms and
//! a pp-interpretation of K₃.

use std::collections::{BTreeMap, BTreeSet};

use super::or_relation_on;
use crate::error::{Error, Result};
use crate::pplogic::{Atom, Env, PPInterpretation, RPPFormula};
use crate::relcore::{all_tuples, is_core, Digraph, Relation, Structure, Tuple};

/// Polymorphisms of one arity on the factor structure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArityReport {
    pub arity: usize,
    pub polymorphisms: usize,
    pub essentially_unary: usize,
    /// Search nodes visited.
    pub nodes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CollapseOutcome {
    pub classes: Vec<BTreeSet<usize>>,
    /// Onto the classes, with target relation `OR` = {x=y ∨ z=w}.
    pub factor: PPInterpretation,
    pub factor_target: Structure,
    /// Two-dimensional, with parameters, target K₃.
    pub k3: PPInterpretation,
    pub report: Vec<ArityReport>,
}

impl CollapseOutcome {
    /// Every enumerated polymorphism depends on at most one coordinate.
    pub fn all_essentially_unary(&self) -> bool {
        self.report.iter().all(|r| r.polymorphisms == r.essentially_unary)
    }
}

/// {(x,y,z,w) : x=y ∨ z=w} on `c` elements.
pub fn or_eq(c: usize) -> Relation {
    Relation::collect(4, all_tuples(c, 4).filter(|t| t[0] == t[1] || t[2] == t[3]))
}

fn essentially_unary(f: &[usize], c: usize, arity: usize) -> bool {
    let args: Vec<Tuple> = all_tuples(c, arity).collect();
    (0..arity).any(|i| {
        args.iter().enumerate().all(|(ti, t)| {
            args.iter().enumerate().all(|(ui, u)| t[i] != u[i] || f[ti] == f[ui])
        })
    })
}

/// All `arity`-ary operations on `c` elements preserving `r`, by backtracking
/// over argument tuples in lexicographic order.
pub fn polymorphisms(r: &Relation, c: usize, arity: usize, budget: u64) -> Result<(Vec<Vec<usize>>, u64)> {
    let size = c.pow(arity as u32);
    let index = |cols: &[usize]| cols.iter().fold(0, |acc, &v| acc * c + v);
    let rows: Vec<&Tuple> = r.iter().collect();
    let ra = r.arity();
    // Constraints keyed by the largest argument index they mention.
    let mut checks: Vec<Vec<Vec<usize>>> = vec![Vec::new(); size];
    let mut count = 0u64;
    for choice in all_tuples(rows.len(), arity) {
        let cons: Vec<usize> = (0..ra)
            .map(|j| index(&choice.iter().map(|&ri| rows[ri][j]).collect::<Vec<_>>()))
            .collect();
        let m = *cons.iter().max().expect("nonempty");
        checks[m].push(cons);
        count += 1;
        if count > budget {
            return Err(Error::budget("polymorphism constraints exceed the budget"));
        }
    }
    let mut f = vec![0usize; size];
    let mut out = Vec::new();
    let mut nodes = 0u64;
    let mut pos = 0usize;
    let mut next_val = vec![0usize; size + 1];
    loop {
        if pos == size {
            out.push(f.clone());
            if pos == 0 {
                break;
            }
            pos -= 1;
            continue;
        }
        if next_val[pos] >= c {
            next_val[pos] = 0;
            if pos == 0 {
                break;
            }
            pos -= 1;
            continue;
        }
        f[pos] = next_val[pos];
        next_val[pos] += 1;
        nodes += 1;
        if nodes > budget {
            return Err(Error::budget("polymorphism search exceeds the budget"));
        }
        let ok = checks[pos].iter().all(|cons| {
            let img: Vec<usize> = cons.iter().map(|&i| f[i]).collect();
            r.contains(&img)
        });
        if ok {
            pos += 1;
        }
    }
    Ok((out, nodes))
}

fn param(f: &mut RPPFormula, c: usize) -> String {
    let p = f.fresh("p", 0);
    f.push(Atom::Param(c, p.clone()));
    p
}

fn or_atom(f: &mut RPPFormula, name: &str, args: [&String; 4]) {
    f.rel_owned(name, &args.map(|s| s.clone()));
}

/// x ∈ [c0] ∪ [c1].
fn two_classes(f: &mut RPPFormula, name: &str, x: &String, p0: &String, p1: &String) {
    or_atom(f, name, [x, p0, x, p1]);
}

/// Both in [c0] ∪ [c1], in different classes.
fn differ(f: &mut RPPFormula, name: &str, x: &String, y: &String, p0: &String, p1: &String) {
    or_atom(f, name, [x, p1, y, p1]);
    or_atom(f, name, [x, p0, y, p0]);
}

fn k3_domain(f: &mut RPPFormula, name: &str, x1: &String, x2: &String, p0: &String, p1: &String) {
    two_classes(f, name, x1, p0, p1);
    two_classes(f, name, x2, p0, p1);
    or_atom(f, name, [x1, p0, x2, p0]);
}

/// Builds the factor interpretation and the K₃ interpretation for the OR
/// relation `or_name` of `s`, and enumerates polymorphisms up to arity 3.
pub fn or_collapse(s: &Structure, or_name: &str, budget: u64) -> Result<CollapseOutcome> {
    s.validate()?;
    let r = s.relation(or_name)?;
    if r.arity() != 4 || r.is_empty() {
        return Err(Error::pre("OR relation must be nonempty and 4-ary"));
    }
    let carrier = r.coordinate(0);
    let alpha = Relation::collect(
        2,
        carrier.iter().flat_map(|&x| carrier.iter().map(move |&y| vec![x, y])).filter(|xy| {
            carrier.iter().all(|&z| carrier.iter().all(|&w| r.contains(&[xy[0], xy[1], z, w])))
        }),
    );
    if *r != or_relation_on(&alpha, &carrier) {
        return Err(Error::pre("relation is not OR(α,α) for an equivalence α"));
    }
    if alpha.len() == carrier.len() * carrier.len() {
        return Err(Error::pre("α is the full relation on its carrier"));
    }
    if !is_core(s, budget)? {
        return Err(Error::pre("structure is not a core"));
    }
    let mut class_of: BTreeMap<usize, usize> = BTreeMap::new();
    let mut classes: Vec<BTreeSet<usize>> = Vec::new();
    for &x in &carrier {
        if class_of.contains_key(&x) {
            continue;
        }
        let cls: BTreeSet<usize> = carrier.iter().copied().filter(|&y| alpha.contains(&[x, y])).collect();
        for &y in &cls {
            class_of.insert(y, classes.len());
        }
        classes.push(cls);
    }
    let c = classes.len();
    let c0 = *classes[0].first().expect("nonempty");
    let c1 = *classes[1].first().expect("nonempty");

    let mut dom = RPPFormula::new(&["x"]);
    let z = dom.fresh("z", 0);
    or_atom(&mut dom, or_name, [&"x".to_string(), &"x".to_string(), &z, &z]);
    let mut eq = RPPFormula::new(&["x", "y"]);
    let (p0, p1) = (param(&mut eq, c0), param(&mut eq, c1));
    or_atom(&mut eq, or_name, [&"x".to_string(), &"y".to_string(), &p0, &p1]);
    let mut orf = RPPFormula::new(&["x1", "x2", "x3", "x4"]);
    orf.rel(or_name, &["x1", "x2", "x3", "x4"]);
    let factor = PPInterpretation {
        dimension: 1,
        domain_formula: dom,
        value_map: class_of.iter().map(|(&a, &k)| (vec![a], k)).collect(),
        preimage_formulas: BTreeMap::from([("=".to_string(), eq), ("OR".to_string(), orf)]),
    };
    let factor_target = Structure::new(c).with("OR", or_eq(c));
    let env = Env::new(s).with_budget(budget);
    factor.verify(&env, &factor_target)?;

    let v = |s: &str| s.to_string();
    let (x1, x2, y1, y2) = (v("x1"), v("x2"), v("y1"), v("y2"));
    let mut kd = RPPFormula::new(&["x1", "x2"]);
    let (p0, p1) = (param(&mut kd, c0), param(&mut kd, c1));
    k3_domain(&mut kd, or_name, &x1, &x2, &p0, &p1);
    let mut keq = RPPFormula::new(&["x1", "x2", "y1", "y2"]);
    let (p0, p1) = (param(&mut keq, c0), param(&mut keq, c1));
    k3_domain(&mut keq, or_name, &x1, &x2, &p0, &p1);
    k3_domain(&mut keq, or_name, &y1, &y2, &p0, &p1);
    or_atom(&mut keq, or_name, [&x1, &y1, &p0, &p1]);
    or_atom(&mut keq, or_name, [&x2, &y2, &p0, &p1]);
    let mut ke = RPPFormula::new(&["x1", "x2", "y1", "y2"]);
    let (p0, p1) = (param(&mut ke, c0), param(&mut ke, c1));
    k3_domain(&mut ke, or_name, &x1, &x2, &p0, &p1);
    k3_domain(&mut ke, or_name, &y1, &y2, &p0, &p1);
    let (u1, u2) = (ke.fresh("u", 0), ke.fresh("u", 0));
    differ(&mut ke, or_name, &u1, &x1, &p0, &p1);
    differ(&mut ke, or_name, &u2, &x2, &p0, &p1);
    or_atom(&mut ke, or_name, [&u1, &y1, &u2, &y2]);
    let mut value_map = BTreeMap::new();
    for &a in classes[0].iter().chain(&classes[1]) {
        for &b in classes[0].iter().chain(&classes[1]) {
            let bits = (class_of[&a], class_of[&b]);
            if bits != (1, 1) {
                value_map.insert(vec![a, b], 2 * bits.0 + bits.1);
            }
        }
    }
    let k3 = PPInterpretation {
        dimension: 2,
        domain_formula: kd,
        value_map,
        preimage_formulas: BTreeMap::from([("=".to_string(), keq), ("E".to_string(), ke)]),
    };
    k3.verify(&env, &Digraph::complete(3).to_structure())?;

    if c > 4 {
        return Err(Error::budget(format!("ternary enumeration on {c} classes is out of range")));
    }
    let q = or_eq(c);
    let mut report = Vec::new();
    for arity in 1..=3 {
        let (ops, nodes) = polymorphisms(&q, c, arity, budget)?;
        let eu = ops.iter().filter(|f| essentially_unary(f, c, arity)).count();
        report.push(ArityReport { arity, polymorphisms: ops.len(), essentially_unary: eu, nodes });
    }
    Ok(CollapseOutcome { classes, factor, factor_target, k3, report })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_or(n: usize, alpha: &[(usize, usize)], carrier: &[usize]) -> Structure {
        let carrier: BTreeSet<usize> = carrier.iter().copied().collect();
        let a = Relation::collect(2, alpha.iter().map(|&(x, y)| vec![x, y]));
        let a = crate::dianalysis::equivalence_closure(n, &a).restrict(&carrier);
        let mut s = Structure::new(n).with("OR", or_relation_on(&a, &carrier));
        for x in 0..n {
            s = s.with(&format!("c{x}"), Relation::unary([x]));
        }
        s
    }

    /// Brute force over all 2^8 ternary Boolean operations.
    fn boolean_ternary_oracle() -> (usize, usize) {
        let q = or_eq(2);
        let args: Vec<Tuple> = all_tuples(2, 3).collect();
        let mut total = 0;
        let mut unary = 0;
        for code in 0u32..256 {
            let f: Vec<usize> = (0..8).map(|i| ((code >> i) & 1) as usize).collect();
            let ok = all_tuples(q.len(), 3).all(|pick| {
                let rows: Vec<&Tuple> = q.iter().collect();
                let img: Vec<usize> = (0..4)
                    .map(|j| {
                        let col: Vec<usize> = pick.iter().map(|&ri| rows[ri][j]).collect();
                        f[args.iter().position(|a| *a == col).unwrap()]
                    })
                    .collect();
                q.contains(&img)
            });
            if ok {
                total += 1;
                if essentially_unary(&f, 2, 3) {
                    unary += 1;
                }
            }
        }
        (total, unary)
    }

    #[test]
    fn two_element_carrier() {
        let s = with_or(2, &[], &[0, 1]);
        let out = or_collapse(&s, "OR", 10_000_000).unwrap();
        assert_eq!(out.classes.len(), 2);
        assert!(out.all_essentially_unary());
        let (total, unary) = boolean_ternary_oracle();
        assert_eq!(total, unary);
        assert_eq!(out.report[2].polymorphisms, total);
        // Projections, negated projections and constants.
        assert_eq!(total, 8);
    }

    #[test]
    fn three_element_carrier() {
        let s = with_or(3, &[], &[0, 1, 2]);
        let out = or_collapse(&s, "OR", 10_000_000).unwrap();
        assert!(out.all_essentially_unary());
        assert_eq!(out.report[0].polymorphisms, 27);
        assert_eq!(out.report[2].polymorphisms, 3 * 27 - 2 * 3);
    }

    #[test]
    fn classes_of_size_two() {
        let s = with_or(4, &[(0, 1), (2, 3)], &[0, 1, 2, 3]);
        let out = or_collapse(&s, "OR", 10_000_000).unwrap();
        assert_eq!(out.classes, vec![BTreeSet::from([0, 1]), BTreeSet::from([2, 3])]);
        assert_eq!(out.k3.value_map.len(), 12);
    }

    #[test]
    fn full_alpha_is_rejected() {
        let s = with_or(2, &[(0, 1)], &[0, 1]);
        assert!(matches!(or_collapse(&s, "OR", 1_000_000), Err(Error::Precondition(_))));
    }

    #[test]
    fn non_core_is_rejected() {
        let carrier = BTreeSet::from([0, 1]);
        let s = Structure::new(3).with("OR", or_relation_on(&Relation::diagonal(3).restrict(&carrier), &carrier));
        assert!(matches!(or_collapse(&s, "OR", 1_000_000), Err(Error::Precondition(_))));
    }
}
