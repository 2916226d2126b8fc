use std::collections::BTreeSet;

use ppforge::fraisse::{class_membership, random_sap_instance, strong_amalgam, ClassParams};
use ppforge::relcore::{Digraph, Structure};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn params(k3: bool) -> ClassParams {
    let base = if k3 { Digraph::complete(3) } else { Digraph::complete(2) };
    ClassParams::new(base.to_structure(), 2).unwrap()
}

/// Injective, and every relation holds on an image tuple exactly when it holds on the preimage.
fn embeds(f: &[usize], from: &Structure, to: &Structure) -> bool {
    let injective = f.iter().collect::<BTreeSet<_>>().len() == f.len();
    let image: BTreeSet<usize> = f.iter().copied().collect();
    injective
        && from.relations.iter().all(|(name, r)| {
            let target = to.relation(name).unwrap();
            r.iter().all(|t| target.contains(&t.iter().map(|&x| f[x]).collect::<Vec<_>>()))
                && target.iter().filter(|t| t.iter().all(|x| image.contains(x))).all(|t| {
                    let pre: Vec<usize> = t.iter().map(|y| f.iter().position(|x| x == y).unwrap()).collect();
                    r.contains(&pre)
                })
        })
}

fn check_amalgam(b: &Structure, c1: &Structure, c2: &Structure, f1: &[usize], f2: &[usize], p: &ClassParams) -> Structure {
    let a = strong_amalgam(b, c1, c2, f1, f2, p).unwrap();
    assert!(class_membership(&a.d, p).unwrap().is_member());
    assert!(embeds(&a.e1, c1, &a.d));
    assert!(embeds(&a.e2, c2, &a.d));
    for (&x, &y) in f1.iter().zip(f2) {
        assert_eq!(a.e1[x], a.e2[y]);
    }
    let i1: BTreeSet<usize> = a.e1.iter().copied().collect();
    let i2: BTreeSet<usize> = a.e2.iter().copied().collect();
    let shared: BTreeSet<usize> = f1.iter().map(|&x| a.e1[x]).collect();
    assert_eq!(i1.intersection(&i2).copied().collect::<BTreeSet<_>>(), shared);
    a.d
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn random_instances_amalgamate(seed in any::<u64>(), k3 in any::<bool>()) {
        let p = params(k3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_sap_instance(&mut rng, &p, 4);
        for s in [&inst.b, &inst.c1, &inst.c2] {
            prop_assert!(class_membership(s, &p).unwrap().is_member());
        }
        prop_assert!(embeds(&inst.f1, &inst.b, &inst.c1));
        prop_assert!(embeds(&inst.f2, &inst.b, &inst.c2));
        check_amalgam(&inst.b, &inst.c1, &inst.c2, &inst.f1, &inst.f2, &p);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(30))]

    #[test]
    fn iterated_amalgamation_stays_in_class(seed in any::<u64>(), k3 in any::<bool>()) {
        let p = params(k3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cur = random_sap_instance(&mut rng, &p, 3).c1;
        for round in 0..3 {
            if round % 2 == 0 {
                // Glue a copy of the current structure to itself over a random part.
                let mut pts: Vec<usize> = (0..cur.domain).collect();
                pts.shuffle(&mut rng);
                pts.truncate(rng.gen_range(cur.domain.saturating_sub(3)..=cur.domain));
                pts.sort();
                let (b, _) = cur.induced(&pts.iter().copied().collect());
                cur = check_amalgam(&b, &cur, &cur, &pts, &pts, &p);
            } else {
                let other = random_sap_instance(&mut rng, &p, 3).c2;
                cur = check_amalgam(&cur.induced(&BTreeSet::new()).0, &cur, &other, &[], &[], &p);
            }
            prop_assert!(cur.domain <= 12);
        }
    }
}
