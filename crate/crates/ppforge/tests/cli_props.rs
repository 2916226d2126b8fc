use std::path::{Path, PathBuf};

use ppforge::cli::run;
use ppforge::loopengine::{relation_from_json, relation_hash};
use serde_json::Value;

fn corpus(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("corpus").join(name).to_string_lossy().into_owned()
}

fn cli(args: &[&str]) -> (i32, String) {
    let mut v = vec!["ppforge".to_string()];
    v.extend(args.iter().map(|s| s.to_string()));
    run(&v)
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("ppforge-cli-props-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

fn replay_text(name: &str, text: &str) -> i32 {
    let p = scratch(name);
    std::fs::write(&p, text).unwrap();
    cli(&["replay", p.to_str().unwrap()]).0
}

fn loop_certificate() -> String {
    let (code, out) = cli(&["loop", "--input", &corpus("k3.graph")]);
    assert_eq!(code, 0, "{out}");
    out
}

#[test]
fn outputs_are_byte_identical() {
    let runs: [&[&str]; 4] = [
        &["analyze", "--input", &corpus("c3dir.graph"), "--input", &corpus("c6.graph")],
        &["loop", "--input", &corpus("k3.graph")],
        &["triangle", "--input", &corpus("c5.graph")],
        &["identity", "--structure", &corpus("k2.json"), "--condition", "siggers"],
    ];
    for args in runs {
        let a = cli(args);
        let b = cli(args);
        assert_eq!(a, b, "{args:?}");
    }
    let seq = cli(&["--jobs", "1", "analyze", "--input", &corpus("c5.graph"), "--input", &corpus("k3.graph")]);
    let par = cli(&["--jobs", "2", "analyze", "--input", &corpus("c5.graph"), "--input", &corpus("k3.graph")]);
    assert_eq!(seq, par);
}

#[test]
fn untouched_certificates_replay() {
    assert_eq!(replay_text("loop.json", &loop_certificate()), 0);
    let (_, tri) = cli(&["triangle", "--input", &corpus("c5.graph")]);
    assert_eq!(replay_text("triangle.json", &tri), 0);
}

#[test]
fn corrupted_tuple_is_rejected() {
    let cert = loop_certificate();
    let v: Value = serde_json::from_str(&cert).unwrap();
    let (hash, stored) = v["relations"].as_object().unwrap().iter().find(|(_, r)| r["tuples"].as_array().unwrap().len() > 1).unwrap();
    let first = stored["tuples"][0].to_string();
    let first_compact: String = first.chars().filter(|c| !c.is_whitespace()).collect();
    let mut bumped: Vec<usize> = serde_json::from_str(&first_compact).unwrap();
    bumped[0] = (bumped[0] + 1) % 3;

    // Edit one tuple in place.
    let mut tampered = v.clone();
    tampered["relations"][hash]["tuples"][0] = serde_json::json!(bumped);
    assert_ne!(replay_text("tampered.json", &serde_json::to_string_pretty(&tampered).unwrap()), 0);

    // Edit one tuple and re-key the relation under its new hash everywhere.
    let mut rel_json = stored.clone();
    let tuples = rel_json["tuples"].as_array_mut().unwrap();
    tuples.remove(0);
    let new_hash = relation_hash(&relation_from_json(&rel_json).unwrap());
    let mut rekeyed = v.clone();
    let store = rekeyed["relations"].as_object_mut().unwrap();
    store.remove(hash);
    store.insert(new_hash.clone(), rel_json);
    let text = serde_json::to_string_pretty(&rekeyed).unwrap().replace(hash.as_str(), &new_hash);
    assert_ne!(replay_text("rekeyed.json", &text), 0);
}

#[test]
fn major_version_mismatch_is_refused() {
    let mut v: Value = serde_json::from_str(&loop_certificate()).unwrap();
    v["format_version"] = "1.3".into();
    assert_eq!(replay_text("minor.json", &v.to_string()), 0);
    v["format_version"] = "2.0".into();
    assert_ne!(replay_text("major.json", &v.to_string()), 0);
    v["format_version"] = "1.0".into();
    v["format"] = "something-else".into();
    assert_ne!(replay_text("format.json", &v.to_string()), 0);
}

#[test]
fn edited_input_fails_digest() {
    let v: Value = serde_json::from_str(&loop_certificate()).unwrap();
    let mut w = v.clone();
    w["digraph"] = "graph 3\n0 1\n1 2\n".into();
    assert_ne!(replay_text("digest.json", &w.to_string()), 0);
}

#[test]
fn exit_codes() {
    assert_eq!(cli(&["--help"]).0, 0);
    assert_eq!(cli(&["--version"]).0, 0);
    assert_eq!(cli(&["frobnicate"]).0, 2);
    assert_eq!(cli(&["analyze", "--input", "/nonexistent/file.graph"]).0, 2);
    assert_eq!(cli(&["loop", "--input", &corpus("c3dir.graph")]).0, 2);
    assert_eq!(cli(&["classify", "--input", &corpus("c3dir.graph")]).0, 2);
    assert_eq!(cli(&["--budget", "10", "identity", "--structure", &corpus("k3.json"), "--condition", "siggers"]).0, 3);
    assert_eq!(cli(&["identity", "--structure", &corpus("k3.json"), "--condition", "nonsense"]).0, 2);
}
