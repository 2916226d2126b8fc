//! Browser bindings: digraph analysis, classification and identity checks on
//! pasted text. Every function returns pretty-printed JSON.

use ppforge::cli::{analyze_digraph, classify as classify_digraph, digraph_from_text, identity as identity_check};
use ppforge::relcore::Structure;
use wasm_bindgen::prelude::*;

/// Search budget for browser runs, kept small so the page stays responsive.
pub const BROWSER_BUDGET: u64 = 20_000_000;

fn pretty(v: &serde_json::Value) -> String {
    serde_json::to_string_pretty(v).expect("JSON values serialize")
}

fn js(e: ppforge::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub fn analyze(text: &str) -> Result<String, JsError> {
    let d = digraph_from_text(text).map_err(js)?;
    Ok(pretty(&analyze_digraph(&d)))
}

#[wasm_bindgen]
pub fn classify(text: &str) -> Result<String, JsError> {
    let d = digraph_from_text(text).map_err(js)?;
    classify_digraph(&d, BROWSER_BUDGET).map(|v| pretty(&v)).map_err(js)
}

/// `text` is structure JSON or a digraph in the text format.
#[wasm_bindgen]
pub fn identity(text: &str, condition: &str, idempotent: bool) -> Result<String, JsError> {
    let s = if text.trim_start().starts_with('{') {
        Structure::from_json(text).map_err(js)?
    } else {
        digraph_from_text(text).map_err(js)?.to_structure()
    };
    identity_check(&s, condition, idempotent, BROWSER_BUDGET).map(|v| pretty(&v)).map_err(js)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analyze_directed_triangle() {
        let out = analyze("digraph 3\n0 1\n1 2\n2 0\n").unwrap_or_else(|_| panic!("analysis failed"));
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v["alg_gcd"], 3);
        assert_eq!(v["linked"], false);
    }

    #[test]
    fn classify_edge_is_bipartite() {
        let out = classify("graph 2\n0 1\n").unwrap_or_else(|_| panic!("classification failed"));
        assert!(out.contains("BIPARTITE_TRACTABLE"));
    }

    #[test]
    fn siggers_on_triangle_fails() {
        let out = identity("graph 3\n0 1\n1 2\n2 0\n", "siggers", false).unwrap_or_else(|_| panic!("check failed"));
        assert!(out.contains("\"UNSATISFIED\""));
    }
}
