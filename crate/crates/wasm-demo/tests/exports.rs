use coarsefine_wasm_demo::{fusion_curve_json, synthetic_sweep_json, tie_break_json};
use serde_json::Value;

fn parse(s: &str) -> Value {
    serde_json::from_str(s).unwrap()
}

#[test]
fn fusion_curve_endpoints() {
    let v = parse(&fusion_curve_json(3, 4, 16, 5, true, 4).unwrap());
    let alphas = v["alphas"].as_array().unwrap();
    assert_eq!(alphas.len(), 5);
    assert_eq!(alphas[0], 0.0);
    assert_eq!(alphas[4], 1.0);
    assert!(v["kv_deviation"].as_f64().unwrap() <= 1e-5);
    let out = v["outputs"].as_array().unwrap();
    let first: Vec<f64> = out[0].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    let norm = first.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!((norm - v["ffn_norm"].as_f64().unwrap()).abs() < 1e-12);
    assert!(fusion_curve_json(3, 9, 16, 5, true, 4).is_err());
    assert!(fusion_curve_json(3, 4, 16, 5, true, 0).is_err());
}

#[test]
fn sharper_candidate_wins_tie() {
    let v = parse(
        &tie_break_json(r#"{"candidates":[{"id":"a","p_top":0.6},{"id":"b","p_top":0.95},{"id":"c","p_top":0.6}]}"#)
            .unwrap(),
    );
    assert_eq!(v["winner"], "b");
    let rows = v["candidates"].as_array().unwrap();
    assert_eq!(rows[0]["h_raw"], rows[2]["h_raw"]);
    let one_hot = parse(&tie_break_json(r#"{"candidates":[{"id":"z","p_top":1.0}]}"#).unwrap());
    assert_eq!(one_hot["candidates"][0]["h_raw"], 0.0);
    assert!(tie_break_json(r#"{"candidates":[]}"#).is_err());
    assert!(tie_break_json(r#"{"candidates":[{"id":"a","p_top":0}]}"#).is_err());
}

#[test]
fn oracle_sweep_tracks_pool_hit_rate() {
    let v = parse(&synthetic_sweep_json(r#"{"backend":"oracle","query_noise":0.5,"ks":[1,5,9]}"#).unwrap());
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    for r in rows {
        assert_eq!(r["recall_at_1"], r["pool_hit_rate"]);
        assert!(r["max_budget_excess"].as_i64().unwrap() <= 0);
    }
    let mock = parse(&synthetic_sweep_json(r#"{"ks":[3]}"#).unwrap());
    assert_eq!(mock["rows"][0]["k"], 3);
    assert!(synthetic_sweep_json(r#"{"backend":"http"}"#).is_err());
    assert!(synthetic_sweep_json(r#"{"candidates":5000}"#).is_err());
}
