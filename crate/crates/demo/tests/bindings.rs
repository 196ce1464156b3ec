use pnet_demo::{alpha_json, grid_json, mask_json};
use serde_json::Value;

fn parse(s: Result<String, String>) -> Value {
    serde_json::from_str(&s.unwrap()).unwrap()
}

#[test]
fn alpha_weights_round_trip_through_json() {
    let v = parse(alpha_json(0.5, 3));
    let w: Vec<f64> = v["weights"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert_eq!(w, [4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0]);
    assert!(alpha_json(0.0, 2).is_err());
    assert!(alpha_json(1.0, 0).is_err());
}

#[test]
fn main_stream_grid_is_causal() {
    let v = parse(grid_json(4, 0, 32, 128));
    assert_eq!(v["keys"].as_array().unwrap().len(), 4);
    let row = &v["rows"][2];
    assert_eq!(row["allowed"], serde_json::json!([true, true, true, false]));
    assert_eq!(row["buckets"], serde_json::json!([2, 1, 0, 0]));
}

#[test]
fn predicting_stream_sees_prefix_and_itself() {
    let v = parse(grid_json(3, 2, 32, 128));
    assert_eq!(v["keys"], serde_json::json!(["m0", "m1", "m2", "s0", "s1", "s2"]));
    let row = &v["rows"][1];
    assert_eq!(row["position"], 3);
    assert_eq!(row["allowed"], serde_json::json!([true, true, false, false, true, false]));
    // Offsets measured from the predicted position 3.
    assert_eq!(row["buckets"][0], 3);
    assert_eq!(row["buckets"][1], 2);
    assert_eq!(row["buckets"][4], 0);
    assert!(grid_json(0, 0, 32, 128).is_err());
}

#[test]
fn masked_text_reconstructs() {
    let text = (0..100).map(|i| format!("w{}", i % 17)).collect::<Vec<_>>().join(" ");
    let v = parse(mask_json(&text, 64, 0.15, 3));
    let tokens = v["tokens"].as_array().unwrap();
    assert_eq!(tokens.len(), 100);
    let spans: Vec<u64> = v["span_lengths"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).collect();
    assert_eq!(spans, [10, 5]);
    let inside = tokens.iter().filter(|t| !t["rule"].is_null()).count();
    assert_eq!(inside, 15);
    let original: Vec<&str> = tokens.iter().map(|t| t["original"].as_str().unwrap()).collect();
    assert_eq!(original.join(" "), text);
    for t in tokens.iter().filter(|t| t["rule"] == "mask") {
        assert_eq!(t["shown"], "[MASK]");
    }
    assert!(mask_json("", 64, 0.15, 0).is_err());
}
