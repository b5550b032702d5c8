use serde_json::Value;
use trajsim_demo::{measure_pair, nearest, parse_measure, synth_set};

#[test]
fn identical_paths_are_at_distance_zero() {
    let p = "[[0,0],[10,0],[10,10]]";
    let v: Value = serde_json::from_str(&measure_pair(p, p).unwrap()).unwrap();
    for tag in ["dtw", "dfd", "edwp"] {
        assert_eq!(v[tag].as_f64(), Some(0.0), "{tag}");
    }
}

#[test]
fn shifted_path_distances() {
    let v: Value = serde_json::from_str(&measure_pair("[[0,0],[10,0]]", "[[0,3],[10,3]]").unwrap()).unwrap();
    assert!((v["dfd"].as_f64().unwrap() - 3.0).abs() < 1e-12);
    assert!((v["dtw"].as_f64().unwrap() - 6.0).abs() < 1e-12);
}

#[test]
fn bad_input_is_reported() {
    assert!(measure_pair("[[0,0]", "[]").is_err());
    assert!(parse_measure("lcss").is_err());
    assert!(nearest("[[[0,0],[1,1]]]", 3, "dtw", 1).is_err());
}

#[test]
fn synthetic_set_is_seeded() {
    let a = synth_set(5, 2000.0, 3).unwrap();
    assert_eq!(a, synth_set(5, 2000.0, 3).unwrap());
    assert_ne!(a, synth_set(5, 2000.0, 4).unwrap());
    let v: Value = serde_json::from_str(&a).unwrap();
    let paths = v.as_array().unwrap();
    assert_eq!(paths.len(), 5);
    assert!(paths.iter().all(|p| p.as_array().unwrap().len() >= 20));
}

#[test]
fn nearest_is_sorted_and_excludes_query() {
    let set = synth_set(12, 2000.0, 1).unwrap();
    let hits: Value = serde_json::from_str(&nearest(&set, 4, "dfd", 5).unwrap()).unwrap();
    let hits = hits.as_array().unwrap();
    assert_eq!(hits.len(), 5);
    assert!(hits.iter().all(|h| h["index"] != 4));
    let d: Vec<f64> = hits.iter().map(|h| h["distance"].as_f64().unwrap()).collect();
    assert!(d.windows(2).all(|w| w[0] <= w[1]));
}
