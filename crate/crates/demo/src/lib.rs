//! Browser bindings: measure two drawn paths, generate a synthetic set and
//! query it for nearest neighbours.
//!
//! Paths cross the boundary as JSON arrays of `[x, y]` pairs in meters.

use serde_json::{json, Value};
use trajsim::geo::{synth_generate, Point, SynthConfig};
use trajsim::measures::MeasureKind;
use wasm_bindgen::prelude::*;

fn parse_path(text: &str) -> Result<Vec<Point>, String> {
    let raw: Vec<[f64; 2]> = serde_json::from_str(text).map_err(|e| format!("bad path: {e}"))?;
    Ok(raw.into_iter().map(|[x, y]| Point::new(x, y)).collect())
}

fn parse_set(text: &str) -> Result<Vec<Vec<Point>>, String> {
    let raw: Vec<Vec<[f64; 2]>> = serde_json::from_str(text).map_err(|e| format!("bad set: {e}"))?;
    Ok(raw
        .into_iter()
        .map(|p| p.into_iter().map(|[x, y]| Point::new(x, y)).collect())
        .collect())
}

fn path_json(points: &[Point]) -> Value {
    points.iter().map(|p| json!([p.x, p.y])).collect()
}

pub fn parse_measure(tag: &str) -> Result<MeasureKind, String> {
    MeasureKind::ALL
        .into_iter()
        .find(|k| k.tag() == tag)
        .ok_or_else(|| format!("unknown measure {tag:?}"))
}

/// All three distances between two paths, keyed by measure tag.
pub fn measure_pair(a: &str, b: &str) -> Result<String, String> {
    let (a, b) = (parse_path(a)?, parse_path(b)?);
    let mut out = serde_json::Map::new();
    for kind in MeasureKind::ALL {
        let d = kind.eval(&a, &b).map_err(|e| e.to_string())?;
        out.insert(kind.tag().to_owned(), json!(d));
    }
    Ok(Value::Object(out).to_string())
}

/// Random-walk trajectories inside a `size`-meter square centred on the origin.
pub fn synth_set(count: usize, size: f64, seed: u64) -> Result<String, String> {
    let h = size / 2.0;
    let cfg = SynthConfig {
        count,
        bbox: [-h, -h, h, h],
        step_mu: (size / 100.0).ln(),
        seed,
        ..SynthConfig::default()
    };
    let trajs = synth_generate(&cfg).map_err(|e| e.to_string())?;
    let paths: Vec<Value> = trajs.iter().map(|t| path_json(&t.points)).collect();
    Ok(Value::Array(paths).to_string())
}

/// The `k` members of `set` closest to `set[query]` under `measure`, nearest
/// first, as `{index, distance}` objects.
pub fn nearest(set: &str, query: usize, measure: &str, k: usize) -> Result<String, String> {
    let set = parse_set(set)?;
    let kind = parse_measure(measure)?;
    let q = set.get(query).ok_or_else(|| format!("query {query} out of range"))?;
    let mut scored = Vec::with_capacity(set.len());
    for (i, t) in set.iter().enumerate() {
        if i != query {
            scored.push((i, kind.eval(q, t).map_err(|e| e.to_string())?));
        }
    }
    scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let hits: Vec<Value> = scored
        .into_iter()
        .take(k)
        .map(|(index, distance)| json!({ "index": index, "distance": distance }))
        .collect();
    Ok(Value::Array(hits).to_string())
}

#[wasm_bindgen(js_name = measurePair)]
pub fn measure_pair_js(a: &str, b: &str) -> Result<String, JsValue> {
    measure_pair(a, b).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = synthSet)]
pub fn synth_set_js(count: usize, size: f64, seed: u32) -> Result<String, JsValue> {
    synth_set(count, size, u64::from(seed)).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = nearest)]
pub fn nearest_js(set: &str, query: usize, measure: &str, k: usize) -> Result<String, JsValue> {
    nearest(set, query, measure, k).map_err(|e| JsValue::from_str(&e))
}
