//! WebAssembly bindings for the static demo page. Every export takes plain
//! numbers or JSON text and returns JSON text, so the page needs no glue
//! beyond `JSON.parse`.

use clnet::assignment::{brute_force_assign, hungarian, CostMatrix};
use clnet::boxes::BBox;
use clnet::eval::{froc, recalls, ImageDetections, FPI_BUDGETS};
use clnet::synth::{generate_case, GenConfig, PairedSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn boxes(b: &[BBox]) -> Value {
    b.iter().map(|b| b.to_array().to_vec()).collect()
}

fn case_config(p_occ: f64) -> GenConfig {
    GenConfig {
        p_occ,
        ..GenConfig::default()
    }
}

fn case_json(s: &PairedSample) -> Value {
    let pairs: Vec<Value> = s.pairs.iter().map(|&(c, m)| json!([c, m])).collect();
    json!({
        "seed": s.seed,
        "size": s.img_c.size,
        "cc": s.img_c.pixels,
        "mlo": s.img_m.pixels,
        "gt_cc": boxes(&s.gt_c),
        "gt_mlo": boxes(&s.gt_m),
        "pairs": pairs,
    })
}

/// A synthetic CC/MLO case: pixels row-major in `[0, 1]`, boxes as
/// normalized `[cx, cy, w, h]`, and pairs of per-view box indices where
/// `null` marks a lesion hidden in that view.
#[wasm_bindgen]
pub fn synth_case(seed: u32, p_occ: f64) -> Result<String, JsValue> {
    let s = generate_case(seed as u64, &case_config(p_occ)).map_err(err)?;
    Ok(case_json(&s).to_string())
}

/// Solves a square assignment problem given as a JSON array of rows, and
/// checks the answer against enumeration for n <= 8.
#[wasm_bindgen]
pub fn assign(rows_json: &str) -> Result<String, JsValue> {
    let rows: Vec<Vec<f64>> = serde_json::from_str(rows_json).map_err(err)?;
    let c = CostMatrix::from_rows(&rows).map_err(err)?;
    let h = hungarian(&c).map_err(err)?;
    let check = if c.n() <= 8 {
        let b = brute_force_assign(&c).map_err(err)?;
        json!(c.total(&b.perm))
    } else {
        Value::Null
    };
    Ok(json!({ "perm": h.perm, "total_cost": h.total_cost, "enumerated_cost": check }).to_string())
}

/// FROC of a simulated detector on `images` synthetic views: each lesion is
/// found with probability `hit_rate` at a jittered box, and a Poisson-ish
/// number of false positives with mean `fp_rate` is scattered per image.
#[wasm_bindgen]
pub fn simulated_froc(seed: u32, images: u32, hit_rate: f64, fp_rate: f64) -> Result<String, JsValue> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
    let cfg = case_config(0.15);
    let (mut dets, mut gts) = (Vec::new(), Vec::new());
    for k in 0..images.max(1) {
        let s = generate_case(seed as u64 * 7919 + k as u64, &cfg).map_err(err)?;
        let mut d = ImageDetections::default();
        for g in &s.gt_c {
            if rng.gen_bool(hit_rate.clamp(0.0, 1.0)) {
                let j = 0.2 * g.w;
                d.boxes.push(BBox::new(g.cx + rng.gen_range(-j..=j), g.cy + rng.gen_range(-j..=j), g.w, g.h));
                d.scores.push(rng.gen_range(0.3..1.0));
            }
        }
        let fps = (0..8).filter(|_| rng.gen_bool((fp_rate / 8.0).clamp(0.0, 1.0))).count();
        for _ in 0..fps {
            d.boxes.push(BBox::new(rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), 0.12, 0.12));
            d.scores.push(rng.gen_range(0.0..0.8));
        }
        dets.push(d);
        gts.push(s.gt_c);
    }
    let curve = froc(&dets, &gts, 0.2).map_err(err)?;
    let points: Vec<Value> = curve.points.iter().map(|p| json!([p.fpi, p.recall, p.threshold])).collect();
    let table: Vec<Value> = FPI_BUDGETS.iter().zip(recalls(&curve)).map(|(t, r)| json!([t, r])).collect();
    Ok(json!({ "points": points, "recalls": table }).to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exports_return_json() {
        let c: Value = serde_json::from_str(&synth_case(3, 0.5).unwrap()).unwrap();
        let size = c["size"].as_u64().unwrap() as usize;
        assert_eq!(c["cc"].as_array().unwrap().len(), size * size);

        let a: Value = serde_json::from_str(&assign("[[4,1,3],[2,0,5],[3,2,2]]").unwrap()).unwrap();
        assert_eq!(a["total_cost"], a["enumerated_cost"]);
        assert_eq!(a["total_cost"], 5.0);

        let f: Value = serde_json::from_str(&simulated_froc(1, 20, 0.8, 1.0).unwrap()).unwrap();
        assert_eq!(f["recalls"].as_array().unwrap().len(), 5);
    }
}
