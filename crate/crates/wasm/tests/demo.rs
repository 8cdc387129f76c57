use modeprior_wasm::{box_demo, guidance_demo, prior_demo};
use serde_json::Value;

#[test]
fn latent_panel_keeps_the_minority_mode() {
    let v: Value = serde_json::from_str(&guidance_demo(6.0, 400, 100, 3).unwrap()).unwrap();
    assert_eq!(v["modes"].as_array().unwrap().len(), 4);
    assert_eq!(v["baseline"]["points"].as_array().unwrap().len(), 400);
    let (b, l) = (v["baseline"]["minority"].as_f64().unwrap(), v["latent"]["minority"].as_f64().unwrap());
    assert!(l > 0.2 && b < l, "baseline {b} latent {l}");
}

#[test]
fn prior_probabilities_sum_to_one_and_entropy_rises() {
    let v: Value = serde_json::from_str(&prior_demo(70, 30, 0.5, 1.0).unwrap()).unwrap();
    let p: Vec<f64> = v["probs"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let curve = v["curve"].as_array().unwrap();
    let e: Vec<f64> = curve.iter().map(|c| c[1].as_f64().unwrap()).collect();
    assert!(e.windows(2).all(|w| w[0] <= w[1] + 1e-12));
}

#[test]
fn box_round_trips() {
    let v: Value = serde_json::from_str(&box_demo(1, 33, 995, 995).unwrap()).unwrap();
    assert_eq!(v["decoded"], serde_json::json!([1, 33, 995, 995]));
    assert_eq!(v["tokens"][0], "(");
}
