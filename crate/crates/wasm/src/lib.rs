//! Three browser operations over the exact mixture score, so nothing needs
//! training: a guidance comparison, the prior temperature curve and the box
//! token round trip. Each returns a JSON string for the page to draw.

use modeprior::data::{toy_gmm_unequal, GmmSpec};
use modeprior::diffusion::{ddpm_sample, make_schedule, GmmOracle, OracleCond, SamplerConfig, ScheduleKind};
use modeprior::latents::prior::{entropy, TabularPrior};
use modeprior::latents::{decode_bbox, encode_bbox, BboxParams, LatentContent, Vocab, VocabSpec};
use modeprior::metrics::minority_fraction;
use rand::Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

#[derive(Serialize)]
struct Mode {
    label: String,
    class: usize,
    weight: f64,
    mean: Vec<f64>,
}

#[derive(Serialize)]
struct Panel {
    points: Vec<[f64; 3]>,
    minority: f64,
}

#[derive(Serialize)]
struct GuidanceView {
    modes: Vec<Mode>,
    baseline: Panel,
    latent: Panel,
}

fn modes(g: &GmmSpec) -> Vec<Mode> {
    g.components
        .iter()
        .enumerate()
        .map(|(k, c)| Mode {
            label: g.mode_label(k),
            class: c.class,
            weight: c.weight,
            mean: c.mean.clone(),
        })
        .collect()
}

/// A mode drawn from the true within-class weights, as a perfect prior would.
fn draw_mode<R: Rng>(g: &GmmSpec, class: usize, rng: &mut R) -> usize {
    let ks = g.modes_of_class(class);
    let w: Vec<f64> = ks.iter().map(|&k| g.components[k].weight).collect();
    let mut u = rng.random::<f64>() * w.iter().sum::<f64>();
    for (k, wk) in ks.iter().zip(&w) {
        if u < *wk {
            return *k;
        }
        u -= wk;
    }
    *ks.last().unwrap()
}

fn panel(g: &GmmSpec, oracle: &GmmOracle, conds: &[OracleCond], cfg: &SamplerConfig) -> Result<Panel, JsError> {
    let sched = make_schedule(ScheduleKind::Cosine, 1000).map_err(js)?;
    let xs = ddpm_sample(oracle, conds, cfg, &sched, None).map_err(js)?;
    let labeled: Vec<(Vec<f64>, usize)> = xs.iter().enumerate().map(|(i, x)| (x.clone(), i % 2)).collect();
    Ok(Panel {
        minority: minority_fraction(&labeled, g).map_err(js)?,
        points: labeled.iter().map(|(x, c)| [x[0], x[1], *c as f64]).collect(),
    })
}

/// Samples `n` points per variant at guidance `gamma` with the exact score of
/// the unequal four-mode mixture: class conditioning against mode conditioning.
#[wasm_bindgen]
pub fn guidance_demo(gamma: f64, n: usize, steps: usize, seed: u64) -> Result<String, JsError> {
    if !(0.0..=20.0).contains(&gamma) || n == 0 || n > 5000 || steps == 0 || steps > 1000 {
        return Err(JsError::new("need 0 <= gamma <= 20, 1 <= n <= 5000 and 1 <= steps <= 1000"));
    }
    let g = toy_gmm_unequal();
    let oracle = GmmOracle::new(g.clone(), make_schedule(ScheduleKind::Cosine, 1000).map_err(js)?);
    let mut rng = modeprior::train::stream_rng(seed, 0);
    let base: Vec<OracleCond> = (0..n).map(|i| OracleCond::Class(i % 2)).collect();
    let lat: Vec<OracleCond> = (0..n).map(|i| OracleCond::Mode(draw_mode(&g, i % 2, &mut rng))).collect();
    let cfg = |latent: bool| SamplerConfig {
        guidance: gamma,
        steps,
        seed,
        latent_conditioning: latent,
        cfg_drops_latent: true,
    };
    let view = GuidanceView {
        modes: modes(&g),
        baseline: panel(&g, &oracle, &base, &cfg(false))?,
        latent: panel(&g, &oracle, &lat, &cfg(true))?,
    };
    serde_json::to_string(&view).map_err(js)
}

#[derive(Serialize)]
struct PriorView {
    tokens: Vec<String>,
    probs: Vec<f64>,
    entropy: f64,
    curve: Vec<[f64; 2]>,
}

/// First-token distribution of a text-latent prior fit to `count_a` and
/// `count_b` examples of the two class-0 modes, sharpened or flattened by `tau`.
#[wasm_bindgen]
pub fn prior_demo(count_a: u32, count_b: u32, smoothing: f64, tau: f64) -> Result<String, JsError> {
    let vocab = Vocab::new(VocabSpec {
        modes: ["mode_0A", "mode_0B", "mode_1A", "mode_1B"].map(String::from).to_vec(),
        numeric: false,
        vokens: 0,
    })
    .map_err(js)?;
    let mut prior = TabularPrior::new(vocab.len(), 4, smoothing).map_err(js)?;
    for (mode, count) in [(0, count_a), (1, count_b)] {
        let seq = LatentContent::Text { mode }.encode(&vocab).map_err(js)?;
        for _ in 0..count {
            prior.observe(0, &seq).map_err(js)?;
        }
    }
    let probs = prior.next_probs_tempered(0, &[], tau).map_err(js)?;
    let curve = (0..=60)
        .map(|i| {
            let t = 0.05 * 10f64.powf(i as f64 / 30.0);
            prior.next_probs_tempered(0, &[], t).map(|p| [t, entropy(&p)])
        })
        .collect::<modeprior::Result<Vec<_>>>()
        .map_err(js)?;
    let view = PriorView {
        tokens: (1..vocab.len() as u32).map(|id| vocab.surface(id).unwrap_or("?").to_string()).collect(),
        entropy: entropy(&probs),
        probs,
        curve,
    };
    serde_json::to_string(&view).map_err(js)
}

#[derive(Serialize)]
struct BoxView {
    tokens: Vec<String>,
    decoded: [u32; 4],
}

/// Encodes a box on the 0..=1000 grid into tokens and parses it back.
#[wasm_bindgen]
pub fn box_demo(x1: u32, y1: u32, x2: u32, y2: u32) -> Result<String, JsError> {
    let vocab = Vocab::new(VocabSpec {
        modes: Vec::new(),
        numeric: true,
        vokens: 0,
    })
    .map_err(js)?;
    let b = BboxParams::new(x1, y1, x2, y2).map_err(js)?;
    let toks = encode_bbox(&b, &vocab).map_err(js)?;
    let back = decode_bbox(&toks, &vocab).map_err(js)?;
    let view = BoxView {
        tokens: toks.iter().map(|&t| vocab.surface(t).unwrap_or("?").to_string()).collect(),
        decoded: [back.x1, back.y1, back.x2, back.y2],
    };
    serde_json::to_string(&view).map_err(js)
}
