//! Trains a controlled baseline/latent pair on the unequal toy mixture and
//! prints a guidance sweep. Settings come from environment variables.

use std::time::Instant;

use modeprior::data::{sample_dataset, toy_gmm_unequal, DatasetSpec};
use modeprior::pipeline::{sweep, SweepOptions, DEFAULT_GAMMAS};
use modeprior::train::{train, TrainConfig, Variant};

fn env<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> modeprior::Result<()> {
    let ds = DatasetSpec::Gmm(toy_gmm_unequal());
    let data = sample_dataset(&ds, env("N_DATA", 10_000), env("DATA_SEED", 0))?;
    let hidden: Vec<usize> = std::env::var("HIDDEN")
        .unwrap_or_else(|_| "128,128,128".into())
        .split(',')
        .map(|s| s.parse().expect("hidden sizes"))
        .collect();
    let mut cks = Vec::new();
    let variants = if std::env::var("ONLY_LATENT").is_ok() {
        vec![Variant::Latent]
    } else {
        vec![Variant::Baseline, Variant::Latent]
    };
    for variant in variants {
        let mut cfg = TrainConfig::toy(variant);
        cfg.seed = env("SEED", 0);
        cfg.steps = env("STEPS", 20_000);
        cfg.p_uncond = env("P_UNCOND", 0.1);
        cfg.lr = env("LR", 1e-3);
        cfg.ema_decay = env("EMA", 0.999);
        cfg.denoiser.hidden = hidden.clone();
        cfg.warmup_steps = env("WARMUP", 500);
        cfg.batch_size = env("BATCH", 128);
        if std::env::var("WEIGHT_OUTPUT").is_ok() {
            cfg.loss_weighting = modeprior::diffusion::LossWeighting::Output;
        }
        if std::env::var("SILU").is_ok() {
            cfg.denoiser.activation = modeprior::nnet::Activation::Silu;
        }
        let cache = std::env::var("CK_DIR").ok().map(|d| std::path::PathBuf::from(d).join(format!("{}.json", variant.name())));
        if let Some(ck) = cache.as_ref().filter(|p| p.exists()) {
            cks.push(modeprior::train::Checkpoint::load(ck)?);
            continue;
        }
        let t = Instant::now();
        let out = train(&cfg, &ds, &data, cache.as_deref())?;
        let last = out.log.last().unwrap();
        eprintln!("{} trained in {:.1}s, final l_dm {:.4}", variant.name(), t.elapsed().as_secs_f64(), last.l_dm);
        cks.push(out.checkpoint);
    }
    if cks.len() == 1 {
        use modeprior::pipeline::{evaluate, generate, ChainSource, EvalOptions, SampleRequest};
        for gamma in [1.0, 8.0] {
            let g = generate(&cks[0], &SampleRequest::new(ChainSource::Prior { n: env("N_SAMPLES", 1000), class: None }, gamma, 1))?;
            let r = evaluate(&g.samples, &data, &ds, cks[0].space.as_ref(), &EvalOptions::new(gamma, "latent", 1))?;
            println!("latent g={gamma} recall {:.3} precision {:.3} fd {:.4} cov {:?} minority {:?}", r.recall, r.precision, r.frechet_distance, r.mode_coverage, r.minority_fraction);
        }
        return Ok(());
    }
    let t = Instant::now();
    let res = sweep(
        &cks[0],
        &cks[1],
        &data,
        &SweepOptions {
            gammas: DEFAULT_GAMMAS.to_vec(),
            n: env("N_SAMPLES", 5000),
            seed: env("SAMPLE_SEED", 1),
            steps: 250,
            class: None,
        },
    )?;
    if std::env::var("DIAG").is_ok() {
        use modeprior::pipeline::{generate, ChainSource, SampleRequest};
        for (ck, gamma) in [(&cks[1], 1.0), (&cks[1], 8.0), (&cks[0], 8.0)] {
            let g = generate(ck, &SampleRequest::new(ChainSource::Prior { n: 2000, class: None }, gamma, 5))?;
            for m in 0..4 {
                let pts: Vec<&Vec<f64>> = g.samples.iter().filter(|s| s.assigned_mode == Some(m)).map(|s| &s.x).collect();
                let n = pts.len() as f64;
                let mean: Vec<f64> = (0..2).map(|i| pts.iter().map(|p| p[i]).sum::<f64>() / n).collect();
                let sd: Vec<f64> = (0..2).map(|i| (pts.iter().map(|p| (p[i] - mean[i]).powi(2)).sum::<f64>() / n).sqrt()).collect();
                println!("{} g={gamma} mode {m}: n={} mean {:.3?} sd {:.3?}", ck.model.variant().name(), pts.len(), mean, sd);
            }
        }
    }
    eprintln!("sweep in {:.1}s", t.elapsed().as_secs_f64());
    println!("gamma variant coverage minority recall precision fd adherence");
    for r in &res.reports {
        println!(
            "{} {} {:?} {:.3} {:.3} {:.3} {:.4} {:?}",
            r.gamma,
            r.variant,
            r.mode_coverage,
            r.minority_fraction.unwrap_or(f64::NAN),
            r.recall,
            r.precision,
            r.frechet_distance,
            r.latent_adherence
        );
    }
    Ok(())
}
