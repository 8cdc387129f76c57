//! Compares trained branch predictions with the exact mixture posterior per timestep.

use modeprior::data::{toy_gmm_unequal, DatasetSpec};
use modeprior::diffusion::{Denoiser, GmmOracle, NetCond, OracleCond};
use modeprior::latents::LatentSequence;
use modeprior::train::Checkpoint;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> modeprior::Result<()> {
    let path = std::env::args().nth(1).expect("checkpoint path");
    let ck = Checkpoint::load(std::path::Path::new(&path))?;
    let model = &ck.ema;
    let g = toy_gmm_unequal();
    let oracle = GmmOracle::new(g.clone(), model.denoiser.schedule.clone());
    let space = ck.space.as_ref().unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let k = 2usize;
    let class = g.components[k].class;
    let z = LatentSequence::new(space.scheme(), vec![space.vocab().mode_token(k)?, modeprior::latents::EOS]);
    let cond = model.condition(class, Some(&z))?;
    let mu = g.components[k].mean.clone();
    println!("t sigma | slope c_model c_oracle u_model u_oracle | bias c_model-u_model  oracle | guided8 slope model oracle");
    for t in [5, 10, 20, 40, 80, 150, 250, 400, 600, 800] {
        let sched = &model.denoiser.schedule;
        let (a, s) = (sched.alpha(t), sched.sigma(t));
        let n = 2000;
        let mut acc = [0.0f64; 8];
        let mut sxx = 0.0;
        for _ in 0..n {
            let x0: Vec<f64> = mu.iter().map(|m| m + 0.3 * { let e: f64 = StandardNormal.sample(&mut rng); e }).collect();
            let xt: Vec<f64> = x0.iter().map(|v| a * v + s * { let e: f64 = StandardNormal.sample(&mut rng); e }).collect();
            let c = model.denoiser.predict(&xt, t, &cond)?;
            let u = model.denoiser.predict(&xt, t, &NetCond::null())?;
            let co = oracle.predict(&xt, t, &OracleCond::Mode(k))?;
            let uo = oracle.predict(&xt, t, &OracleCond::All)?;
            for i in 0..2 {
                let d = xt[i] / a - mu[i];
                sxx += d * d;
                acc[0] += d * (c[i] - mu[i]);
                acc[1] += d * (co[i] - mu[i]);
                acc[2] += d * (u[i] - mu[i]);
                acc[3] += d * (uo[i] - mu[i]);
                acc[4] += c[i] - u[i];
                acc[5] += co[i] - uo[i];
                acc[6] += d * (8.0 * (c[i] - u[i]) + u[i] - mu[i]);
                acc[7] += d * (8.0 * (co[i] - uo[i]) + uo[i] - mu[i]);
            }
        }
        let m = (2 * n) as f64;
        println!(
            "{t} {s:.3} | {:.3} {:.3} {:.3} {:.3} | {:.4} {:.4} | {:.3} {:.3}",
            acc[0] / sxx, acc[1] / sxx, acc[2] / sxx, acc[3] / sxx, acc[4] / m, acc[5] / m, acc[6] / sxx, acc[7] / sxx
        );
    }
    let _ = DatasetSpec::Gmm(g);
    Ok(())
}
