//! Variance-preserving diffusion: schedules, forward noising, classifier-free
//! guidance and ancestral DDPM sampling with x0-prediction.

mod net;
mod oracle;

pub use net::{NetCond, NetDenoiser, NetDenoiserConfig, NetGrads};
pub use oracle::{analytic_denoiser, GmmOracle, OracleCond};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Endpoint margin on the schedule angle `phi`, where `alpha = cos(phi)` and
/// `sigma = sin(phi)`: `phi` stays inside `[EPS, pi/2 - EPS]`.
pub const SCHEDULE_EPS: f64 = 1e-5;

/// Per-timestep weight `omega_t` of the denoising loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossWeighting {
    /// `omega_t = 1`.
    #[default]
    Uniform,
    /// `omega_t = 1 / c_out(t)^2`: uniform error in network-output units, so
    /// low-noise steps are not drowned out by high-noise ones.
    Output,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// `alpha_t = cos(t/T * pi/2)`.
    Cosine,
    /// `alpha_t^2 = 1 - t/T`.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    /// Number of diffusion steps `T`; arrays hold `T + 1` entries.
    pub steps: usize,
    pub alphas: Vec<f64>,
    pub sigmas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, steps: usize) -> Result<Self> {
        make_schedule(kind, steps)
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }

    pub fn snr(&self, t: usize) -> f64 {
        (self.alphas[t] / self.sigmas[t]).powi(2)
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps {
            return Err(Error::contract(format!(
                "timestep {t} outside [0, {}]",
                self.steps
            )));
        }
        Ok(())
    }

    /// `(alpha_{t|s}, sigma^2_{t|s})` of the forward transition from `s` to `t >= s`.
    pub fn transition(&self, s: usize, t: usize) -> (f64, f64) {
        let a = self.alphas[t] / self.alphas[s];
        let var = self.sigmas[t].powi(2) - a * a * self.sigmas[s].powi(2);
        (a, var.max(0.0))
    }

    /// Mean coefficients `(on x_t, on x0)` and variance of `q(x_s | x_t, x0)`.
    pub fn posterior(&self, s: usize, t: usize) -> (f64, f64, f64) {
        let (a_ts, var_ts) = self.transition(s, t);
        let st2 = self.sigmas[t].powi(2);
        let ss2 = self.sigmas[s].powi(2);
        (
            a_ts * ss2 / st2,
            self.alphas[s] * var_ts / st2,
            var_ts * ss2 / st2,
        )
    }

    /// `steps + 1` strictly decreasing timesteps from `T` down to 0.
    pub fn sampling_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 || steps > self.steps {
            return Err(Error::contract(format!(
                "sampling steps must lie in [1, {}], got {steps}",
                self.steps
            )));
        }
        Ok((0..=steps)
            .map(|i| {
                let frac = (steps - i) as f64 / steps as f64;
                (frac * self.steps as f64).round() as usize
            })
            .collect())
    }
}

pub fn make_schedule(kind: ScheduleKind, steps: usize) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(Error::contract("schedule needs T >= 1"));
    }
    let half_pi = std::f64::consts::FRAC_PI_2;
    let angles: Vec<f64> = (0..=steps)
        .map(|t| {
            let u = t as f64 / steps as f64;
            let phi = match kind {
                ScheduleKind::Cosine => u * half_pi,
                ScheduleKind::Linear => (1.0 - u).max(0.0).sqrt().acos(),
            };
            phi.clamp(SCHEDULE_EPS, half_pi - SCHEDULE_EPS)
        })
        .collect();
    let alphas = angles.iter().map(|p| p.cos()).collect();
    let sigmas = angles.iter().map(|p| p.sin()).collect();
    Ok(NoiseSchedule {
        kind,
        steps,
        alphas,
        sigmas,
    })
}

/// `x_t = alpha_t * x0 + sigma_t * noise`.
pub fn q_sample(x0: &[f64], t: usize, noise: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_t(t)?;
    if noise.len() != x0.len() {
        return Err(Error::contract("noise and data dimensions differ"));
    }
    let (a, s) = (sched.alpha(t), sched.sigma(t));
    Ok(x0.iter().zip(noise).map(|(x, e)| a * x + s * e).collect())
}

/// A model of `E[x0 | x_t, condition]`.
pub trait Denoiser: Sync {
    type Cond: Clone + Send + Sync;

    fn dim(&self) -> usize;

    fn predict(&self, x_t: &[f64], t: usize, cond: &Self::Cond) -> Result<Vec<f64>>;

    /// The condition used by the unconditional guidance branch. With
    /// `drop_latent` the latent is removed together with the class.
    fn null_condition(&self, cond: &Self::Cond, drop_latent: bool) -> Self::Cond;

    /// Predictions for `conds.len()` stacked states sharing timestep `t`.
    fn predict_batch(&self, x_t: &[f64], t: usize, conds: &[&Self::Cond]) -> Result<Vec<f64>> {
        let d = self.dim();
        if x_t.len() != d * conds.len() {
            return Err(Error::contract("batch states do not match the number of conditions"));
        }
        let mut out = Vec::with_capacity(x_t.len());
        for (x, c) in x_t.chunks_exact(d).zip(conds) {
            out.extend(self.predict(x, t, c)?);
        }
        Ok(out)
    }
}

/// `gamma * (x(c) - x(null)) + x(null)`.
pub fn cfg_predict<D: Denoiser + ?Sized>(
    den: &D,
    x_t: &[f64],
    t: usize,
    cond: &D::Cond,
    gamma: f64,
    drop_latent: bool,
) -> Result<Vec<f64>> {
    check_gamma(gamma)?;
    if gamma == 1.0 {
        return den.predict(x_t, t, cond);
    }
    let null = den.null_condition(cond, drop_latent);
    let uncond = den.predict(x_t, t, &null)?;
    if gamma == 0.0 {
        return Ok(uncond);
    }
    let c = den.predict(x_t, t, cond)?;
    Ok(c.iter()
        .zip(&uncond)
        .map(|(c, u)| gamma * (c - u) + u)
        .collect())
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::contract(format!("guidance must be finite and >= 0, got {gamma}")));
    }
    Ok(())
}

/// [`cfg_predict`] over stacked states sharing timestep `t`.
pub fn cfg_predict_batch<D: Denoiser + ?Sized>(
    den: &D,
    x_t: &[f64],
    t: usize,
    conds: &[&D::Cond],
    gamma: f64,
    drop_latent: bool,
) -> Result<Vec<f64>> {
    check_gamma(gamma)?;
    if gamma == 1.0 {
        return den.predict_batch(x_t, t, conds);
    }
    let nulls: Vec<D::Cond> = conds.iter().map(|c| den.null_condition(c, drop_latent)).collect();
    let null_refs: Vec<&D::Cond> = nulls.iter().collect();
    let uncond = den.predict_batch(x_t, t, &null_refs)?;
    if gamma == 0.0 {
        return Ok(uncond);
    }
    let c = den.predict_batch(x_t, t, conds)?;
    Ok(c.iter()
        .zip(&uncond)
        .map(|(c, u)| gamma * (c - u) + u)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub guidance: f64,
    pub steps: usize,
    pub seed: u64,
    pub latent_conditioning: bool,
    pub cfg_drops_latent: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            guidance: 1.0,
            steps: 250,
            seed: 0,
            latent_conditioning: false,
            cfg_drops_latent: true,
        }
    }
}

/// Per-chain generator: stream `chain` of the master seed.
pub fn chain_rng(master_seed: u64, chain: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(chain);
    rng
}

/// Chains advanced together by [`ddpm_sample`]; fixed so results do not
/// depend on the thread count.
pub const SAMPLE_BLOCK: usize = 128;

/// Ancestral DDPM over a block of chains, chain `i` drawing its noise from
/// `rngs[i]` only. `clip` bounds the x0 estimate per dimension.
pub fn ddpm_block<D: Denoiser + ?Sized>(
    den: &D,
    conds: &[&D::Cond],
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    clip: Option<&[(f64, f64)]>,
    rngs: &mut [ChaCha8Rng],
) -> Result<Vec<Vec<f64>>> {
    let d = den.dim();
    if rngs.len() != conds.len() {
        return Err(Error::contract("one generator per chain is required"));
    }
    if let Some(b) = clip {
        if b.len() != d {
            return Err(Error::contract("clip box dimension differs from data dimension"));
        }
    }
    let ts = sched.sampling_timesteps(cfg.steps)?;
    let mut x: Vec<f64> = Vec::with_capacity(d * conds.len());
    for rng in rngs.iter_mut() {
        x.extend((0..d).map(|_| -> f64 { StandardNormal.sample(rng) }));
    }
    for (step, pair) in ts.windows(2).enumerate() {
        let (t, s) = (pair[0], pair[1]);
        let mut x0 = cfg_predict_batch(den, &x, t, conds, cfg.guidance, cfg.cfg_drops_latent)?;
        if let Some(b) = clip {
            for row in x0.chunks_exact_mut(d) {
                for (v, &(lo, hi)) in row.iter_mut().zip(b) {
                    *v = v.clamp(lo, hi);
                }
            }
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("x0 estimate at sampling step {step} (t = {t})")));
        }
        if s == 0 {
            return Ok(x0.chunks_exact(d).map(<[f64]>::to_vec).collect());
        }
        let (cx, c0, var) = sched.posterior(s, t);
        let sd = var.sqrt();
        for ((xr, x0r), rng) in x.chunks_exact_mut(d).zip(x0.chunks_exact(d)).zip(rngs.iter_mut()) {
            for (xi, x0i) in xr.iter_mut().zip(x0r) {
                let z: f64 = StandardNormal.sample(rng);
                *xi = cx * *xi + c0 * x0i + sd * z;
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("state at sampling step {step} (t = {s})")));
        }
    }
    unreachable!("timesteps always end at 0")
}

/// One chain; same arithmetic as a single-chain block.
pub fn ddpm_chain<D: Denoiser + ?Sized>(
    den: &D,
    cond: &D::Cond,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    clip: Option<&[(f64, f64)]>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let mut rngs = [rng.clone()];
    let mut out = ddpm_block(den, &[cond], cfg, sched, clip, &mut rngs)?;
    *rng = rngs[0].clone();
    Ok(out.pop().expect("one chain"))
}

/// Runs one chain per condition; chain `i` draws from stream `i` of `cfg.seed`.
pub fn ddpm_sample<D: Denoiser + ?Sized>(
    den: &D,
    conds: &[D::Cond],
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    clip: Option<&[(f64, f64)]>,
) -> Result<Vec<Vec<f64>>> {
    let run = |(b, block): (usize, &[D::Cond])| {
        let first = b * SAMPLE_BLOCK;
        let mut rngs: Vec<ChaCha8Rng> = (0..block.len())
            .map(|i| chain_rng(cfg.seed, (first + i) as u64))
            .collect();
        let refs: Vec<&D::Cond> = block.iter().collect();
        ddpm_block(den, &refs, cfg, sched, clip, &mut rngs)
    };
    #[cfg(feature = "parallel")]
    let blocks: Vec<Vec<Vec<f64>>> = {
        use rayon::prelude::*;
        conds
            .par_chunks(SAMPLE_BLOCK)
            .enumerate()
            .map(run)
            .collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let blocks: Vec<Vec<Vec<f64>>> = conds
        .chunks(SAMPLE_BLOCK)
        .enumerate()
        .map(run)
        .collect::<Result<_>>()?;
    Ok(blocks.into_iter().flatten().collect())
}
