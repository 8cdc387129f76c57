//! Learned x0-predictor: an MLP over the scaled noisy state, time features,
//! a class embedding and a latent conditioning vector.
//!
//! The prediction is preconditioned so the network only models the residual:
//!
//! `x0_hat = c_skip(t) * x_t + c_out(t) * F([c_in(t) * x_t, time(t), class, latent])`
//!
//! with `c_skip = a v / (a^2 v + s^2)`, `c_out = s sqrt(v) / sqrt(a^2 v + s^2)`,
//! `c_in = 1 / sqrt(a^2 v + s^2)` and `v` the per-dimension data variance.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Denoiser, LossWeighting, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nnet::{Activation, Mlp, Params};

/// Frequencies of the sinusoidal time features (in units of pi * t / T).
const TIME_FREQS: [f64; 4] = [1.0, 2.0, 4.0, 8.0];
pub const TIME_FEATURES: usize = 2 + 2 * TIME_FREQS.len();

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetDenoiserConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub class_embed_dim: usize,
    pub latent_dim: usize,
}

impl Default for NetDenoiserConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            class_embed_dim: 4,
            latent_dim: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetDenoiser {
    pub net: Mlp,
    /// `n_classes + 1` rows; the last row is the learned null condition.
    pub class_embedding: Vec<Vec<f64>>,
    /// Stand-in for an absent latent (null branch, or a model without latents).
    pub null_latent: Vec<f64>,
    pub data_var: Vec<f64>,
    pub schedule: NoiseSchedule,
}

/// Condition for [`NetDenoiser`]: `None` fields select the learned null rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetCond {
    pub class: Option<usize>,
    pub latent: Option<Vec<f64>>,
}

impl NetCond {
    pub fn null() -> Self {
        Self {
            class: None,
            latent: None,
        }
    }

    pub fn class(class: usize) -> Self {
        Self {
            class: Some(class),
            latent: None,
        }
    }
}

/// Gradients of a batch loss: parameter gradients plus one latent-input
/// gradient per sample (`None` where the null latent was used).
#[derive(Debug, Clone)]
pub struct NetGrads {
    pub params: NetDenoiser,
    pub latent_inputs: Vec<Option<Vec<f64>>>,
}

struct Precond {
    skip: Vec<f64>,
    out: Vec<f64>,
    input: Vec<f64>,
}

impl NetDenoiser {
    pub fn new<R: Rng + ?Sized>(
        cfg: &NetDenoiserConfig,
        dim: usize,
        n_classes: usize,
        data_var: Vec<f64>,
        schedule: NoiseSchedule,
        rng: &mut R,
    ) -> Result<Self> {
        if data_var.len() != dim || data_var.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::contract("data variance must be positive per dimension"));
        }
        let in_dim = dim + TIME_FEATURES + cfg.class_embed_dim + cfg.latent_dim;
        let mut dims = vec![in_dim];
        dims.extend(&cfg.hidden);
        dims.push(dim);
        let net = Mlp::new(&dims, cfg.activation, rng)?;
        let emb = Normal::new(0.0, 0.5).expect("valid normal");
        let class_embedding = (0..=n_classes)
            .map(|_| (0..cfg.class_embed_dim).map(|_| emb.sample(rng)).collect())
            .collect();
        let null_latent = (0..cfg.latent_dim).map(|_| emb.sample(rng)).collect();
        Ok(Self {
            net,
            class_embedding,
            null_latent,
            data_var,
            schedule,
        })
    }

    pub fn data_dim(&self) -> usize {
        self.data_var.len()
    }

    pub fn n_classes(&self) -> usize {
        self.class_embedding.len() - 1
    }

    pub fn latent_dim(&self) -> usize {
        self.null_latent.len()
    }

    fn class_row(&self, class: Option<usize>) -> Result<usize> {
        match class {
            None => Ok(self.n_classes()),
            Some(c) if c < self.n_classes() => Ok(c),
            Some(c) => Err(Error::contract(format!(
                "class {c} out of range for {} classes",
                self.n_classes()
            ))),
        }
    }

    fn precond(&self, t: usize) -> Precond {
        let (a, s) = (self.schedule.alpha(t), self.schedule.sigma(t));
        let mut p = Precond {
            skip: Vec::with_capacity(self.data_dim()),
            out: Vec::with_capacity(self.data_dim()),
            input: Vec::with_capacity(self.data_dim()),
        };
        for &v in &self.data_var {
            let den = a * a * v + s * s;
            p.skip.push(a * v / den);
            p.out.push(s * v.sqrt() / den.sqrt());
            p.input.push(1.0 / den.sqrt());
        }
        p
    }

    fn time_features(&self, t: usize) -> [f64; TIME_FEATURES] {
        let u = t as f64 / self.schedule.steps as f64;
        let mut f = [0.0; TIME_FEATURES];
        f[0] = u;
        // Log noise level resolves the low-noise end, where the posterior changes fastest.
        f[1] = 0.25 * (self.schedule.sigma(t) / self.schedule.alpha(t)).ln();
        for (i, w) in TIME_FREQS.iter().enumerate() {
            let (s, c) = (std::f64::consts::PI * u * w).sin_cos();
            f[2 + 2 * i] = s;
            f[3 + 2 * i] = c;
        }
        f
    }

    fn latent_of<'a>(&'a self, cond: &'a NetCond) -> Result<&'a [f64]> {
        match &cond.latent {
            Some(z) if z.len() != self.latent_dim() => Err(Error::contract(format!(
                "latent vector has {} entries, expected {}",
                z.len(),
                self.latent_dim()
            ))),
            Some(z) => Ok(z),
            None => Ok(&self.null_latent),
        }
    }

    /// Appends one network input row.
    fn push_input(&self, out: &mut Vec<f64>, x_t: &[f64], t: usize, cond: &NetCond, p: &Precond) -> Result<()> {
        if x_t.len() != self.data_dim() {
            return Err(Error::contract(format!(
                "denoiser expects {} dims, got {}",
                self.data_dim(),
                x_t.len()
            )));
        }
        let row = self.class_row(cond.class)?;
        let latent = self.latent_of(cond)?;
        out.extend(x_t.iter().zip(&p.input).map(|(x, c)| x * c));
        out.extend(self.time_features(t));
        out.extend(&self.class_embedding[row]);
        out.extend(latent);
        Ok(())
    }

    /// Batch loss `mean_i omega_t ||x0_hat_i - x0_i||^2` with gradients.
    ///
    /// `x_t[i]` must have been produced from `x0[i]` at timestep `t[i]`.
    pub fn loss_and_grads(
        &self,
        x0: &[&[f64]],
        x_t: &[Vec<f64>],
        t: &[usize],
        conds: &[NetCond],
        weighting: LossWeighting,
    ) -> Result<(f64, NetGrads)> {
        let n = x0.len();
        if n == 0 {
            return Err(Error::contract("denoising loss needs a non-empty batch"));
        }
        if x_t.len() != n || t.len() != n || conds.len() != n {
            return Err(Error::contract("batch fields have different lengths"));
        }
        let d = self.data_dim();
        let mut input = Vec::with_capacity(n * self.net.input_dim());
        let mut pre = Vec::with_capacity(n);
        for i in 0..n {
            self.schedule.check_t(t[i])?;
            if x0[i].len() != d {
                return Err(Error::contract("clean sample has the wrong dimension"));
            }
            let p = self.precond(t[i]);
            self.push_input(&mut input, &x_t[i], t[i], &conds[i], &p)?;
            pre.push(p);
        }
        let trace = self.net.forward_batch_trace(&input, n)?;
        let f = trace.output();
        let mut upstream = vec![0.0; n * d];
        let mut loss = 0.0;
        for i in 0..n {
            let p = &pre[i];
            for j in 0..d {
                let k = i * d + j;
                match weighting {
                    LossWeighting::Uniform => {
                        let r = p.skip[j] * x_t[i][j] + p.out[j] * f[k] - x0[i][j];
                        loss += r * r;
                        upstream[k] = 2.0 * r / n as f64 * p.out[j];
                    }
                    // Residual taken in output units so the cancellation at
                    // small t does not involve the network output.
                    LossWeighting::Output => {
                        let r = f[k] - (x0[i][j] - p.skip[j] * x_t[i][j]) / p.out[j];
                        loss += r * r;
                        upstream[k] = 2.0 * r / n as f64;
                    }
                }
            }
        }
        let mut grads = self.clone();
        grads.zero();
        let dx = self.net.backward_batch_into(&trace, &upstream, &mut grads.net)?;
        let in_dim = self.net.input_dim();
        let off = d + TIME_FEATURES;
        let e_c = self.class_embedding[0].len();
        let mut latent_inputs = Vec::with_capacity(n);
        for (i, cond) in conds.iter().enumerate() {
            let dxi = &dx[i * in_dim..(i + 1) * in_dim];
            let row = self.class_row(cond.class)?;
            for (g, v) in grads.class_embedding[row].iter_mut().zip(&dxi[off..off + e_c]) {
                *g += v;
            }
            let dz = &dxi[off + e_c..];
            if cond.latent.is_some() {
                latent_inputs.push(Some(dz.to_vec()));
            } else {
                for (g, v) in grads.null_latent.iter_mut().zip(dz) {
                    *g += v;
                }
                latent_inputs.push(None);
            }
        }
        Ok((
            loss / n as f64,
            NetGrads {
                params: grads,
                latent_inputs,
            },
        ))
    }
}

impl Denoiser for NetDenoiser {
    type Cond = NetCond;

    fn dim(&self) -> usize {
        self.data_dim()
    }

    fn predict(&self, x_t: &[f64], t: usize, cond: &NetCond) -> Result<Vec<f64>> {
        self.predict_batch(x_t, t, &[cond])
    }

    fn predict_batch(&self, x_t: &[f64], t: usize, conds: &[&NetCond]) -> Result<Vec<f64>> {
        let d = self.data_dim();
        if x_t.len() != d * conds.len() {
            return Err(Error::contract(format!(
                "denoiser expects {} values for {} states, got {}",
                d * conds.len(),
                conds.len(),
                x_t.len()
            )));
        }
        self.schedule.check_t(t)?;
        let p = self.precond(t);
        let mut input = Vec::with_capacity(conds.len() * self.net.input_dim());
        for (x, c) in x_t.chunks_exact(d).zip(conds) {
            self.push_input(&mut input, x, t, c, &p)?;
        }
        let f = self.net.forward_batch(&input, conds.len())?;
        Ok(x_t
            .iter()
            .zip(&f)
            .enumerate()
            .map(|(k, (x, fk))| {
                let j = k % d;
                p.skip[j] * x + p.out[j] * fk
            })
            .collect())
    }

    fn null_condition(&self, cond: &NetCond, drop_latent: bool) -> NetCond {
        NetCond {
            class: None,
            latent: if drop_latent { None } else { cond.latent.clone() },
        }
    }
}

impl Params for NetDenoiser {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v = self.net.tensors();
        v.extend(self.class_embedding.iter().map(|r| r.as_slice()));
        v.push(&self.null_latent);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.net.tensors_mut();
        v.extend(self.class_embedding.iter_mut().map(|r| r.as_mut_slice()));
        v.push(&mut self.null_latent);
        v
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.net.tensor_names().into_iter().map(|n| format!("denoiser.{n}")).collect();
        let last = self.class_embedding.len() - 1;
        v.extend((0..=last).map(|i| {
            if i == last {
                "denoiser.class_embedding.null".to_string()
            } else {
                format!("denoiser.class_embedding.{i}")
            }
        }));
        v.push("denoiser.null_latent".into());
        v
    }
}
