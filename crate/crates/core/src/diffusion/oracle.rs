//! Exact posterior-mean denoiser for diagonal Gaussian mixtures.

use serde::{Deserialize, Serialize};

use super::{Denoiser, NoiseSchedule};
use crate::data::GmmSpec;
use crate::error::{Error, Result};

/// `E[x0 | x_t]` when `x0` is drawn from the components in `subset`
/// (re-weighted by their mixture weights).
///
/// Responsibilities use the noisy marginals `N(alpha mu_k, alpha^2 S_k + sigma^2 I)`;
/// each component contributes its Gaussian posterior mean.
pub fn analytic_denoiser(
    gmm: &GmmSpec,
    x_t: &[f64],
    t: usize,
    sched: &NoiseSchedule,
    subset: &[usize],
) -> Result<Vec<f64>> {
    if subset.is_empty() {
        return Err(Error::contract("analytic denoiser needs a non-empty component subset"));
    }
    sched.check_t(t)?;
    if x_t.len() != gmm.dim() {
        return Err(Error::contract("state dimension differs from mixture dimension"));
    }
    let (a, s2) = (sched.alpha(t), sched.sigma(t).powi(2));
    let mut logs = Vec::with_capacity(subset.len());
    for &k in subset {
        let c = gmm
            .components
            .get(k)
            .ok_or_else(|| Error::contract(format!("component {k} does not exist")))?;
        let mut l = c.weight.ln();
        for ((x, m), v) in x_t.iter().zip(&c.mean).zip(&c.var) {
            let var = a * a * v + s2;
            let d = x - a * m;
            l += -0.5 * d * d / var - 0.5 * var.ln();
        }
        logs.push(l);
    }
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = w.iter().sum();

    let mut out = vec![0.0; x_t.len()];
    for (&k, wk) in subset.iter().zip(&w) {
        let r = wk / total;
        let c = &gmm.components[k];
        for (((o, x), m), v) in out.iter_mut().zip(x_t).zip(&c.mean).zip(&c.var) {
            let gain = a * v / (a * a * v + s2);
            *o += r * (m + gain * (x - a * m));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum OracleCond {
    All,
    Class(usize),
    Mode(usize),
}

/// [`analytic_denoiser`] behind the [`Denoiser`] interface.
#[derive(Debug, Clone)]
pub struct GmmOracle {
    pub gmm: GmmSpec,
    pub schedule: NoiseSchedule,
}

impl GmmOracle {
    pub fn new(gmm: GmmSpec, schedule: NoiseSchedule) -> Self {
        Self { gmm, schedule }
    }

    pub fn subset(&self, cond: &OracleCond) -> Vec<usize> {
        match *cond {
            OracleCond::All => (0..self.gmm.components.len()).collect(),
            OracleCond::Class(c) => self.gmm.modes_of_class(c),
            OracleCond::Mode(k) => vec![k],
        }
    }
}

impl Denoiser for GmmOracle {
    type Cond = OracleCond;

    fn dim(&self) -> usize {
        self.gmm.dim()
    }

    fn predict(&self, x_t: &[f64], t: usize, cond: &OracleCond) -> Result<Vec<f64>> {
        analytic_denoiser(&self.gmm, x_t, t, &self.schedule, &self.subset(cond))
    }

    fn null_condition(&self, cond: &OracleCond, drop_latent: bool) -> OracleCond {
        match cond {
            // A mode pins its class, so keeping the latent keeps the mode.
            OracleCond::Mode(_) if !drop_latent => cond.clone(),
            _ => OracleCond::All,
        }
    }
}
