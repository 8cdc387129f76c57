//! Joint training of the latent prior and the latent-conditioned denoiser,
//! plus the class-only baseline trained under identical randomness.
//!
//! Randomness is split into independent ChaCha streams of the run seed so the
//! baseline and latent runs of one seed see the same initial denoiser, the
//! same minibatches, timesteps, noise and dropout mask.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSpec, LabeledSample};
use crate::diffusion::{NetCond, NetDenoiser, NetDenoiserConfig};
use crate::diffusion::{make_schedule, q_sample, LossWeighting, ScheduleKind};
use crate::error::{Error, Result};
use crate::files::write_atomic;
use crate::latents::prior::{check_tokens, pool_embeddings, pool_embeddings_backward};
use crate::latents::{
    ar_nll, fit_tabular_prior, ArPrior, LatentConfig, LatentScheme, LatentSequence, LatentSpace, NeuralPrior,
    NeuralPriorConfig,
};
use crate::nnet::{adam_step, ema_update, AdamState, Params};

const STREAM_DENOISER_INIT: u64 = 0;
const STREAM_PRIOR_INIT: u64 = 1;
const STREAM_BATCHES: u64 = 2;
const STREAM_DROPOUT: u64 = 3;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Denoiser conditioned on the class only.
    Baseline,
    /// Denoiser conditioned on the class and a prior-sampled latent.
    Latent,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Latent => "latent",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "latent" => Ok(Variant::Latent),
            _ => Err(Error::contract(format!("unknown variant {s:?} (expected baseline or latent)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorBackend {
    Tabular,
    Neural,
}

/// Every field is required in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Weight of the prior loss in `L_DM + eta * L_AR`.
    pub eta: f64,
    pub p_uncond: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub ema_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub schedule: ScheduleKind,
    pub timesteps: usize,
    pub loss_weighting: LossWeighting,
    pub denoiser: NetDenoiserConfig,
    pub latent: LatentConfig,
    pub prior_backend: PriorBackend,
    pub neural_prior: NeuralPriorConfig,
    /// Additive smoothing of the tabular prior.
    pub smoothing: f64,
    pub log_every: usize,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
}

impl TrainConfig {
    /// Settings used for the 2D toy mixtures.
    pub fn toy(variant: Variant) -> Self {
        Self {
            variant,
            eta: 1.0,
            p_uncond: 0.1,
            batch_size: 128,
            steps: 20_000,
            lr: 1e-3,
            warmup_steps: 500,
            ema_decay: 0.999,
            clip_norm: 2.0,
            seed: 0,
            schedule: ScheduleKind::Cosine,
            timesteps: 1000,
            loss_weighting: LossWeighting::Uniform,
            denoiser: NetDenoiserConfig::default(),
            latent: LatentConfig::new(LatentScheme::Text),
            prior_backend: PriorBackend::Tabular,
            neural_prior: NeuralPriorConfig::default(),
            smoothing: 1.0,
            log_every: 100,
            checkpoint_every: 0,
        }
    }

    /// Settings of the shipped guidance experiment on the unequal mixture:
    /// a wider denoiser and output-scale loss weighting, without which the
    /// fitted guided branches contract at high guidance.
    pub fn toy_experiment(variant: Variant) -> Self {
        let mut cfg = Self::toy(variant);
        cfg.denoiser.hidden = vec![128, 128, 128];
        cfg.loss_weighting = LossWeighting::Output;
        cfg
    }

    /// Default prior backend for a scheme: tabular for mode labels, neural otherwise.
    pub fn default_backend(scheme: LatentScheme) -> PriorBackend {
        if scheme == LatentScheme::Text {
            PriorBackend::Tabular
        } else {
            PriorBackend::Neural
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.p_uncond) {
            return Err(Error::contract(format!("p_uncond must lie in [0, 1), got {}", self.p_uncond)));
        }
        self.validate_common()
    }

    fn validate_common(&self) -> Result<()> {
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::contract(format!("eta must be finite and >= 0, got {}", self.eta)));
        }
        if self.batch_size == 0 || self.timesteps == 0 || self.log_every == 0 {
            return Err(Error::contract("batch_size, timesteps and log_every must be positive"));
        }
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) || !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::contract("lr and clip_norm must be > 0 and ema_decay in [0, 1]"));
        }
        if self.neural_prior.embed_dim != self.denoiser.latent_dim {
            return Err(Error::contract(format!(
                "prior embedding size {} differs from the denoiser latent size {}",
                self.neural_prior.embed_dim, self.denoiser.latent_dim
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Latent token embeddings owned by the model when the prior has none (tabular prior).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEmbedding {
    pub vocab_size: usize,
    pub dim: usize,
    pub table: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointModel {
    pub denoiser: NetDenoiser,
    /// Absent for the baseline.
    pub prior: Option<ArPrior>,
    pub token_embedding: Option<TokenEmbedding>,
}

impl JointModel {
    pub fn variant(&self) -> Variant {
        if self.prior.is_some() {
            Variant::Latent
        } else {
            Variant::Baseline
        }
    }

    fn embedding_table(&self) -> Option<(&[f64], usize, usize)> {
        match (&self.prior, &self.token_embedding) {
            (Some(ArPrior::Neural(p)), _) => Some((&p.embeddings, p.embed_dim, p.vocab_size)),
            (_, Some(e)) => Some((&e.table, e.dim, e.vocab_size)),
            _ => None,
        }
    }

    fn embedding_grad_table(&mut self) -> Option<(&mut [f64], usize)> {
        match (&mut self.prior, &mut self.token_embedding) {
            (Some(ArPrior::Neural(p)), _) => Some((&mut p.embeddings, p.embed_dim)),
            (_, Some(e)) => Some((&mut e.table, e.dim)),
            _ => None,
        }
    }

    /// Pooled conditioning vector of a latent.
    pub fn embed(&self, seq: &LatentSequence) -> Result<Vec<f64>> {
        let (table, dim, vocab) = self
            .embedding_table()
            .ok_or_else(|| Error::contract("the baseline model has no latent embedding"))?;
        check_tokens(&seq.tokens, vocab)?;
        Ok(pool_embeddings(table, dim, seq))
    }

    /// Denoiser condition for a class and an optional latent.
    pub fn condition(&self, class: usize, latent: Option<&LatentSequence>) -> Result<NetCond> {
        let latent = match (self.variant(), latent) {
            (Variant::Latent, Some(z)) => Some(self.embed(z)?),
            (Variant::Latent, None) => return Err(Error::contract("the latent model needs a latent per sample")),
            (Variant::Baseline, _) => None,
        };
        Ok(NetCond {
            class: Some(class),
            latent,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.zero();
        g
    }
}

impl Params for JointModel {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v = self.denoiser.tensors();
        if let Some(ArPrior::Neural(p)) = &self.prior {
            v.extend(p.tensors());
        }
        if let Some(e) = &self.token_embedding {
            v.push(&e.table);
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.denoiser.tensors_mut();
        if let Some(ArPrior::Neural(p)) = &mut self.prior {
            v.extend(p.tensors_mut());
        }
        if let Some(e) = &mut self.token_embedding {
            v.push(&mut e.table);
        }
        v
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut v = self.denoiser.tensor_names();
        if let Some(ArPrior::Neural(p)) = &self.prior {
            v.extend(p.tensor_names());
        }
        if self.token_embedding.is_some() {
            v.push("latent.embedding".into());
        }
        v
    }
}

/// One minibatch with its diffusion randomness frozen.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub x0: Vec<&'a [f64]>,
    pub class: Vec<usize>,
    pub latent: Vec<Option<&'a LatentSequence>>,
    pub t: Vec<usize>,
    pub noise: Vec<Vec<f64>>,
    /// Condition dropout: `(c, z)` replaced by the null condition.
    pub dropped: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub l_dm: f64,
    pub l_ar: f64,
    pub total: f64,
}

/// `L = L_DM + eta * L_AR` on one batch and its gradient with respect to every
/// trainable tensor of `model`. `L_AR` is the mean per-sequence NLL; a tabular
/// prior reports it without a gradient.
pub fn joint_step(model: &JointModel, batch: &Batch, eta: f64, weighting: LossWeighting) -> Result<(StepLosses, JointModel)> {
    let n = batch.x0.len();
    if n == 0
        || [batch.class.len(), batch.latent.len(), batch.t.len(), batch.noise.len(), batch.dropped.len()]
            .iter()
            .any(|&l| l != n)
    {
        return Err(Error::contract("batch fields must be non-empty and of equal length"));
    }
    if !(eta >= 0.0) {
        return Err(Error::contract("eta must be >= 0"));
    }
    let sched = &model.denoiser.schedule;
    let mut x_t = Vec::with_capacity(n);
    let mut conds = Vec::with_capacity(n);
    for i in 0..n {
        x_t.push(q_sample(batch.x0[i], batch.t[i], &batch.noise[i], sched)?);
        conds.push(if batch.dropped[i] {
            NetCond::null()
        } else {
            model.condition(batch.class[i], batch.latent[i])?
        });
    }
    let (l_dm, dm_grads) = model.denoiser.loss_and_grads(&batch.x0, &x_t, &batch.t, &conds, weighting)?;
    let mut grads = model.zeros_like();
    grads.denoiser = dm_grads.params;

    for (i, dz) in dm_grads.latent_inputs.iter().enumerate() {
        if let (Some(dz), Some(z)) = (dz, batch.latent[i]) {
            let (table, dim) = grads.embedding_grad_table().expect("latent model has embeddings");
            pool_embeddings_backward(table, dim, z, dz);
        }
    }

    let mut l_ar = 0.0;
    if let Some(prior) = &model.prior {
        for i in 0..n {
            let z = batch.latent[i].ok_or_else(|| Error::contract("the latent model needs a latent per sample"))?;
            match (prior, &mut grads.prior) {
                (ArPrior::Neural(p), Some(ArPrior::Neural(g))) => {
                    l_ar += p.nll_and_grads(batch.class[i], z, eta / n as f64, g)?;
                }
                _ => l_ar += ar_nll(prior, batch.class[i], z)?,
            }
        }
        l_ar /= n as f64;
    }
    Ok((
        StepLosses {
            l_dm,
            l_ar,
            total: l_dm + eta * l_ar,
        },
        grads,
    ))
}

/// Per-dimension population variance, floored to stay positive.
pub fn data_variance(samples: &[LabeledSample]) -> Result<Vec<f64>> {
    let first = samples.first().ok_or_else(|| Error::contract("empty training set"))?;
    let d = first.x.len();
    let n = samples.len() as f64;
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(&s.x) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; d];
    for s in samples {
        for ((acc, v), m) in var.iter_mut().zip(&s.x).zip(&mean) {
            *acc += (v - m) * (v - m) / n;
        }
    }
    Ok(var.into_iter().map(|v| v.max(1e-4)).collect())
}

/// Mean squared error of the best constant x0 predictor: the total data variance.
pub fn constant_predictor_loss(samples: &[LabeledSample]) -> Result<f64> {
    Ok(data_variance(samples)?.iter().sum())
}

/// Latent space and per-sample latents, extracted once before training.
pub fn prepare_latents(
    cfg: &TrainConfig,
    dataset: &DatasetSpec,
    samples: &[LabeledSample],
) -> Result<(LatentSpace, Vec<LatentSequence>)> {
    let xs: Vec<Vec<f64>> = samples.iter().map(|s| s.x.clone()).collect();
    let space = LatentSpace::build(dataset.clone(), cfg.latent.clone(), &xs, cfg.seed)?;
    let latents = samples
        .iter()
        .map(|s| space.extract(&s.x, s.class))
        .collect::<Result<Vec<_>>>()?;
    Ok((space, latents))
}

/// Initial model. The denoiser is drawn from its own stream, so both variants
/// of one seed start from the same denoiser.
pub fn init_model(
    cfg: &TrainConfig,
    dataset: &DatasetSpec,
    data_var: Vec<f64>,
    latents: Option<(&LatentSpace, &[LatentSequence], &[usize])>,
) -> Result<JointModel> {
    let schedule = make_schedule(cfg.schedule, cfg.timesteps)?;
    let mut rng = stream_rng(cfg.seed, STREAM_DENOISER_INIT);
    let denoiser = NetDenoiser::new(
        &cfg.denoiser,
        dataset.dim(),
        dataset.n_classes(),
        data_var,
        schedule,
        &mut rng,
    )?;
    let (prior, token_embedding) = match (cfg.variant, latents) {
        (Variant::Baseline, _) => (None, None),
        (Variant::Latent, None) => return Err(Error::contract("the latent variant needs extracted latents")),
        (Variant::Latent, Some((space, seqs, classes))) => {
            let vocab = space.vocab().len();
            let mut rng = stream_rng(cfg.seed, STREAM_PRIOR_INIT);
            match cfg.prior_backend {
                PriorBackend::Tabular => {
                    let corpus: Vec<(usize, LatentSequence)> =
                        classes.iter().copied().zip(seqs.iter().cloned()).collect();
                    let prior = fit_tabular_prior(&corpus, vocab, cfg.neural_prior.window, cfg.smoothing)?;
                    let dim = cfg.denoiser.latent_dim;
                    let table = (0..vocab * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                    (
                        Some(ArPrior::Tabular(prior)),
                        Some(TokenEmbedding {
                            vocab_size: vocab,
                            dim,
                            table,
                        }),
                    )
                }
                PriorBackend::Neural => {
                    let p = NeuralPrior::new(cfg.neural_prior, vocab, dataset.n_classes(), &mut rng)?;
                    (Some(ArPrior::Neural(p)), None)
                }
            }
        }
    };
    Ok(JointModel {
        denoiser,
        prior,
        token_embedding,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub l_dm: f64,
    pub l_ar: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub wallclock: f64,
}

pub const TRAIN_LOG_HEADER: &str = "step,l_dm,l_ar,total,grad_norm,wallclock";

pub fn write_train_log<W: Write>(out: W, log: &[LogRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(out);
    writeln!(out, "{TRAIN_LOG_HEADER}")?;
    for r in log {
        writeln!(
            out,
            "{},{:?},{:?},{:?},{:?},{:.3}",
            r.step, r.l_dm, r.l_ar, r.total, r.grad_norm, r.wallclock
        )?;
    }
    out.flush()?;
    Ok(())
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub dataset: DatasetSpec,
    pub space: Option<LatentSpace>,
    pub step: usize,
    pub model: JointModel,
    pub ema: JointModel,
    pub optimizer: AdamState,
    /// Per-dimension bounds applied to x0 estimates while sampling.
    pub clip: Vec<(f64, f64)>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut ck: Self = serde_json::from_str(text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::contract(format!("unsupported checkpoint version {}", ck.version)));
        }
        if let Some(space) = &mut ck.space {
            space.init_vocab()?;
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Model used for sampling.
    pub fn sampling_model(&self, use_ema: bool) -> &JointModel {
        if use_ema {
            &self.ema
        } else {
            &self.model
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRecord>,
}

/// EMA decay after `updates` updates: `min(decay, (1 + n) / (10 + n))`.
pub fn ema_decay_at(decay: f64, updates: u64) -> f64 {
    decay.min((1.0 + updates as f64) / (10.0 + updates as f64))
}

/// Draws the next minibatch; consumes the same random numbers for both variants.
fn draw_batch<'a>(
    cfg: &TrainConfig,
    samples: &'a [LabeledSample],
    latents: Option<&'a [LatentSequence]>,
    batch_rng: &mut ChaCha8Rng,
    drop_rng: &mut ChaCha8Rng,
) -> Batch<'a> {
    let n = cfg.batch_size;
    let d = samples[0].x.len();
    let mut b = Batch {
        x0: Vec::with_capacity(n),
        class: Vec::with_capacity(n),
        latent: Vec::with_capacity(n),
        t: Vec::with_capacity(n),
        noise: Vec::with_capacity(n),
        dropped: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let i = batch_rng.random_range(0..samples.len());
        b.x0.push(&samples[i].x);
        b.class.push(samples[i].class);
        b.latent.push(latents.map(|l| &l[i]));
        b.t.push(batch_rng.random_range(1..=cfg.timesteps));
        b.noise.push((0..d).map(|_| -> f64 { StandardNormal.sample(batch_rng) }).collect());
        b.dropped.push(drop_rng.random::<f64>() < cfg.p_uncond);
    }
    b
}

/// Full training run. Intermediate and final checkpoints go to `checkpoint_path`
/// when given; a non-finite loss aborts the run and leaves the last written
/// checkpoint untouched.
pub fn train(
    cfg: &TrainConfig,
    dataset: &DatasetSpec,
    samples: &[LabeledSample],
    checkpoint_path: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::contract("empty training set"));
    }
    if samples.iter().any(|s| s.x.len() != dataset.dim() || s.class >= dataset.n_classes()) {
        return Err(Error::contract("training samples do not match the dataset spec"));
    }
    let data_var = data_variance(samples)?;
    let (space, latents) = match cfg.variant {
        Variant::Latent => {
            let (s, l) = prepare_latents(cfg, dataset, samples)?;
            (Some(s), Some(l))
        }
        Variant::Baseline => (None, None),
    };
    let classes: Vec<usize> = samples.iter().map(|s| s.class).collect();
    let mut model = init_model(
        cfg,
        dataset,
        data_var,
        space.as_ref().zip(latents.as_deref()).map(|(s, l)| (s, l, classes.as_slice())),
    )?;
    let mut ema = model.clone();
    let mut opt = AdamState::new(&model);
    let mut batch_rng = stream_rng(cfg.seed, STREAM_BATCHES);
    let mut drop_rng = stream_rng(cfg.seed, STREAM_DROPOUT);
    let clip = dataset.bounds();
    let started = Instant::now();
    let mut log = Vec::new();
    let mut acc = (0.0, 0.0, 0.0, 0.0, 0usize);

    let snapshot = |step: usize, model: &JointModel, ema: &JointModel, opt: &AdamState| Checkpoint {
        version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        dataset: dataset.clone(),
        space: space.clone(),
        step,
        model: model.clone(),
        ema: ema.clone(),
        optimizer: opt.clone(),
        clip: clip.clone(),
    };

    for step in 1..=cfg.steps {
        let batch = draw_batch(cfg, samples, latents.as_deref(), &mut batch_rng, &mut drop_rng);
        let (losses, grads) = joint_step(&model, &batch, cfg.eta, cfg.loss_weighting)?;
        if !losses.total.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step}")));
        }
        let warm = if cfg.warmup_steps == 0 {
            1.0
        } else {
            (step as f64 / cfg.warmup_steps as f64).min(1.0)
        };
        let stats = adam_step(&mut model, &grads, &mut opt, cfg.lr * warm, cfg.clip_norm)?;
        ema_update(&mut ema, &model, ema_decay_at(cfg.ema_decay, opt.step - 1))?;

        acc.0 += losses.l_dm;
        acc.1 += losses.l_ar;
        acc.2 += losses.total;
        acc.3 += stats.grad_norm;
        acc.4 += 1;
        if step % cfg.log_every == 0 || step == cfg.steps {
            let k = acc.4 as f64;
            log.push(LogRecord {
                step,
                l_dm: acc.0 / k,
                l_ar: acc.1 / k,
                total: acc.2 / k,
                grad_norm: acc.3 / k,
                wallclock: started.elapsed().as_secs_f64(),
            });
            acc = (0.0, 0.0, 0.0, 0.0, 0);
        }
        if let Some(path) = checkpoint_path {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != cfg.steps {
                snapshot(step, &model, &ema, &opt).save(path)?;
            }
        }
    }
    let checkpoint = snapshot(cfg.steps, &model, &ema, &opt);
    if let Some(path) = checkpoint_path {
        checkpoint.save(path)?;
    }
    Ok(TrainOutcome { checkpoint, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sample_dataset, toy_gmm_default};

    fn tiny_cfg(variant: Variant, backend: PriorBackend) -> TrainConfig {
        let mut cfg = TrainConfig::toy(variant);
        cfg.denoiser.hidden = vec![6];
        cfg.denoiser.latent_dim = 3;
        cfg.neural_prior = NeuralPriorConfig {
            embed_dim: 3,
            hidden: 5,
            window: 2,
        };
        cfg.prior_backend = backend;
        cfg.batch_size = 4;
        cfg.timesteps = 50;
        cfg
    }

    fn setup(cfg: &TrainConfig) -> (DatasetSpec, Vec<LabeledSample>, JointModel, Vec<LatentSequence>) {
        let ds = DatasetSpec::Gmm(toy_gmm_default());
        let samples = sample_dataset(&ds, 64, 3).unwrap();
        let (space, lat) = prepare_latents(cfg, &ds, &samples).unwrap();
        let classes: Vec<usize> = samples.iter().map(|s| s.class).collect();
        let model = init_model(
            cfg,
            &ds,
            data_variance(&samples).unwrap(),
            Some((&space, &lat, &classes)),
        )
        .unwrap();
        (ds, samples, model, lat)
    }

    fn batch<'a>(samples: &'a [LabeledSample], lat: &'a [LatentSequence], dropped: [bool; 4]) -> Batch<'a> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        Batch {
            x0: samples[..4].iter().map(|s| s.x.as_slice()).collect(),
            class: samples[..4].iter().map(|s| s.class).collect(),
            latent: lat[..4].iter().map(Some).collect(),
            t: vec![3, 17, 30, 49],
            noise: (0..4)
                .map(|_| (0..2).map(|_| -> f64 { StandardNormal.sample(&mut rng) }).collect())
                .collect(),
            dropped: dropped.to_vec(),
        }
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        for backend in [PriorBackend::Neural, PriorBackend::Tabular] {
            let cfg = tiny_cfg(Variant::Latent, backend);
            let (_, samples, model, lat) = setup(&cfg);
            let b = batch(&samples, &lat, [false, true, false, false]);
            let eta = 0.7;
            let (losses, grads) = joint_step(&model, &b, eta, LossWeighting::Uniform).unwrap();
            assert_eq!(losses.total, losses.l_dm + eta * losses.l_ar);
            let h = 1e-6;
            let names = model.tensor_names();
            let g: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
            for (ti, gt) in g.iter().enumerate() {
                for (j, &an) in gt.iter().enumerate() {
                    let mut plus = model.clone();
                    plus.tensors_mut()[ti][j] += h;
                    let mut minus = model.clone();
                    minus.tensors_mut()[ti][j] -= h;
                    let lp = joint_step(&plus, &b, eta, LossWeighting::Uniform).unwrap().0.total;
                    let lm = joint_step(&minus, &b, eta, LossWeighting::Uniform).unwrap().0.total;
                    let fd = (lp - lm) / (2.0 * h);
                    let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-3);
                    assert!(rel < 1e-5, "{backend:?} {} [{j}]: {an} vs {fd}", names[ti]);
                }
            }
        }
    }

    #[test]
    fn eta_zero_leaves_prior_network_untouched() {
        let cfg = tiny_cfg(Variant::Latent, PriorBackend::Neural);
        let (_, samples, model, lat) = setup(&cfg);
        let b = batch(&samples, &lat, [false; 4]);
        let (losses, grads) = joint_step(&model, &b, 0.0, LossWeighting::Uniform).unwrap();
        assert_eq!(losses.total, losses.l_dm);
        let Some(ArPrior::Neural(p)) = &grads.prior else { panic!() };
        assert!(p.net.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn full_dropout_trains_only_the_null_condition() {
        let cfg = tiny_cfg(Variant::Latent, PriorBackend::Tabular);
        let (_, samples, model, lat) = setup(&cfg);
        let b = batch(&samples, &lat, [true; 4]);
        let (_, grads) = joint_step(&model, &b, 1.0, LossWeighting::Uniform).unwrap();
        let emb = &grads.denoiser.class_embedding;
        for row in &emb[..emb.len() - 1] {
            assert!(row.iter().all(|&v| v == 0.0));
        }
        assert!(emb.last().unwrap().iter().any(|&v| v != 0.0));
        assert!(grads.token_embedding.unwrap().table.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn controlled_pair_shares_denoiser_init() {
        let ds = DatasetSpec::Gmm(toy_gmm_default());
        let samples = sample_dataset(&ds, 64, 3).unwrap();
        let mut base_cfg = tiny_cfg(Variant::Baseline, PriorBackend::Tabular);
        base_cfg.steps = 0;
        let mut lat_cfg = base_cfg.clone();
        lat_cfg.variant = Variant::Latent;
        let a = train(&base_cfg, &ds, &samples, None).unwrap();
        let b = train(&lat_cfg, &ds, &samples, None).unwrap();
        assert_eq!(a.checkpoint.model.denoiser, b.checkpoint.model.denoiser);
        assert!(a.checkpoint.model.prior.is_none() && b.checkpoint.model.prior.is_some());
    }

    #[test]
    fn rerun_is_deterministic_and_checkpoint_round_trips() {
        let ds = DatasetSpec::Gmm(toy_gmm_default());
        let samples = sample_dataset(&ds, 64, 3).unwrap();
        let mut cfg = tiny_cfg(Variant::Latent, PriorBackend::Neural);
        cfg.steps = 30;
        cfg.log_every = 10;
        let a = train(&cfg, &ds, &samples, None).unwrap();
        let b = train(&cfg, &ds, &samples, None).unwrap();
        assert_eq!(a.log.len(), 3);
        assert_eq!(a.log.last().unwrap().total, b.log.last().unwrap().total);
        for r in &a.log {
            assert!((r.total - (r.l_dm + cfg.eta * r.l_ar)).abs() < 1e-12);
        }
        let back = Checkpoint::from_json(&a.checkpoint.to_json().unwrap()).unwrap();
        assert_eq!(back, a.checkpoint);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::toy(Variant::Baseline);
        cfg.p_uncond = 1.0;
        assert!(cfg.validate().is_err());
        let json = TrainConfig::toy(Variant::Latent).to_json().unwrap();
        assert_eq!(TrainConfig::from_json(&json).unwrap(), TrainConfig::toy(Variant::Latent));
        let mut v: serde_json::Value = serde_json::from_str(&json).unwrap();
        v.as_object_mut().unwrap().remove("eta");
        assert!(TrainConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn ema_warmup_decay() {
        assert_eq!(ema_decay_at(0.999, 0), 0.1);
        assert_eq!(ema_decay_at(0.999, 1_000_000), 0.999);
    }
}
