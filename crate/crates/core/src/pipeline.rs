//! Two-stage generation (latent from the prior, then guided diffusion),
//! latent-file regeneration, evaluation and guidance sweeps.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{assign_mode, mode_name, DatasetSpec, LabeledSample};
use crate::diffusion::{ddpm_sample, SamplerConfig};
use crate::error::{Error, ParseError, ParseErrors, Result};
use crate::latents::extract::orientation_subclass;
use crate::latents::prior::ar_sample_with;
use crate::latents::{segment_canvas, LatentRecord, LatentSequence, LatentSpace};
use crate::metrics::{
    frechet_distance, knn_recall_precision, latent_adherence, minority_fraction, mode_coverage, MetricReport,
    DEFAULT_K,
};
use crate::train::{Checkpoint, Variant};

/// Prior draws that fail the grammar are redrawn at most this many times per chain.
pub const MAX_REDRAWS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub enum ChainSource {
    /// `n` chains; a fixed class, or class `chain_id % n_classes`.
    Prior { n: usize, class: Option<usize> },
    /// One chain per record, conditioned on the record's latent verbatim.
    Latents(Vec<LatentRecord>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRequest {
    pub source: ChainSource,
    pub gamma: f64,
    pub steps: usize,
    pub seed: u64,
    /// Prior sampling temperature.
    pub tau: f64,
    pub use_ema: bool,
    pub cfg_drops_latent: bool,
}

impl SampleRequest {
    pub fn new(source: ChainSource, gamma: f64, seed: u64) -> Self {
        Self {
            source,
            gamma,
            steps: 250,
            seed,
            tau: 1.0,
            use_ema: true,
            cfg_drops_latent: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSample {
    pub chain_id: usize,
    pub class: usize,
    pub x: Vec<f64>,
    /// Global mode id of the sample, if one can be assigned.
    pub assigned_mode: Option<usize>,
    pub latent: Option<LatentSequence>,
}

/// Observable order of the two sampling stages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SampleEvent {
    LatentReady { chain: usize, redraws: usize, from_file: bool },
    DenoiseStart { chains: usize },
    DenoiseDone { chains: usize },
}

impl std::fmt::Display for SampleEvent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SampleEvent::LatentReady {
                chain,
                redraws,
                from_file,
            } => {
                let src = if *from_file { "file" } else { "prior" };
                write!(f, "latent chain={chain} source={src} redraws={redraws}")
            }
            SampleEvent::DenoiseStart { chains } => write!(f, "denoise start chains={chains}"),
            SampleEvent::DenoiseDone { chains } => write!(f, "denoise done chains={chains}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub samples: Vec<GeneratedSample>,
    pub events: Vec<SampleEvent>,
}

/// Generator of prior draws for `chain`, independent of the diffusion streams.
pub fn latent_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c61_7465_6e74);
    rng.set_stream(chain as u64);
    rng
}

pub fn mode_label(dataset: &DatasetSpec, mode: usize) -> String {
    match dataset {
        DatasetSpec::Gmm(g) => g.mode_label(mode),
        DatasetSpec::Canvas(_) => mode_name(mode / 2, mode % 2),
    }
}

pub fn mode_from_label(dataset: &DatasetSpec, label: &str) -> Option<usize> {
    let n = dataset.n_classes() * dataset.n_subclasses();
    (0..n).find(|&m| mode_label(dataset, m) == label)
}

/// Ground-truth style mode of a sample: mixture component, or class plus the
/// orientation of the dominant canvas object.
pub fn assigned_mode(dataset: &DatasetSpec, x: &[f64], class: usize) -> Option<usize> {
    match dataset {
        DatasetSpec::Gmm(g) => Some(assign_mode(x, g)),
        DatasetSpec::Canvas(c) => {
            let objects = segment_canvas(c, x).ok()?;
            Some(class * 2 + orientation_subclass(objects[0].fit.blob.theta_deg))
        }
    }
}

/// Draws a grammar-valid latent for one chain.
pub fn draw_latent(
    ck: &Checkpoint,
    use_ema: bool,
    class: usize,
    tau: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(LatentSequence, usize)> {
    let space = ck.space.as_ref().ok_or_else(|| Error::contract("checkpoint has no latent space"))?;
    let prior = ck
        .sampling_model(use_ema)
        .prior
        .as_ref()
        .ok_or_else(|| Error::contract("checkpoint has no prior"))?;
    for redraws in 0..=MAX_REDRAWS {
        let draw = ar_sample_with(prior, space.scheme(), class, tau, space.max_len(), rng)?;
        if !draw.truncated && space.parse(&draw.sequence).is_ok() {
            return Ok((draw.sequence, redraws));
        }
    }
    Err(Error::contract(format!(
        "prior produced no grammar-valid latent for class {class} in {} draws",
        MAX_REDRAWS + 1
    )))
}

/// Samples `z ~ p(z | c)` for every chain first, then runs guided diffusion on `(c, z)`.
pub fn generate(ck: &Checkpoint, req: &SampleRequest) -> Result<Generation> {
    let model = ck.sampling_model(req.use_ema);
    let n_classes = ck.dataset.n_classes();
    let variant = model.variant();
    let mut events = Vec::new();
    let mut chains: Vec<(usize, usize, Option<LatentSequence>)> = Vec::new();
    match &req.source {
        ChainSource::Prior { n, class } => {
            if *n == 0 {
                return Err(Error::contract("number of samples must be positive"));
            }
            if let Some(c) = class {
                if *c >= n_classes {
                    return Err(Error::contract(format!("class {c} out of range (0..{n_classes})")));
                }
            }
            for chain in 0..*n {
                let c = class.unwrap_or(chain % n_classes);
                let z = if variant == Variant::Latent {
                    let (z, redraws) = draw_latent(ck, req.use_ema, c, req.tau, &mut latent_rng(req.seed, chain))?;
                    events.push(SampleEvent::LatentReady {
                        chain,
                        redraws,
                        from_file: false,
                    });
                    Some(z)
                } else {
                    None
                };
                chains.push((chain, c, z));
            }
        }
        ChainSource::Latents(records) => {
            if variant != Variant::Latent {
                return Err(Error::contract("latent files need a latent-conditioned checkpoint"));
            }
            if records.is_empty() {
                return Err(Error::contract("latent file holds no records"));
            }
            let space = ck.space.as_ref().ok_or_else(|| Error::contract("checkpoint has no latent space"))?;
            let mut seen = BTreeSet::new();
            for r in records {
                if !seen.insert(r.sample_id) {
                    return Err(Error::contract(format!("duplicate sample id {}", r.sample_id)));
                }
                if r.class >= n_classes {
                    return Err(Error::contract(format!("class {} out of range", r.class)));
                }
                space.parse(&r.sequence)?;
                events.push(SampleEvent::LatentReady {
                    chain: r.sample_id,
                    redraws: 0,
                    from_file: true,
                });
                chains.push((r.sample_id, r.class, Some(r.sequence.clone())));
            }
        }
    }
    let conds = chains
        .iter()
        .map(|(_, c, z)| model.condition(*c, z.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let sampler = SamplerConfig {
        guidance: req.gamma,
        steps: req.steps,
        seed: req.seed,
        latent_conditioning: variant == Variant::Latent,
        cfg_drops_latent: req.cfg_drops_latent,
    };
    events.push(SampleEvent::DenoiseStart { chains: conds.len() });
    let xs = ddpm_sample(&model.denoiser, &conds, &sampler, &model.denoiser.schedule, Some(&ck.clip))?;
    events.push(SampleEvent::DenoiseDone { chains: xs.len() });
    let samples = chains
        .into_iter()
        .zip(xs)
        .map(|((chain_id, class, latent), x)| GeneratedSample {
            chain_id,
            class,
            assigned_mode: assigned_mode(&ck.dataset, &x, class),
            x,
            latent,
        })
        .collect();
    Ok(Generation { samples, events })
}

/// Latent records of a generation, ready to be written as an editable file.
pub fn latent_records(samples: &[GeneratedSample]) -> Vec<LatentRecord> {
    samples
        .iter()
        .filter_map(|s| {
            s.latent.as_ref().map(|z| LatentRecord {
                sample_id: s.chain_id,
                class: s.class,
                sequence: z.clone(),
            })
        })
        .collect()
}

pub fn sample_csv_header(dim: usize) -> Vec<String> {
    let mut h = vec!["chain_id".to_string(), "class".to_string()];
    h.extend((0..dim).map(|i| format!("dim_{i}")));
    h.push("assigned_mode".into());
    h.push("conditioned_latent".into());
    h
}

pub fn write_sample_csv<W: Write>(out: W, samples: &[GeneratedSample], dataset: &DatasetSpec, space: Option<&LatentSpace>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(e.into());
    w.write_record(sample_csv_header(dataset.dim())).map_err(io)?;
    for s in samples {
        let mut row = vec![s.chain_id.to_string(), s.class.to_string()];
        row.extend(s.x.iter().map(|v| format!("{v:?}")));
        row.push(s.assigned_mode.map(|m| mode_label(dataset, m)).unwrap_or_default());
        row.push(match (&s.latent, space) {
            (Some(z), Some(sp)) => sp.vocab().render(&z.tokens),
            (Some(_), None) => return Err(Error::contract("rendering latents needs the latent space")),
            (None, _) => String::new(),
        });
        w.write_record(&row).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a sample CSV; every malformed row is reported with its line number.
pub fn read_sample_csv<R: Read>(input: R, dataset: &DatasetSpec, space: Option<&LatentSpace>) -> Result<Vec<GeneratedSample>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::parse(format!("bad header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != sample_csv_header(dataset.dim()) {
        return Err(Error::parse(format!(
            "sample CSV header does not match a {}-dimensional dataset",
            dataset.dim()
        )));
    }
    let d = dataset.dim();
    let mut out = Vec::new();
    let mut errors = Vec::new();
    for rec in rdr.records() {
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                errors.push(ParseError {
                    line: e.position().map(|p| p.line() as usize),
                    message: e.to_string(),
                });
                continue;
            }
        };
        let line = rec.position().map(|p| p.line() as usize);
        let row = || -> std::result::Result<GeneratedSample, String> {
            let chain_id = rec[0].parse().map_err(|_| "bad chain_id")?;
            let class: usize = rec[1].parse().map_err(|_| "bad class")?;
            if class >= dataset.n_classes() {
                return Err(format!("class {class} out of range"));
            }
            let x = (0..d)
                .map(|i| rec[2 + i].parse::<f64>().map_err(|_| format!("bad dim_{i}")))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let m = &rec[2 + d];
            let assigned_mode = if m.is_empty() {
                None
            } else {
                Some(mode_from_label(dataset, m).ok_or_else(|| format!("unknown mode {m:?}"))?)
            };
            let z = &rec[3 + d];
            let latent = if z.is_empty() {
                None
            } else {
                let sp = space.ok_or("latent column present but no latent space given")?;
                let seq = LatentSequence::new(sp.scheme(), sp.vocab().lookup_all(z).map_err(|e| e.to_string())?);
                sp.parse(&seq).map_err(|e| e.to_string())?;
                Some(seq)
            };
            Ok(GeneratedSample {
                chain_id,
                class,
                x,
                assigned_mode,
                latent,
            })
        };
        match row() {
            Ok(s) => out.push(s),
            Err(message) => errors.push(ParseError { line, message }),
        }
    }
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(Error::Parse(ParseErrors(errors)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub gamma: f64,
    pub variant: String,
    pub seed: u64,
    pub k: usize,
    pub min_count: usize,
}

impl EvalOptions {
    pub fn new(gamma: f64, variant: &str, seed: u64) -> Self {
        Self {
            gamma,
            variant: variant.to_string(),
            seed,
            k: DEFAULT_K,
            min_count: 10,
        }
    }
}

/// Metrics of a generated set against the real samples of the same classes.
pub fn evaluate(
    samples: &[GeneratedSample],
    real: &[LabeledSample],
    dataset: &DatasetSpec,
    space: Option<&LatentSpace>,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::contract("no samples to evaluate"));
    }
    let classes: BTreeSet<usize> = samples.iter().map(|s| s.class).collect();
    let real: Vec<Vec<f64>> = real
        .iter()
        .filter(|r| classes.contains(&r.class))
        .map(|r| r.x.clone())
        .collect();
    if real.is_empty() {
        return Err(Error::contract("no real samples of the generated classes"));
    }
    let gen: Vec<Vec<f64>> = samples.iter().map(|s| s.x.clone()).collect();
    let (recall, precision) = knn_recall_precision(&real, &gen, opts.k)?;
    let fd = frechet_distance(&real, &gen)?;
    let (coverage, minority) = match dataset {
        DatasetSpec::Gmm(g) => {
            let modes: Vec<usize> = classes.iter().flat_map(|&c| g.modes_of_class(c)).collect();
            let cov = mode_coverage(&gen, g, &modes, opts.min_count)?;
            let labeled: Vec<(Vec<f64>, usize)> = samples.iter().map(|s| (s.x.clone(), s.class)).collect();
            (Some(cov), minority_fraction(&labeled, g).ok())
        }
        DatasetSpec::Canvas(_) => (None, None),
    };
    let conditioned: Vec<(Vec<f64>, usize, LatentSequence)> = samples
        .iter()
        .filter_map(|s| s.latent.clone().map(|z| (s.x.clone(), s.class, z)))
        .collect();
    let adherence = match (space, conditioned.len()) {
        (_, 0) => None,
        (Some(sp), n) if n == samples.len() => Some(latent_adherence(sp, &conditioned)?),
        (Some(_), _) => return Err(Error::contract("only some samples carry a conditioning latent")),
        (None, _) => return Err(Error::contract("latent adherence needs the latent space")),
    };
    let report = MetricReport {
        gamma: opts.gamma,
        variant: opts.variant.clone(),
        seed: opts.seed,
        n_samples: samples.len(),
        n_real: real.len(),
        mode_coverage: coverage.as_ref().map(|c| c.fraction),
        mode_counts: coverage.as_ref().map(|c| c.counts.clone()).unwrap_or_default(),
        uncounted: coverage.as_ref().map_or(0, |c| c.uncounted),
        min_count: opts.min_count,
        minority_fraction: minority,
        recall,
        precision,
        k: opts.k,
        frechet_distance: fd.distance,
        fd_jittered: fd.jittered,
        latent_adherence: adherence,
    };
    report.validate()?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOptions {
    pub gammas: Vec<f64>,
    pub n: usize,
    pub seed: u64,
    pub steps: usize,
    pub class: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub reports: Vec<MetricReport>,
    /// Problems with the checkpoint pair that do not stop the sweep.
    pub warnings: Vec<String>,
}

pub const DEFAULT_GAMMAS: [f64; 4] = [1.0, 2.0, 4.0, 8.0];

/// Every gamma for both checkpoints of a controlled pair.
pub fn sweep(baseline: &Checkpoint, latent: &Checkpoint, real: &[LabeledSample], opts: &SweepOptions) -> Result<SweepResult> {
    if baseline.model.variant() != Variant::Baseline || latent.model.variant() != Variant::Latent {
        return Err(Error::contract("sweep needs a baseline and a latent checkpoint, in that order"));
    }
    if opts.gammas.is_empty() {
        return Err(Error::contract("sweep needs at least one gamma"));
    }
    let mut warnings = Vec::new();
    if baseline.config.seed != latent.config.seed {
        warnings.push(format!(
            "checkpoint pair trained from different seeds ({} vs {})",
            baseline.config.seed, latent.config.seed
        ));
    }
    if baseline.dataset != latent.dataset {
        return Err(Error::contract("checkpoint pair trained on different datasets"));
    }
    let mut reports = Vec::new();
    for &gamma in &opts.gammas {
        for ck in [baseline, latent] {
            let mut req = SampleRequest::new(
                ChainSource::Prior {
                    n: opts.n,
                    class: opts.class,
                },
                gamma,
                opts.seed,
            );
            req.steps = opts.steps;
            let gen = generate(ck, &req)?;
            let variant = ck.model.variant().name();
            reports.push(evaluate(
                &gen.samples,
                real,
                &ck.dataset,
                ck.space.as_ref(),
                &EvalOptions::new(gamma, variant, opts.seed),
            )?);
        }
    }
    Ok(SweepResult { reports, warnings })
}
