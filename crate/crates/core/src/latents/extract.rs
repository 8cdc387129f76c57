//! Deterministic latent extractors `q(z | x, c)` for the synthetic datasets.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::codebook::{build_codebook, Codebook};
use super::ellipse::{ellipse_fit_weighted, EllipseFit};
use super::grammar::{
    encode_bbox, encode_blob, parse_sequence, voken_encode, BboxParams, BlobParams, BlobQuantizer,
    LatentContent, LatentScheme, LatentSequence, BBOX_MAX,
};
use super::vocab::{Vocab, VocabSpec, DELIM, EOS};
use crate::data::{mode_name, CanvasSpec, DatasetSpec, GmmSpec};
use crate::error::{Error, Result};

/// Pixels at or above this value seed an object segment.
pub const SEGMENT_THRESHOLD: f64 = 0.1;
/// Boxes span the fitted mean +- this many standard deviations.
pub const BBOX_SIGMAS: f64 = 2.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentConfig {
    pub scheme: LatentScheme,
    /// Codebook size for vokens.
    pub voken_codebook: usize,
    /// Voken ids per sample; `None` picks 4 for canvases and 1 for mixtures.
    #[serde(default)]
    pub voken_chunks: Option<usize>,
    #[serde(default)]
    pub blob: BlobQuantizer,
}

impl LatentConfig {
    pub fn new(scheme: LatentScheme) -> Self {
        Self {
            scheme,
            voken_codebook: 8,
            voken_chunks: None,
            blob: BlobQuantizer::default(),
        }
    }
}

/// Everything needed to extract, encode and decode latents for one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSpace {
    pub config: LatentConfig,
    pub dataset: DatasetSpec,
    pub codebook: Option<Codebook>,
    #[serde(skip)]
    vocab: Option<Vocab>,
}

fn uses_spatial(scheme: LatentScheme) -> bool {
    matches!(scheme, LatentScheme::Bbox | LatentScheme::Blob | LatentScheme::Combined)
}

fn uses_vokens(scheme: LatentScheme) -> bool {
    matches!(scheme, LatentScheme::Voken | LatentScheme::Combined)
}

fn uses_modes(scheme: LatentScheme) -> bool {
    matches!(scheme, LatentScheme::Text | LatentScheme::Combined)
}

impl LatentSpace {
    /// Builds the vocabulary and, for voken schemes, fits the codebook on `training` inputs.
    pub fn build(dataset: DatasetSpec, config: LatentConfig, training: &[Vec<f64>], seed: u64) -> Result<Self> {
        if uses_spatial(config.scheme) && matches!(dataset, DatasetSpec::Gmm(_)) {
            return Err(Error::contract(format!(
                "{} latents need a canvas dataset; a plain mixture has no object extent",
                config.scheme
            )));
        }
        let mut space = Self {
            config,
            dataset,
            codebook: None,
            vocab: None,
        };
        if uses_vokens(space.config.scheme) {
            let chunks = space.voken_chunks();
            let dim = space.dataset.dim();
            if dim % chunks != 0 {
                return Err(Error::contract(format!(
                    "data dimension {dim} does not split into {chunks} voken chunks"
                )));
            }
            let pieces: Vec<Vec<f64>> = training
                .iter()
                .flat_map(|x| x.chunks(dim / chunks).map(<[f64]>::to_vec))
                .collect();
            space.codebook = Some(build_codebook(&pieces, space.config.voken_codebook, seed)?);
        }
        space.init_vocab()?;
        Ok(space)
    }

    /// Rebuilds derived state after deserialization.
    pub fn init_vocab(&mut self) -> Result<()> {
        self.vocab = Some(Vocab::new(self.vocab_spec())?);
        Ok(())
    }

    pub fn vocab_spec(&self) -> VocabSpec {
        let modes = if uses_modes(self.config.scheme) {
            self.mode_names()
        } else {
            Vec::new()
        };
        VocabSpec {
            modes,
            numeric: uses_spatial(self.config.scheme),
            vokens: if uses_vokens(self.config.scheme) {
                self.config.voken_codebook
            } else {
                0
            },
        }
    }

    pub fn mode_names(&self) -> Vec<String> {
        match &self.dataset {
            DatasetSpec::Gmm(g) => (0..g.n_modes()).map(|k| g.mode_label(k)).collect(),
            DatasetSpec::Canvas(c) => (0..c.n_classes())
                .flat_map(|cl| (0..2).map(move |s| mode_name(cl, s)))
                .collect(),
        }
    }

    pub fn vocab(&self) -> &Vocab {
        self.vocab.as_ref().expect("vocabulary initialised")
    }

    pub fn scheme(&self) -> LatentScheme {
        self.config.scheme
    }

    pub fn voken_chunks(&self) -> usize {
        self.config.voken_chunks.unwrap_or(match self.dataset {
            DatasetSpec::Canvas(_) => 4,
            DatasetSpec::Gmm(_) => 1,
        })
    }

    /// The fixed inference process `q(z | x, c)`.
    pub fn extract(&self, x: &[f64], class: usize) -> Result<LatentSequence> {
        if x.len() != self.dataset.dim() {
            return Err(Error::contract(format!(
                "sample has {} values, dataset dimension is {}",
                x.len(),
                self.dataset.dim()
            )));
        }
        if class >= self.dataset.n_classes() {
            return Err(Error::contract(format!("class {class} out of range")));
        }
        let vocab = self.vocab();
        let mut tokens = Vec::new();
        match &self.dataset {
            DatasetSpec::Gmm(g) => {
                if uses_modes(self.scheme()) {
                    tokens.push(vocab.mode_token(gmm_mode(g, x, class))?);
                }
            }
            DatasetSpec::Canvas(spec) => {
                let objects = segment_canvas(spec, x)?;
                if uses_modes(self.scheme()) {
                    let dominant = &objects[0];
                    let sub = orientation_subclass(dominant.fit.blob.theta_deg);
                    tokens.push(vocab.mode_token(class * 2 + sub)?);
                }
                if self.scheme() == LatentScheme::Combined {
                    tokens.push(vocab.punct('|')?);
                }
                if uses_spatial(self.scheme()) {
                    let scale = spec.to_normalized();
                    for o in &objects {
                        if self.scheme() == LatentScheme::Blob {
                            let b = o.fit.blob;
                            let p = BlobParams {
                                xc: b.xc * scale,
                                yc: b.yc * scale,
                                r_major: b.r_major * scale,
                                r_minor: b.r_minor * scale,
                                theta_deg: b.theta_deg,
                            };
                            tokens.extend(encode_blob(&p, &self.config.blob, vocab)?);
                        } else {
                            tokens.extend(encode_bbox(&o.bbox(scale), vocab)?);
                        }
                    }
                }
                if self.scheme() == LatentScheme::Combined {
                    tokens.push(vocab.punct('|')?);
                }
            }
        }
        if uses_vokens(self.scheme()) {
            let book = self.codebook.as_ref().expect("voken schemes carry a codebook");
            tokens.extend(voken_encode(x, book, self.voken_chunks(), vocab)?);
        }
        tokens.push(EOS);
        Ok(LatentSequence::new(self.scheme(), tokens))
    }

    pub fn parse(&self, seq: &LatentSequence) -> Result<LatentContent> {
        if seq.scheme != self.scheme() {
            return Err(Error::contract(format!(
                "{} sequence given to a {} latent space",
                seq.scheme,
                self.scheme()
            )));
        }
        parse_sequence(seq, self.vocab())
    }

    /// Mode named by a text or combined latent.
    pub fn mode_of(&self, seq: &LatentSequence) -> Option<usize> {
        match self.parse(seq).ok()? {
            LatentContent::Text { mode } | LatentContent::Combined { mode, .. } => Some(mode),
            _ => None,
        }
    }

    /// Number of voken ids a well-formed sequence carries.
    pub fn voken_len(&self) -> usize {
        self.voken_chunks()
    }

    /// Upper bound on sequence length used when sampling the prior.
    pub fn max_len(&self) -> usize {
        let voken = 2 * self.voken_chunks();
        let objects = match &self.dataset {
            DatasetSpec::Canvas(c) => c.max_bumps,
            DatasetSpec::Gmm(_) => 0,
        };
        match self.scheme() {
            LatentScheme::Text => 2,
            LatentScheme::Bbox => objects * 21 + 1,
            LatentScheme::Blob => objects * 26 + 1,
            LatentScheme::Voken => voken,
            LatentScheme::Combined => 3 + objects * 21 + voken,
        }
    }
}

fn gmm_mode(g: &GmmSpec, x: &[f64], class: usize) -> usize {
    // Highest responsibility among the class's modes.
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for k in g.modes_of_class(class) {
        let s = g.components[k].weight.ln() + g.component_log_density(k, x);
        if s > best.1 {
            best = (k, s);
        }
    }
    best.0
}

/// 0 when the major axis is within 45 degrees of horizontal.
pub fn orientation_subclass(theta_deg: f64) -> usize {
    if !(45.0..135.0).contains(&theta_deg) {
        0
    } else {
        1
    }
}

/// One segmented object, in pixel units.
#[derive(Debug, Clone, PartialEq)]
pub struct CanvasObject {
    pub fit: EllipseFit,
    pub mass: f64,
    /// Covariance `(sxx, sxy, syy)` in pixels.
    pub cov: (f64, f64, f64),
}

impl CanvasObject {
    /// Axis-aligned box at [`BBOX_SIGMAS`], rounded outward into `[0, 1000]`.
    pub fn bbox(&self, scale: f64) -> BboxParams {
        let b = self.fit.blob;
        let hx = BBOX_SIGMAS * self.cov.0.sqrt();
        let hy = BBOX_SIGMAS * self.cov.2.sqrt();
        let lo = |v: f64| ((v * scale).floor().max(0.0) as u32).min(BBOX_MAX);
        let hi = |v: f64| ((v * scale).ceil().max(0.0) as u32).min(BBOX_MAX);
        BboxParams {
            x1: lo(b.xc - hx),
            y1: lo(b.yc - hy),
            x2: hi(b.xc + hx),
            y2: hi(b.yc + hy),
        }
    }
}

/// Thresholded 4-connected components, then every positive pixel is assigned
/// to the component whose moment fit explains it best; objects are refitted on
/// the full assignment and returned by decreasing mass.
pub fn segment_canvas(spec: &CanvasSpec, x: &[f64]) -> Result<Vec<CanvasObject>> {
    let n = spec.size;
    if x.len() != n * n {
        return Err(Error::contract("canvas has the wrong number of pixels"));
    }
    let mut label = vec![usize::MAX; n * n];
    let mut seeds: Vec<Vec<usize>> = Vec::new();
    for start in 0..n * n {
        if x[start] < SEGMENT_THRESHOLD || label[start] != usize::MAX {
            continue;
        }
        let id = seeds.len();
        let mut members = Vec::new();
        let mut queue = VecDeque::from([start]);
        label[start] = id;
        while let Some(p) = queue.pop_front() {
            members.push(p);
            let (i, j) = (p % n, p / n);
            let mut nb = Vec::with_capacity(4);
            if i > 0 {
                nb.push(p - 1);
            }
            if i + 1 < n {
                nb.push(p + 1);
            }
            if j > 0 {
                nb.push(p - n);
            }
            if j + 1 < n {
                nb.push(p + n);
            }
            for q in nb {
                if x[q] >= SEGMENT_THRESHOLD && label[q] == usize::MAX {
                    label[q] = id;
                    queue.push_back(q);
                }
            }
        }
        seeds.push(members);
    }
    if seeds.is_empty() {
        return Err(Error::contract("canvas holds no object above the segmentation threshold"));
    }

    let center = |p: usize| [(p % n) as f64 + 0.5, (p / n) as f64 + 0.5];
    let fit_pixels = |pixels: &[usize]| -> Result<CanvasObject> {
        let pts: Vec<[f64; 2]> = pixels.iter().map(|&p| center(p)).collect();
        let w: Vec<f64> = pixels.iter().map(|&p| x[p].max(0.0)).collect();
        let fit = ellipse_fit_weighted(&pts, &w)?;
        let mass: f64 = w.iter().sum();
        let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
        for (pt, wi) in pts.iter().zip(&w) {
            let (dx, dy) = (pt[0] - fit.blob.xc, pt[1] - fit.blob.yc);
            sxx += wi * dx * dx;
            sxy += wi * dx * dy;
            syy += wi * dy * dy;
        }
        Ok(CanvasObject {
            fit,
            mass,
            cov: (sxx / mass, sxy / mass, syy / mass),
        })
    };
    let rough: Vec<CanvasObject> = seeds.iter().map(|s| fit_pixels(s)).collect::<Result<_>>()?;

    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); rough.len()];
    for p in 0..n * n {
        if x[p] <= 0.0 {
            continue;
        }
        let [px, py] = center(p);
        let mut best = (0, f64::NEG_INFINITY);
        for (k, o) in rough.iter().enumerate() {
            let (sxx, sxy, syy) = o.cov;
            // Floor the covariance so single-pixel seeds still score sensibly.
            let (sxx, syy) = (sxx + 0.25, syy + 0.25);
            let det = sxx * syy - sxy * sxy;
            let (dx, dy) = (px - o.fit.blob.xc, py - o.fit.blob.yc);
            let q = (syy * dx * dx - 2.0 * sxy * dx * dy + sxx * dy * dy) / det;
            let score = o.mass.ln() - 0.5 * det.ln() - 0.5 * q;
            if score > best.1 {
                best = (k, score);
            }
        }
        groups[best.0].push(p);
    }
    let mut objects: Vec<CanvasObject> = groups
        .iter()
        .filter(|g| !g.is_empty())
        .map(|g| fit_pixels(g))
        .collect::<Result<_>>()?;
    objects.sort_by(|a, b| b.mass.total_cmp(&a.mass));
    Ok(objects)
}

/// Exact token match between a re-extracted latent and the conditioning one.
pub fn latents_match(a: &LatentSequence, b: &LatentSequence) -> bool {
    a == b
}

/// Voken ids of a voken or combined sequence.
pub fn voken_ids(seq: &LatentSequence, vocab: &Vocab) -> Vec<usize> {
    seq.payload()
        .iter()
        .filter(|&&t| t != DELIM)
        .filter_map(|&t| vocab.as_voken(t))
        .collect()
}
