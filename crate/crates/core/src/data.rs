//! Synthetic datasets with exact ground truth.
//!
//! Two families:
//! - [`GmmSpec`]: diagonal Gaussian mixtures whose components carry a
//!   `(class, subclass)` label. One component per mode.
//! - [`CanvasSpec`]: small grayscale canvases holding one or two anisotropic
//!   Gaussian bumps ("objects"), used for the spatial latent grammars.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Diagonal of the covariance.
    pub var: Vec<f64>,
    pub class: usize,
    /// Subclass index within `class` (0 = "A", 1 = "B", ...).
    pub subclass: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmSpec {
    pub components: Vec<Component>,
}

/// Letter used in mode names: subclass 0 -> 'A'.
pub fn subclass_letter(subclass: usize) -> char {
    (b'A' + subclass as u8) as char
}

pub fn mode_name(class: usize, subclass: usize) -> String {
    format!("mode_{class}{}", subclass_letter(subclass))
}

impl GmmSpec {
    /// Checks weights, label uniqueness and the 4-sigma separation rule.
    pub fn new(components: Vec<Component>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::contract("mixture needs at least one component"));
        }
        let d = components[0].mean.len();
        if d == 0 {
            return Err(Error::contract("mixture dimension must be positive"));
        }
        for (k, c) in components.iter().enumerate() {
            if c.mean.len() != d || c.var.len() != d {
                return Err(Error::contract(format!("component {k} has the wrong dimension")));
            }
            if !(c.weight > 0.0) || c.var.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::contract(format!(
                    "component {k} needs a positive weight and variances"
                )));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!("mixture weights sum to {total}, not 1")));
        }
        for (i, a) in components.iter().enumerate() {
            for b in &components[i + 1..] {
                if a.class == b.class && a.subclass == b.subclass {
                    return Err(Error::contract(format!(
                        "two components share label {}",
                        mode_name(a.class, a.subclass)
                    )));
                }
            }
        }
        let spec = Self { components };
        let max_sd = spec
            .components
            .iter()
            .flat_map(|c| c.var.iter())
            .fold(0.0f64, |m, v| m.max(v.sqrt()));
        if let Some(sep) = spec.min_separation() {
            if sep < 4.0 * max_sd {
                return Err(Error::contract(format!(
                    "component means are {sep} apart, below 4 x max stddev {max_sd}"
                )));
            }
        }
        Ok(spec)
    }

    /// Minimum pairwise distance between component means.
    pub fn min_separation(&self) -> Option<f64> {
        let mut best: Option<f64> = None;
        for (i, a) in self.components.iter().enumerate() {
            for b in &self.components[i + 1..] {
                let d = dist(&a.mean, &b.mean);
                best = Some(best.map_or(d, |m| m.min(d)));
            }
        }
        best
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    pub fn n_classes(&self) -> usize {
        self.components.iter().map(|c| c.class).max().unwrap_or(0) + 1
    }

    pub fn n_modes(&self) -> usize {
        self.components.len()
    }

    /// Mode ids (component indices) belonging to `class`.
    pub fn modes_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.components.len())
            .filter(|&k| self.components[k].class == class)
            .collect()
    }

    pub fn mode_label(&self, mode: usize) -> String {
        let c = &self.components[mode];
        mode_name(c.class, c.subclass)
    }

    /// Mode probabilities conditioned on `class`, in `modes_of_class` order.
    pub fn class_mode_distribution(&self, class: usize) -> Vec<f64> {
        let ks = self.modes_of_class(class);
        let total: f64 = ks.iter().map(|&k| self.components[k].weight).sum();
        ks.iter().map(|&k| self.components[k].weight / total).collect()
    }

    /// Log-density of component `k` at `x` (without the weight).
    pub fn component_log_density(&self, k: usize, x: &[f64]) -> f64 {
        let c = &self.components[k];
        let mut s = 0.0;
        for ((xi, mi), vi) in x.iter().zip(&c.mean).zip(&c.var) {
            let d = xi - mi;
            s += -0.5 * d * d / vi - 0.5 * (2.0 * PI * vi).ln();
        }
        s
    }

    /// Mahalanobis distance from `x` to component `k`.
    pub fn mahalanobis(&self, k: usize, x: &[f64]) -> f64 {
        let c = &self.components[k];
        x.iter()
            .zip(&c.mean)
            .zip(&c.var)
            .map(|((xi, mi), vi)| (xi - mi) * (xi - mi) / vi)
            .sum::<f64>()
            .sqrt()
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Standard deviation of every toy component.
pub const TOY_STDDEV: f64 = 0.3;
/// Mean offset of the toy components along each axis.
pub const TOY_OFFSET: f64 = 3.0;

fn toy_with_weights(w: [f64; 4]) -> GmmSpec {
    // class = sign of x, subclass A at y > 0, B at y < 0.
    let layout = [(0, 0, -1.0, 1.0), (0, 1, -1.0, -1.0), (1, 0, 1.0, 1.0), (1, 1, 1.0, -1.0)];
    let components = layout
        .iter()
        .zip(w)
        .map(|(&(class, subclass, sx, sy), weight)| Component {
            weight,
            mean: vec![sx * TOY_OFFSET, sy * TOY_OFFSET],
            var: vec![TOY_STDDEV * TOY_STDDEV; 2],
            class,
            subclass,
        })
        .collect();
    GmmSpec::new(components).expect("toy mixture is valid")
}

/// Two classes by two modes in 2D, equal weights.
pub fn toy_gmm_default() -> GmmSpec {
    toy_with_weights([0.25; 4])
}

/// The toy layout with 0.7/0.3 subclass weights inside each class.
///
/// The majority subclass is mirrored between classes (A in class 0, B in
/// class 1), so the class posterior at high noise leans towards the majority
/// mode of each class.
pub fn toy_gmm_unequal() -> GmmSpec {
    toy_with_weights([0.35, 0.15, 0.15, 0.35])
}

/// One anisotropic Gaussian bump. Coordinates are in pixels, `(0, 0)` is the
/// top-left canvas corner and pixel `(i, j)` has its center at `(i + 0.5, j + 0.5)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub cx: f64,
    pub cy: f64,
    pub sigma_major: f64,
    pub sigma_minor: f64,
    /// Orientation of the major axis in degrees, `[0, 180)`.
    pub theta_deg: f64,
    pub amplitude: f64,
}

impl Bump {
    /// Covariance `(sxx, sxy, syy)` in pixel units.
    pub fn covariance(&self) -> (f64, f64, f64) {
        let t = self.theta_deg.to_radians();
        let (s, c) = t.sin_cos();
        let a = self.sigma_major * self.sigma_major;
        let b = self.sigma_minor * self.sigma_minor;
        (a * c * c + b * s * s, (a - b) * c * s, a * s * s + b * c * c)
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let (sxx, sxy, syy) = self.covariance();
        let det = sxx * syy - sxy * sxy;
        let dx = x - self.cx;
        let dy = y - self.cy;
        let q = (syy * dx * dx - 2.0 * sxy * dx * dy + sxx * dy * dy) / det;
        self.amplitude * (-0.5 * q).exp()
    }

    /// Integral over the whole plane.
    pub fn total_mass(&self) -> f64 {
        self.amplitude * 2.0 * PI * self.sigma_major * self.sigma_minor
    }

    /// Axis-aligned half extents at `k` standard deviations.
    pub fn half_extent(&self, k: f64) -> (f64, f64) {
        let (sxx, _, syy) = self.covariance();
        (k * sxx.sqrt(), k * syy.sqrt())
    }

    /// Canvas subclass: 0 ("wide") when the major axis is within 45 degrees of horizontal.
    pub fn orientation_subclass(&self) -> usize {
        if self.theta_deg < 45.0 || self.theta_deg >= 135.0 {
            0
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanvasSpec {
    pub size: usize,
    pub max_bumps: usize,
    pub sigma_major: (f64, f64),
    /// Ratio `sigma_minor / sigma_major`.
    pub minor_ratio: (f64, f64),
    pub amplitude: (f64, f64),
    /// Bumps must fit inside the canvas at this many standard deviations.
    pub containment_sigmas: f64,
}

impl Default for CanvasSpec {
    fn default() -> Self {
        Self {
            size: 16,
            max_bumps: 2,
            sigma_major: (1.0, 1.8),
            minor_ratio: (0.4, 0.9),
            amplitude: (0.6, 1.0),
            containment_sigmas: 2.5,
        }
    }
}

impl CanvasSpec {
    pub fn dim(&self) -> usize {
        self.size * self.size
    }

    pub fn n_classes(&self) -> usize {
        self.max_bumps
    }

    /// Pixel units to the normalized `[0, 1000]` range used by bbox/blob latents.
    pub fn to_normalized(&self) -> f64 {
        1000.0 / self.size as f64
    }

    pub fn contains(&self, b: &Bump) -> bool {
        let (hx, hy) = b.half_extent(self.containment_sigmas);
        let s = self.size as f64;
        b.cx - hx >= 0.0 && b.cx + hx <= s && b.cy - hy >= 0.0 && b.cy + hy <= s
    }

    fn draw_bump<R: Rng + ?Sized>(&self, rng: &mut R) -> Bump {
        let major = rng.random_range(self.sigma_major.0..=self.sigma_major.1);
        let minor = major * rng.random_range(self.minor_ratio.0..=self.minor_ratio.1);
        let theta = rng.random_range(0.0..180.0);
        let amplitude = rng.random_range(self.amplitude.0..=self.amplitude.1);
        let mut b = Bump {
            cx: 0.0,
            cy: 0.0,
            sigma_major: major,
            sigma_minor: minor,
            theta_deg: theta,
            amplitude,
        };
        let (hx, hy) = b.half_extent(self.containment_sigmas);
        let s = self.size as f64;
        b.cx = rng.random_range(hx..=(s - hx).max(hx));
        b.cy = rng.random_range(hy..=(s - hy).max(hy));
        b
    }
}

/// Evaluates bumps at pixel centers, clipped to `[0, 1]`, row-major (row = y).
pub fn render_canvas(spec: &CanvasSpec, bumps: &[Bump]) -> Result<Vec<f64>> {
    for (i, b) in bumps.iter().enumerate() {
        if !spec.contains(b) {
            return Err(Error::contract(format!("bump {i} extends outside the canvas")));
        }
    }
    let n = spec.size;
    let mut grid = vec![0.0; n * n];
    for (j, row) in grid.chunks_exact_mut(n).enumerate() {
        for (i, v) in row.iter_mut().enumerate() {
            let (x, y) = (i as f64 + 0.5, j as f64 + 0.5);
            *v = bumps.iter().map(|b| b.eval(x, y)).sum::<f64>().clamp(0.0, 1.0);
        }
    }
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub x: Vec<f64>,
    pub class: usize,
    /// Global mode id. For mixtures this is the component index; for canvases
    /// `class * 2 + orientation subclass`.
    pub mode: usize,
    /// Ground-truth objects (canvas datasets only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bumps: Vec<Bump>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSpec {
    Gmm(GmmSpec),
    Canvas(CanvasSpec),
}

impl DatasetSpec {
    pub fn dim(&self) -> usize {
        match self {
            DatasetSpec::Gmm(g) => g.dim(),
            DatasetSpec::Canvas(c) => c.dim(),
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            DatasetSpec::Gmm(g) => g.n_classes(),
            DatasetSpec::Canvas(c) => c.n_classes(),
        }
    }

    /// Number of subclasses per class (mode tokens are `n_classes * n_subclasses`).
    pub fn n_subclasses(&self) -> usize {
        match self {
            DatasetSpec::Gmm(g) => g.components.iter().map(|c| c.subclass).max().unwrap_or(0) + 1,
            DatasetSpec::Canvas(_) => 2,
        }
    }

    /// Per-dimension `(lo, hi)` box containing essentially all data.
    pub fn bounds(&self) -> Vec<(f64, f64)> {
        match self {
            DatasetSpec::Gmm(g) => (0..g.dim())
                .map(|i| {
                    g.components.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| {
                        let r = 5.0 * c.var[i].sqrt();
                        (lo.min(c.mean[i] - r), hi.max(c.mean[i] + r))
                    })
                })
                .collect(),
            DatasetSpec::Canvas(c) => vec![(0.0, 1.0); c.dim()],
        }
    }
}

/// I.i.d. labeled draws; deterministic given `seed`.
pub fn sample_dataset(spec: &DatasetSpec, n: usize, seed: u64) -> Result<Vec<LabeledSample>> {
    if n == 0 {
        return Err(Error::contract("dataset size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match spec {
        DatasetSpec::Gmm(g) => {
            let pick = WeightedIndex::new(g.components.iter().map(|c| c.weight))
                .map_err(|e| Error::contract(format!("mixture weights: {e}")))?;
            Ok((0..n)
                .map(|_| {
                    let k = pick.sample(&mut rng);
                    let c = &g.components[k];
                    let x = c
                        .mean
                        .iter()
                        .zip(&c.var)
                        .map(|(m, v)| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            m + v.sqrt() * z
                        })
                        .collect();
                    LabeledSample {
                        x,
                        class: c.class,
                        mode: k,
                        bumps: Vec::new(),
                    }
                })
                .collect())
        }
        DatasetSpec::Canvas(c) => (0..n).map(|_| sample_canvas(c, &mut rng)).collect(),
    }
}

fn sample_canvas<R: Rng + ?Sized>(spec: &CanvasSpec, rng: &mut R) -> Result<LabeledSample> {
    let count = rng.random_range(1..=spec.max_bumps.max(1));
    let mut bumps: Vec<Bump> = Vec::with_capacity(count);
    let mut attempts = 0;
    while bumps.len() < count {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::contract("could not place non-overlapping bumps on the canvas"));
        }
        let b = spec.draw_bump(rng);
        let clear = bumps.iter().all(|o| {
            let d = ((b.cx - o.cx).powi(2) + (b.cy - o.cy).powi(2)).sqrt();
            d >= spec.containment_sigmas * (b.sigma_major + o.sigma_major)
        });
        if clear {
            bumps.push(b);
        }
    }
    let x = render_canvas(spec, &bumps)?;
    let class = count - 1;
    let dominant = bumps
        .iter()
        .max_by(|a, b| a.total_mass().total_cmp(&b.total_mass()))
        .expect("at least one bump");
    Ok(LabeledSample {
        x,
        class,
        mode: class * 2 + dominant.orientation_subclass(),
        bumps,
    })
}

/// Component responsibilities at `x` (normalized).
pub fn responsibilities(spec: &GmmSpec, x: &[f64]) -> Vec<f64> {
    let logs: Vec<f64> = (0..spec.components.len())
        .map(|k| spec.components[k].weight.ln() + spec.component_log_density(k, x))
        .collect();
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Highest-responsibility component; ties go to the lowest index.
pub fn assign_mode(x: &[f64], spec: &GmmSpec) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for k in 0..spec.components.len() {
        let s = spec.components[k].weight.ln() + spec.component_log_density(k, x);
        if s > best_score {
            best = k;
            best_score = s;
        }
    }
    best
}

pub fn write_dataset_csv<W: Write>(out: W, samples: &[LabeledSample]) -> Result<()> {
    let mut out = std::io::BufWriter::new(out);
    let d = samples.first().map_or(0, |s| s.x.len());
    write!(out, "sample_id,class,mode")?;
    for i in 0..d {
        write!(out, ",dim_{i}")?;
    }
    writeln!(out)?;
    for (id, s) in samples.iter().enumerate() {
        write!(out, "{id},{},{}", s.class, s.mode)?;
        for v in &s.x {
            // `{:?}` prints the shortest representation that parses back exactly.
            write!(out, ",{v:?}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads rows written by [`write_dataset_csv`]; bump parameters come from the sidecar.
pub fn read_dataset_csv<R: BufRead>(input: R) -> Result<Vec<LabeledSample>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let bad = |m: &str| {
            Error::Parse(crate::error::ParseErrors(vec![crate::error::ParseError {
                line: Some(i + 1),
                message: m.to_string(),
            }]))
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 4 {
            return Err(bad("expected sample_id,class,mode and at least one coordinate"));
        }
        let class = fields[1].parse().map_err(|_| bad("bad class"))?;
        let mode = fields[2].parse().map_err(|_| bad("bad mode"))?;
        let x = fields[3..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| bad("bad coordinate")))
            .collect::<Result<Vec<_>>>()?;
        out.push(LabeledSample {
            x,
            class,
            mode,
            bumps: Vec::new(),
        });
    }
    Ok(out)
}
