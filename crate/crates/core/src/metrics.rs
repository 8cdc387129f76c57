//! Diversity and quality metrics on generated sample sets.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{assign_mode, GmmSpec};
use crate::error::{Error, Result};
use crate::latents::{LatentContent, LatentSequence, LatentSpace};

/// Samples farther than this (Mahalanobis) from their winning component are not counted.
pub const COVERAGE_RADIUS: f64 = 3.0;
pub const DEFAULT_K: usize = 3;
pub const FD_JITTER: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub fraction: f64,
    /// Counted samples per mode (all modes of the mixture).
    pub counts: Vec<usize>,
    /// Samples outside every component's coverage radius.
    pub uncounted: usize,
}

/// Fraction of `modes` with at least `min_count` confidently assigned samples.
pub fn mode_coverage(samples: &[Vec<f64>], gmm: &GmmSpec, modes: &[usize], min_count: usize) -> Result<Coverage> {
    if samples.is_empty() {
        return Err(Error::contract("mode coverage of an empty sample set"));
    }
    if min_count == 0 || modes.is_empty() || modes.iter().any(|&m| m >= gmm.n_modes()) {
        return Err(Error::contract("mode coverage needs m >= 1 and valid modes"));
    }
    let mut counts = vec![0; gmm.n_modes()];
    let mut uncounted = 0;
    for x in samples {
        let k = assign_mode(x, gmm);
        if gmm.mahalanobis(k, x) <= COVERAGE_RADIUS {
            counts[k] += 1;
        } else {
            uncounted += 1;
        }
    }
    let covered = modes.iter().filter(|&&m| counts[m] >= min_count).count();
    Ok(Coverage {
        fraction: covered as f64 / modes.len() as f64,
        counts,
        uncounted,
    })
}

/// Share of samples in the lower-weight modes of their class, pooled over
/// classes. Samples assigned to a mode of another class are ignored.
pub fn minority_fraction(samples: &[(Vec<f64>, usize)], gmm: &GmmSpec) -> Result<f64> {
    let mut total = 0usize;
    let mut minority = 0usize;
    for (x, class) in samples {
        let modes = gmm.modes_of_class(*class);
        let Some(top) = modes
            .iter()
            .map(|&k| gmm.components[k].weight)
            .max_by(f64::total_cmp)
        else {
            return Err(Error::contract(format!("class {class} has no modes")));
        };
        let k = assign_mode(x, gmm);
        if gmm.components[k].class != *class {
            continue;
        }
        total += 1;
        if gmm.components[k].weight < top {
            minority += 1;
        }
    }
    if total == 0 {
        return Err(Error::contract("no sample landed in its own class"));
    }
    Ok(minority as f64 / total as f64)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared distance to the k-th nearest other member of `set`, per member.
fn knn_radii(set: &[Vec<f64>], k: usize) -> Vec<f64> {
    let mut buf = Vec::with_capacity(set.len());
    set.iter()
        .enumerate()
        .map(|(i, a)| {
            buf.clear();
            buf.extend(set.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, b)| sq_dist(a, b)));
            let (_, kth, _) = buf.select_nth_unstable_by(k - 1, f64::total_cmp);
            *kth
        })
        .collect()
}

fn manifold_fraction(points: &[Vec<f64>], support: &[Vec<f64>], radii: &[f64]) -> f64 {
    let inside = points
        .iter()
        .filter(|p| support.iter().zip(radii).any(|(s, &r)| sq_dist(p, s) <= r))
        .count();
    inside as f64 / points.len() as f64
}

/// k-NN manifold recall and precision with exact pairwise distances.
pub fn knn_recall_precision(real: &[Vec<f64>], generated: &[Vec<f64>], k: usize) -> Result<(f64, f64)> {
    if real.is_empty() || generated.is_empty() {
        return Err(Error::contract("recall/precision need non-empty sets"));
    }
    if k == 0 || k >= real.len() || k >= generated.len() {
        return Err(Error::contract(format!(
            "k = {k} must be in 1..{}",
            real.len().min(generated.len())
        )));
    }
    let real_r = knn_radii(real, k);
    let gen_r = knn_radii(generated, k);
    Ok((
        manifold_fraction(real, generated, &gen_r),
        manifold_fraction(generated, real, &real_r),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frechet {
    pub distance: f64,
    /// A covariance was singular and received diagonal jitter.
    pub jittered: bool,
}

fn moments(set: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let d = set[0].len();
    let n = set.len() as f64;
    let mut mu = DVector::zeros(d);
    for x in set {
        mu += DVector::from_column_slice(x);
    }
    mu /= n;
    let mut cov = DMatrix::zeros(d, d);
    for x in set {
        let c = DVector::from_column_slice(x) - &mu;
        cov += &c * c.transpose();
    }
    cov /= n - 1.0;
    (mu, cov)
}

fn sym_eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    SymmetricEigen::new((m + m.transpose()) * 0.5)
}

fn is_singular(cov: &DMatrix<f64>) -> bool {
    let eig = sym_eigen(cov);
    let top = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    eig.eigenvalues.iter().any(|&l| l <= 1e-12 * top.max(1e-300))
}

/// Fréchet distance between Gaussians fitted to the two sets, reported squared
/// as in FID.
///
/// `tr((S_r S_g)^{1/2})` is computed as `tr((A S_g A)^{1/2})` with `A = S_r^{1/2}`,
/// which keeps every square root symmetric.
pub fn frechet_distance(real: &[Vec<f64>], generated: &[Vec<f64>]) -> Result<Frechet> {
    let d = real.first().map(Vec::len).unwrap_or(0);
    if d == 0 || generated.first().map(Vec::len) != Some(d) {
        return Err(Error::contract("Fréchet distance needs non-empty sets of equal dimension"));
    }
    if real.len() <= d || generated.len() <= d {
        return Err(Error::contract(format!("each set needs more than {d} points")));
    }
    let (mr, mut sr) = moments(real);
    let (mg, mut sg) = moments(generated);
    let mut jittered = false;
    for s in [&mut sr, &mut sg] {
        if is_singular(s) {
            for i in 0..d {
                s[(i, i)] += FD_JITTER;
            }
            jittered = true;
        }
    }
    let er = sym_eigen(&sr);
    let sqrt_vals = er.eigenvalues.map(|l| l.max(0.0).sqrt());
    let a = &er.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * er.eigenvectors.transpose();
    let inner = &a * &sg * &a;
    let tr_sqrt: f64 = sym_eigen(&inner).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let fd2 = (&mr - &mg).norm_squared() + sr.trace() + sg.trace() - 2.0 * tr_sqrt;
    if fd2 < -1e-9 {
        return Err(Error::NonFinite(format!("negative squared Fréchet distance {fd2}")));
    }
    Ok(Frechet {
        distance: fd2.max(0.0),
        jittered,
    })
}

/// Re-extracted latent agrees with the conditioning latent under the scheme's rule:
/// exact mode match, spatial parameters within `bin_tolerance` bins, and at least
/// 75% of voken ids equal.
pub fn latent_agrees(space: &LatentSpace, conditioned: &LatentSequence, extracted: &LatentSequence, bin_tolerance: u32) -> Result<bool> {
    if conditioned.scheme != extracted.scheme {
        return Err(Error::contract(format!(
            "scheme mismatch: {} vs {}",
            conditioned.scheme, extracted.scheme
        )));
    }
    let want = space.parse(conditioned)?;
    let Ok(got) = space.parse(extracted) else {
        return Ok(false);
    };
    let close = |a: u32, b: u32| a.abs_diff(b) <= bin_tolerance;
    let boxes_close = |a: &[crate::latents::BboxParams], b: &[crate::latents::BboxParams]| {
        a.len() == b.len()
            && a.iter().zip(b).all(|(p, q)| {
                close(p.x1, q.x1) && close(p.y1, q.y1) && close(p.x2, q.x2) && close(p.y2, q.y2)
            })
    };
    let vokens_close = |a: &[usize], b: &[usize]| {
        a.len() == b.len() && {
            let same = a.iter().zip(b).filter(|(x, y)| x == y).count();
            4 * same >= 3 * a.len()
        }
    };
    Ok(match (&want, &got) {
        (LatentContent::Text { mode: a }, LatentContent::Text { mode: b }) => a == b,
        (LatentContent::Bbox(a), LatentContent::Bbox(b)) => boxes_close(a, b),
        (LatentContent::Blob(a), LatentContent::Blob(b)) => {
            a.len() == b.len() && a.iter().zip(b).all(|(p, q)| p.iter().zip(q).all(|(x, y)| close(*x, *y)))
        }
        (LatentContent::Voken(a), LatentContent::Voken(b)) => vokens_close(a, b),
        (
            LatentContent::Combined { mode: ma, boxes: ba, vokens: va },
            LatentContent::Combined { mode: mb, boxes: bb, vokens: vb },
        ) => ma == mb && boxes_close(ba, bb) && vokens_close(va, vb),
        _ => false,
    })
}

/// Fraction of generated samples whose re-extracted latent agrees with the one they were conditioned on.
pub fn latent_adherence(space: &LatentSpace, samples: &[(Vec<f64>, usize, LatentSequence)]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::contract("adherence of an empty sample set"));
    }
    let mut hits = 0;
    for (x, class, z) in samples {
        if z.scheme != space.scheme() {
            return Err(Error::contract(format!(
                "sample conditioned on a {} latent, space uses {}",
                z.scheme,
                space.scheme()
            )));
        }
        // A sample with nothing to extract (a blank canvas) cannot adhere.
        let Ok(extracted) = space.extract(x, *class) else {
            continue;
        };
        if latent_agrees(space, z, &extracted, 1)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub gamma: f64,
    pub variant: String,
    pub seed: u64,
    pub n_samples: usize,
    pub n_real: usize,
    pub mode_coverage: Option<f64>,
    pub mode_counts: Vec<usize>,
    pub uncounted: usize,
    pub min_count: usize,
    pub minority_fraction: Option<f64>,
    pub recall: f64,
    pub precision: f64,
    pub k: usize,
    pub frechet_distance: f64,
    pub fd_jittered: bool,
    pub latent_adherence: Option<f64>,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        let fracs = [
            self.mode_coverage,
            self.minority_fraction,
            Some(self.recall),
            Some(self.precision),
            self.latent_adherence,
        ];
        if fracs.iter().flatten().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::contract("metric fraction outside [0, 1]"));
        }
        if !self.mode_counts.is_empty() && self.mode_counts.iter().sum::<usize>() + self.uncounted != self.n_samples {
            return Err(Error::contract("mode counts do not sum to the sample total"));
        }
        if !(self.frechet_distance >= 0.0) {
            return Err(Error::contract("Fréchet distance must be non-negative"));
        }
        Ok(())
    }
}

pub const SWEEP_HEADER: &str = "gamma,variant,coverage,recall,precision,fd,adherence,n,seed,minority_fraction";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub gamma: f64,
    pub variant: String,
    pub coverage: Option<f64>,
    pub recall: f64,
    pub precision: f64,
    pub fd: f64,
    pub adherence: Option<f64>,
    pub n: usize,
    pub seed: u64,
    pub minority_fraction: Option<f64>,
}

impl From<&MetricReport> for SweepRow {
    fn from(r: &MetricReport) -> Self {
        Self {
            gamma: r.gamma,
            variant: r.variant.clone(),
            coverage: r.mode_coverage,
            recall: r.recall,
            precision: r.precision,
            fd: r.frechet_distance,
            adherence: r.latent_adherence,
            n: r.n_samples,
            seed: r.seed,
            minority_fraction: r.minority_fraction,
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

pub fn write_sweep_csv<W: Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let mut out = std::io::BufWriter::new(out);
    writeln!(out, "{SWEEP_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{:?},{},{},{:?},{:?},{:?},{},{},{},{}",
            r.gamma,
            r.variant,
            opt(r.coverage),
            r.recall,
            r.precision,
            r.fd,
            opt(r.adherence),
            r.n,
            r.seed,
            opt(r.minority_fraction)
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Reads rows written by [`write_sweep_csv`].
pub fn read_sweep_csv<R: std::io::BufRead>(input: R) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line.trim() != SWEEP_HEADER {
                return Err(Error::parse(format!("expected header {SWEEP_HEADER:?}")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let num = |s: &str| s.parse::<f64>().ok();
        let opt_num = |s: &str| if s.is_empty() { Some(None) } else { num(s).map(Some) };
        let row = (f.len() == 10)
            .then(|| {
                Some(SweepRow {
                    gamma: num(f[0])?,
                    variant: f[1].to_string(),
                    coverage: opt_num(f[2])?,
                    recall: num(f[3])?,
                    precision: num(f[4])?,
                    fd: num(f[5])?,
                    adherence: opt_num(f[6])?,
                    n: f[7].parse().ok()?,
                    seed: f[8].parse().ok()?,
                    minority_fraction: opt_num(f[9])?,
                })
            })
            .flatten();
        match row {
            Some(r) => rows.push(r),
            None => errors.push(crate::error::ParseError {
                line: Some(i + 1),
                message: "malformed sweep row".into(),
            }),
        }
    }
    if errors.is_empty() {
        Ok(rows)
    } else {
        Err(Error::Parse(crate::error::ParseErrors(errors)))
    }
}
