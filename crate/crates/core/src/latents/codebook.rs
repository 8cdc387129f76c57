//! k-means vector quantizer used by the voken scheme.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MAX_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    /// Centroids, each of length `dim`.
    pub centroids: Vec<Vec<f64>>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl Codebook {
    pub fn new(centroids: Vec<Vec<f64>>) -> Result<Self> {
        let dim = centroids
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::contract("codebook needs at least one centroid"))?;
        if dim == 0 || centroids.iter().any(|c| c.len() != dim) {
            return Err(Error::contract("codebook centroids must share a positive dimension"));
        }
        Ok(Self { centroids })
    }

    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.centroids[0].len()
    }

    /// Nearest centroid; ties go to the lowest id.
    pub fn nearest(&self, x: &[f64]) -> Result<usize> {
        if x.len() != self.dim() {
            return Err(Error::contract(format!(
                "vector of length {} against codebook dimension {}",
                x.len(),
                self.dim()
            )));
        }
        let mut best = (0, f64::INFINITY);
        for (i, c) in self.centroids.iter().enumerate() {
            let d = sq_dist(x, c);
            if d < best.1 {
                best = (i, d);
            }
        }
        Ok(best.0)
    }

    /// Splits `x` into `chunks` equal contiguous pieces and quantizes each.
    pub fn encode_chunks(&self, x: &[f64], chunks: usize) -> Result<Vec<usize>> {
        if chunks == 0 || x.len() != chunks * self.dim() {
            return Err(Error::contract(format!(
                "cannot split a vector of length {} into {chunks} chunks of dimension {}",
                x.len(),
                self.dim()
            )));
        }
        x.chunks(self.dim()).map(|c| self.nearest(c)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(ids.len() * self.dim());
        for &id in ids {
            let c = self.centroids.get(id).ok_or_else(|| {
                Error::contract(format!("voken id {id} >= codebook size {}", self.len()))
            })?;
            out.extend_from_slice(c);
        }
        Ok(out)
    }

    /// Mean squared distance from each sample to its nearest centroid.
    pub fn objective(&self, samples: &[Vec<f64>]) -> f64 {
        let total: f64 = samples
            .iter()
            .map(|s| self.centroids.iter().map(|c| sq_dist(s, c)).fold(f64::INFINITY, f64::min))
            .sum();
        total / samples.len().max(1) as f64
    }
}

/// Lloyd iterations with k-means++ seeding. Returns the codebook and the
/// objective after seeding and after every iteration.
pub fn build_codebook_traced(
    samples: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<(Codebook, Vec<f64>)> {
    if k < 1 {
        return Err(Error::contract("codebook size k must be at least 1"));
    }
    let dim = samples.first().map(Vec::len).unwrap_or(0);
    if dim == 0 || samples.iter().any(|s| s.len() != dim) {
        return Err(Error::contract("codebook samples must share a positive dimension"));
    }
    let mut distinct: Vec<&Vec<f64>> = Vec::new();
    for s in samples {
        if !distinct.iter().any(|d| *d == s) {
            distinct.push(s);
            if distinct.len() >= k {
                break;
            }
        }
    }
    if distinct.len() < k {
        return Err(Error::contract(format!(
            "k = {k} exceeds the {} distinct samples",
            distinct.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![samples[rng.random_range(0..samples.len())].clone()];
    let mut d2: Vec<f64> = samples.iter().map(|s| sq_dist(s, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let mut pick = rng.random::<f64>() * total;
        let mut idx = d2.iter().rposition(|&d| d > 0.0).expect("distinct samples remain");
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && pick < d {
                idx = i;
                break;
            }
            pick -= d;
        }
        centroids.push(samples[idx].clone());
        for (d, s) in d2.iter_mut().zip(samples) {
            *d = d.min(sq_dist(s, &centroids[centroids.len() - 1]));
        }
    }

    let mut book = Codebook::new(centroids)?;
    let mut trace = vec![book.objective(samples)];
    let mut assign = vec![usize::MAX; samples.len()];
    for _ in 0..max_iters {
        let mut changed = false;
        for (a, s) in assign.iter_mut().zip(samples) {
            let n = book.nearest(s)?;
            changed |= *a != n;
            *a = n;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&a, s) in assign.iter().zip(samples) {
            counts[a] += 1;
            for (acc, v) in sums[a].iter_mut().zip(s) {
                *acc += v;
            }
        }
        for ((c, sum), &n) in book.centroids.iter_mut().zip(sums).zip(&counts) {
            // An emptied cluster keeps its old centroid.
            if n > 0 {
                *c = sum.into_iter().map(|v| v / n as f64).collect();
            }
        }
        trace.push(book.objective(samples));
        if !changed {
            break;
        }
    }
    Ok((book, trace))
}

pub fn build_codebook(samples: &[Vec<f64>], k: usize, seed: u64) -> Result<Codebook> {
    build_codebook_traced(samples, k, seed, DEFAULT_MAX_ITERS).map(|(b, _)| b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn k_equals_n_recovers_points() {
        let pts = vec![vec![0.0, 1.0], vec![2.0, 2.0], vec![-1.0, 5.0]];
        let book = build_codebook(&pts, 3, 4).unwrap();
        assert_eq!(book.objective(&pts), 0.0);
        for p in &pts {
            assert!(book.centroids.contains(p));
        }
    }

    #[test]
    fn nearest_centroid_1d() {
        let book = Codebook::new(vec![vec![-1.0], vec![1.0]]).unwrap();
        assert_eq!(book.nearest(&[0.9]).unwrap(), 1);
        assert_eq!(book.decode(&[1, 0]).unwrap(), vec![1.0, -1.0]);
        assert!(book.decode(&[2]).is_err());
    }

    #[test]
    fn two_clusters_are_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = Normal::new(0.0, 0.5).unwrap();
        let mut pts = Vec::new();
        for i in 0..2000 {
            let c = if i % 2 == 0 { -10.0 } else { 10.0 };
            pts.push(vec![c + n.sample(&mut rng), 3.0 + n.sample(&mut rng)]);
        }
        let (book, trace) = build_codebook_traced(&pts, 2, 9, 50).unwrap();
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        let mut xs: Vec<f64> = book.centroids.iter().map(|c| c[0]).collect();
        xs.sort_by(f64::total_cmp);
        assert!((xs[0] + 10.0).abs() < 0.5 && (xs[1] - 10.0).abs() < 0.5);
        assert!(book.centroids.iter().all(|c| (c[1] - 3.0).abs() < 0.15));
    }

    #[test]
    fn rejects_bad_k() {
        let pts = vec![vec![1.0], vec![1.0]];
        assert!(build_codebook(&pts, 0, 0).is_err());
        assert!(build_codebook(&pts, 2, 0).is_err());
    }
}
