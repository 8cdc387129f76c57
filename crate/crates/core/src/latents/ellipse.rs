//! Second-moment ellipse fitting.

use serde::{Deserialize, Serialize};

use super::grammar::BlobParams;
use crate::error::{Error, Result};

/// Radius given to degenerate fits.
pub const MIN_RADIUS: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipseFit {
    pub blob: BlobParams,
    /// Zero spread along at least one axis; radii were clamped to [`MIN_RADIUS`].
    pub degenerate: bool,
}

/// Moment fit of weighted points: center = weighted mean, radii = 2 sqrt(eigenvalue),
/// angle of the major eigenvector folded into `[0, 180)`.
pub fn ellipse_fit_weighted(points: &[[f64; 2]], weights: &[f64]) -> Result<EllipseFit> {
    if points.len() != weights.len() {
        return Err(Error::contract("one weight per point is required"));
    }
    if points.iter().flatten().chain(weights).any(|v| !v.is_finite()) || weights.iter().any(|&w| w < 0.0) {
        return Err(Error::contract("ellipse fit needs finite points and non-negative weights"));
    }
    let mass: f64 = weights.iter().sum();
    if !(mass > 0.0) {
        return Err(Error::contract("ellipse fit needs non-zero mass"));
    }
    let (mut mx, mut my) = (0.0, 0.0);
    for (p, w) in points.iter().zip(weights) {
        mx += w * p[0];
        my += w * p[1];
    }
    mx /= mass;
    my /= mass;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (p, w) in points.iter().zip(weights) {
        let (dx, dy) = (p[0] - mx, p[1] - my);
        sxx += w * dx * dx;
        sxy += w * dx * dy;
        syy += w * dy * dy;
    }
    sxx /= mass;
    sxy /= mass;
    syy /= mass;

    let half_tr = 0.5 * (sxx + syy);
    let disc = (0.25 * (sxx - syy) * (sxx - syy) + sxy * sxy).sqrt();
    let l1 = half_tr + disc;
    let l2 = (half_tr - disc).max(0.0);
    let theta = if disc == 0.0 {
        0.0
    } else {
        0.5 * (2.0 * sxy).atan2(sxx - syy)
    };
    let mut theta_deg = theta.to_degrees().rem_euclid(180.0);
    if theta_deg >= 180.0 {
        theta_deg = 0.0;
    }
    let r_major = 2.0 * l1.sqrt();
    let r_minor = 2.0 * l2.sqrt();
    let degenerate = r_minor < MIN_RADIUS;
    Ok(EllipseFit {
        blob: BlobParams {
            xc: mx,
            yc: my,
            r_major: r_major.max(MIN_RADIUS),
            r_minor: r_minor.max(MIN_RADIUS),
            theta_deg,
        },
        degenerate,
    })
}

pub fn ellipse_fit(points: &[[f64; 2]]) -> Result<EllipseFit> {
    if points.len() < 2 {
        return Err(Error::contract("ellipse fit needs at least two points"));
    }
    ellipse_fit_weighted(points, &vec![1.0; points.len()])
}

/// Fit to a row-major `size x size` mass grid with pixel centers at `i + 0.5`,
/// scaled by `scale` into output units.
pub fn ellipse_fit_grid(grid: &[f64], size: usize, scale: f64) -> Result<EllipseFit> {
    if grid.len() != size * size {
        return Err(Error::contract("grid length must be size * size"));
    }
    let points: Vec<[f64; 2]> = (0..size * size)
        .map(|k| [((k % size) as f64 + 0.5) * scale, ((k / size) as f64 + 0.5) * scale])
        .collect();
    ellipse_fit_weighted(&points, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn cloud(n: usize, sx: f64, sy: f64, seed: u64) -> Vec<[f64; 2]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                [sx * a, sy * b]
            })
            .collect()
    }

    #[test]
    fn anisotropic_gaussian_moments() {
        let pts: Vec<[f64; 2]> = cloud(10_000, 2.0, 1.0, 3).iter().map(|p| [p[0] + 5.0, p[1] + 5.0]).collect();
        let f = ellipse_fit(&pts).unwrap();
        let b = f.blob;
        assert!((b.xc - 5.0).abs() < 0.25 && (b.yc - 5.0).abs() < 0.25);
        assert!((b.r_major - 4.0).abs() < 0.2);
        assert!((b.r_minor - 2.0).abs() < 0.1);
        let th = b.theta_deg.min(180.0 - b.theta_deg);
        assert!(th < 3.0, "theta {}", b.theta_deg);
        assert!(!f.degenerate);
    }

    #[test]
    fn rotation_equivariance() {
        let pts = cloud(5000, 3.0, 1.0, 5);
        let base = ellipse_fit(&pts).unwrap().blob;
        let (s, c) = 30f64.to_radians().sin_cos();
        let rot: Vec<[f64; 2]> = pts.iter().map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1]]).collect();
        let r = ellipse_fit(&rot).unwrap().blob;
        let d = (r.theta_deg - base.theta_deg - 30.0).rem_euclid(180.0);
        assert!(d.min(180.0 - d) < 1e-9);
        assert!((r.r_major / base.r_major - 1.0).abs() < 0.01);
        assert!((r.r_minor / base.r_minor - 1.0).abs() < 0.01);
    }

    #[test]
    fn coincident_points_are_degenerate() {
        let f = ellipse_fit(&[[1.0, 1.0], [1.0, 1.0]]).unwrap();
        assert!(f.degenerate);
        assert_eq!(f.blob.r_major, MIN_RADIUS);
        assert!(f.blob.validate().is_ok());
        assert!(ellipse_fit(&[[1.0, 1.0]]).is_err());
        assert!(ellipse_fit_weighted(&[[0.0, 0.0]], &[0.0]).is_err());
    }

    #[test]
    fn collinear_points_flagged() {
        let f = ellipse_fit(&[[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]).unwrap();
        assert!(f.degenerate);
        assert!((f.blob.theta_deg - 45.0).abs() < 1e-9);
    }
}
