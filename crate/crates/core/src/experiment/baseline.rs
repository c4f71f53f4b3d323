//! Marginal chance constraints for Gaussian obstacles, tightened through the
//! inverse error function.

use nalgebra::Matrix2;
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::function::erf::erf_inv;

use crate::error::{Error, Result};
use crate::geometry::Halfspace;
use crate::uncertainty::{keyed_rng, Vec2};

/// Distance added to `r` along the linearization direction.
pub fn tightening(direction: Vec2, sigma: &Matrix2<f64>, epsilon_k: f64) -> f64 {
    let var = (direction.transpose() * sigma * direction)[(0, 0)];
    erf_inv(1.0 - 2.0 * epsilon_k) * (2.0 * var.max(0.0)).sqrt()
}

/// The constraint `a'(p - mean) - r >= erf^-1(1 - 2 eps) sqrt(2 a' Sigma a)`
/// with `a` pointing from the mean to `p`, as a halfspace in `p`.
pub fn gaussian_baseline_halfspace(p: Vec2, mean: Vec2, sigma: &Matrix2<f64>, r: f64, epsilon_k: f64) -> Result<Halfspace> {
    if !(epsilon_k > 0.0 && epsilon_k <= 0.5) {
        return Err(Error::InvalidArgument(format!("epsilon_k must lie in (0, 0.5], got {epsilon_k}")));
    }
    let symmetric = (sigma[(0, 1)] - sigma[(1, 0)]).abs() <= 1e-12 * (1.0 + sigma.abs().max());
    let det = sigma[(0, 0)] * sigma[(1, 1)] - sigma[(0, 1)] * sigma[(1, 0)];
    if !symmetric || sigma[(0, 0)] < 0.0 || sigma[(1, 1)] < 0.0 || det < -1e-12 {
        return Err(Error::InvalidArgument("covariance must be symmetric positive semidefinite".into()));
    }
    let d = p - mean;
    let dist = d.norm();
    if !(dist > 1e-12) {
        return Err(Error::DegenerateDirection);
    }
    let a = d / dist;
    let c = tightening(a, sigma, epsilon_k);
    // a'p >= a'mean + r + c
    Ok(Halfspace::new(-a, -(a.dot(&mean) + r + c)))
}

/// Fraction of draws `delta ~ N(mean, sigma)` for which a point on the
/// boundary of the tightened constraint collides with the linearized disc,
/// i.e. `a'(p - delta) < r`.
pub fn boundary_violation_frequency(
    direction: Vec2,
    sigma: &Matrix2<f64>,
    r: f64,
    epsilon_k: f64,
    samples: usize,
    seed: u64,
) -> f64 {
    let a = direction.normalize();
    let mean = Vec2::zeros();
    let p = mean + a * (r + tightening(a, sigma, epsilon_k));
    let chol = sigma.cholesky().map(|c| c.l()).unwrap_or_else(|| {
        // semidefinite: diagonal square roots are exact for the diagonal models used here
        Matrix2::new(sigma[(0, 0)].max(0.0).sqrt(), 0.0, 0.0, sigma[(1, 1)].max(0.0).sqrt())
    });
    let mut rng = keyed_rng(seed, 0, 0);
    let hits = (0..samples)
        .filter(|_| {
            let z = Vec2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
            let delta = mean + chol * z;
            a.dot(&(p - delta)) < r
        })
        .count();
    hits as f64 / samples as f64
}
