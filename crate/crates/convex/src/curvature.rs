//! Joint strong convexity of the decoupled objective.
//!
//! The objective is jointly strongly convex in `(Θ, Φ, Λ)` once
//! `α ≥ 2‖x‖²·max{μ, ρ²/μ}`, where `ρ` bounds `|ℓ'|`. For the logistic loss
//! `ρ = 1`. The quadratic loss has no global bound, so `ρ` is taken over the
//! sublevel set of the starting point, which every monotone sweep stays in:
//! there `‖Θ‖_F ≤ √(2F₀/α)` and `|ℓ'(t)| ≤ max|bᵢ| + ‖x‖·‖Θ‖_F`. That bound
//! shrinks as `α` grows, so the smallest admissible `α` is found by
//! bisection.
//!
//! Curvature `zᵀ∇²F z` is estimated by central second differences along
//! unit directions whose Λ part sums to zero per column, so probes stay on
//! the simplex.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::decoupled::{DecoupledInstance, LossKind, Variables};
use crate::error::{Error, Result};

/// Finite-difference step along unit directions.
pub const FD_STEP: f64 = 1e-4;

/// `2‖x‖²·max{μ, ρ²/μ}`.
pub fn alpha_bound(x_norm: f64, mu: f64, rho: f64) -> f64 {
    2.0 * x_norm * x_norm * mu.max(rho * rho / mu)
}

/// Bound on `|ℓ'|` over the sublevel set of `start` at weight decay `alpha`.
pub fn derivative_bound(inst: &DecoupledInstance, start: &Variables, alpha: f64) -> Result<f64> {
    match inst.loss {
        LossKind::Logistic => Ok(1.0),
        LossKind::Quadratic => {
            let mut probe = inst.clone();
            probe.alpha = 0.0;
            let rest = probe.objective_at(start)?;
            let radius = (2.0 * rest / alpha + start.theta.norm_squared() + start.phi.norm_squared()).sqrt();
            Ok(inst.targets.amax() + inst.max_x_norm() * radius)
        }
    }
}

/// Smallest `α` satisfying the strong-convexity bound from `start`.
pub fn certified_alpha(inst: &DecoupledInstance, start: &Variables) -> Result<f64> {
    if !(inst.mu > 0.0) {
        return Err(Error::InvalidParameter("the bound needs μ > 0".into()));
    }
    let x = inst.max_x_norm();
    let gap = |a: f64| -> Result<f64> { Ok(a - alpha_bound(x, inst.mu, derivative_bound(inst, start, a)?)) };
    if inst.loss == LossKind::Logistic {
        return Ok(alpha_bound(x, inst.mu, 1.0));
    }
    let floor = alpha_bound(x, inst.mu, inst.targets.amax());
    if floor == 0.0 {
        return Ok(0.0);
    }
    let mut lo = floor;
    let mut hi = floor.max(1e-12);
    while gap(hi)? < 0.0 {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if gap(mid)? >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Central second difference of `F` at `point` along `dir`, divided by
/// `‖dir‖²`. The step shrinks when needed to keep Λ strictly positive.
pub fn directional_curvature(inst: &DecoupledInstance, point: &Variables, dir: &Variables) -> Result<f64> {
    let norm2 = dir.norm_squared();
    if norm2 == 0.0 {
        return Err(Error::InvalidParameter("zero direction".into()));
    }
    let scale = norm2.sqrt();
    let mut h = FD_STEP / scale;
    let lam_dir_max = dir.lambda.amax();
    if lam_dir_max > 0.0 {
        h = h.min(0.5 * point.lambda.min() / lam_dir_max);
    }
    let f0 = inst.objective_at(point)?;
    let fp = inst.objective_at(&point.offset(dir, h))?;
    let fm = inst.objective_at(&point.offset(dir, -h))?;
    Ok((fp - 2.0 * f0 + fm) / (h * h * norm2))
}

/// Random direction with a random subset of the three blocks active; Λ
/// columns are projected to sum to zero.
pub fn random_direction<R: Rng>(rng: &mut R, like: &Variables) -> Variables {
    let mut dir = like.zeros_like();
    let mask = loop {
        let m: [bool; 3] = [rng.random(), rng.random(), rng.random()];
        if m.iter().any(|&b| b) && !(like.lambda.nrows() == 1 && m == [false, false, true]) {
            break m;
        }
    };
    let mut fill = |m: &mut DMatrix<f64>| {
        m.iter_mut().for_each(|v| *v = StandardNormal.sample(rng));
    };
    if mask[0] {
        fill(&mut dir.theta);
    }
    if mask[1] {
        fill(&mut dir.phi);
    }
    if mask[2] && like.lambda.nrows() > 1 {
        fill(&mut dir.lambda);
        for mut col in dir.lambda.column_iter_mut() {
            let mean = col.mean();
            col.add_scalar_mut(-mean);
        }
    }
    let n = dir.norm_squared().sqrt();
    dir.scale(1.0 / n);
    dir
}

/// Minimum and maximum sampled curvature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CurvatureRange {
    pub min: f64,
    pub max: f64,
    pub samples: usize,
}

/// Curvature along `trials` random directions, cycling through `points`.
pub fn sample_curvature<R: Rng>(inst: &DecoupledInstance, points: &[Variables], trials: usize, rng: &mut R) -> Result<CurvatureRange> {
    if points.is_empty() || trials == 0 {
        return Err(Error::InvalidParameter("curvature sampling needs points and trials".into()));
    }
    let mut range = CurvatureRange {
        min: f64::INFINITY,
        max: f64::NEG_INFINITY,
        samples: trials,
    };
    for k in 0..trials {
        let point = &points[k % points.len()];
        let dir = random_direction(rng, point);
        let c = directional_curvature(inst, point, &dir)?;
        range.min = range.min.min(c);
        range.max = range.max.max(c);
    }
    Ok(range)
}

/// Random feasible point for the curvature check: Θ inside the sublevel
/// ball of radius `theta_radius`, Φ Gaussian, Λ an interior Dirichlet draw.
pub fn random_point<R: Rng>(rng: &mut R, inst: &DecoupledInstance, theta_radius: f64) -> Variables {
    let mut v = inst.vars.zeros_like();
    v.theta.iter_mut().for_each(|x| *x = StandardNormal.sample(rng));
    let r = theta_radius * rng.random::<f64>() / v.theta.norm().max(f64::MIN_POSITIVE);
    v.theta *= r;
    v.phi.iter_mut().for_each(|x| *x = StandardNormal.sample(rng));
    let m = v.lambda.nrows();
    for mut col in v.lambda.column_iter_mut() {
        // Exponential draws normalize to a flat Dirichlet; mixing with the
        // uniform keeps finite-difference probes off the boundary.
        col.iter_mut().for_each(|x| *x = -(1.0 - rng.random::<f64>()).ln());
        let s = col.sum();
        col.iter_mut().for_each(|x| *x = 0.9 * *x / s + 0.1 / m as f64);
    }
    v
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ConvexityCheck {
    pub alpha: f64,
    pub alpha_bound: f64,
    pub min_curvature: f64,
    pub strongly_convex: bool,
}

/// Samples `trials` random points and directions, reporting the smallest
/// curvature seen. Points respect the sublevel-set radius of `start`.
pub fn strong_convexity_check<R: Rng>(inst: &DecoupledInstance, start: &Variables, trials: usize, rng: &mut R) -> Result<ConvexityCheck> {
    let alpha_needed = alpha_bound(inst.max_x_norm(), inst.mu, derivative_bound(inst, start, inst.alpha)?);
    let radius = match inst.loss {
        LossKind::Logistic => 3.0,
        LossKind::Quadratic => {
            let mut probe = inst.clone();
            probe.alpha = 0.0;
            let rest = probe.objective_at(start)?;
            (2.0 * rest / inst.alpha + start.theta.norm_squared() + start.phi.norm_squared()).sqrt()
        }
    };
    let mut min = f64::INFINITY;
    for _ in 0..trials {
        let p = random_point(rng, inst, radius);
        let d = random_direction(rng, &p);
        min = min.min(directional_curvature(inst, &p, &d)?);
    }
    Ok(ConvexityCheck {
        alpha: inst.alpha,
        alpha_bound: alpha_needed,
        min_curvature: min,
        strongly_convex: min > 0.0,
    })
}

/// Directed search for negative curvature along mixed Θ–Λ directions at the
/// current variables: for each sample `i`, `Λ` moves along `e₀ − e₁` in
/// column `i` and `Θ` along `c·xᵢ(e₀ − e₁)ᵀ` for a range of signed `c`.
/// The loss cross term `ℓ'·⟨h, Hᵀxᵢ⟩` is then linear in `c` and dominates
/// when `α` is small.
pub fn directed_min_curvature(inst: &DecoupledInstance) -> Result<f64> {
    let m = inst.experts();
    if m < 2 {
        return Err(Error::InvalidParameter("mixed directions need two experts".into()));
    }
    let point = &inst.vars;
    let mut best = f64::INFINITY;
    for i in 0..inst.samples() {
        for c in [-100.0, -10.0, -1.0, -0.1, 0.1, 1.0, 10.0, 100.0] {
            let mut dir = point.zeros_like();
            dir.lambda[(0, i)] = 1.0;
            dir.lambda[(1, i)] = -1.0;
            for k in 0..inst.dim() {
                dir.theta[(k, 0)] = c * inst.x[(k, i)];
                dir.theta[(k, 1)] = -c * inst.x[(k, i)];
            }
            best = best.min(directional_curvature(inst, point, &dir)?);
        }
    }
    Ok(best)
}
