//! Linear-rate certification of the three-block alternation.
//!
//! For a `μ`-strongly convex objective with `L`-Lipschitz gradient, exact
//! alternating minimization satisfies
//! `F_k − F* ≤ (1 − μ/L)^{2k} (F_0 − F*)`. The constants are estimated by
//! curvature sampling along the trajectory and widened by 0.9× and 1.1×;
//! `F*` is the value at which the sweeps stagnate.

use rand::Rng;
use serde::Serialize;

use crate::curvature::{certified_alpha, sample_curvature, strong_convexity_check, ConvexityCheck, CurvatureRange};
use crate::decoupled::{DecoupledInstance, LossKind, Variables};
use crate::error::{Error, Result};

/// Multiplicative slack on the envelope.
pub const ENVELOPE_SLACK: f64 = 1e-6;
/// Absolute floor, relative to `max(1, |F*|)`, below which residuals are
/// rounding noise.
pub const ENVELOPE_FLOOR: f64 = 1e-13;
/// Sweeps stop once one changes the objective by less than this.
pub const STAGNATION_TOL: f64 = 1e-14;
/// Tolerance on the per-block monotone-descent check.
pub const DESCENT_TOL: f64 = 1e-12;

const STAGNATION_MAX_SWEEPS: usize = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateCheck {
    pub holds: bool,
    /// First iteration at which the envelope fails.
    pub first_violation: Option<usize>,
    /// Largest `(F_k − F*) / envelope_k` seen.
    pub worst_ratio: f64,
    pub factor: f64,
}

/// Checks `F_k − F* ≤ (1 − μ/L)^{2k}(F_0 − F*)(1 + slack) + floor` for all `k`.
pub fn verify_linear_rate(values: &[f64], mu_sc: f64, l_sc: f64, f_star: f64) -> Result<RateCheck> {
    if !(mu_sc > 0.0 && l_sc >= mu_sc) {
        return Err(Error::InvalidParameter(format!("need 0 < μ ≤ L, got μ = {mu_sc}, L = {l_sc}")));
    }
    let first = *values.first().ok_or_else(|| Error::InvalidParameter("empty trajectory".into()))?;
    let factor = 1.0 - mu_sc / l_sc;
    let gap0 = (first - f_star).max(0.0);
    let floor = ENVELOPE_FLOOR * f_star.abs().max(1.0);
    let mut check = RateCheck {
        holds: true,
        first_violation: None,
        worst_ratio: 0.0,
        factor,
    };
    for (k, &f) in values.iter().enumerate() {
        let envelope = factor.powi(2 * k as i32) * gap0 * (1.0 + ENVELOPE_SLACK) + floor;
        let gap = f - f_star;
        check.worst_ratio = check.worst_ratio.max(gap / envelope);
        if gap > envelope && check.first_violation.is_none() {
            check.holds = false;
            check.first_violation = Some(k);
        }
    }
    Ok(check)
}

/// Settings of one certification run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CertifyConfig {
    pub iterations: usize,
    pub curvature_trials: usize,
    pub convexity_trials: usize,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            curvature_trials: 1000,
            convexity_trials: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InstanceSummary {
    pub dim: usize,
    pub samples: usize,
    pub experts: usize,
    pub loss: LossKind,
    pub alpha: f64,
    pub mu_pen: f64,
}

/// Everything measured on one instance.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Certification {
    pub instance: InstanceSummary,
    pub convexity: ConvexityCheck,
    pub curvature: CurvatureRange,
    pub mu_sc: f64,
    pub l_sc: f64,
    pub f_star: f64,
    pub stagnation_sweeps: usize,
    /// `F` after each sweep, starting with the initial value.
    pub values: Vec<f64>,
    /// Largest increase across any single block step.
    pub max_block_increase: f64,
    pub monotone: bool,
    pub rate: RateCheck,
}

impl Certification {
    pub fn passed(&self) -> bool {
        self.monotone && self.rate.holds && self.convexity.strongly_convex
    }
}

/// Sets `α` to the strong-convexity bound when `auto_alpha`, runs the
/// alternation, and checks descent, convexity and the rate envelope.
pub fn certify<R: Rng>(mut inst: DecoupledInstance, auto_alpha: bool, cfg: &CertifyConfig, rng: &mut R) -> Result<Certification> {
    let start = inst.vars.clone();
    if auto_alpha {
        inst.alpha = certified_alpha(&inst, &start)?;
    }
    let convexity = strong_convexity_check(&inst, &start, cfg.convexity_trials, rng)?;
    let mut points: Vec<Variables> = vec![start];
    let mut values = vec![inst.objective()?];
    let mut max_block_increase = f64::NEG_INFINITY;
    for _ in 0..cfg.iterations {
        let f = inst.sweep()?;
        for k in 1..4 {
            max_block_increase = max_block_increase.max(f[k] - f[k - 1]);
        }
        values.push(f[3]);
        points.push(inst.vars.clone());
    }
    let mut f_star = *values.last().expect("non-empty");
    let mut stagnation_sweeps = 0;
    loop {
        if stagnation_sweeps >= STAGNATION_MAX_SWEEPS {
            return Err(Error::NoConvergence {
                solver: "alternation to stagnation",
                iterations: stagnation_sweeps,
                residual: f_star,
            });
        }
        let f = inst.sweep()?[3];
        stagnation_sweeps += 1;
        let delta = (f_star - f).abs();
        f_star = f_star.min(f);
        if delta < STAGNATION_TOL {
            break;
        }
    }
    let curvature = sample_curvature(&inst, &points, cfg.curvature_trials, rng)?;
    let mu_sc = 0.9 * curvature.min;
    let l_sc = 1.1 * curvature.max;
    let rate = verify_linear_rate(&values, mu_sc, l_sc, f_star)?;
    Ok(Certification {
        instance: InstanceSummary {
            dim: inst.dim(),
            samples: inst.samples(),
            experts: inst.experts(),
            loss: inst.loss,
            alpha: inst.alpha,
            mu_pen: inst.mu,
        },
        convexity,
        curvature,
        mu_sc,
        l_sc,
        f_star,
        stagnation_sweeps,
        monotone: max_block_increase <= DESCENT_TOL,
        max_block_increase,
        values,
        rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn converged_start_has_zero_residuals() {
        let check = verify_linear_rate(&[1.5; 10], 0.1, 1.0, 1.5).unwrap();
        assert!(check.holds);
        assert_eq!(check.worst_ratio, 0.0);
    }

    #[test]
    fn envelope_violations_are_located() {
        // Factor 0.5 per sweep squared: envelope 1, 0.25, 0.0625, ...
        let check = verify_linear_rate(&[1.0, 0.2, 0.1], 0.5, 1.0, 0.0).unwrap();
        assert!(!check.holds);
        assert_eq!(check.first_violation, Some(2));
        assert!(verify_linear_rate(&[1.0, 0.25, 0.0625], 0.5, 1.0, 0.0).unwrap().holds);
        assert!(verify_linear_rate(&[1.0], 1.0, 0.5, 0.0).is_err());
    }

    #[test]
    fn quadratic_instance_certifies_over_two_hundred_sweeps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inst = DecoupledInstance::random(&mut rng, 3, 10, 3, LossKind::Quadratic, 0.0, 1.0).unwrap();
        let cert = certify(inst, true, &CertifyConfig::default(), &mut rng).unwrap();
        assert!(cert.passed(), "{cert:?}");
        assert_eq!(cert.values.len(), 201);
        // Observed decay is far faster than the envelope.
        assert!(cert.rate.worst_ratio < 1.0);
    }
}
