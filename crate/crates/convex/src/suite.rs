//! Randomized verification suites over many instances, each producing a
//! serializable report with measured and bound rates per instance.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::decoupled::{DecoupledInstance, LossKind};
use crate::error::{Error, Result};
use crate::quadratic::{ContractionRate, QuadraticBilevel};
use crate::rate::{certify, Certification, CertifyConfig};

/// Slack on the per-step ratio check against `‖T‖₂`.
pub const STEP_RATIO_SLACK: f64 = 1e-9;
/// Tolerance of the router-weight identity.
pub const IDENTITY_TOL: f64 = 1e-12;
/// Ridge added to the random quadratic Hessians.
const QUADRATIC_SHIFT: f64 = 0.01;
/// Scale of the random quadratic starting point.
const QUADRATIC_START_SCALE: f64 = 1.0;

/// Alternation on one quadratic instance.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QuadraticCase {
    pub theta_dim: usize,
    pub phi_dim: usize,
    pub rate: ContractionRate,
    /// Largest `‖Θ_{k+1}‖ / ‖Θ_k‖` over the sweeps with `Θ_k ≠ 0`.
    pub max_step_ratio: f64,
    pub steps_checked: usize,
    /// Every step ratio is within `‖T‖₂ + STEP_RATIO_SLACK`.
    pub step_bound_holds: bool,
    /// The `A`-weighted norm lies below `(L − μ)/L`.
    pub weighted_bound_holds: bool,
}

impl QuadraticCase {
    pub fn passed(&self) -> bool {
        self.step_bound_holds && self.weighted_bound_holds
    }
}

/// Runs `sweeps` alternations from `theta0` and compares step ratios with
/// the operator norms.
pub fn quadratic_case(inst: &QuadraticBilevel, theta0: &DVector<f64>, sweeps: usize) -> Result<QuadraticCase> {
    let rate = inst.contraction_rate()?;
    let norms = inst.alternate_norms(theta0, sweeps)?;
    let mut max_step_ratio: f64 = 0.0;
    let mut steps_checked = 0;
    for w in norms.windows(2) {
        if w[0] > 0.0 {
            max_step_ratio = max_step_ratio.max(w[1] / w[0]);
            steps_checked += 1;
        }
    }
    Ok(QuadraticCase {
        theta_dim: inst.theta_dim(),
        phi_dim: inst.phi_dim(),
        step_bound_holds: max_step_ratio <= rate.spectral_norm + STEP_RATIO_SLACK,
        weighted_bound_holds: rate.weighted_norm <= rate.eigen_bound + STEP_RATIO_SLACK,
        rate,
        max_step_ratio,
        steps_checked,
    })
}

/// `A = 2I₂`, `B = [2]`, `C = [1 0]`: the sweep scales the first coordinate
/// of Θ by exactly 1/4 and zeroes the second.
pub fn hand_instance() -> QuadraticBilevel {
    QuadraticBilevel::new(
        DMatrix::from_diagonal_element(2, 2, 2.0),
        DMatrix::from_element(1, 1, 2.0),
        DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
    )
    .expect("hand instance is positive definite")
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HandCheck {
    /// `Θ_{k+1}[0] / Θ_k[0]` per sweep.
    pub first_coordinate_ratios: Vec<f64>,
    /// Every ratio equals 0.25 bitwise.
    pub exact: bool,
}

pub fn hand_check(sweeps: usize) -> Result<HandCheck> {
    let traj = hand_instance().alternate(&DVector::from_vec(vec![1.0, 1.0]), sweeps)?;
    let ratios: Vec<f64> = traj.windows(2).map(|w| w[1][0] / w[0][0]).collect();
    let exact = ratios.iter().all(|&r| r == 0.25) && traj.iter().skip(1).all(|t| t[1] == 0.0);
    Ok(HandCheck {
        first_coordinate_ratios: ratios,
        exact,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QuadraticReport {
    pub hand: HandCheck,
    pub cases: Vec<QuadraticCase>,
    pub passed: bool,
}

/// `instances` random instances with Θ and Φ dimensions in `1..=max_dim`,
/// followed by every instance in `extra`.
pub fn quadratic_suite(seed: u64, instances: usize, max_dim: usize, sweeps: usize, extra: &[QuadraticBilevel]) -> Result<QuadraticReport> {
    if max_dim == 0 {
        return Err(Error::InvalidParameter("quadratic max_dim must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::with_capacity(instances + extra.len());
    for _ in 0..instances {
        let p = rng.random_range(1..=max_dim);
        let q = rng.random_range(1..=max_dim);
        let inst = QuadraticBilevel::random(&mut rng, p, q, QUADRATIC_SHIFT)?;
        let theta0 = DVector::from_fn(p, |_, _| QUADRATIC_START_SCALE * (2.0 * rng.random::<f64>() - 1.0));
        cases.push(quadratic_case(&inst, &theta0, sweeps)?);
    }
    for inst in extra {
        let theta0 = DVector::from_element(inst.theta_dim(), 1.0);
        cases.push(quadratic_case(inst, &theta0, sweeps)?);
    }
    let hand = hand_check(sweeps)?;
    let passed = hand.exact && cases.iter().all(QuadraticCase::passed);
    Ok(QuadraticReport { hand, cases, passed })
}

/// Shapes and penalties of random decoupled instances.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecoupledSuiteConfig {
    pub instances: usize,
    pub max_dim: usize,
    pub max_samples: usize,
    /// Instances have `N + 1` experts with `N` in `1..=max_specialists`.
    pub max_specialists: usize,
    pub loss: LossKind,
    pub mu_pen: f64,
    pub certify: CertifyConfig,
}

impl DecoupledSuiteConfig {
    fn validate(&self) -> Result<()> {
        if self.max_dim == 0 || self.max_samples == 0 || self.max_specialists == 0 {
            return Err(Error::InvalidParameter(
                "decoupled max_dim, max_samples and max_specialists must be at least 1".into(),
            ));
        }
        if !(self.mu_pen > 0.0 && self.mu_pen.is_finite()) {
            return Err(Error::InvalidParameter(format!("mu_pen must be positive, got {}", self.mu_pen)));
        }
        Ok(())
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> Result<DecoupledInstance> {
        let d = rng.random_range(1..=self.max_dim);
        let n = rng.random_range(1..=self.max_samples);
        let experts = rng.random_range(1..=self.max_specialists) + 1;
        DecoupledInstance::random(rng, d, n, experts, self.loss, 0.0, self.mu_pen)
    }
}

/// Certification of one instance plus the observed per-sweep rate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecoupledCase {
    pub certification: Certification,
    /// Largest `((F_k − F*)/(F_0 − F*))^{1/(2k)}` over sweeps whose gap is
    /// above the envelope floor; comparable with the bound `1 − μ/L`.
    pub measured_rate: f64,
    pub bound_rate: f64,
    pub passed: bool,
}

fn measured_rate(values: &[f64], f_star: f64) -> f64 {
    let gap0 = values[0] - f_star;
    if gap0 <= 0.0 {
        return 0.0;
    }
    let floor = crate::rate::ENVELOPE_FLOOR * f_star.abs().max(1.0);
    values
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(_, &f)| f - f_star > floor)
        .map(|(k, &f)| ((f - f_star) / gap0).powf(1.0 / (2 * k) as f64))
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecoupledReport {
    pub cases: Vec<DecoupledCase>,
    pub passed: bool,
}

/// Certifies random instances at the strong-convexity `α`.
pub fn decoupled_suite(seed: u64, cfg: &DecoupledSuiteConfig) -> Result<DecoupledReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::with_capacity(cfg.instances);
    for _ in 0..cfg.instances {
        let inst = cfg.draw(&mut rng)?;
        let certification = certify(inst, true, &cfg.certify, &mut rng)?;
        let passed = certification.passed();
        cases.push(DecoupledCase {
            measured_rate: measured_rate(&certification.values, certification.f_star),
            bound_rate: certification.rate.factor,
            certification,
            passed,
        });
    }
    let passed = cases.iter().all(|c| c.passed);
    Ok(DecoupledReport { cases, passed })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IdentityReport {
    /// `|F_μ(Θ, Φ, π_Φ) − coupled(Θ, Φ)|` per instance.
    pub gaps: Vec<f64>,
    pub max_gap: f64,
    pub passed: bool,
}

/// With Λ set to the router probabilities the KL block vanishes and the
/// decoupled objective equals the coupled one.
pub fn identity_suite(seed: u64, instances: usize, cfg: &DecoupledSuiteConfig) -> Result<IdentityReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gaps = Vec::with_capacity(instances);
    for _ in 0..instances {
        let mut inst = cfg.draw(&mut rng)?;
        inst.alpha = rng.random_range(0.0..2.0);
        inst.vars.lambda = inst.router_probs(&inst.vars.phi);
        let coupled = inst.coupled_objective(&inst.vars.theta, &inst.vars.phi);
        gaps.push((inst.objective()? - coupled).abs());
    }
    let max_gap = gaps.iter().copied().fold(0.0, f64::max);
    Ok(IdentityReport {
        passed: max_gap < IDENTITY_TOL,
        gaps,
        max_gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DecoupledSuiteConfig {
        DecoupledSuiteConfig {
            instances: 2,
            max_dim: 3,
            max_samples: 8,
            max_specialists: 2,
            loss: LossKind::Quadratic,
            mu_pen: 1.0,
            certify: CertifyConfig {
                iterations: 40,
                curvature_trials: 100,
                convexity_trials: 50,
            },
        }
    }

    #[test]
    fn hand_check_is_exact() {
        let h = hand_check(8).unwrap();
        assert!(h.exact);
        assert_eq!(h.first_coordinate_ratios, vec![0.25; 8]);
    }

    #[test]
    fn quadratic_suite_is_reproducible_and_passes() {
        let a = quadratic_suite(5, 10, 4, 20, &[]).unwrap();
        let b = quadratic_suite(5, 10, 4, 20, &[]).unwrap();
        assert_eq!(a, b);
        assert!(a.passed);
        assert_eq!(a.cases.len(), 10);
    }

    #[test]
    fn extra_instances_are_appended() {
        let r = quadratic_suite(0, 0, 1, 5, &[hand_instance()]).unwrap();
        assert_eq!(r.cases.len(), 1);
        assert!((r.cases[0].max_step_ratio - 0.25).abs() < 1e-15);
    }

    #[test]
    fn measured_rate_of_a_geometric_sequence() {
        // Gap halves each sweep, so the per-sweep rate is 0.5^{1/2}.
        let values: Vec<f64> = (0..10).map(|k| 0.5f64.powi(k)).collect();
        assert!((measured_rate(&values, 0.0) - 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(measured_rate(&[1.0, 1.0], 1.0), 0.0);
    }

    #[test]
    fn small_decoupled_suite_passes() {
        let r = decoupled_suite(3, &small()).unwrap();
        assert!(r.passed, "{:?}", r.cases.iter().map(|c| c.passed).collect::<Vec<_>>());
        assert!(r.cases.iter().all(|c| c.measured_rate < 1.0));
    }

    #[test]
    fn identity_holds_on_small_instances() {
        let r = identity_suite(4, 10, &small()).unwrap();
        assert!(r.passed, "{}", r.max_gap);
    }

    #[test]
    fn degenerate_settings_are_rejected() {
        assert!(quadratic_suite(0, 1, 0, 5, &[]).is_err());
        let mut cfg = small();
        cfg.mu_pen = 0.0;
        assert!(decoupled_suite(0, &cfg).is_err());
    }
}
