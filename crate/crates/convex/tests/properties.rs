use comigs_convex::decoupled::{DecoupledInstance, LossKind};
use comigs_convex::quadratic::QuadraticBilevel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn router_weights_recover_the_coupled_objective_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for _ in 0..50 {
        let d = rng.random_range(1..=4);
        let n = rng.random_range(1..=20);
        let m = rng.random_range(1..=4);
        let loss = if rng.random() { LossKind::Quadratic } else { LossKind::Logistic };
        let alpha = rng.random_range(0.0..2.0);
        let mu = rng.random_range(0.1..3.0);
        let mut inst = DecoupledInstance::random(&mut rng, d, n, m, loss, alpha, mu).unwrap();
        inst.vars.lambda = inst.router_probs(&inst.vars.phi);
        let coupled = inst.coupled_objective(&inst.vars.theta, &inst.vars.phi);
        assert!((inst.objective().unwrap() - coupled).abs() < 1e-12);
    }
}

#[test]
fn logistic_sweeps_descend_monotonically() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for _ in 0..5 {
        let mut inst = DecoupledInstance::random(&mut rng, 3, 12, 3, LossKind::Logistic, 0.0, 1.0).unwrap();
        inst.alpha = comigs_convex::curvature::certified_alpha(&inst, &inst.vars).unwrap();
        for _ in 0..50 {
            let f = inst.sweep().unwrap();
            assert!(f.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{f:?}");
        }
    }
}

/// The `(L − μ)/L` bound controls the `A`-weighted norm of the sweep
/// operator; its Euclidean norm, which bounds per-step ratios of `‖Θ‖₂`,
/// can be larger.
#[test]
fn eigenvalue_bound_controls_the_weighted_norm_not_the_euclidean_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut euclidean_exceeds = 0;
    for _ in 0..2000 {
        let p = rng.random_range(1..=4);
        let q = rng.random_range(1..=4);
        let inst = QuadraticBilevel::random(&mut rng, p, q, 0.01).unwrap();
        let rate = inst.contraction_rate().unwrap();
        assert!(rate.weighted_norm <= rate.eigen_bound + 1e-12);
        if rate.spectral_norm > rate.eigen_bound {
            euclidean_exceeds += 1;
        }
    }
    assert!(euclidean_exceeds > 0);
}
