//! Alternating minimization of a strictly convex quadratic
//! `f(Θ, Φ) = ½ΘᵀAΘ + ΦᵀCΘ + ½ΦᵀBΦ`, whose minimizer is the origin.
//!
//! Minimizing over Φ gives `Φ = −B⁻¹CΘ` and over Θ gives `Θ = −A⁻¹CᵀΦ`, so
//! one sweep is the linear map `T = A⁻¹CᵀB⁻¹C`, applied with LU solves. Its
//! Euclidean norm bounds the per-step error ratio. Its `A`-weighted norm equals its spectral radius
//! and is bounded by `(L − μ)/L` from the extreme eigenvalues of the joint
//! Hessian; the Euclidean norm can exceed that bound.

use nalgebra::{DMatrix, DVector, Dyn, SymmetricEigen, LU};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};

/// Relative tolerance for the symmetry check of `A` and `B`.
const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticBilevel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
}

fn check_symmetric(m: &DMatrix<f64>, what: &'static str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Shape(format!("{what} is {}x{}", m.nrows(), m.ncols())));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > SYMMETRY_TOL * scale {
        return Err(Error::InvalidParameter(format!("{what} is not symmetric")));
    }
    Ok(())
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &'static str) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Shape(format!("{what} must be a non-empty rectangular matrix")));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(format!("{what} has non-finite entries")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// LU rather than Cholesky: on diagonal blocks with power-of-two entries it
/// is exact, so hand instances reproduce their rational answers bitwise.
struct Factor(LU<f64, Dyn, Dyn>, &'static str);

impl Factor {
    fn new(m: &DMatrix<f64>, what: &'static str) -> Result<Self> {
        let lu = m.clone().lu();
        if !lu.is_invertible() {
            return Err(Error::Singular(what));
        }
        Ok(Self(lu, what))
    }

    fn solve<S: nalgebra::Storage<f64, Dyn, C>, C: nalgebra::Dim>(
        &self,
        rhs: &nalgebra::Matrix<f64, Dyn, C, S>,
    ) -> Result<nalgebra::OMatrix<f64, Dyn, C>>
    where
        nalgebra::DefaultAllocator: nalgebra::allocator::Allocator<Dyn, C>,
    {
        self.0.solve(rhs).ok_or(Error::Singular(self.1))
    }
}

impl QuadraticBilevel {
    /// Validates shapes, symmetry and positive definiteness of the joint
    /// Hessian `[[A, Cᵀ], [C, B]]`.
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        check_symmetric(&a, "A")?;
        check_symmetric(&b, "B")?;
        if c.nrows() != b.nrows() || c.ncols() != a.nrows() {
            return Err(Error::Shape(format!(
                "C is {}x{}, expected {}x{}",
                c.nrows(),
                c.ncols(),
                b.nrows(),
                a.nrows()
            )));
        }
        let q = Self { a, b, c };
        let (mu, _) = q.hessian_extremes();
        if !(mu > 0.0) {
            return Err(Error::NotPositiveDefinite {
                what: "H",
                min_eigenvalue: mu,
            });
        }
        Ok(q)
    }

    /// Builds an instance from row-major nested vectors, as read from a
    /// configuration file.
    pub fn from_rows(a: &[Vec<f64>], b: &[Vec<f64>], c: &[Vec<f64>]) -> Result<Self> {
        Self::new(matrix_from_rows(a, "A")?, matrix_from_rows(b, "B")?, matrix_from_rows(c, "C")?)
    }

    /// Random instance with `H = MᵀM/(p+q) + shift·I`, `M` standard normal.
    pub fn random<R: Rng>(rng: &mut R, theta_dim: usize, phi_dim: usize, shift: f64) -> Result<Self> {
        let n = theta_dim + phi_dim;
        let m = DMatrix::<f64>::from_fn(n, n, |_, _| StandardNormal.sample(rng));
        let mut h = m.transpose() * &m / n as f64;
        for i in 0..n {
            h[(i, i)] += shift;
        }
        // Exact symmetry regardless of the product's rounding.
        let h = (&h + h.transpose()) * 0.5;
        let a = h.view((0, 0), (theta_dim, theta_dim)).into_owned();
        let b = h.view((theta_dim, theta_dim), (phi_dim, phi_dim)).into_owned();
        let c = h.view((theta_dim, 0), (phi_dim, theta_dim)).into_owned();
        Self::new(a, b, c)
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn theta_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn phi_dim(&self) -> usize {
        self.b.nrows()
    }

    pub fn hessian(&self) -> DMatrix<f64> {
        let (p, q) = (self.theta_dim(), self.phi_dim());
        let mut h = DMatrix::zeros(p + q, p + q);
        h.view_mut((0, 0), (p, p)).copy_from(&self.a);
        h.view_mut((p, p), (q, q)).copy_from(&self.b);
        h.view_mut((p, 0), (q, p)).copy_from(&self.c);
        h.view_mut((0, p), (p, q)).copy_from(&self.c.transpose());
        h
    }

    /// Smallest and largest eigenvalues of the joint Hessian.
    pub fn hessian_extremes(&self) -> (f64, f64) {
        let eig = SymmetricEigen::new(self.hessian()).eigenvalues;
        (eig.min(), eig.max())
    }

    /// `f(Θ, Φ)`.
    pub fn objective(&self, theta: &DVector<f64>, phi: &DVector<f64>) -> f64 {
        0.5 * theta.dot(&(&self.a * theta)) + phi.dot(&(&self.c * theta)) + 0.5 * phi.dot(&(&self.b * phi))
    }

    /// `argmin_Φ f(Θ, Φ) = −B⁻¹CΘ`.
    pub fn argmin_phi(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(-Factor::new(&self.b, "B")?.solve(&(&self.c * theta))?)
    }

    /// `argmin_Θ f(Θ, Φ) = −A⁻¹CᵀΦ`.
    pub fn argmin_theta(&self, phi: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(-Factor::new(&self.a, "A")?.solve(&(self.c.transpose() * phi))?)
    }

    /// One full sweep `T = A⁻¹CᵀB⁻¹C`, assembled from LU solves.
    pub fn operator_t(&self) -> Result<DMatrix<f64>> {
        let b_inv_c = Factor::new(&self.b, "B")?.solve(&self.c)?;
        Factor::new(&self.a, "A")?.solve(&(self.c.transpose() * b_inv_c))
    }

    /// Runs `k_max` sweeps from `theta0`, returning every iterate including
    /// the start.
    pub fn alternate(&self, theta0: &DVector<f64>, k_max: usize) -> Result<Vec<DVector<f64>>> {
        if theta0.len() != self.theta_dim() {
            return Err(Error::Shape(format!(
                "Θ₀ has length {}, expected {}",
                theta0.len(),
                self.theta_dim()
            )));
        }
        let a = Factor::new(&self.a, "A")?;
        let b = Factor::new(&self.b, "B")?;
        let mut out = Vec::with_capacity(k_max + 1);
        out.push(theta0.clone());
        for _ in 0..k_max {
            let theta = out.last().expect("non-empty");
            let phi = -b.solve(&(&self.c * theta))?;
            out.push(-a.solve(&(self.c.transpose() * phi))?);
        }
        Ok(out)
    }

    /// Euclidean norms of the iterates of [`Self::alternate`].
    pub fn alternate_norms(&self, theta0: &DVector<f64>, k_max: usize) -> Result<Vec<f64>> {
        Ok(self.alternate(theta0, k_max)?.iter().map(|t| t.norm()).collect())
    }

    pub fn contraction_rate(&self) -> Result<ContractionRate> {
        let t = self.operator_t()?;
        let spectral_norm = t.singular_values().max();
        // ‖T‖_A = ‖A^{1/2} T A^{-1/2}‖₂ = ‖A^{-1/2} CᵀB⁻¹C A^{-1/2}‖₂.
        let eig = SymmetricEigen::new(self.a.clone());
        let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
        let a_inv_sqrt = &eig.eigenvectors * inv_sqrt * eig.eigenvectors.transpose();
        let b_inv_c = Factor::new(&self.b, "B")?.solve(&self.c)?;
        let m = &a_inv_sqrt * (self.c.transpose() * b_inv_c) * &a_inv_sqrt;
        let m = (&m + m.transpose()) * 0.5;
        let weighted_norm = SymmetricEigen::new(m).eigenvalues.amax();
        let (mu, l) = self.hessian_extremes();
        Ok(ContractionRate {
            spectral_norm,
            weighted_norm,
            eigen_bound: (l - mu) / l,
            mu,
            l,
        })
    }
}

/// Contraction factors of one alternation sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContractionRate {
    /// `‖T‖₂`, the product of the two partial-argmin Lipschitz constants in
    /// the Euclidean norm.
    pub spectral_norm: f64,
    /// `‖T‖` in the norm induced by `A`; equals the spectral radius of `T`.
    pub weighted_norm: f64,
    /// `(L − μ)/L`, an upper bound on `weighted_norm`.
    pub eigen_bound: f64,
    pub mu: f64,
    pub l: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn hand() -> QuadraticBilevel {
        QuadraticBilevel::new(
            DMatrix::from_diagonal_element(2, 2, 2.0),
            DMatrix::from_element(1, 1, 2.0),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        )
        .unwrap()
    }

    /// Largest singular value by power iteration on `TᵀT`.
    fn power_norm(t: &DMatrix<f64>) -> f64 {
        let g = t.transpose() * t;
        let mut v = DVector::from_element(g.ncols(), 1.0).normalize();
        let mut est = 0.0;
        for _ in 0..5000 {
            let w = &g * &v;
            let n = w.norm();
            if n == 0.0 {
                return 0.0;
            }
            est = n;
            v = w / n;
        }
        est.sqrt()
    }

    #[test]
    fn hand_instance_operator() {
        let t = hand().operator_t().unwrap();
        assert_eq!(t, DMatrix::from_row_slice(2, 2, &[0.25, 0.0, 0.0, 0.0]));
        let rate = hand().contraction_rate().unwrap();
        assert!((rate.spectral_norm - 0.25).abs() < 1e-15);
        assert!((rate.weighted_norm - 0.25).abs() < 1e-15);
        // eig(H) = {1, 2, 3}.
        assert!((rate.eigen_bound - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn hand_instance_contracts_first_coordinate_by_a_quarter() {
        let traj = hand().alternate(&DVector::from_vec(vec![1.0, 1.0]), 6).unwrap();
        for k in 1..traj.len() {
            assert_eq!(traj[k][0], traj[k - 1][0] * 0.25);
            assert_eq!(traj[k][1], 0.0);
        }
        let norms = hand().alternate_norms(&DVector::from_vec(vec![1.0, 1.0]), 3).unwrap();
        assert_eq!(norms[2], 0.0625);
    }

    #[test]
    fn from_rows_validates() {
        let q = QuadraticBilevel::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]], &[vec![2.0]], &[vec![1.0, 0.0]]).unwrap();
        assert_eq!(q, hand());
        // Joint Hessian [[1, 2], [2, 1]] has eigenvalue -1.
        let err = QuadraticBilevel::from_rows(&[vec![1.0]], &[vec![1.0]], &[vec![2.0]]).unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite { .. }), "{err}");
        assert!(QuadraticBilevel::from_rows(&[vec![1.0, 0.0], vec![0.0]], &[vec![1.0]], &[vec![0.0, 0.0]]).is_err());
        assert!(QuadraticBilevel::from_rows(&[], &[vec![1.0]], &[vec![0.0]]).is_err());
    }

    #[test]
    fn zero_coupling_converges_in_one_step() {
        let q = QuadraticBilevel::new(
            DMatrix::from_diagonal_element(3, 3, 1.5),
            DMatrix::from_diagonal_element(2, 2, 0.7),
            DMatrix::zeros(2, 3),
        )
        .unwrap();
        assert_eq!(q.operator_t().unwrap(), DMatrix::zeros(3, 3));
        assert_eq!(q.contraction_rate().unwrap().spectral_norm, 0.0);
        let traj = q.alternate(&DVector::from_vec(vec![1.0, -2.0, 3.0]), 2).unwrap();
        assert_eq!(traj[1].norm(), 0.0);
    }

    #[test]
    fn origin_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = QuadraticBilevel::random(&mut rng, 3, 2, 0.1).unwrap();
        for t in q.alternate(&DVector::zeros(3), 10).unwrap() {
            assert_eq!(t.norm(), 0.0);
        }
    }

    #[test]
    fn argmins_zero_the_partial_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = QuadraticBilevel::random(&mut rng, 4, 3, 0.1).unwrap();
        let theta = DVector::from_vec(vec![0.3, -1.0, 2.0, 0.5]);
        let phi = q.argmin_phi(&theta).unwrap();
        assert!((q.c() * &theta + q.b() * &phi).amax() < 1e-12);
        let theta2 = q.argmin_theta(&phi).unwrap();
        assert!((q.a() * &theta2 + q.c().transpose() * &phi).amax() < 1e-12);
        assert!(q.objective(&theta2, &phi) <= q.objective(&theta, &phi));
    }

    #[test]
    fn invalid_instances_are_rejected() {
        let indefinite = QuadraticBilevel::new(
            DMatrix::from_diagonal_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 2.0),
        );
        assert!(matches!(indefinite, Err(Error::NotPositiveDefinite { .. })));
        let asym = QuadraticBilevel::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::zeros(1, 2),
        );
        assert!(asym.is_err());
        let shape = QuadraticBilevel::new(
            DMatrix::from_diagonal_element(2, 2, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::zeros(2, 2),
        );
        assert!(matches!(shape, Err(Error::Shape(_))));
        assert!(hand().alternate(&DVector::zeros(3), 1).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn per_step_ratio_is_bounded_by_the_operator_norm(seed in 0u64..1_000_000, p in 1usize..5, q in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inst = QuadraticBilevel::random(&mut rng, p, q, 0.05).unwrap();
            let rate = inst.contraction_rate().unwrap();
            let t = inst.operator_t().unwrap();
            prop_assert!((rate.spectral_norm - power_norm(&t)).abs() <= 1e-8 * rate.spectral_norm.max(1.0));
            prop_assert!(rate.spectral_norm < 1.0 || rate.weighted_norm < 1.0);
            prop_assert!(rate.weighted_norm <= rate.eigen_bound + 1e-12);
            prop_assert!(rate.weighted_norm <= rate.spectral_norm + 1e-12);
            let theta0 = DVector::from_fn(p, |_, _| StandardNormal.sample(&mut rng));
            let norms = inst.alternate_norms(&theta0, 30).unwrap();
            for k in 1..norms.len() {
                prop_assert!(norms[k] <= (rate.spectral_norm + 1e-9) * norms[k - 1]);
            }
        }
    }
}
