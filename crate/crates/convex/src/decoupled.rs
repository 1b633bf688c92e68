//! Linear experts with a softmax router, relaxed by free per-sample mixture
//! weights tied back to the router through a KL penalty:
//!
//! `F_μ(Θ, Φ, Λ) = (1/n) Σᵢ [ℓᵢ(⟨λⁱ, Θᵀxᵢ⟩) + μ(d(λⁱ) + s(Φᵀxᵢ) − ⟨λⁱ, Φᵀxᵢ⟩)] + (α/2)(‖Θ‖²_F + ‖Φ‖²_F)`
//!
//! with `d` the negative entropy and `s` log-sum-exp. For fixed Λ the
//! objective separates in Θ and Φ; for fixed (Θ, Φ) it separates per sample.
//! Each block step is solved to a 1e-10 gradient tolerance, two orders below
//! the 1e-8-level checks it feeds.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gradient tolerance of every inner solver.
pub const INNER_TOL: f64 = 1e-10;
/// Simplex feasibility tolerance accepted by the objective.
pub const SIMPLEX_TOL: f64 = 1e-9;

const EG_MAX_ITERS: usize = 1_000_000;
const GD_MAX_ITERS: usize = 1_000_000;
const NEWTON_MAX_ITERS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `(t − bᵢ)²/2`.
    Quadratic,
    /// `ln(1 + exp(−yᵢ t))` with `yᵢ ∈ {−1, +1}`.
    Logistic,
}

impl LossKind {
    pub fn value(self, t: f64, target: f64) -> f64 {
        match self {
            LossKind::Quadratic => 0.5 * (t - target) * (t - target),
            LossKind::Logistic => softplus(-target * t),
        }
    }

    pub fn d1(self, t: f64, target: f64) -> f64 {
        match self {
            LossKind::Quadratic => t - target,
            LossKind::Logistic => -target * sigmoid(-target * t),
        }
    }

    pub fn d2(self, t: f64, target: f64) -> f64 {
        match self {
            LossKind::Quadratic => 1.0,
            LossKind::Logistic => {
                let p = sigmoid(target * t);
                p * (1.0 - p)
            }
        }
    }

    /// Global bound on the second derivative.
    pub fn d2_max(self) -> f64 {
        match self {
            LossKind::Quadratic => 1.0,
            LossKind::Logistic => 0.25,
        }
    }
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// `s(y) = ln Σ exp yⱼ`.
pub fn log_sum_exp(y: &[f64]) -> f64 {
    let m = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + y.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(y: &[f64]) -> Vec<f64> {
    let s = log_sum_exp(y);
    y.iter().map(|v| (v - s).exp()).collect()
}

/// `d(λ) = Σ λⱼ ln λⱼ` with `0 ln 0 = 0`.
pub fn neg_entropy(lambda: &[f64]) -> f64 {
    lambda.iter().filter(|&&l| l > 0.0).map(|l| l * l.ln()).sum()
}

/// Optimization variables: Θ and Φ are `d × (N+1)`, Λ is `(N+1) × n`.
#[derive(Clone, Debug, PartialEq)]
pub struct Variables {
    pub theta: DMatrix<f64>,
    pub phi: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
}

impl Variables {
    pub fn zeros_like(&self) -> Self {
        Self {
            theta: DMatrix::zeros(self.theta.nrows(), self.theta.ncols()),
            phi: DMatrix::zeros(self.phi.nrows(), self.phi.ncols()),
            lambda: DMatrix::zeros(self.lambda.nrows(), self.lambda.ncols()),
        }
    }

    /// `self + h·dir`.
    pub fn offset(&self, dir: &Variables, h: f64) -> Self {
        Self {
            theta: &self.theta + &dir.theta * h,
            phi: &self.phi + &dir.phi * h,
            lambda: &self.lambda + &dir.lambda * h,
        }
    }

    pub fn norm_squared(&self) -> f64 {
        self.theta.norm_squared() + self.phi.norm_squared() + self.lambda.norm_squared()
    }

    pub fn scale(&mut self, s: f64) {
        self.theta *= s;
        self.phi *= s;
        self.lambda *= s;
    }
}

/// Iteration count and final residual of one inner solve.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct SolveStats {
    pub iterations: usize,
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoupledInstance {
    /// Data vectors as columns, `d × n`.
    pub x: DMatrix<f64>,
    /// Regression targets `bᵢ` or labels `yᵢ`.
    pub targets: DVector<f64>,
    pub loss: LossKind,
    /// Weight decay `α`.
    pub alpha: f64,
    /// Decoupling penalty `μ`.
    pub mu: f64,
    pub vars: Variables,
}

impl DecoupledInstance {
    /// Θ = Φ = 0 and uniform Λ.
    pub fn new(x: DMatrix<f64>, targets: DVector<f64>, loss: LossKind, experts: usize, alpha: f64, mu: f64) -> Result<Self> {
        let (d, n) = x.shape();
        if n == 0 || d == 0 {
            return Err(Error::Shape("at least one sample and one feature are required".into()));
        }
        if targets.len() != n {
            return Err(Error::Shape(format!("{} targets for {n} samples", targets.len())));
        }
        if experts == 0 {
            return Err(Error::InvalidParameter("at least one expert is required".into()));
        }
        if !(alpha >= 0.0 && mu >= 0.0 && alpha.is_finite() && mu.is_finite()) {
            return Err(Error::InvalidParameter(format!("α = {alpha} and μ = {mu} must be non-negative")));
        }
        if loss == LossKind::Logistic && targets.iter().any(|&y| y != 1.0 && y != -1.0) {
            return Err(Error::InvalidParameter("logistic labels must be ±1".into()));
        }
        let vars = Variables {
            theta: DMatrix::zeros(d, experts),
            phi: DMatrix::zeros(d, experts),
            lambda: DMatrix::from_element(experts, n, 1.0 / experts as f64),
        };
        Ok(Self {
            x,
            targets,
            loss,
            alpha,
            mu,
            vars,
        })
    }

    /// Gaussian data with entries of variance `1/d`, Gaussian targets (or
    /// random signs for the logistic loss) and Gaussian Θ, Φ of scale 0.5.
    pub fn random<R: Rng>(rng: &mut R, d: usize, n: usize, experts: usize, loss: LossKind, alpha: f64, mu: f64) -> Result<Self> {
        let sd = 1.0 / (d as f64).sqrt();
        let x = DMatrix::from_fn(d, n, |_, _| sd * normal(rng));
        let targets = DVector::from_fn(n, |_, _| match loss {
            LossKind::Quadratic => normal(rng),
            LossKind::Logistic => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
        });
        let mut inst = Self::new(x, targets, loss, experts, alpha, mu)?;
        inst.vars.theta = DMatrix::from_fn(d, experts, |_, _| 0.5 * normal(rng));
        inst.vars.phi = DMatrix::from_fn(d, experts, |_, _| 0.5 * normal(rng));
        Ok(inst)
    }

    pub fn dim(&self) -> usize {
        self.x.nrows()
    }

    pub fn samples(&self) -> usize {
        self.x.ncols()
    }

    pub fn experts(&self) -> usize {
        self.vars.theta.ncols()
    }

    /// `maxᵢ ‖xᵢ‖`.
    pub fn max_x_norm(&self) -> f64 {
        self.x.column_iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    fn check_shapes(&self, v: &Variables) -> Result<()> {
        let (d, n, m) = (self.dim(), self.samples(), self.experts());
        let ok = v.theta.shape() == (d, m) && v.phi.shape() == (d, m) && v.lambda.shape() == (m, n);
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "Θ {:?}, Φ {:?}, Λ {:?} for d={d}, n={n}, N+1={m}",
                v.theta.shape(),
                v.phi.shape(),
                v.lambda.shape()
            )))
        }
    }

    pub fn check_simplex(lambda: &DMatrix<f64>, tol: f64) -> Result<()> {
        for (i, col) in lambda.column_iter().enumerate() {
            let deviation = (col.sum() - 1.0).abs().max(-col.min());
            if !(deviation <= tol) {
                return Err(Error::OffSimplex { sample: i, deviation });
            }
        }
        Ok(())
    }

    /// `F_μ` at `v`.
    pub fn objective_at(&self, v: &Variables) -> Result<f64> {
        self.check_shapes(v)?;
        Self::check_simplex(&v.lambda, SIMPLEX_TOL)?;
        let u = v.theta.transpose() * &self.x;
        let w = v.phi.transpose() * &self.x;
        let n = self.samples();
        let mut total = 0.0;
        for i in 0..n {
            let lam = v.lambda.column(i);
            let t = lam.dot(&u.column(i));
            let wi: Vec<f64> = w.column(i).iter().copied().collect();
            let lam_s: Vec<f64> = lam.iter().copied().collect();
            total += self.loss.value(t, self.targets[i]);
            total += self.mu * (neg_entropy(&lam_s) + log_sum_exp(&wi) - lam.dot(&w.column(i)));
        }
        Ok(total / n as f64 + 0.5 * self.alpha * (v.theta.norm_squared() + v.phi.norm_squared()))
    }

    pub fn objective(&self) -> Result<f64> {
        self.objective_at(&self.vars)
    }

    /// The penalty block `(μ/n) Σᵢ KL(λⁱ ‖ π_Φ(xᵢ))`, computed as a KL sum.
    pub fn kl_block(&self, v: &Variables) -> Result<f64> {
        self.check_shapes(v)?;
        let pi = self.router_probs(&v.phi);
        let mut total = 0.0;
        for i in 0..self.samples() {
            for j in 0..self.experts() {
                let l = v.lambda[(j, i)];
                if l > 0.0 {
                    total += l * (l.ln() - pi[(j, i)].ln());
                }
            }
        }
        Ok(self.mu * total / self.samples() as f64)
    }

    /// `π_Φ(xᵢ)` as columns.
    pub fn router_probs(&self, phi: &DMatrix<f64>) -> DMatrix<f64> {
        let w = phi.transpose() * &self.x;
        let mut out = DMatrix::zeros(w.nrows(), w.ncols());
        for i in 0..w.ncols() {
            let col: Vec<f64> = w.column(i).iter().copied().collect();
            out.set_column(i, &DVector::from_vec(softmax(&col)));
        }
        out
    }

    /// The coupled objective with mixture weights given by the router:
    /// `(1/n) Σᵢ ℓᵢ(Σⱼ πⱼ(xᵢ)⟨θⱼ, xᵢ⟩) + (α/2)(‖Θ‖²_F + ‖Φ‖²_F)`.
    pub fn coupled_objective(&self, theta: &DMatrix<f64>, phi: &DMatrix<f64>) -> f64 {
        let pi = self.router_probs(phi);
        let u = theta.transpose() * &self.x;
        let n = self.samples();
        let loss: f64 = (0..n)
            .map(|i| self.loss.value(pi.column(i).dot(&u.column(i)), self.targets[i]))
            .sum();
        loss / n as f64 + 0.5 * self.alpha * (theta.norm_squared() + phi.norm_squared())
    }

    /// Per-sample argmin over the simplex by exponentiated gradient.
    ///
    /// The step `1/(μ + ℓ''_max·r²)`, with `r` the half-range of `Θᵀxᵢ`, is
    /// the relative smoothness constant with respect to the entropy, so every
    /// iteration decreases the sample objective.
    pub fn step_lambda(&mut self) -> Result<SolveStats> {
        let m = self.experts();
        if m == 1 {
            self.vars.lambda.fill(1.0);
            return Ok(SolveStats::default());
        }
        if !(self.mu > 0.0) {
            return Err(Error::InvalidParameter("the Λ-step needs μ > 0".into()));
        }
        let u = self.vars.theta.transpose() * &self.x;
        let w = self.vars.phi.transpose() * &self.x;
        let mut stats = SolveStats::default();
        for i in 0..self.samples() {
            let ui: Vec<f64> = u.column(i).iter().copied().collect();
            let wi: Vec<f64> = w.column(i).iter().copied().collect();
            let start: Vec<f64> = self.vars.lambda.column(i).iter().copied().collect();
            let (lam, s) = self.solve_lambda(&ui, &wi, &start, self.targets[i])?;
            self.vars.lambda.set_column(i, &DVector::from_vec(lam));
            stats.iterations = stats.iterations.max(s.iterations);
            stats.residual = stats.residual.max(s.residual);
        }
        Ok(stats)
    }

    fn solve_lambda(&self, u: &[f64], w: &[f64], start: &[f64], target: f64) -> Result<(Vec<f64>, SolveStats)> {
        let mu = self.mu;
        let (lo, hi) = u.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        let r = 0.5 * (hi - lo);
        let eta = 1.0 / (mu + self.loss.d2_max() * r * r);
        // Work in logs; interior start keeps every log finite.
        let m = start.len();
        let mut log_lam: Vec<f64> = start.iter().map(|&l| l.max(1e-300).ln()).collect();
        let norm = log_sum_exp(&log_lam);
        log_lam.iter_mut().for_each(|l| *l -= norm);
        let mut residual = f64::INFINITY;
        for it in 0..EG_MAX_ITERS {
            let lam: Vec<f64> = log_lam.iter().map(|l| l.exp()).collect();
            let t: f64 = lam.iter().zip(u).map(|(l, x)| l * x).sum();
            let g1 = self.loss.d1(t, target);
            let mut next: Vec<f64> = (0..m)
                .map(|j| log_lam[j] - eta * (g1 * u[j] + mu * (log_lam[j] + 1.0 - w[j])))
                .collect();
            let norm = log_sum_exp(&next);
            next.iter_mut().for_each(|l| *l -= norm);
            residual = lam.iter().zip(&next).map(|(a, b)| (a - b.exp()).powi(2)).sum::<f64>().sqrt() / eta;
            log_lam = next;
            if residual <= INNER_TOL {
                let lam = log_lam.iter().map(|l| l.exp()).collect();
                return Ok((
                    lam,
                    SolveStats {
                        iterations: it + 1,
                        residual,
                    },
                ));
            }
        }
        Err(Error::NoConvergence {
            solver: "exponentiated gradient",
            iterations: EG_MAX_ITERS,
            residual,
        })
    }

    /// Gradient of the Φ-block objective.
    fn phi_gradient(&self, phi: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.samples() as f64;
        let diff = self.router_probs(phi) - &self.vars.lambda;
        &self.x * diff.transpose() * (self.mu / n) + phi * self.alpha
    }

    /// Argmin over Φ by gradient descent with step `1/L`,
    /// `L = α + μ·λ_max(XXᵀ)/(2n)`.
    pub fn step_phi(&mut self) -> Result<SolveStats> {
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidParameter("the Φ-step needs α > 0".into()));
        }
        let n = self.samples() as f64;
        let xxt = &self.x * self.x.transpose();
        let top = nalgebra::SymmetricEigen::new(xxt).eigenvalues.max();
        let step = 1.0 / (self.alpha + self.mu * top / (2.0 * n));
        let mut phi = self.vars.phi.clone();
        let mut residual = f64::INFINITY;
        for it in 0..GD_MAX_ITERS {
            let g = self.phi_gradient(&phi);
            residual = g.norm();
            if residual <= INNER_TOL {
                self.vars.phi = phi;
                return Ok(SolveStats { iterations: it, residual });
            }
            phi -= g * step;
        }
        Err(Error::NoConvergence {
            solver: "Φ gradient descent",
            iterations: GD_MAX_ITERS,
            residual,
        })
    }

    /// Rows `zᵢ = vec(xᵢ λⁱᵀ)` so that `⟨λⁱ, Θᵀxᵢ⟩ = zᵢ · vec(Θ)`.
    pub fn theta_features(&self) -> DMatrix<f64> {
        let (d, n, m) = (self.dim(), self.samples(), self.experts());
        DMatrix::from_fn(n, d * m, |i, col| {
            let (k, j) = (col % d, col / d);
            self.x[(k, i)] * self.vars.lambda[(j, i)]
        })
    }

    /// Argmin over Θ: ridge normal equations for the quadratic loss, damped
    /// Newton for the logistic loss.
    pub fn step_theta(&mut self) -> Result<SolveStats> {
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidParameter("the Θ-step needs α > 0".into()));
        }
        let (d, m) = (self.dim(), self.experts());
        let z = self.theta_features();
        let n = self.samples() as f64;
        let p = d * m;
        let stats = match self.loss {
            LossKind::Quadratic => {
                let mut gram = z.transpose() * &z / n;
                for k in 0..p {
                    gram[(k, k)] += self.alpha;
                }
                let rhs = z.transpose() * &self.targets / n;
                let sol = Cholesky::new(gram).ok_or(Error::Singular("ridge normal matrix"))?.solve(&rhs);
                self.vars.theta = DMatrix::from_column_slice(d, m, sol.as_slice());
                let g = self.theta_gradient(&z, &sol);
                SolveStats {
                    iterations: 1,
                    residual: g.norm(),
                }
            }
            LossKind::Logistic => {
                let mut theta = DVector::from_column_slice(self.vars.theta.as_slice());
                let value = |th: &DVector<f64>| -> f64 {
                    let t = &z * th;
                    t.iter().zip(self.targets.iter()).map(|(&t, &y)| self.loss.value(t, y)).sum::<f64>() / n
                        + 0.5 * self.alpha * th.norm_squared()
                };
                let mut stats = None;
                for it in 0..NEWTON_MAX_ITERS {
                    let g = self.theta_gradient(&z, &theta);
                    if g.norm() <= INNER_TOL {
                        stats = Some(SolveStats {
                            iterations: it,
                            residual: g.norm(),
                        });
                        break;
                    }
                    let t = &z * &theta;
                    let curv = DVector::from_fn(z.nrows(), |i, _| self.loss.d2(t[i], self.targets[i]) / n);
                    let mut hess = z.transpose() * DMatrix::from_diagonal(&curv) * &z;
                    for k in 0..p {
                        hess[(k, k)] += self.alpha;
                    }
                    let dir = Cholesky::new(hess).ok_or(Error::Singular("Newton Hessian"))?.solve(&g);
                    let f0 = value(&theta);
                    let slope = g.dot(&dir);
                    let mut step = 1.0;
                    loop {
                        let cand = &theta - &dir * step;
                        if value(&cand) <= f0 - 1e-4 * step * slope || step < 1e-12 {
                            theta = cand;
                            break;
                        }
                        step *= 0.5;
                    }
                }
                let stats = stats.ok_or_else(|| Error::NoConvergence {
                    solver: "damped Newton",
                    iterations: NEWTON_MAX_ITERS,
                    residual: self.theta_gradient(&z, &theta).norm(),
                })?;
                self.vars.theta = DMatrix::from_column_slice(d, m, theta.as_slice());
                stats
            }
        };
        Ok(stats)
    }

    fn theta_gradient(&self, z: &DMatrix<f64>, theta: &DVector<f64>) -> DVector<f64> {
        let n = self.samples() as f64;
        let t = z * theta;
        let d1 = DVector::from_fn(z.nrows(), |i, _| self.loss.d1(t[i], self.targets[i]));
        z.transpose() * d1 / n + theta * self.alpha
    }

    /// One Λ → Φ → Θ sweep. Returns the objective before the sweep and after
    /// each block step.
    pub fn sweep(&mut self) -> Result<[f64; 4]> {
        let f0 = self.objective()?;
        self.step_lambda()?;
        let f1 = self.objective()?;
        self.step_phi()?;
        let f2 = self.objective()?;
        self.step_theta()?;
        let f3 = self.objective()?;
        Ok([f0, f1, f2, f3])
    }
}
