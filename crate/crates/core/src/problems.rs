//! Stylized Bayesian inverse problems with analytic scores.
//!
//! Each problem has an observation model `y = F(x) + eps`, `eps ~ N(0, sigma^2 I)`
//! with `m = d`, and a prior. The posterior score splits into a prior term and
//! a likelihood term `J(x)^T (y - F(x)) / sigma^2`.
//!
//! | kind       | prior                                   | F(x)           |
//! |------------|-----------------------------------------|----------------|
//! | gaussian   | N(0, Sigma_prior), random SPD           | x              |
//! | rosenbrock | exp(-a (x1 - mu)^2 - b (x2 - x1^2)^2)   | x              |
//! | nonlinear  | N(0, I)                                 | A x + sin(x)   |

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    Gaussian,
    Rosenbrock,
    Nonlinear,
}

impl std::fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ProblemKind::Gaussian => "gaussian",
            ProblemKind::Rosenbrock => "rosenbrock",
            ProblemKind::Nonlinear => "nonlinear",
        })
    }
}

/// Spectrum range of the random prior covariance, sampled log-uniformly.
pub const PRIOR_EIGEN_RANGE: (f64, f64) = (0.25, 4.0);

/// Condition number of the nonlinear forward matrix.
pub const NONLINEAR_CONDITION: f64 = 2.0;

#[derive(Clone, Debug)]
pub struct GaussianProblemParams {
    prior_cov: DMatrix<f64>,
    prior_chol: DMatrix<f64>,
    prior_precision: DMatrix<f64>,
    post_cov: DMatrix<f64>,
    post_chol: DMatrix<f64>,
}

impl GaussianProblemParams {
    fn new(prior_cov: DMatrix<f64>, sigma: f64) -> Result<Self> {
        let d = prior_cov.nrows();
        check_dim("prior covariance columns", d, prior_cov.ncols())?;
        let asym = (&prior_cov - prior_cov.transpose()).abs().max();
        if asym > 1e-12 {
            return Err(Error::NotPositiveDefinite(format!("asymmetry {asym:e}")));
        }
        let prior_chol = cholesky(&prior_cov, "prior covariance")?;
        let prior_precision = spd_inverse(&prior_cov, "prior covariance")?;
        let post_precision = &prior_precision + DMatrix::identity(d, d) / (sigma * sigma);
        let post_cov = symmetrize(spd_inverse(&post_precision, "posterior precision")?);
        let post_chol = cholesky(&post_cov, "posterior covariance")?;
        Ok(Self { prior_cov, prior_chol, prior_precision, post_cov, post_chol })
    }

    pub fn prior_cov(&self) -> &DMatrix<f64> {
        &self.prior_cov
    }

    pub fn prior_precision(&self) -> &DMatrix<f64> {
        &self.prior_precision
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RosenbrockParams {
    pub mu: f64,
    pub a: f64,
    pub b: f64,
}

impl Default for RosenbrockParams {
    fn default() -> Self {
        Self { mu: 0.0, a: 0.5, b: 1.0 }
    }
}

#[derive(Clone, Debug)]
pub struct NonlinearParams {
    matrix: DMatrix<f64>,
}

impl NonlinearParams {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Ratio of the extreme singular values of the forward matrix.
    pub fn condition_number(&self) -> f64 {
        let sv = self.matrix.clone().singular_values();
        sv.max() / sv.min()
    }
}

#[derive(Clone, Debug)]
pub enum ProblemParams {
    Gaussian(GaussianProblemParams),
    Rosenbrock(RosenbrockParams),
    Nonlinear(NonlinearParams),
}

/// Closed-form Gaussian posterior `N(mean, cov)`.
#[derive(Clone, Debug)]
pub struct PosteriorMoments {
    pub mean: Vec<f64>,
    pub cov: DMatrix<f64>,
    /// Lower Cholesky factor of `cov`.
    pub chol: DMatrix<f64>,
}

#[derive(Clone, Debug)]
pub struct InverseProblem {
    dim: usize,
    sigma: f64,
    seed: u64,
    params: ProblemParams,
}

impl InverseProblem {
    /// Gaussian prior with covariance `Q diag(lambda) Q^T`: `Q` Haar-random
    /// orthogonal, `lambda` log-uniform on [`PRIOR_EIGEN_RANGE`], both drawn
    /// from `seed`.
    pub fn gaussian(dim: usize, sigma: f64, seed: u64) -> Result<Self> {
        check_positive_dim(dim)?;
        let mut rng = RngStream::derive(seed, 0x5eed_9a55);
        let q = random_orthogonal(dim, &mut rng);
        let (lo, hi) = (PRIOR_EIGEN_RANGE.0.ln(), PRIOR_EIGEN_RANGE.1.ln());
        let lambda = DVector::from_iterator(dim, (0..dim).map(|_| (lo + (hi - lo) * rng.uniform()).exp()));
        let cov = symmetrize(&q * DMatrix::from_diagonal(&lambda) * q.transpose());
        Self::gaussian_with_cov(cov, sigma, seed)
    }

    pub fn gaussian_with_cov(prior_cov: DMatrix<f64>, sigma: f64, seed: u64) -> Result<Self> {
        check_sigma(sigma)?;
        let dim = prior_cov.nrows();
        check_positive_dim(dim)?;
        let params = GaussianProblemParams::new(prior_cov, sigma)?;
        Ok(Self { dim, sigma, seed, params: ProblemParams::Gaussian(params) })
    }

    pub fn rosenbrock(params: RosenbrockParams, sigma: f64, seed: u64) -> Result<Self> {
        check_sigma(sigma)?;
        if !(params.a > 0.0 && params.b > 0.0) {
            return Err(Error::Config(format!("rosenbrock needs a > 0 and b > 0, got a={}, b={}", params.a, params.b)));
        }
        Ok(Self { dim: 2, sigma, seed, params: ProblemParams::Rosenbrock(params) })
    }

    /// `F(x) = A x + sin(x)` with `A = U diag(s) V^T`, `U`, `V` random
    /// orthogonal and singular values evenly spaced on `[1, 2]`.
    pub fn nonlinear(dim: usize, sigma: f64, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Config("nonlinear problem needs dim >= 2 for a condition number of 2".into()));
        }
        let mut rng = RngStream::derive(seed, 0xa11_0f_a);
        let u = random_orthogonal(dim, &mut rng);
        let v = random_orthogonal(dim, &mut rng);
        let s = DVector::from_iterator(
            dim,
            (0..dim).map(|i| 1.0 + (NONLINEAR_CONDITION - 1.0) * i as f64 / (dim - 1) as f64),
        );
        let matrix = &u * DMatrix::from_diagonal(&s) * v.transpose();
        Self::nonlinear_with_matrix(matrix, sigma, seed)
    }

    pub fn nonlinear_with_matrix(matrix: DMatrix<f64>, sigma: f64, seed: u64) -> Result<Self> {
        check_sigma(sigma)?;
        let dim = matrix.nrows();
        check_positive_dim(dim)?;
        check_dim("forward matrix columns", dim, matrix.ncols())?;
        Ok(Self { dim, sigma, seed, params: ProblemParams::Nonlinear(NonlinearParams { matrix }) })
    }

    pub fn kind(&self) -> ProblemKind {
        match self.params {
            ProblemParams::Gaussian(_) => ProblemKind::Gaussian,
            ProblemParams::Rosenbrock(_) => ProblemKind::Rosenbrock,
            ProblemParams::Nonlinear(_) => ProblemKind::Nonlinear,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn obs_dim(&self) -> usize {
        self.dim
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ProblemParams {
        &self.params
    }

    /// Same problem with a different noise level (used for mismatched-score
    /// negative controls).
    pub fn with_sigma(&self, sigma: f64) -> Result<Self> {
        check_sigma(sigma)?;
        let params = match &self.params {
            ProblemParams::Gaussian(g) => ProblemParams::Gaussian(GaussianProblemParams::new(g.prior_cov.clone(), sigma)?),
            other => other.clone(),
        };
        Ok(Self { sigma, params, ..self.clone() })
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        check_dim("parameter vector", self.dim, x.len())
    }

    fn check_y(&self, y: &[f64]) -> Result<()> {
        check_dim("observation vector", self.obs_dim(), y.len())
    }

    /// Noiseless forward model F(x).
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_x(x)?;
        Ok(self.forward_unchecked(x))
    }

    fn forward_unchecked(&self, x: &[f64]) -> Vec<f64> {
        match &self.params {
            ProblemParams::Gaussian(_) | ProblemParams::Rosenbrock(_) => x.to_vec(),
            ProblemParams::Nonlinear(p) => {
                let ax = &p.matrix * DVector::from_column_slice(x);
                ax.iter().zip(x).map(|(a, xi)| a + xi.sin()).collect()
            }
        }
    }

    /// Unnormalized prior log-density.
    pub fn prior_log_density(&self, x: &[f64]) -> Result<f64> {
        self.check_x(x)?;
        Ok(match &self.params {
            ProblemParams::Gaussian(g) => {
                let v = DVector::from_column_slice(x);
                -0.5 * v.dot(&(&g.prior_precision * &v))
            }
            ProblemParams::Rosenbrock(p) => {
                -p.a * (x[0] - p.mu).powi(2) - p.b * (x[1] - x[0] * x[0]).powi(2)
            }
            ProblemParams::Nonlinear(_) => -0.5 * x.iter().map(|v| v * v).sum::<f64>(),
        })
    }

    /// Log-likelihood up to an additive constant: `-|y - F(x)|^2 / (2 sigma^2)`.
    pub fn log_likelihood(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.check_x(x)?;
        self.check_y(y)?;
        let f = self.forward_unchecked(x);
        let r2: f64 = y.iter().zip(&f).map(|(yi, fi)| (yi - fi).powi(2)).sum();
        Ok(-0.5 * r2 / (self.sigma * self.sigma))
    }

    pub fn log_posterior_unnormalized(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        Ok(self.prior_log_density(x)? + self.log_likelihood(x, y)?)
    }

    pub fn prior_log_density_grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_x(x)?;
        Ok(match &self.params {
            ProblemParams::Gaussian(g) => {
                let v = &g.prior_precision * DVector::from_column_slice(x);
                v.iter().map(|e| -e).collect()
            }
            ProblemParams::Rosenbrock(p) => {
                let ridge = x[1] - x[0] * x[0];
                vec![-2.0 * p.a * (x[0] - p.mu) + 4.0 * p.b * x[0] * ridge, -2.0 * p.b * ridge]
            }
            ProblemParams::Nonlinear(_) => x.iter().map(|v| -v).collect(),
        })
    }

    pub fn likelihood_log_density_grad(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        self.check_x(x)?;
        self.check_y(y)?;
        let inv_var = 1.0 / (self.sigma * self.sigma);
        let f = self.forward_unchecked(x);
        let r: Vec<f64> = y.iter().zip(&f).map(|(yi, fi)| (yi - fi) * inv_var).collect();
        Ok(match &self.params {
            ProblemParams::Gaussian(_) | ProblemParams::Rosenbrock(_) => r,
            ProblemParams::Nonlinear(p) => {
                let rv = DVector::from_column_slice(&r);
                let at_r = p.matrix.transpose() * &rv;
                at_r.iter().zip(x.iter().zip(&r)).map(|(a, (xi, ri))| a + xi.cos() * ri).collect()
            }
        })
    }

    /// grad_x log p(x | y) = prior score + likelihood score.
    pub fn posterior_score(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        let prior = self.prior_log_density_grad(x)?;
        let like = self.likelihood_log_density_grad(x, y)?;
        Ok(prior.iter().zip(&like).map(|(a, b)| a + b).collect())
    }

    /// Posterior scores for each row pair of `x` and `y`.
    pub fn posterior_scores(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        check_dim("score batch rows", x.rows(), y.rows())?;
        let mut out = Tensor::zeros(x.rows(), self.dim);
        for i in 0..x.rows() {
            let s = self.posterior_score(x.row(i), y.row(i))?;
            out.row_mut(i).copy_from_slice(&s);
        }
        Ok(out)
    }

    pub fn sample_prior(&self, rng: &mut RngStream) -> Vec<f64> {
        match &self.params {
            ProblemParams::Gaussian(g) => {
                let z = DVector::from_vec(rng.normal_vec(self.dim));
                (&g.prior_chol * z).iter().copied().collect()
            }
            ProblemParams::Rosenbrock(p) => {
                // x1 ~ N(mu, 1/(2a)), x2 | x1 ~ N(x1^2, 1/(2b))
                let x1 = p.mu + rng.normal() / (2.0 * p.a).sqrt();
                let x2 = x1 * x1 + rng.normal() / (2.0 * p.b).sqrt();
                vec![x1, x2]
            }
            ProblemParams::Nonlinear(_) => rng.normal_vec(self.dim),
        }
    }

    /// One joint draw: `x ~ prior`, `y = F(x) + N(0, sigma^2 I)`.
    pub fn simulate_pair(&self, rng: &mut RngStream) -> (Vec<f64>, Vec<f64>) {
        let x = self.sample_prior(rng);
        let mut y = self.forward_unchecked(&x);
        for v in &mut y {
            *v += self.sigma * rng.normal();
        }
        (x, y)
    }

    /// Closed-form posterior for the Gaussian problem:
    /// `Sigma_post = (Sigma_prior^-1 + I / sigma^2)^-1`, `mu_post = Sigma_post y / sigma^2`.
    pub fn gaussian_posterior_moments(&self, y: &[f64]) -> Result<PosteriorMoments> {
        let ProblemParams::Gaussian(g) = &self.params else {
            return Err(Error::Unsupported(format!("closed-form posterior moments for the {} problem", self.kind())));
        };
        self.check_y(y)?;
        let mean = (&g.post_cov * DVector::from_column_slice(y)) / (self.sigma * self.sigma);
        Ok(PosteriorMoments { mean: mean.iter().copied().collect(), cov: g.post_cov.clone(), chol: g.post_chol.clone() })
    }

    /// Self-normalized importance-sampling estimate of the posterior mean,
    /// with the rows of `prior_draws` as proposals. Deterministic given the
    /// draw bank; used as the centering of the variance quantity of interest
    /// for problems without a closed-form posterior mean.
    pub fn importance_mean(&self, y: &[f64], prior_draws: &Tensor) -> Result<Vec<f64>> {
        self.check_y(y)?;
        check_dim("prior draw bank columns", self.dim, prior_draws.cols())?;
        let logw: Vec<f64> =
            (0..prior_draws.rows()).map(|k| self.log_likelihood(prior_draws.row(k), y)).collect::<Result<_>>()?;
        let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut mean = vec![0.0; self.dim];
        let mut total = 0.0;
        for (k, lw) in logw.iter().enumerate() {
            let w = (lw - max).exp();
            total += w;
            for (m, x) in mean.iter_mut().zip(prior_draws.row(k)) {
                *m += w * x;
            }
        }
        for m in &mut mean {
            *m /= total;
        }
        Ok(mean)
    }

    /// Bank of prior draws for [`importance_mean`](Self::importance_mean).
    pub fn prior_draw_bank(&self, n: usize, seed: u64) -> Tensor {
        let mut rng = RngStream::derive(seed, 0xba_4c);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| self.sample_prior(&mut rng)).collect();
        Tensor::from_rows(&rows)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QoiKind {
    /// h(x) = x
    Mean,
    /// h(x) = (x - center)^2, elementwise
    Variance,
}

/// Quantity of interest `h: R^d -> R^d`.
#[derive(Clone, Debug, PartialEq)]
pub struct Qoi {
    kind: QoiKind,
    center: Option<Vec<f64>>,
}

impl Qoi {
    pub fn mean() -> Self {
        Self { kind: QoiKind::Mean, center: None }
    }

    pub fn variance(center: Vec<f64>) -> Self {
        Self { kind: QoiKind::Variance, center: Some(center) }
    }

    pub fn new(kind: QoiKind, center: Option<Vec<f64>>) -> Result<Self> {
        if kind == QoiKind::Variance && center.is_none() {
            return Err(Error::Config("variance quantity of interest needs a center".into()));
        }
        Ok(Self { kind, center })
    }

    pub fn kind(&self) -> QoiKind {
        self.kind
    }

    pub fn center(&self) -> Option<&[f64]> {
        self.center.as_deref()
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self.kind {
            QoiKind::Mean => Ok(x.to_vec()),
            QoiKind::Variance => {
                let c = self
                    .center
                    .as_deref()
                    .ok_or_else(|| Error::Config("variance quantity of interest needs a center".into()))?;
                check_dim("quantity-of-interest center", x.len(), c.len())?;
                Ok(x.iter().zip(c).map(|(a, b)| (a - b).powi(2)).collect())
            }
        }
    }

    /// Row-wise evaluation.
    pub fn eval_batch(&self, x: &Tensor) -> Result<Tensor> {
        let mut out = Tensor::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            out.row_mut(i).copy_from_slice(&self.eval(x.row(i))?);
        }
        Ok(out)
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("noise level must be positive and finite, got {sigma}")))
    }
}

fn check_positive_dim(dim: usize) -> Result<()> {
    if dim == 0 {
        Err(Error::Config("dimension must be at least 1".into()))
    } else {
        Ok(())
    }
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

pub(crate) fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::NotPositiveDefinite(format!("Cholesky of {what} failed")))
}

fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::NotPositiveDefinite(format!("Cholesky of {what} failed")))
}

/// Haar-distributed orthogonal matrix via QR of a Gaussian matrix with the
/// signs of R's diagonal folded into Q.
fn random_orthogonal(n: usize, rng: &mut RngStream) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.normal());
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}
