//! Posterior samplers: exact multivariate Gaussian draws and MALA.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::problems::{cholesky, InverseProblem, PosteriorMoments};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Draws `mean + L z` with `L` the lower Cholesky factor of the covariance.
#[derive(Clone, Debug)]
pub struct GaussianSampler {
    mean: DVector<f64>,
    chol: DMatrix<f64>,
}

impl GaussianSampler {
    pub fn new(mean: &[f64], cov: &DMatrix<f64>) -> Result<Self> {
        check_dim("covariance rows", mean.len(), cov.nrows())?;
        check_dim("covariance columns", mean.len(), cov.ncols())?;
        let chol = cholesky(cov, "sampling covariance")?;
        Ok(Self { mean: DVector::from_column_slice(mean), chol })
    }

    pub fn from_moments(m: &PosteriorMoments) -> Self {
        Self { mean: DVector::from_column_slice(&m.mean), chol: m.chol.clone() }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        let z = DVector::from_vec(rng.normal_vec(self.dim()));
        (&self.mean + &self.chol * z).iter().copied().collect()
    }

    /// `n` independent draws, one per row.
    pub fn sample_n(&self, n: usize, rng: &mut RngStream) -> Tensor {
        let d = self.dim();
        let mut out = Tensor::zeros(n, d);
        let mut z = vec![0.0; d];
        for i in 0..n {
            for v in z.iter_mut() {
                *v = rng.normal();
            }
            let row = out.row_mut(i);
            for r in 0..d {
                let mut acc = self.mean[r];
                for c in 0..=r {
                    acc += self.chol[(r, c)] * z[c];
                }
                row[r] = acc;
            }
        }
        out
    }
}

/// One exact draw from `N(mean, cov)`; fails if `cov` is not SPD.
pub fn gaussian_exact_sample(mean: &[f64], cov: &DMatrix<f64>, rng: &mut RngStream) -> Result<Vec<f64>> {
    Ok(GaussianSampler::new(mean, cov)?.sample(rng))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MalaConfig {
    pub step_size: f64,
    pub burn_in: usize,
    pub thinning: usize,
    pub target_acceptance: f64,
    pub adapt: bool,
}

impl Default for MalaConfig {
    fn default() -> Self {
        Self { step_size: 0.1, burn_in: 1000, thinning: 5, target_acceptance: 0.574, adapt: true }
    }
}

impl MalaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("MALA step size must be positive, got {}", self.step_size)));
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return Err(Error::Config(format!(
                "MALA target acceptance must lie in (0, 1), got {}",
                self.target_acceptance
            )));
        }
        if self.thinning == 0 {
            return Err(Error::Config("MALA thinning must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MalaRun {
    /// Post-burn-in, thinned states, one per row.
    pub samples: Tensor,
    /// Acceptance rate after burn-in.
    pub acceptance_rate: f64,
    /// Step size after adaptation.
    pub step_size: f64,
}

struct State {
    x: Vec<f64>,
    log_p: f64,
    score: Vec<f64>,
}

/// Metropolis-adjusted Langevin chain.
///
/// Proposal `x' = x + (eps^2 / 2) score(x) + eps z`, accepted with probability
/// `min(1, p(x') q(x | x') / (p(x) q(x' | x)))`. During burn-in the log step
/// size follows a Robbins-Monro update toward the target acceptance rate; it
/// is frozen afterwards. Returns `n` states taken every `thinning` iterations
/// after burn-in.
pub fn mala_chain<S, L>(
    score: S,
    log_density: L,
    x0: &[f64],
    n: usize,
    config: &MalaConfig,
    rng: &mut RngStream,
) -> Result<MalaRun>
where
    S: Fn(&[f64]) -> Vec<f64>,
    L: Fn(&[f64]) -> f64,
{
    config.validate()?;
    if n == 0 {
        return Err(Error::Config("MALA chain length must be at least 1".into()));
    }
    let d = x0.len();
    let evaluate = |x: Vec<f64>, iteration: usize| -> Result<State> {
        let log_p = log_density(&x);
        let score = score(&x);
        check_dim("score length", d, score.len())?;
        if !log_p.is_finite() || score.iter().any(|v| !v.is_finite()) {
            return Err(Error::SamplerDiverged { iteration, state: x });
        }
        Ok(State { x, log_p, score })
    };

    let mut current = evaluate(x0.to_vec(), 0)?;
    let mut log_eps = config.step_size.ln();
    let mut samples = Tensor::zeros(n, d);
    let (mut accepted, mut proposed) = (0usize, 0usize);
    let total = config.burn_in + n * config.thinning;
    let mut proposal = vec![0.0; d];

    for it in 0..total {
        let eps = log_eps.exp();
        let half = 0.5 * eps * eps;
        for k in 0..d {
            proposal[k] = current.x[k] + half * current.score[k] + eps * rng.normal();
        }
        let cand = evaluate(proposal.clone(), it + 1)?;
        // log q(a | b) up to a constant: -|a - b - half * score(b)|^2 / (2 eps^2)
        let log_q = |a: &[f64], b: &State| -> f64 {
            let s: f64 = (0..d).map(|k| (a[k] - b.x[k] - half * b.score[k]).powi(2)).sum();
            -s / (2.0 * eps * eps)
        };
        let log_alpha = cand.log_p - current.log_p + log_q(&current.x, &cand) - log_q(&cand.x, &current);
        let accept_prob = if log_alpha >= 0.0 { 1.0 } else { log_alpha.exp() };
        let accept = rng.uniform() < accept_prob;

        let in_burn_in = it < config.burn_in;
        if in_burn_in && config.adapt {
            let gain = 1.0 / ((it + 1) as f64).powf(0.6);
            log_eps += gain * (accept_prob - config.target_acceptance);
        }
        if !in_burn_in {
            proposed += 1;
            accepted += usize::from(accept);
        }
        if accept {
            current = cand;
        }
        if !in_burn_in {
            let k = it - config.burn_in + 1;
            if k % config.thinning == 0 {
                samples.row_mut(k / config.thinning - 1).copy_from_slice(&current.x);
            }
        }
    }
    Ok(MalaRun {
        samples,
        acceptance_rate: accepted as f64 / proposed.max(1) as f64,
        step_size: log_eps.exp(),
    })
}

/// MALA on the posterior of `problem` given `y`.
pub fn mala_posterior(
    problem: &InverseProblem,
    y: &[f64],
    x0: &[f64],
    n: usize,
    config: &MalaConfig,
    rng: &mut RngStream,
) -> Result<MalaRun> {
    check_dim("observation vector", problem.obs_dim(), y.len())?;
    check_dim("initial state", problem.dim(), x0.len())?;
    mala_chain(
        |x| problem.posterior_score(x, y).unwrap_or_else(|_| vec![f64::NAN; x.len()]),
        |x| problem.log_posterior_unnormalized(x, y).unwrap_or(f64::NAN),
        x0,
        n,
        config,
        rng,
    )
}

/// Posterior draws for an observation: exact for the Gaussian problem,
/// MALA started at the observation otherwise.
#[derive(Clone, Debug)]
pub enum PosteriorSampler {
    Exact(GaussianSampler),
    Mala { config: MalaConfig },
}

impl PosteriorSampler {
    pub fn for_problem(problem: &InverseProblem, y: &[f64], mala: &MalaConfig) -> Result<Self> {
        match problem.gaussian_posterior_moments(y) {
            Ok(m) => Ok(PosteriorSampler::Exact(GaussianSampler::from_moments(&m))),
            Err(Error::Unsupported(_)) => Ok(PosteriorSampler::Mala { config: mala.clone() }),
            Err(e) => Err(e),
        }
    }

    pub fn is_exact(&self) -> bool {
        matches!(self, PosteriorSampler::Exact(_))
    }

    pub fn draw(&self, problem: &InverseProblem, y: &[f64], n: usize, rng: &mut RngStream) -> Result<Tensor> {
        match self {
            PosteriorSampler::Exact(g) => Ok(g.sample_n(n, rng)),
            PosteriorSampler::Mala { config } => {
                let x0 = mala_start(problem, y);
                Ok(mala_posterior(problem, y, &x0, n, config, rng)?.samples)
            }
        }
    }
}

/// Chain starting point: the observation itself when F is the identity,
/// otherwise the prior mean.
fn mala_start(problem: &InverseProblem, y: &[f64]) -> Vec<f64> {
    match problem.kind() {
        crate::problems::ProblemKind::Nonlinear => vec![0.0; problem.dim()],
        _ => y.to_vec(),
    }
}

/// Standard error of the mean of a correlated sequence via non-overlapping
/// batch means.
pub fn batch_means_se(values: &[f64], batches: usize) -> f64 {
    let size = values.len() / batches;
    assert!(size >= 2, "too few values for {batches} batches");
    let means: Vec<f64> = (0..batches).map(|b| values[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64).collect();
    let m = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (var / batches as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::RosenbrockParams;

    fn mean_and_var(col: &[f64]) -> (f64, f64) {
        let n = col.len() as f64;
        let m = col.iter().sum::<f64>() / n;
        (m, col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
    }

    fn column(t: &Tensor, j: usize) -> Vec<f64> {
        (0..t.rows()).map(|i| t.get(i, j)).collect()
    }

    #[test]
    fn exact_gaussian_moments() {
        let s = GaussianSampler::new(&[0.0, 0.0], &DMatrix::identity(2, 2)).unwrap();
        let draws = s.sample_n(100_000, &mut RngStream::new(1));
        let (c0, c1) = (column(&draws, 0), column(&draws, 1));
        for c in [&c0, &c1] {
            let (m, v) = mean_and_var(c);
            assert!(m.abs() < 0.02 && (v - 1.0).abs() < 0.03, "{m} {v}");
        }
        let cov01 = c0.iter().zip(&c1).map(|(a, b)| a * b).sum::<f64>() / c0.len() as f64;
        assert!(cov01.abs() < 0.03);
    }

    #[test]
    fn degenerate_width_and_determinism() {
        let cov = DMatrix::identity(2, 2) * 1e-12;
        let x = gaussian_exact_sample(&[5.0, 5.0], &cov, &mut RngStream::new(3)).unwrap();
        assert!(x.iter().all(|v| (v - 5.0).abs() < 1e-5));
        let a = gaussian_exact_sample(&[0.0; 3], &DMatrix::identity(3, 3), &mut RngStream::new(9)).unwrap();
        let b = gaussian_exact_sample(&[0.0; 3], &DMatrix::identity(3, 3), &mut RngStream::new(9)).unwrap();
        assert_eq!(a, b);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(gaussian_exact_sample(&[0.0; 2], &bad, &mut RngStream::new(0)), Err(Error::NotPositiveDefinite(_))));
    }

    #[test]
    fn sample_n_matches_single_draws() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.5]);
        let s = GaussianSampler::new(&[1.0, -1.0], &cov).unwrap();
        let batch = s.sample_n(3, &mut RngStream::new(4));
        let mut rng = RngStream::new(4);
        for i in 0..3 {
            let one = s.sample(&mut rng);
            for j in 0..2 {
                assert!((batch.get(i, j) - one[j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn mala_standard_normal() {
        let run = mala_chain(
            |x| vec![-x[0]],
            |x| -0.5 * x[0] * x[0],
            &[0.0],
            100_000,
            &MalaConfig { step_size: 0.5, ..Default::default() },
            &mut RngStream::new(17),
        )
        .unwrap();
        let (m, v) = mean_and_var(run.samples.data());
        assert!(m.abs() < 0.02, "mean {m}");
        assert!((v - 1.0).abs() < 0.05, "var {v}");
    }

    #[test]
    fn mala_zero_score_is_random_walk_metropolis() {
        // With a zero score the proposal is symmetric and the acceptance
        // ratio reduces to the density ratio; a flat target accepts everything.
        let run = mala_chain(|_| vec![0.0, 0.0], |_| 0.0, &[0.0, 0.0], 500, &MalaConfig { adapt: false, ..Default::default() }, &mut RngStream::new(2))
            .unwrap();
        assert_eq!(run.acceptance_rate, 1.0);
    }

    #[test]
    fn mala_is_reproducible() {
        let p = InverseProblem::rosenbrock(RosenbrockParams::default(), 0.3, 0).unwrap();
        let y = [0.5, 0.3];
        let a = mala_posterior(&p, &y, &y, 200, &MalaConfig::default(), &mut RngStream::new(8)).unwrap();
        let b = mala_posterior(&p, &y, &y, 200, &MalaConfig::default(), &mut RngStream::new(8)).unwrap();
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn mala_reports_divergence() {
        let err = mala_chain(|x| vec![f64::NAN; x.len()], |_| 0.0, &[1.0], 10, &MalaConfig::default(), &mut RngStream::new(0))
            .unwrap_err();
        assert!(matches!(err, Error::SamplerDiverged { iteration: 0, .. }));
    }

    #[test]
    fn mala_rosenbrock_prior_matches_exact_marginal() {
        let p = InverseProblem::rosenbrock(RosenbrockParams::default(), 0.3, 0).unwrap();
        let run = mala_chain(
            |x| p.prior_log_density_grad(x).unwrap(),
            |x| p.prior_log_density(x).unwrap(),
            &[0.0, 0.0],
            100_000,
            &MalaConfig::default(),
            &mut RngStream::new(31),
        )
        .unwrap();
        let x1 = column(&run.samples, 0);
        let (m, _) = mean_and_var(&x1);
        let se = batch_means_se(&x1, 100);
        assert!(m.abs() < 3.0 * se, "x1 mean {m}, se {se}");
        // E[x2] = E[x1^2] = 1/(2a) = 1
        let x2 = column(&run.samples, 1);
        let (m2, _) = mean_and_var(&x2);
        assert!((m2 - 1.0).abs() < 4.0 * batch_means_se(&x2, 100), "x2 mean {m2}");
    }

    #[test]
    fn mala_rosenbrock_posterior_acceptance() {
        let p = InverseProblem::rosenbrock(RosenbrockParams::default(), 0.3, 0).unwrap();
        let mut rng = RngStream::new(4);
        for _ in 0..5 {
            let (_, y) = p.simulate_pair(&mut rng);
            let run = mala_posterior(&p, &y, &y, 2000, &MalaConfig::default(), &mut rng).unwrap();
            assert!((0.4..=0.75).contains(&run.acceptance_rate), "acceptance {}", run.acceptance_rate);
        }
    }

    #[test]
    fn invalid_configs() {
        let bad = MalaConfig { target_acceptance: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = MalaConfig { step_size: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
