//! Online phase and measurement protocols.
//!
//! Given a trained ensemble and an observation `y`, the controlled estimate of
//! `E[h(x) | y]` is `(1/M) sum_i (h(x_i) - g_ens(x_i, y))` over posterior draws.
//! Its quality is measured by the variance reduction factor
//! `VRF = Var(h - g) / Var(h)`, computed per component with `N - 1`
//! denominators on the same draws.
//!
//! Every study derives its random streams from `(seed, observation id)`, so
//! results do not depend on the number of worker threads.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use crate::error::{check_dim, Error, Result};
use crate::model::CvEnsemble;
use crate::problems::{InverseProblem, ProblemKind, Qoi, QoiKind};
use crate::rng::{derive_seed, RngStream};
use crate::samplers::{batch_means_se, mala_posterior, MalaConfig, PosteriorSampler};
use crate::tensor::Tensor;
use crate::training::{self, ModelConfig, TrainConfig};

const OBSERVATION_STREAM: u64 = 1;
const DRAW_STREAM: u64 = 2;
const CENTER_STREAM: u64 = 3;
const REFERENCE_STREAM: u64 = 4;
const POOL_STREAM: u64 = 5;

/// Largest fraction of observations whose sampler may fail before a study
/// is declared failed.
pub const MAX_SKIP_FRACTION: f64 = 0.10;

/// Batches used for the standard error of correlated (MALA) draws.
const SE_BATCHES: usize = 20;

/// Per-component summary of one controlled estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlledEstimate {
    /// Plain Monte Carlo estimate `mean(h)`.
    pub raw: Vec<f64>,
    /// Controlled estimate `mean(h - g)`.
    pub estimate: Vec<f64>,
    pub var_h: Vec<f64>,
    pub var_hg: Vec<f64>,
    pub vrf: Vec<f64>,
    /// Sample correlation of `h_j` and `g_j`.
    pub corr: Vec<f64>,
    pub n: usize,
}

impl ControlledEstimate {
    pub fn mean_vrf(&self) -> f64 {
        mean(&self.vrf)
    }
}

/// Summarizes `h` and `g` evaluated on the same draws (one row per draw).
pub fn summarize(h: &Tensor, g: &Tensor) -> Result<ControlledEstimate> {
    check_dim("control variate rows", h.rows(), g.rows())?;
    check_dim("control variate columns", h.cols(), g.cols())?;
    let n = h.rows();
    if n < 2 {
        return Err(Error::Config(format!("variance needs at least 2 samples, got {n}")));
    }
    let k = h.cols();
    let mut out = ControlledEstimate {
        raw: Vec::with_capacity(k),
        estimate: Vec::with_capacity(k),
        var_h: Vec::with_capacity(k),
        var_hg: Vec::with_capacity(k),
        vrf: Vec::with_capacity(k),
        corr: Vec::with_capacity(k),
        n,
    };
    for j in 0..k {
        let hj: Vec<f64> = (0..n).map(|i| h.get(i, j)).collect();
        let gj: Vec<f64> = (0..n).map(|i| g.get(i, j)).collect();
        let rj: Vec<f64> = hj.iter().zip(&gj).map(|(a, b)| a - b).collect();
        let (var_h, var_hg) = (sample_var(&hj), sample_var(&rj));
        out.raw.push(mean(&hj));
        out.estimate.push(mean(&rj));
        out.var_h.push(var_h);
        out.var_hg.push(var_hg);
        out.vrf.push(if var_h > 0.0 { var_hg / var_h } else { f64::NAN });
        out.corr.push(correlation(&hj, &gj));
    }
    Ok(out)
}

/// Controlled estimate from posterior draws `x` with scores `score` for the
/// observation `y`.
pub fn controlled_estimate(x: &Tensor, score: &Tensor, ensemble: &CvEnsemble, y: &[f64], qoi: &Qoi) -> Result<ControlledEstimate> {
    let g = ensemble.evaluate(x, &Tensor::row_vector(y), score)?;
    summarize(&qoi.eval_batch(x)?, &g)
}

/// The quantity of interest used when evaluating at `y`. The variance
/// quantity is centered at the exact posterior mean for the Gaussian problem
/// and otherwise at the mean of an independent `center_draws`-long MALA run
/// (stream `rng`).
pub fn qoi_for_observation(
    problem: &InverseProblem,
    y: &[f64],
    kind: QoiKind,
    center_draws: usize,
    mala: &MalaConfig,
    rng: &mut RngStream,
) -> Result<Qoi> {
    match kind {
        QoiKind::Mean => Ok(Qoi::mean()),
        QoiKind::Variance => {
            let center = match problem.kind() {
                ProblemKind::Gaussian => problem.gaussian_posterior_moments(y)?.mean,
                _ => mala_mean(problem, y, &Qoi::mean(), center_draws, mala, rng)?,
            };
            Ok(Qoi::variance(center))
        }
    }
}

/// Mean of `q` over a MALA run on the posterior at `y`.
fn mala_mean(problem: &InverseProblem, y: &[f64], q: &Qoi, n: usize, mala: &MalaConfig, rng: &mut RngStream) -> Result<Vec<f64>> {
    let x0 = match problem.kind() {
        ProblemKind::Nonlinear => vec![0.0; problem.dim()],
        _ => y.to_vec(),
    };
    let run = mala_posterior(problem, y, &x0, n, mala, rng)?;
    Ok(q.eval_batch(&run.samples)?.col_sums().scale(1.0 / run.samples.rows() as f64).into_data())
}

/// Held-out observations `y` simulated from the joint under `seed`.
pub fn test_observations(problem: &InverseProblem, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = RngStream::derive(seed, OBSERVATION_STREAM);
    (0..n).map(|_| problem.simulate_pair(&mut rng).1).collect()
}

/// Runs `f(0..n)` on up to `threads` scoped workers and returns results in
/// index order.
pub fn par_map<T, F>(n: usize, threads: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let threads = threads.max(1).min(n.max(1));
    if threads == 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let v = f(i);
                slots.lock().expect("worker panicked")[i] = Some(v);
            });
        }
    });
    slots.into_inner().expect("worker panicked").into_iter().map(|v| v.expect("every index computed")).collect()
}

/// Settings shared by the per-observation studies.
#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub n_obs: usize,
    /// Posterior draws per observation.
    pub samples: usize,
    pub seed: u64,
    pub threads: usize,
    pub mala: MalaConfig,
    /// MALA draws behind the variance-quantity center (non-Gaussian problems).
    pub center_draws: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { n_obs: 100, samples: 5000, seed: 0, threads: 1, mala: MalaConfig::default(), center_draws: 100_000 }
    }
}

/// One CSV row: a component of one observation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VrfRow {
    pub obs_id: usize,
    pub component: usize,
    pub var_h: f64,
    pub var_hg: f64,
    pub vrf: f64,
    pub corr: f64,
    pub raw_estimate: f64,
    pub cv_estimate: f64,
    pub n_samples: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (0 for fewer than two values).
    pub fn of(values: &[f64]) -> Self {
        let std = if values.len() > 1 { sample_var(values).sqrt() } else { 0.0 };
        Self { mean: mean(values), std }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<VrfRow>,
    /// Observations whose sampler failed, with the error message.
    pub skipped: Vec<(usize, String)>,
    pub n_obs: usize,
    pub dim: usize,
    /// False when draws came from MALA, which inflates both variances alike.
    pub exact_sampler: bool,
}

impl EvalReport {
    /// Mean VRF over every (observation, component) pair.
    pub fn mean_vrf(&self) -> f64 {
        mean(&self.rows.iter().map(|r| r.vrf).collect::<Vec<_>>())
    }

    /// Mean VRF across components for each evaluated observation.
    pub fn per_observation(&self) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, Vec<f64>)> = Vec::new();
        for r in &self.rows {
            match out.last_mut() {
                Some((id, v)) if *id == r.obs_id => v.push(r.vrf),
                _ => out.push((r.obs_id, vec![r.vrf])),
            }
        }
        out.into_iter().map(|(id, v)| (id, mean(&v))).collect()
    }

    /// Mean VRF of each component over observations.
    pub fn per_component(&self) -> Vec<f64> {
        (0..self.dim)
            .map(|j| mean(&self.rows.iter().filter(|r| r.component == j).map(|r| r.vrf).collect::<Vec<_>>()))
            .collect()
    }

    /// Average over observations first, then mean +- std across components.
    pub fn components_outer(&self) -> MeanStd {
        MeanStd::of(&self.per_component())
    }

    /// Average over components first, then mean +- std across observations.
    pub fn observations_outer(&self) -> MeanStd {
        MeanStd::of(&self.per_observation().iter().map(|p| p.1).collect::<Vec<_>>())
    }

    pub fn mean_corr(&self) -> f64 {
        mean(&self.rows.iter().map(|r| r.corr).collect::<Vec<_>>())
    }
}

/// Evaluates `ensemble` at each observation in `ys` (ids `0..`), drawing
/// `opts.samples` posterior draws per observation. `opts.n_obs` is ignored.
pub fn evaluate_observations(
    problem: &InverseProblem,
    ensemble: &CvEnsemble,
    qoi: QoiKind,
    ys: &[Vec<f64>],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    check_dim("ensemble dimension", problem.dim(), ensemble.arch().dim)?;
    let results = par_map(ys.len(), opts.threads, |o| -> Result<ControlledEstimate> {
        let y = &ys[o];
        let sampler = PosteriorSampler::for_problem(problem, y, &opts.mala)?;
        let mut rng = RngStream::derive(derive_seed(opts.seed, DRAW_STREAM), o as u64);
        let x = sampler.draw(problem, y, opts.samples, &mut rng)?;
        let score = problem.posterior_scores(&x, &Tensor::repeat_row(y, x.rows()))?;
        let mut crng = RngStream::derive(derive_seed(opts.seed, CENTER_STREAM), o as u64);
        let q = qoi_for_observation(problem, y, qoi, opts.center_draws, &opts.mala, &mut crng)?;
        controlled_estimate(&x, &score, ensemble, y, &q)
    });
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (o, r) in results.into_iter().enumerate() {
        match r {
            Ok(est) => rows.extend((0..est.vrf.len()).map(|j| VrfRow {
                obs_id: o,
                component: j,
                var_h: est.var_h[j],
                var_hg: est.var_hg[j],
                vrf: est.vrf[j],
                corr: est.corr[j],
                raw_estimate: est.raw[j],
                cv_estimate: est.estimate[j],
                n_samples: est.n,
                seed: opts.seed,
            })),
            Err(e @ (Error::SamplerDiverged { .. } | Error::NonFinite { .. })) => skipped.push((o, e.to_string())),
            Err(e) => return Err(e),
        }
    }
    if skipped.len() as f64 > MAX_SKIP_FRACTION * ys.len() as f64 {
        return Err(Error::TooManyFailures { failed: skipped.len(), total: ys.len() });
    }
    let exact_sampler = problem.kind() == ProblemKind::Gaussian;
    Ok(EvalReport { rows, skipped, n_obs: ys.len(), dim: problem.dim(), exact_sampler })
}

/// VRF and correlation over `opts.n_obs` held-out observations.
pub fn vrf_study(problem: &InverseProblem, ensemble: &CvEnsemble, qoi: QoiKind, opts: &EvalOptions) -> Result<EvalReport> {
    let ys = test_observations(problem, opts.n_obs, opts.seed);
    evaluate_observations(problem, ensemble, qoi, &ys, opts)
}

/// Stein statistic of one observation: the mean of `g` over draws and
/// components, with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SteinRow {
    pub obs_id: usize,
    pub statistic: f64,
    pub se: f64,
    pub z: f64,
}

/// `(1/(M d)) sum_{i,j} g_ij` and its standard error, treating the per-draw
/// component means as i.i.d. (`correlated = false`) or as a Markov chain
/// (batch means).
pub fn stein_statistic(g: &Tensor, correlated: bool) -> (f64, f64) {
    let rows: Vec<f64> = (0..g.rows()).map(|i| mean(g.row(i))).collect();
    let stat = mean(&rows);
    let se = if correlated { batch_means_se(&rows, SE_BATCHES) } else { (sample_var(&rows) / rows.len() as f64).sqrt() };
    (stat, se)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SteinReport {
    pub rows: Vec<SteinRow>,
    pub skipped: Vec<(usize, String)>,
    /// Mean and std of the statistic across observations.
    pub summary: MeanStd,
}

impl SteinReport {
    /// Fraction of observations with `|z| < threshold`.
    pub fn pass_fraction(&self, threshold: f64) -> f64 {
        self.rows.iter().filter(|r| r.z.abs() < threshold).count() as f64 / self.rows.len().max(1) as f64
    }
}

/// Checks that `g` has zero posterior mean, observation by observation.
pub fn stein_verify(problem: &InverseProblem, ensemble: &CvEnsemble, opts: &EvalOptions) -> Result<SteinReport> {
    stein_verify_with_scores(problem, problem, ensemble, opts)
}

/// As [`stein_verify`], but the scores fed to `g` come from `score_problem`
/// while draws come from `problem`'s posterior. A mismatch (for example a
/// wrong noise level) breaks the zero-mean property and serves as a
/// negative control.
pub fn stein_verify_with_scores(
    problem: &InverseProblem,
    score_problem: &InverseProblem,
    ensemble: &CvEnsemble,
    opts: &EvalOptions,
) -> Result<SteinReport> {
    check_dim("score problem dimension", problem.dim(), score_problem.dim())?;
    let ys = test_observations(problem, opts.n_obs, opts.seed);
    let results = par_map(ys.len(), opts.threads, |o| -> Result<SteinRow> {
        let y = &ys[o];
        let sampler = PosteriorSampler::for_problem(problem, y, &opts.mala)?;
        let mut rng = RngStream::derive(derive_seed(opts.seed, DRAW_STREAM), o as u64);
        let x = sampler.draw(problem, y, opts.samples, &mut rng)?;
        let score = score_problem.posterior_scores(&x, &Tensor::repeat_row(y, x.rows()))?;
        let g = ensemble.evaluate(&x, &Tensor::row_vector(y), &score)?;
        let (statistic, se) = stein_statistic(&g, !sampler.is_exact());
        Ok(SteinRow { obs_id: o, statistic, se, z: statistic / se })
    });
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (o, r) in results.into_iter().enumerate() {
        match r {
            Ok(row) => rows.push(row),
            Err(e @ Error::SamplerDiverged { .. }) => skipped.push((o, e.to_string())),
            Err(e) => return Err(e),
        }
    }
    if skipped.len() as f64 > MAX_SKIP_FRACTION * ys.len() as f64 {
        return Err(Error::TooManyFailures { failed: skipped.len(), total: ys.len() });
    }
    let summary = MeanStd::of(&rows.iter().map(|r| r.statistic).collect::<Vec<_>>());
    Ok(SteinReport { rows, skipped, summary })
}

/// Where the "true" posterior expectation in a sweep comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Reference {
    /// Closed-form Gaussian posterior.
    Analytic,
    /// Mean of a long MALA chain.
    Mala,
}

#[derive(Clone, Debug)]
pub struct SweepOptions {
    pub sizes: Vec<usize>,
    pub n_obs: usize,
    pub repeats: usize,
    pub seed: u64,
    pub threads: usize,
    pub mala: MalaConfig,
    /// Chain length for the MALA reference (non-Gaussian problems).
    pub reference_draws: usize,
    /// MALA draws behind the variance-quantity center (non-Gaussian problems).
    pub center_draws: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            sizes: vec![10, 30, 100, 300, 1000, 5000],
            n_obs: 10,
            repeats: 20,
            seed: 0,
            threads: 1,
            mala: MalaConfig::default(),
            reference_draws: 1_000_000,
            center_draws: 100_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub n: usize,
    /// Mean VRF over observations, replications, and components.
    pub vrf: f64,
    /// Squared error of the plain estimate, averaged over components,
    /// observations, and replications.
    pub mse_raw: f64,
    pub mse_cv: f64,
    pub replications: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub reference: Reference,
    /// Least-squares slope of `ln mse` against `ln n`.
    pub raw_slope: f64,
    pub cv_slope: f64,
}

/// Exact `E[h | y]` for the Gaussian problem.
fn analytic_reference(problem: &InverseProblem, y: &[f64], q: &Qoi) -> Result<Vec<f64>> {
    let m = problem.gaussian_posterior_moments(y)?;
    Ok(match q.kind() {
        QoiKind::Mean => m.mean,
        QoiKind::Variance => {
            let c = q.center().expect("variance quantity has a center");
            (0..m.mean.len()).map(|j| m.cov[(j, j)] + (m.mean[j] - c[j]).powi(2)).collect()
        }
    })
}

/// Estimator error and VRF as functions of the sample size `N`.
pub fn sample_efficiency_sweep(
    problem: &InverseProblem,
    ensemble: &CvEnsemble,
    qoi: QoiKind,
    opts: &SweepOptions,
) -> Result<SweepReport> {
    if opts.sizes.iter().any(|&n| n < 2) || opts.sizes.is_empty() || opts.repeats == 0 || opts.n_obs == 0 {
        return Err(Error::Config("sweep needs sizes >= 2, repeats >= 1, and n_obs >= 1".into()));
    }
    let reference = if problem.kind() == ProblemKind::Gaussian { Reference::Analytic } else { Reference::Mala };
    let ys = test_observations(problem, opts.n_obs, opts.seed);
    let k = opts.sizes.len();
    // Per observation: for each size, (vrf sum, raw sq. err sum, cv sq. err sum).
    let per_obs = par_map(ys.len(), opts.threads, |o| -> Result<Vec<[f64; 3]>> {
        let y = &ys[o];
        let mut crng = RngStream::derive(derive_seed(opts.seed, CENTER_STREAM), o as u64);
        let q = qoi_for_observation(problem, y, qoi, opts.center_draws, &opts.mala, &mut crng)?;
        let truth = match reference {
            Reference::Analytic => analytic_reference(problem, y, &q)?,
            Reference::Mala => {
                let mut rrng = RngStream::derive(derive_seed(opts.seed, REFERENCE_STREAM), o as u64);
                mala_mean(problem, y, &q, opts.reference_draws, &opts.mala, &mut rrng)?
            }
        };
        let sampler = PosteriorSampler::for_problem(problem, y, &opts.mala)?;
        let base = derive_seed(derive_seed(opts.seed, DRAW_STREAM), o as u64);
        let mut acc = vec![[0.0; 3]; k];
        for (s, &n) in opts.sizes.iter().enumerate() {
            for r in 0..opts.repeats {
                let mut rng = RngStream::derive(derive_seed(base, s as u64), r as u64);
                let x = sampler.draw(problem, y, n, &mut rng)?;
                let score = problem.posterior_scores(&x, &Tensor::repeat_row(y, n))?;
                let est = controlled_estimate(&x, &score, ensemble, y, &q)?;
                acc[s][0] += est.mean_vrf();
                acc[s][1] += mean_sq_err(&est.raw, &truth);
                acc[s][2] += mean_sq_err(&est.estimate, &truth);
            }
        }
        Ok(acc)
    });
    let mut totals = vec![[0.0; 3]; k];
    for acc in per_obs {
        for (t, a) in totals.iter_mut().zip(acc?) {
            for c in 0..3 {
                t[c] += a[c];
            }
        }
    }
    let reps = opts.n_obs * opts.repeats;
    let rows: Vec<SweepRow> = opts
        .sizes
        .iter()
        .zip(&totals)
        .map(|(&n, t)| SweepRow {
            n,
            vrf: t[0] / reps as f64,
            mse_raw: t[1] / reps as f64,
            mse_cv: t[2] / reps as f64,
            replications: reps,
        })
        .collect();
    let ln_n: Vec<f64> = rows.iter().map(|r| (r.n as f64).ln()).collect();
    let raw_slope = ols_slope(&ln_n, &rows.iter().map(|r| r.mse_raw.ln()).collect::<Vec<_>>());
    let cv_slope = ols_slope(&ln_n, &rows.iter().map(|r| r.mse_cv.ln()).collect::<Vec<_>>());
    Ok(SweepReport { rows, reference, raw_slope, cv_slope })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub ensemble_size: usize,
    pub seed: u64,
    pub mean_vrf: f64,
    pub final_val_loss: f64,
}

/// Trains a fresh ensemble for every `(size, seed)` pair and evaluates it on
/// the same held-out observations. The training data depend only on the
/// seed, so every size sees identical data.
pub fn ensemble_ablation(
    problem: &InverseProblem,
    model: &ModelConfig,
    train: &TrainConfig,
    qoi: QoiKind,
    sizes: &[usize],
    seeds: &[u64],
    eval: &EvalOptions,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(sizes.len() * seeds.len());
    for &seed in seeds {
        for &l in sizes {
            let m = ModelConfig { ensemble_size: l, ..*model };
            let t = TrainConfig { seed, ..train.clone() };
            let out = training::train(problem, &m, &t, qoi)?;
            let report = vrf_study(problem, &out.ensemble, qoi, eval)?;
            rows.push(AblationRow {
                ensemble_size: l,
                seed,
                mean_vrf: report.mean_vrf(),
                final_val_loss: out.metadata.final_val_loss,
            });
        }
    }
    Ok(rows)
}

/// An observation chosen for its position in the prior-predictive
/// distribution.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DesignatedObservation {
    pub label: String,
    /// Quantile of the first observation component.
    pub quantile: f64,
    pub y: Vec<f64>,
}

/// Picks, for each `(label, q)`, the pool draw whose first component is the
/// `q`-quantile of a prior-predictive pool of `pool_size` observations.
pub fn designated_observations(
    problem: &InverseProblem,
    quantiles: &[(&str, f64)],
    pool_size: usize,
    seed: u64,
) -> Result<Vec<DesignatedObservation>> {
    if pool_size == 0 || quantiles.iter().any(|(_, q)| !(0.0..=1.0).contains(q)) {
        return Err(Error::Config("quantiles must lie in [0, 1] and the pool must be nonempty".into()));
    }
    let mut rng = RngStream::derive(seed, POOL_STREAM);
    let mut pool: Vec<Vec<f64>> = (0..pool_size).map(|_| problem.simulate_pair(&mut rng).1).collect();
    pool.sort_by(|a, b| a[0].total_cmp(&b[0]));
    Ok(quantiles
        .iter()
        .map(|&(label, q)| {
            let idx = (q * (pool_size - 1) as f64).round() as usize;
            DesignatedObservation { label: label.to_string(), quantile: q, y: pool[idx].clone() }
        })
        .collect())
}

/// Default designated regions: left tail, right tail (where the banana's
/// second coordinate is large), and the central ridge.
pub const AMORTIZATION_QUANTILES: [(&str, f64); 3] = [("left_tail", 0.05), ("right_tail", 0.95), ("ridge", 0.5)];

#[derive(Clone, Debug, PartialEq)]
pub struct AmortizationReport {
    pub observations: Vec<DesignatedObservation>,
    pub report: EvalReport,
    pub fingerprint_before: String,
    pub fingerprint_after: String,
}

/// Evaluates one fixed checkpoint at region-diverse observations.
pub fn amortization_study(
    problem: &InverseProblem,
    ensemble: &CvEnsemble,
    qoi: QoiKind,
    pool_size: usize,
    opts: &EvalOptions,
) -> Result<AmortizationReport> {
    let fingerprint_before = ensemble.fingerprint();
    let observations = designated_observations(problem, &AMORTIZATION_QUANTILES, pool_size, opts.seed)?;
    let ys: Vec<Vec<f64>> = observations.iter().map(|o| o.y.clone()).collect();
    let report = evaluate_observations(problem, ensemble, qoi, &ys, opts)?;
    Ok(AmortizationReport { observations, report, fingerprint_before, fingerprint_after: ensemble.fingerprint() })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UnbiasednessRow {
    pub component: usize,
    /// Mean of the controlled estimate over replications.
    pub mean: f64,
    /// Standard error of that mean.
    pub se: f64,
    pub reference: f64,
    pub z: f64,
}

/// Replicates the controlled mean estimate `replications` times with `n`
/// exact posterior draws each, and compares against the analytic mean.
pub fn unbiasedness_study(
    problem: &InverseProblem,
    ensemble: &CvEnsemble,
    y: &[f64],
    replications: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<UnbiasednessRow>> {
    if replications < 2 {
        return Err(Error::Config("need at least 2 replications".into()));
    }
    let moments = problem.gaussian_posterior_moments(y)?;
    let sampler = crate::samplers::GaussianSampler::from_moments(&moments);
    let estimates = (0..replications)
        .map(|r| {
            let mut rng = RngStream::derive(seed, r as u64);
            let x = sampler.sample_n(n, &mut rng);
            let score = problem.posterior_scores(&x, &Tensor::repeat_row(y, n))?;
            Ok(controlled_estimate(&x, &score, ensemble, y, &Qoi::mean())?.estimate)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((0..problem.dim())
        .map(|j| {
            let col: Vec<f64> = estimates.iter().map(|e| e[j]).collect();
            let m = mean(&col);
            let se = (sample_var(&col) / replications as f64).sqrt();
            UnbiasednessRow { component: j, mean: m, se, reference: moments.mean[j], z: (m - moments.mean[j]) / se }
        })
        .collect())
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Unbiased sample variance.
pub fn sample_var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

/// Pearson correlation clamped to [-1, 1]; 0 when either input is constant.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

fn mean_sq_err(est: &[f64], truth: &[f64]) -> f64 {
    est.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / est.len() as f64
}

/// Least-squares slope of `y` on `x`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let num: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let den: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    num / den
}
