//! Acceptance suite: one `[PASS]`/`[FAIL]` line per criterion.
//!
//! Trained models are shared between criteria. Set `CNCV_ACCEPTANCE=2,3,11`
//! to run a subset. Exits nonzero if any selected criterion fails.

mod common;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use cncv::checkpoint::Checkpoint;
use cncv::config::ExperimentConfig;
use cncv::evaluation::{
    amortization_study, mean, sample_efficiency_sweep, stein_verify, test_observations, unbiasedness_study, vrf_study, EvalOptions,
    EvalReport, SweepOptions,
};
use cncv::model::{Architecture, CvEnsemble};
use cncv::problems::{InverseProblem, QoiKind};
use cncv::report;
use cncv::rng::RngStream;
use cncv::training::{train, ModelConfig, TrainOutcome};
use common::{diagonal_errors, loss_gradient_max_rel_err, random_tree};

/// Training budget used here instead of the committed configs' 2048 x 50
/// epochs: the same 65536 generated pairs, smaller batches, fewer passes.
const BATCH_SIZE: usize = 256;
const EPOCHS: usize = 8;
/// d=2 gets more passes: at 8 epochs a few tail observations (|y| > 3) keep
/// VRF near 1 and pull the mean above its bound.
const EPOCHS_D2: usize = 16;

const EVAL_OBS: usize = 100;
const EVAL_SAMPLES: usize = 5000;
const STEIN_OBS: usize = 250;
const STEIN_Z: f64 = 4.0;
const STEIN_PASS_FRACTION: f64 = 0.95;

const DIVERGENCE_CONFIGS: usize = 1000;
const DIVERGENCE_DIMS: [usize; 5] = [2, 3, 4, 8, 16];
const DIVERGENCE_DEPTHS: [usize; 3] = [1, 2, 3];
const DIAG_TOL: f64 = 1e-6;
const TRACE_TOL: f64 = 1e-5;
const FD_STEP: f64 = 1e-5;

const VRF_D2: f64 = 0.10;
const VRF_D4: f64 = 0.15;
const VRF_D4_VARIANCE: f64 = 0.15;
const VRF_D16: f64 = 0.5;
const TREND_SLACK: f64 = 0.05;
const SWEEP_VRF_FACTOR: f64 = 2.0;
const RAW_SLOPE: (f64, f64) = (-1.2, -0.8);
const VRF_ROSENBROCK: f64 = 0.40;
const VRF_NONLINEAR: f64 = 0.85;
const NONLINEAR_OBS: usize = 10;

const ABLATION_SIZES: [usize; 4] = [1, 2, 8, 16];
const ABLATION_SEEDS: [u64; 3] = [12, 13, 14];
const ABLATION_OBS: usize = 20;
const ABLATION_SAMPLES: usize = 2000;
const ABLATION_L2_FACTOR: f64 = 10.0;
const ABLATION_16_OVER_8: (f64, f64) = (0.3, 1.5);

const GRADIENT_DRAWS: u64 = 20;
const GRADIENT_PARAMS: usize = 20;
const GRADIENT_TOL: f64 = 1e-5;

const UNBIASED_REPS: usize = 200;
const UNBIASED_DRAWS: usize = 500;
const UNBIASED_Z: f64 = 4.0;

const MINUTE: Duration = Duration::from_secs(60);

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

struct Trained {
    config: ExperimentConfig,
    problem: InverseProblem,
    outcome: TrainOutcome,
    seconds: f64,
}

/// Lazily trained models keyed by config name and QoI.
#[derive(Default)]
struct Models {
    cache: BTreeMap<String, Trained>,
    d2_report: Option<EvalReport>,
}

fn config(name: &str) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(format!("{name}.toml"));
    let mut cfg = ExperimentConfig::load(&path).unwrap();
    cfg.train.batch_size = BATCH_SIZE;
    cfg.train.epochs = if name == "gaussian-d2" { EPOCHS_D2 } else { EPOCHS };
    cfg
}

fn train_config(cfg: &ExperimentConfig) -> Trained {
    let problem = cfg.problem.build().unwrap();
    let t = Instant::now();
    let outcome = train(&problem, &cfg.model, &cfg.train, cfg.qoi.kind).unwrap();
    let seconds = t.elapsed().as_secs_f64();
    eprintln!(
        "  trained {} ({:?}, L = {}, seed {}) in {seconds:.0}s: val loss {:.4} -> {:.4}",
        cfg.output.dir.display(),
        cfg.qoi.kind,
        cfg.model.ensemble_size,
        cfg.train.seed,
        outcome.metadata.initial_val_loss,
        outcome.metadata.final_val_loss
    );
    Trained { config: cfg.clone(), problem, outcome, seconds }
}

impl Models {
    fn get(&mut self, name: &str, qoi: QoiKind) -> &Trained {
        let key = format!("{name}/{qoi:?}");
        self.cache.entry(key).or_insert_with(|| {
            let mut cfg = config(name);
            cfg.qoi.kind = qoi;
            train_config(&cfg)
        })
    }
}

fn eval_options(cfg: &ExperimentConfig, n_obs: usize, samples: usize) -> EvalOptions {
    EvalOptions { samples, ..cfg.eval.options(n_obs, 1) }
}

fn c1_divergence() -> Verdict {
    let t = Instant::now();
    let mut rng = RngStream::new(1);
    let (mut worst_diag, mut worst_trace) = (0.0f64, 0.0f64);
    for i in 0..DIVERGENCE_CONFIGS {
        let d = DIVERGENCE_DIMS[i % DIVERGENCE_DIMS.len()];
        let depth = DIVERGENCE_DEPTHS[(i / DIVERGENCE_DIMS.len()) % DIVERGENCE_DEPTHS.len()];
        let tree = random_tree(d, depth, &mut rng);
        let x = rng.normal_vec(d);
        let y = rng.normal_vec(d);
        let (de, te) = diagonal_errors(&tree, &x, &y, FD_STEP);
        worst_diag = worst_diag.max(de);
        worst_trace = worst_trace.max(te);
    }
    let elapsed = t.elapsed();
    Verdict::new(
        worst_diag < DIAG_TOL && worst_trace < TRACE_TOL && elapsed < MINUTE,
        format!(
            "{DIVERGENCE_CONFIGS} configs: max diag err {worst_diag:.2e} (< {DIAG_TOL:e}), max trace err {worst_trace:.2e} (< {TRACE_TOL:e}), {:.1}s (< 60s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn c2_stein(models: &mut Models) -> Verdict {
    let trained = models.get("gaussian-d4", QoiKind::Mean);
    let opts = eval_options(&trained.config, STEIN_OBS, EVAL_SAMPLES);
    let arch = trained.outcome.ensemble.arch();
    let untrained = CvEnsemble::init(*arch, trained.config.model.ensemble_size, trained.config.train.seed).unwrap();
    let t = Instant::now();
    let a = stein_verify(&trained.problem, &untrained, &opts).unwrap();
    let b = stein_verify(&trained.problem, &trained.outcome.ensemble, &opts).unwrap();
    let elapsed = t.elapsed();
    let (fa, fb) = (a.pass_fraction(STEIN_Z), b.pass_fraction(STEIN_Z));
    let complete = a.rows.len() == STEIN_OBS && b.rows.len() == STEIN_OBS;
    Verdict::new(
        complete && fa >= STEIN_PASS_FRACTION && fb >= STEIN_PASS_FRACTION && elapsed < 5 * MINUTE,
        format!(
            "|z| < {STEIN_Z}: untrained {:.1}%, trained {:.1}% (>= {:.0}%); statistic {:.1e} +- {:.1e} / {:.1e} +- {:.1e}; eval {:.0}s (< 300s)",
            100.0 * fa,
            100.0 * fb,
            100.0 * STEIN_PASS_FRACTION,
            a.summary.mean,
            a.summary.std,
            b.summary.mean,
            b.summary.std,
            elapsed.as_secs_f64()
        ),
    )
}

fn gaussian_mean_vrf(models: &mut Models, name: &str) -> (EvalReport, f64) {
    let trained = models.get(name, QoiKind::Mean);
    let t = Instant::now();
    let r = vrf_study(&trained.problem, &trained.outcome.ensemble, QoiKind::Mean, &eval_options(&trained.config, EVAL_OBS, EVAL_SAMPLES)).unwrap();
    let seconds = trained.seconds + t.elapsed().as_secs_f64();
    (r, seconds)
}

fn c3_gaussian_mean(models: &mut Models) -> Verdict {
    let (r2, s2) = gaussian_mean_vrf(models, "gaussian-d2");
    let (r4, s4) = gaussian_mean_vrf(models, "gaussian-d4");
    let (v2, v4) = (r2.mean_vrf(), r4.mean_vrf());
    let complete = r2.skipped.is_empty() && r4.skipped.is_empty();
    models.d2_report = Some(r2);
    Verdict::new(
        complete && v2 <= VRF_D2 && v4 <= VRF_D4 && s2 <= 900.0 && s4 <= 900.0,
        format!(
            "mean VRF d=2 {v2:.4} (<= {VRF_D2}), d=4 {v4:.4} (<= {VRF_D4}); train+eval {s2:.0}s / {s4:.0}s (<= 900s)"
        ),
    )
}

fn c4_gaussian_variance(models: &mut Models) -> Verdict {
    let trained = models.get("gaussian-d4", QoiKind::Variance);
    let r = vrf_study(&trained.problem, &trained.outcome.ensemble, QoiKind::Variance, &eval_options(&trained.config, EVAL_OBS, EVAL_SAMPLES))
        .unwrap();
    let v = r.mean_vrf();
    Verdict::new(r.skipped.is_empty() && v <= VRF_D4_VARIANCE, format!("mean VRF d=4 variance {v:.4} (<= {VRF_D4_VARIANCE})"))
}

fn c5_dimension_trend(models: &mut Models) -> Verdict {
    let v2 = match &models.d2_report {
        Some(r) => r.mean_vrf(),
        None => gaussian_mean_vrf(models, "gaussian-d2").0.mean_vrf(),
    };
    let (r16, _) = gaussian_mean_vrf(models, "gaussian-d16");
    let v16 = r16.mean_vrf();
    Verdict::new(
        r16.skipped.is_empty() && v16 <= VRF_D16 && v2 <= v16 + TREND_SLACK,
        format!("mean VRF d=16 {v16:.4} (<= {VRF_D16}); d=2 {v2:.4} <= d=16 + {TREND_SLACK}"),
    )
}

fn c6_sample_size(models: &mut Models) -> Verdict {
    let trained = models.get("gaussian-d4", QoiKind::Mean);
    let opts = SweepOptions { sizes: vec![10, 30, 100, 300, 1000, 5000], ..trained.config.eval.sweep_options(1) };
    let r = sample_efficiency_sweep(&trained.problem, &trained.outcome.ensemble, QoiKind::Mean, &opts).unwrap();
    let at = |n: usize| r.rows.iter().find(|row| row.n == n).unwrap();
    let (v100, v5000) = (at(100).vrf, at(5000).vrf);
    let ratio = v100.max(v5000) / v100.min(v5000);
    let cv_wins = r.rows.iter().filter(|row| row.n >= 30).all(|row| row.mse_cv < row.mse_raw);
    let slope_ok = (RAW_SLOPE.0..=RAW_SLOPE.1).contains(&r.raw_slope);
    let mse: Vec<String> = r.rows.iter().map(|row| format!("{}:{:.1e}/{:.1e}", row.n, row.mse_raw, row.mse_cv)).collect();
    Verdict::new(
        ratio <= SWEEP_VRF_FACTOR && slope_ok && cv_wins,
        format!(
            "VRF N=100 {v100:.4}, N=5000 {v5000:.4} (ratio {ratio:.2} <= {SWEEP_VRF_FACTOR}); raw slope {:.3} in [{}, {}]; raw/cv MSE {}",
            r.raw_slope,
            RAW_SLOPE.0,
            RAW_SLOPE.1,
            mse.join(" ")
        ),
    )
}

fn c7_rosenbrock(models: &mut Models) -> Verdict {
    let trained = models.get("rosenbrock", QoiKind::Mean);
    let checkpoint = Checkpoint::new(&trained.config, &trained.outcome.ensemble, trained.outcome.metadata.clone());
    let ensemble = checkpoint.ensemble().unwrap();
    let r = amortization_study(
        &trained.problem,
        &ensemble,
        QoiKind::Mean,
        trained.config.eval.pool_size,
        &eval_options(&trained.config, 3, EVAL_SAMPLES),
    )
    .unwrap();
    let per = r.report.per_observation();
    let unchanged = r.fingerprint_before == r.fingerprint_after && r.fingerprint_after == checkpoint.fingerprint;
    let detail: Vec<String> = per.iter().map(|&(id, v)| format!("{} {v:.4}", r.observations[id].label)).collect();
    Verdict::new(
        per.len() == 3 && unchanged && per.iter().all(|&(_, v)| v <= VRF_ROSENBROCK),
        format!("per-observation VRF {} (each <= {VRF_ROSENBROCK}); checkpoint unchanged: {unchanged}", detail.join(", ")),
    )
}

fn c8_nonlinear(models: &mut Models) -> Verdict {
    let trained = models.get("nonlinear", QoiKind::Mean);
    let r = vrf_study(&trained.problem, &trained.outcome.ensemble, QoiKind::Mean, &eval_options(&trained.config, NONLINEAR_OBS, EVAL_SAMPLES))
        .unwrap();
    let v = r.mean_vrf();
    Verdict::new(
        v <= VRF_NONLINEAR,
        format!("mean VRF {v:.4} (<= {VRF_NONLINEAR}) over {} of {NONLINEAR_OBS} observations (MALA)", NONLINEAR_OBS - r.skipped.len()),
    )
}

fn c9_ablation(models: &mut Models) -> Verdict {
    let base = models.get("gaussian-d4", QoiKind::Mean);
    let (base_seed, base_ensemble) = (base.config.train.seed, base.outcome.ensemble.clone());
    let cfg = base.config.clone();
    let problem = base.problem.clone();
    let opts = eval_options(&cfg, ABLATION_OBS, ABLATION_SAMPLES);
    let mut by_size: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for &seed in &ABLATION_SEEDS {
        for &l in &ABLATION_SIZES {
            let ensemble = if seed == base_seed && l == cfg.model.ensemble_size {
                base_ensemble.clone()
            } else {
                let mut c = cfg.clone();
                c.model = ModelConfig { ensemble_size: l, ..c.model };
                c.train.seed = seed;
                train_config(&c).outcome.ensemble
            };
            let v = vrf_study(&problem, &ensemble, QoiKind::Mean, &opts).unwrap().mean_vrf();
            by_size.entry(l).or_default().push(v);
        }
    }
    let m = |l: usize| mean(&by_size[&l]);
    let (v1, v2, v8, v16) = (m(1), m(2), m(8), m(16));
    let ratio = v16 / v8;
    let per_seed: Vec<String> =
        ABLATION_SIZES.iter().map(|l| format!("L={l} [{}]", by_size[l].iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(", "))).collect();
    Verdict::new(
        v16 < v1 && v2 <= v1 / ABLATION_L2_FACTOR && (ABLATION_16_OVER_8.0..=ABLATION_16_OVER_8.1).contains(&ratio),
        format!(
            "seed-mean VRF L=1 {v1:.3}, L=2 {v2:.4} (<= L1/{ABLATION_L2_FACTOR}), L=16/L=8 {ratio:.2} in [{}, {}]; {}",
            ABLATION_16_OVER_8.0,
            ABLATION_16_OVER_8.1,
            per_seed.join("; ")
        ),
    )
}

fn c10_gradient() -> Verdict {
    let t = Instant::now();
    let problem = InverseProblem::gaussian(2, 0.3, 4).unwrap();
    let arch = Architecture { dim: 2, obs_dim: 2, depth: 1, hidden_units: 8, mlp_layers: 3 };
    let mut rng = RngStream::new(10);
    let mut worst: f64 = 0.0;
    for draw in 0..GRADIENT_DRAWS {
        let mut e = CvEnsemble::init(arch, 2, draw).unwrap();
        e.perturb(0.2, 1000 + draw);
        worst = worst.max(loss_gradient_max_rel_err(&problem, &e, GRADIENT_PARAMS, &mut rng));
    }
    let elapsed = t.elapsed();
    Verdict::new(
        worst < GRADIENT_TOL && elapsed < MINUTE,
        format!(
            "{GRADIENT_DRAWS} parameter draws x {GRADIENT_PARAMS} coordinates: max rel err {worst:.2e} (< {GRADIENT_TOL:e}), {:.1}s (< 60s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn c11_unbiasedness(models: &mut Models) -> Verdict {
    let trained = models.get("gaussian-d4", QoiKind::Mean);
    let y = test_observations(&trained.problem, 1, trained.config.eval.seed).remove(0);
    let untrained = CvEnsemble::init(*trained.outcome.ensemble.arch(), trained.config.model.ensemble_size, 0).unwrap();
    let mut worst: f64 = 0.0;
    let mut detail = Vec::new();
    for (label, e) in [("trained", &trained.outcome.ensemble), ("untrained", &untrained)] {
        let rows = unbiasedness_study(&trained.problem, e, &y, UNBIASED_REPS, UNBIASED_DRAWS, 11).unwrap();
        let z: Vec<String> = rows.iter().map(|r| format!("{:.2}", r.z)).collect();
        worst = rows.iter().map(|r| r.z.abs()).fold(worst, f64::max);
        detail.push(format!("{label} z [{}]", z.join(", ")));
    }
    Verdict::new(worst < UNBIASED_Z, format!("{}; max |z| {worst:.2} (< {UNBIASED_Z})", detail.join("; ")))
}

/// Serialized checkpoint, training curve, and VRF table of one run.
fn run_artifacts(t: &Trained) -> [String; 3] {
    let cfg = &t.config;
    let ck = Checkpoint::new(cfg, &t.outcome.ensemble, t.outcome.metadata.clone()).to_json();
    let curve = report::curve_table(&t.outcome.curve).to_csv(&cfg.hash());
    let r = vrf_study(&t.problem, &t.outcome.ensemble, cfg.qoi.kind, &eval_options(cfg, EVAL_OBS, EVAL_SAMPLES)).unwrap();
    [ck, curve, report::vrf_table(&r).to_csv(&cfg.hash())]
}

fn c12_determinism(models: &mut Models) -> Verdict {
    let first = run_artifacts(models.get("gaussian-d2", QoiKind::Mean));
    let cfg = models.get("gaussian-d2", QoiKind::Mean).config.clone();
    let second = run_artifacts(&train_config(&cfg));
    let same: Vec<bool> = first.iter().zip(&second).map(|(a, b)| a == b).collect();
    Verdict::new(
        same.iter().all(|&s| s),
        format!(
            "byte-identical checkpoint {}, curve CSV {}, VRF CSV {} ({} + {} + {} bytes)",
            same[0],
            same[1],
            same[2],
            first[0].len(),
            first[1].len(),
            first[2].len()
        ),
    )
}

type Criterion = (usize, &'static str, fn(&mut Models) -> Verdict);

fn main() {
    let criteria: [Criterion; 12] = [
        (1, "exact divergence", |_| c1_divergence()),
        (2, "Stein zero mean", c2_stein),
        (3, "Gaussian mean VRF", c3_gaussian_mean),
        (4, "Gaussian variance VRF", c4_gaussian_variance),
        (5, "dimension trend", c5_dimension_trend),
        (6, "sample-size invariance", c6_sample_size),
        (7, "Rosenbrock amortization", c7_rosenbrock),
        (8, "nonlinear problem", c8_nonlinear),
        (9, "ensemble ablation", c9_ablation),
        (10, "loss gradient", |_| c10_gradient()),
        (11, "unbiasedness", c11_unbiasedness),
        (12, "determinism", c12_determinism),
    ];
    let selected: Option<Vec<usize>> =
        std::env::var("CNCV_ACCEPTANCE").ok().map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let mut models = Models::default();
    let mut failures = 0;
    let start = Instant::now();
    for (id, name, run) in criteria {
        if selected.as_ref().is_some_and(|s| !s.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let v = run(&mut models);
        println!(
            "[{}] {id:>2} {name}: {} [{:.0}s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            t.elapsed().as_secs_f64()
        );
        failures += usize::from(!v.pass);
    }
    println!("acceptance: {failures} failed, total {:.0}s", start.elapsed().as_secs_f64());
    if failures > 0 {
        std::process::exit(1);
    }
}
