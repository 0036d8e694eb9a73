//! End-to-end acceptance checks. Each criterion prints one `PASS`/`FAIL`
//! line on stderr (visible without `--nocapture`); the test fails if any
//! criterion fails. The MNIST criteria need the IDX files under
//! `data/mnist` (or `$ITN_MNIST`) and take most of an hour on one core.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use itn_cli::config::RunConfig;
use itn_cli::datasets::Resolver;
use itn_cli::protocol::{self, mean_error, Protocol, Row};
use itn_core::data::{discrete_introspective_update, kl_divergence, DiscreteDistribution};
use itn_core::gradcheck;
use itn_core::sampler::{init_reference, run_chain, ClassifierScore, NegativePool, SamplerConfig, ScoreFn, ThresholdTracker};
use itn_core::trainer::{train, TrainConfig};
use itn_core::Tensor;

// Tolerances and budgets.
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const KL_MONOTONE_TOL: f64 = 1e-12;
const KL_EXACT_TOL: f64 = 1e-12;
const KL_BUDGET: Duration = Duration::from_secs(1);
const SAMPLER_BUDGET: Duration = Duration::from_secs(60);
const TOY_MAX_ERROR: f64 = 0.05;
const TOY_MAX_ITERATIONS: usize = 10;
const TOY_BUDGET: Duration = Duration::from_secs(600);
const PROTOCOL_BUDGET: Duration = Duration::from_secs(2 * 3600);
const INVARIANT_BUDGET: Duration = Duration::from_secs(10);

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn mnist_root() -> PathBuf {
    std::env::var_os("ITN_MNIST").map(PathBuf::from).unwrap_or_else(|| root().join("data/mnist"))
}

fn preset(name: &str) -> RunConfig {
    let path = root().join("configs").join(name);
    let overrides = vec!["--data.root".to_string(), mnist_root().display().to_string()];
    RunConfig::load(Some(&path), &overrides).expect("preset parses")
}

struct Verdict {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn report(name: &'static str, started: Instant, result: Result<(bool, String), String>) -> Verdict {
    let elapsed = started.elapsed().as_secs_f64();
    let (passed, detail) = match result {
        Ok((p, d)) => (p, format!("{} [{:.1}s]", d, elapsed)),
        Err(e) => (false, format!("error: {} [{:.1}s]", e, elapsed)),
    };
    let _ = writeln!(std::io::stderr(), "{} {}: {}", if passed { "PASS" } else { "FAIL" }, name, detail);
    Verdict { name, passed, detail }
}

fn gradient_suite() -> Result<(bool, String), String> {
    let t = Instant::now();
    let reports = gradcheck::run_all(7, None).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    let worst = |kind: gradcheck::CaseKind| reports.iter().filter(|r| r.kind == kind).map(|r| r.worst_rel).fold(0.0, f64::max);
    let required = ["conv2d", "batch_norm", "swish", "linear", "bilinear_sample", "affine_grid", "gradient_penalty", "wasserstein_loss"];
    let missing: Vec<_> = required.iter().filter(|n| !reports.iter().any(|r| r.name == **n)).collect();
    Ok((
        failed.is_empty() && missing.is_empty() && elapsed < GRAD_BUDGET,
        format!(
            "{} cases, worst abs {:.2e}, worst op rel {:.2e} (< 1e-4), worst loss rel {:.2e} (< 1e-3), failed {:?}, missing {:?}",
            reports.len(),
            reports.iter().map(|r| r.worst_abs).fold(0.0, f64::max),
            worst(gradcheck::CaseKind::Op),
            worst(gradcheck::CaseKind::Loss),
            failed,
            missing
        ),
    ))
}

fn kl_oracle() -> Result<(bool, String), String> {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut monotone, mut exact) = (true, true);
    let mut worst_rise = 0.0f64;
    let mut worst_one_step = 0.0f64;
    for _ in 0..20 {
        let p_pos = DiscreteDistribution::random(16, &mut rng);
        let p0 = DiscreteDistribution::random(16, &mut rng);
        for q in [0.6, 0.8, 1.0] {
            let mut p = p0.clone();
            let mut kl = kl_divergence(&p_pos, &p).map_err(|e| e.to_string())?;
            for step in 0..20 {
                p = discrete_introspective_update(&p_pos, &p, q).map_err(|e| e.to_string())?;
                let next = kl_divergence(&p_pos, &p).map_err(|e| e.to_string())?;
                worst_rise = worst_rise.max(next - kl);
                monotone &= next <= kl + KL_MONOTONE_TOL;
                if q == 1.0 && step == 0 {
                    worst_one_step = worst_one_step.max(next);
                    exact &= next < KL_EXACT_TOL;
                }
                kl = next;
            }
        }
    }
    let elapsed = t.elapsed();
    Ok((
        monotone && exact && elapsed < KL_BUDGET,
        format!("largest KL rise {:.1e} (tol 1e-12), KL after one exact step {:.1e} (< 1e-12)", worst_rise, worst_one_step),
    ))
}

/// `−½‖x − c‖²` per sample.
struct Concave {
    center: Tensor,
}

impl ScoreFn for Concave {
    fn score_and_grad(&self, x: &Tensor) -> itn_core::Result<(Vec<f64>, Tensor)> {
        let n = x.shape()[0];
        let per = x.numel() / n;
        let c = self.center.data();
        let scores = (0..n)
            .map(|i| -0.5 * x.data()[i * per..(i + 1) * per].iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .collect();
        let grad = Tensor::new(x.shape(), x.data().iter().enumerate().map(|(k, v)| c[k % per] - v).collect())?;
        Ok((scores, grad))
    }
}

fn sampler_ascent() -> Result<(bool, String), String> {
    let e = |e: itn_core::Error| e.to_string();
    let never = ThresholdTracker::from_history(&[f64::MAX]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let concave = Concave { center: Tensor::from_fn(&[1, 4, 4], |_| rng.random::<f64>()) };
    let mut x = init_reference(8, &[1, 4, 4], &mut rng).map_err(e)?;
    let quiet = SamplerConfig { step_size: 0.1, noise_std: 0.0, max_steps: 1, ..Default::default() };
    let mut last = concave.score_and_grad(&x).map_err(e)?.0;
    let mut monotone = true;
    for _ in 0..50 {
        x = run_chain(&x, &concave, &quiet, &never, &mut rng).map_err(e)?.samples;
        let now = concave.score_and_grad(&x).map_err(e)?.0;
        monotone &= now.iter().zip(&last).all(|(a, b)| a >= b);
        last = now;
    }

    let toy = itn_core::data::make_toy2d(50, &[[1.0, 1.0], [-1.0, -1.0]], 0.3, itn_core::data::ToyRender::Patch8x8, 3).map_err(e)?.dataset;
    let cfg = TrainConfig {
        mode: itn_core::discriminator::Mode::Binary,
        outer_iterations: 3,
        disc_steps: 40,
        conv_channels: 16,
        num_layers: 2,
        sampler: SamplerConfig { max_steps: 10, ..Default::default() },
        ..Default::default()
    };
    let (state, _) = train(&cfg, &toy, &toy).map_err(e)?;
    let chain_cfg = SamplerConfig { noise_std: 0.0, max_steps: 30, ..Default::default() };
    let mut gains = Vec::new();
    for seed in 0..5u64 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let seeds = init_reference(32, &[1, 8, 8], &mut r).map_err(e)?;
        let classes = vec![0; 32];
        let score = ClassifierScore { disc: &state.disc, classes: &classes, chunk: 64 };
        let before = score.score_and_grad(&seeds).map_err(e)?.0;
        let out = run_chain(&seeds, &score, &chain_cfg, &never, &mut r).map_err(e)?;
        let after = score.score_and_grad(&out.samples).map_err(e)?.0;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        gains.push(mean(&after) - mean(&before));
    }
    let ascent = gains.iter().all(|g| *g >= 0.0);
    Ok((monotone && ascent, format!("concave chains monotone: {}, toy mean-score gains {:?}", monotone, gains.iter().map(|g| format!("{:.3}", g)).collect::<Vec<_>>())))
}

fn toy_end_to_end() -> Result<(bool, String), String> {
    let rc = preset("toy.cfg");
    let resolver = Resolver::new(&rc.data_root);
    let (tr, va) = (resolver.resolve(&rc.train_data).map_err(|e| e.to_string())?, resolver.resolve(&rc.val_data).map_err(|e| e.to_string())?);
    let t = Instant::now();
    let (_, metrics) = train(&rc.train, &tr, &va).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    let best = metrics.rows.iter().take(TOY_MAX_ITERATIONS).map(|r| (r.val_error, r.iteration)).min_by(|a, b| a.0.total_cmp(&b.0));
    let (err, at) = best.ok_or("no metrics")?;
    Ok((
        err <= TOY_MAX_ERROR && elapsed < TOY_BUDGET,
        format!("best validation error {:.3} at iteration {} (<= {}) in {:.0}s", err, at, TOY_MAX_ERROR, elapsed.as_secs_f64()),
    ))
}

fn means(rows: &[Row], methods: &[&str]) -> String {
    methods.iter().map(|m| format!("{} {:.4}", m, mean_error(rows, m).unwrap_or(f64::NAN))).collect::<Vec<_>>().join(", ")
}

fn ordering(protocol: Protocol, rc: &RunConfig, resolver: &Resolver) -> Result<(Vec<Row>, bool, String), String> {
    let t = Instant::now();
    let rows = protocol::reproduce(protocol, rc, resolver).map_err(|e| e.to_string())?;
    let (line, ok) = protocol::verdict(protocol, &rows, &rc.t_u_values);
    let within = t.elapsed() < PROTOCOL_BUDGET;
    let methods: &[&str] = if protocol == Protocol::CrossDataset { &["itn", "baseline_da", "baseline"] } else { &["itn", "baseline"] };
    Ok((rows.clone(), ok && within, format!("{}; mean error {}; seeds {:?}", line, means(&rows, methods), rc.seeds)))
}

fn threshold_direction(limited: &[Row], rc: &RunConfig, resolver: &Resolver) -> Result<(bool, String), String> {
    let strict = rc.train.sampler.t_u;
    let loose = 1e-1;
    let mut rows: Vec<Row> = limited
        .iter()
        .filter(|r| r.method == "itn")
        .map(|r| Row { method: protocol::sweep_method(strict), ..r.clone() })
        .collect();
    let mut sweep = rc.clone();
    sweep.t_u_values = vec![loose];
    rows.extend(protocol::reproduce(Protocol::ThresholdSweep, &sweep, resolver).map_err(|e| e.to_string())?);
    let (line, ok) = protocol::verdict(Protocol::ThresholdSweep, &rows, &[strict, loose]);
    let detail = format!(
        "{}; mean error {:.4} at t_u={} vs {:.4} at t_u={}",
        line,
        mean_error(&rows, &protocol::sweep_method(loose)).unwrap_or(f64::NAN),
        loose,
        mean_error(&rows, &protocol::sweep_method(strict)).unwrap_or(f64::NAN),
        strict
    );
    Ok((ok, detail))
}

fn metrics_determinism() -> Result<(bool, String), String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = root().join("configs/toy.cfg");
    let run = |dir: &Path| -> Result<Vec<u8>, String> {
        let o = Command::new(env!("CARGO_BIN_EXE_itn"))
            .args(["train", "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap(), "--train.iterations", "3"])
            .output()
            .map_err(|e| e.to_string())?;
        if !o.status.success() {
            return Err(String::from_utf8_lossy(&o.stderr).into_owned());
        }
        std::fs::read(dir.join("metrics.csv")).map_err(|e| e.to_string())
    };
    let a = run(&tmp.path().join("a"))?;
    let b = run(&tmp.path().join("b"))?;
    Ok((a == b && !a.is_empty(), format!("two runs, {} bytes each, byte-identical: {}", a.len(), a == b)))
}

fn pool_and_tracker_invariants() -> Result<(bool, String), String> {
    let t = Instant::now();
    let mut runner = TestRunner::new(PropConfig { cases: 128, ..PropConfig::default() });
    let schedule = (1usize..8, 1usize..12, proptest::option::of(1usize..40), any::<u64>());
    let pool = runner.run(&schedule, |(iterations, per_iteration, cap, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pool = NegativePool::new(&[1, 2, 2], cap);
        for it in 1..=iterations {
            let samples = Tensor::full(&[per_iteration, 1, 2, 2], it as f64);
            let tags: Vec<usize> = (0..per_iteration).map(|_| rng.random_range(0..10)).collect();
            pool.augment(&samples, &tags, it).unwrap();
            let uncapped = it * per_iteration;
            prop_assert_eq!(pool.len(), cap.map_or(uncapped, |c| uncapped.min(c)));
            prop_assert!(pool.iteration_tags().windows(2).all(|w| w[0] <= w[1]));
            // Survivors are the newest samples.
            let oldest_kept = uncapped - pool.len();
            let expected_first = oldest_kept / per_iteration + 1;
            prop_assert_eq!(pool.iteration_tags().first().copied(), Some(expected_first));
        }
        Ok(())
    });
    let history = proptest::collection::vec(-50.0f64..50.0, 1..40);
    let tracker = runner.run(&history, |d| {
        let mut tr = ThresholdTracker::new();
        for (i, &x) in d.iter().enumerate() {
            tr.push(x);
            let seen = &d[..=i];
            let a = seen.iter().sum::<f64>() / seen.len() as f64;
            let b = (seen.iter().map(|v| (v - a) * (v - a)).sum::<f64>() / seen.len() as f64).sqrt();
            prop_assert!((tr.a() - a).abs() <= 1e-9 * (1.0 + a.abs()));
            prop_assert!((tr.b() - b).abs() <= 1e-9 * (1.0 + b));
        }
        Ok(())
    });
    let elapsed = t.elapsed();
    let ok = pool.is_ok() && tracker.is_ok() && elapsed < INVARIANT_BUDGET;
    Ok((ok, format!("pool schedules: {:?}, tracker histories: {:?}", pool.map(|_| "ok"), tracker.map(|_| "ok"))))
}

#[test]
fn acceptance() {
    let mut verdicts = Vec::new();
    let t = Instant::now();
    verdicts.push(report("gradient suite", t, gradient_suite()));
    let t = Instant::now();
    verdicts.push(report("introspective oracle", t, kl_oracle()));
    let t = Instant::now();
    verdicts.push(report("sampler ascent", t, sampler_ascent().map(|(ok, d)| (ok && t.elapsed() < SAMPLER_BUDGET, d))));
    let t = Instant::now();
    verdicts.push(report("toy end-to-end", t, toy_end_to_end()));

    let limited_cfg = preset("limited_data.cfg");
    let resolver = Resolver::new(&limited_cfg.data_root);
    let t = Instant::now();
    let limited = ordering(Protocol::LimitedData, &limited_cfg, &resolver);
    let limited_rows = limited.as_ref().map(|r| r.0.clone()).unwrap_or_default();
    verdicts.push(report("limited-data ordering", t, limited.map(|(_, ok, d)| (ok, d))));

    let t = Instant::now();
    let cross = ordering(Protocol::CrossDataset, &preset("cross_dataset.cfg"), &resolver);
    verdicts.push(report("cross-dataset ordering", t, cross.map(|(_, ok, d)| (ok, d))));

    let t = Instant::now();
    let threshold = if limited_rows.is_empty() {
        Err("limited-data runs unavailable".to_string())
    } else {
        threshold_direction(&limited_rows, &limited_cfg, &resolver)
    };
    verdicts.push(report("threshold direction", t, threshold));

    let t = Instant::now();
    verdicts.push(report("metrics determinism", t, metrics_determinism()));
    let t = Instant::now();
    verdicts.push(report("pool and tracker invariants", t, pool_and_tracker_invariants()));

    let failed: Vec<_> = verdicts.iter().filter(|v| !v.passed).map(|v| format!("{} ({})", v.name, v.detail)).collect();
    let _ = writeln!(std::io::stderr(), "{} of {} criteria passed", verdicts.len() - failed.len(), verdicts.len());
    assert!(failed.is_empty(), "failed criteria: {:#?}", failed);
}
