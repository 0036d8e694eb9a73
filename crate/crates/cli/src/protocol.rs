//! Seeded comparisons of ITN against plain and augmented B-CNN baselines.

use std::fmt::Write as _;
use std::str::FromStr;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use itn_core::data::{AugmentRanges, LabeledDataset};
use itn_core::explorer::sigma_with;
use itn_core::trainer::{evaluate, train, train_baseline, Augmentation, TrainConfig, TrainState};

use crate::config::RunConfig;
use crate::datasets::Resolver;
use crate::error::CliError;

/// Validation samples (from the MNIST hold-out) scored after each iteration.
pub const VAL_COUNT: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    LimitedData,
    CrossDataset,
    ThresholdSweep,
}

impl FromStr for Protocol {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "limited_data" => Ok(Protocol::LimitedData),
            "cross_dataset" => Ok(Protocol::CrossDataset),
            "threshold_sweep" => Ok(Protocol::ThresholdSweep),
            _ => Err(CliError::Usage(format!("unknown protocol `{}` (limited_data, cross_dataset, threshold_sweep)", s))),
        }
    }
}

impl Protocol {
    pub fn default_fraction(self) -> f64 {
        match self {
            Protocol::LimitedData | Protocol::ThresholdSweep => 0.01,
            Protocol::CrossDataset => 0.05,
        }
    }
}

pub struct Setting {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
}

/// Training subset for one seed plus the fixed validation and test sets.
/// Limited-data runs use center-cropped digits and the plain test set;
/// cross-dataset runs train on padded digits and test on the frozen
/// affine-perturbed set.
pub fn setting(protocol: Protocol, resolver: &Resolver, fraction: f64, seed: u64) -> Result<Setting, CliError> {
    let (frame, test) = match protocol {
        Protocol::LimitedData | Protocol::ThresholdSweep => ("crop", "mnist-test:frame=crop".to_string()),
        Protocol::CrossDataset => ("pad", "perturbed:seed=7".to_string()),
    };
    Ok(Setting {
        train: resolver.resolve(&format!("mnist-train:fraction={},seed={},frame={}", fraction, seed, frame))?,
        val: resolver.resolve(&format!("mnist-val:count={},frame={}", VAL_COUNT, frame))?,
        test: resolver.resolve(&test)?,
    })
}

pub fn run_itn(config: &TrainConfig, s: &Setting) -> Result<(TrainState, f64), CliError> {
    let (state, _) = train(config, &s.train, &s.val)?;
    let err = evaluate(&state.disc, &s.test, config.eval_chunk)?;
    Ok((state, err))
}

pub fn run_baseline(config: &TrainConfig, s: &Setting, augmentation: Augmentation) -> Result<f64, CliError> {
    let (disc, _) = train_baseline(config, &s.train, &s.val, augmentation)?;
    Ok(evaluate(&disc, &s.test, config.eval_chunk)?)
}

/// Standard-augmentation ranges matched to the transformations the trained
/// predictor produces on the training set.
pub fn learned_ranges(state: &TrainState, config: &TrainConfig, train: &LabeledDataset, percentile: f64) -> Result<AugmentRanges, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xda);
    let noise = config.explorer.draw_noise(train.len(), &mut rng);
    let sigma = sigma_with(&state.predictor, &train.images, &noise)?;
    let maps: Vec<[f64; 6]> = (0..sigma.len()).map(|i| sigma.matrix(i)).collect();
    Ok(AugmentRanges::from_affines(&maps, percentile)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub method: String,
    pub seed: u64,
    pub error: f64,
}

pub fn rows_csv(rows: &[Row]) -> String {
    let mut s = String::from("method,seed,error\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:.6}", r.method, r.seed, r.error);
    }
    s
}

pub fn mean_error(rows: &[Row], method: &str) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter(|r| r.method == method).map(|r| r.error).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn sweep_method(t_u: f64) -> String {
    format!("itn@t_u={}", t_u)
}

/// The mean-ordering verdict line and whether it holds.
pub fn verdict(protocol: Protocol, rows: &[Row], t_u_values: &[f64]) -> (String, bool) {
    let m = |name: &str| mean_error(rows, name).unwrap_or(f64::NAN);
    match protocol {
        Protocol::LimitedData => {
            let ok = m("itn") < m("baseline");
            (format!("ORDER itn<baseline: {}", ok), ok)
        }
        Protocol::CrossDataset => {
            let ok = m("itn") < m("baseline") && m("itn") < m("baseline_da");
            (format!("ORDER itn<baseline: {}", ok), ok)
        }
        Protocol::ThresholdSweep => {
            let lo = t_u_values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = t_u_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let ok = m(&sweep_method(hi)) >= m(&sweep_method(lo));
            (format!("ORDER {}>={}: {}", sweep_method(hi), sweep_method(lo), ok), ok)
        }
    }
}

/// Runs every seed of a protocol and returns the comparison rows.
pub fn reproduce(protocol: Protocol, rc: &RunConfig, resolver: &Resolver) -> Result<Vec<Row>, CliError> {
    let fraction = if rc.fraction > 0.0 { rc.fraction } else { protocol.default_fraction() };
    let mut rows = Vec::new();
    for &seed in &rc.seeds {
        let s = setting(protocol, resolver, fraction, seed)?;
        let mut cfg = rc.train.clone();
        cfg.seed = seed;
        info!("{:?} seed {}: {} training samples", protocol, seed, s.train.len());
        let mut push = |method: String, error: f64| {
            info!("{} seed {}: error {:.4}", method, seed, error);
            rows.push(Row { method, seed, error });
        };
        match protocol {
            Protocol::LimitedData => {
                push("itn".into(), run_itn(&cfg, &s)?.1);
                push("baseline".into(), run_baseline(&cfg, &s, Augmentation::None)?);
            }
            Protocol::CrossDataset => {
                let (state, err) = run_itn(&cfg, &s)?;
                push("itn".into(), err);
                let ranges = learned_ranges(&state, &cfg, &s.train, rc.da_percentile)?;
                info!("matched augmentation ranges: {:?}", ranges);
                push("baseline_da".into(), run_baseline(&cfg, &s, Augmentation::Standard(ranges))?);
                push("baseline".into(), run_baseline(&cfg, &s, Augmentation::None)?);
            }
            Protocol::ThresholdSweep => {
                for &t_u in &rc.t_u_values {
                    let mut c = cfg.clone();
                    c.sampler.t_u = t_u;
                    push(sweep_method(t_u), run_itn(&c, &s)?.1);
                }
            }
        }
    }
    Ok(rows)
}
