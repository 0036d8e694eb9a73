//! The outer training loop: explore σ, update the discriminator on positives,
//! transformed positives and pseudo-negatives, record the positive score,
//! synthesize new pseudo-negatives and grow the pool. Also the plain B-CNN
//! baselines, evaluation, configuration and state checkpoints.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{usize_tensor, usize_values, Container};
use crate::data::{standard_augment, AugmentRanges, LabeledDataset};
use crate::discriminator::{classification_loss, combined_objective, BCnnConfig, DiscBatch, Discriminator, ForwardMode, Mode, Target};
use crate::error::{Error, Result};
use crate::explorer::{explore, sigma_with, ExplorerConfig};
use crate::graph::Graph;
use crate::nn::BnStats;
use crate::optim::{AdamConfig, ParamStore};
use crate::sampler::{init_reference, record_positive_scores, run_chain, ClassifierScore, NegativePool, SamplerConfig, ThresholdTracker};
use crate::spatial::{apply_affine, Predictor, PredictorConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub outer_iterations: usize,
    pub disc_steps: usize,
    /// Samples per part (positives, transformed positives, pseudo-negatives).
    pub batch_size: usize,
    pub mode: Mode,
    pub seed: u64,
    /// Stop after this many iterations without a new best validation error;
    /// 0 disables the rule.
    pub patience: usize,
    /// Restore the classifier with the best validation error at the end.
    pub keep_best: bool,
    /// Pseudo-negatives synthesized per iteration; 0 means one per positive.
    pub negatives_per_iteration: usize,
    /// Write measured seconds to the metrics instead of 0.
    pub wall_time: bool,
    pub eval_chunk: usize,
    pub conv_channels: usize,
    pub num_layers: usize,
    pub lambda_gp: f64,
    /// Weight of the Wasserstein term in the discriminator objective.
    pub critic_weight: f64,
    pub adam: AdamConfig,
    pub predictor_channels: usize,
    pub clip: f64,
    pub explorer: ExplorerConfig,
    pub sampler: SamplerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            outer_iterations: 10,
            disc_steps: 100,
            batch_size: 32,
            mode: Mode::Multiclass,
            seed: 0,
            patience: 5,
            keep_best: false,
            negatives_per_iteration: 0,
            wall_time: false,
            eval_chunk: 256,
            conv_channels: 64,
            num_layers: 4,
            lambda_gp: 10.0,
            critic_weight: 1.0,
            adam: AdamConfig::default(),
            predictor_channels: 16,
            clip: 1.5,
            explorer: ExplorerConfig::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Argument(format!("`{}`: cannot parse `{}`", key, value)))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Argument(format!("`{}`: expected a boolean, got `{}`", key, value))),
    }
}

impl TrainConfig {
    /// Every key accepted by [`TrainConfig::set`], in echo order.
    pub const KEYS: &'static [&'static str] = &[
        "train.iterations",
        "train.disc_steps",
        "train.batch_size",
        "train.mode",
        "train.seed",
        "train.patience",
        "train.keep_best",
        "train.negatives_per_iteration",
        "train.wall_time",
        "train.eval_chunk",
        "model.conv_channels",
        "model.num_layers",
        "model.lambda_gp",
        "model.critic_weight",
        "adam.lr",
        "adam.beta1",
        "adam.beta2",
        "adam.eps",
        "predictor.channels",
        "predictor.clip",
        "explorer.steps",
        "explorer.lr",
        "explorer.noise_scale",
        "explorer.full_objective",
        "sampler.step_size",
        "sampler.anneal",
        "sampler.noise_std",
        "sampler.max_steps",
        "sampler.t_u",
        "sampler.pool_cap",
        "sampler.chunk",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "train.iterations" => self.outer_iterations = parse(key, value)?,
            "train.disc_steps" => self.disc_steps = parse(key, value)?,
            "train.batch_size" => self.batch_size = parse(key, value)?,
            "train.mode" => self.mode = value.trim().parse()?,
            "train.seed" => self.seed = parse(key, value)?,
            "train.patience" => self.patience = parse(key, value)?,
            "train.keep_best" => self.keep_best = parse_bool(key, value)?,
            "train.negatives_per_iteration" => self.negatives_per_iteration = parse(key, value)?,
            "train.wall_time" => self.wall_time = parse_bool(key, value)?,
            "train.eval_chunk" => self.eval_chunk = parse(key, value)?,
            "model.conv_channels" => self.conv_channels = parse(key, value)?,
            "model.num_layers" => self.num_layers = parse(key, value)?,
            "model.lambda_gp" => self.lambda_gp = parse(key, value)?,
            "model.critic_weight" => self.critic_weight = parse(key, value)?,
            "adam.lr" => self.adam.lr = parse(key, value)?,
            "adam.beta1" => self.adam.beta1 = parse(key, value)?,
            "adam.beta2" => self.adam.beta2 = parse(key, value)?,
            "adam.eps" => self.adam.eps = parse(key, value)?,
            "predictor.channels" => self.predictor_channels = parse(key, value)?,
            "predictor.clip" => self.clip = parse(key, value)?,
            "explorer.steps" => self.explorer.steps_per_iteration = parse(key, value)?,
            "explorer.lr" => self.explorer.lr = parse(key, value)?,
            "explorer.noise_scale" => self.explorer.noise_scale = parse(key, value)?,
            "explorer.full_objective" => self.explorer.use_full_objective = parse_bool(key, value)?,
            "sampler.step_size" => self.sampler.step_size = parse(key, value)?,
            "sampler.anneal" => self.sampler.anneal_factor = parse(key, value)?,
            "sampler.noise_std" => self.sampler.noise_std = parse(key, value)?,
            "sampler.max_steps" => self.sampler.max_steps = parse(key, value)?,
            "sampler.t_u" => self.sampler.t_u = parse(key, value)?,
            "sampler.pool_cap" => {
                let cap: usize = parse(key, value)?;
                self.sampler.pool_cap = (cap > 0).then_some(cap);
            }
            "sampler.chunk" => self.sampler.chunk = parse(key, value)?,
            _ => return Err(Error::Argument(format!("unknown configuration key `{}`", key))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "train.iterations" => self.outer_iterations.to_string(),
            "train.disc_steps" => self.disc_steps.to_string(),
            "train.batch_size" => self.batch_size.to_string(),
            "train.mode" => self.mode.as_str().to_string(),
            "train.seed" => self.seed.to_string(),
            "train.patience" => self.patience.to_string(),
            "train.keep_best" => self.keep_best.to_string(),
            "train.negatives_per_iteration" => self.negatives_per_iteration.to_string(),
            "train.wall_time" => self.wall_time.to_string(),
            "train.eval_chunk" => self.eval_chunk.to_string(),
            "model.conv_channels" => self.conv_channels.to_string(),
            "model.num_layers" => self.num_layers.to_string(),
            "model.lambda_gp" => self.lambda_gp.to_string(),
            "model.critic_weight" => self.critic_weight.to_string(),
            "adam.lr" => self.adam.lr.to_string(),
            "adam.beta1" => self.adam.beta1.to_string(),
            "adam.beta2" => self.adam.beta2.to_string(),
            "adam.eps" => self.adam.eps.to_string(),
            "predictor.channels" => self.predictor_channels.to_string(),
            "predictor.clip" => self.clip.to_string(),
            "explorer.steps" => self.explorer.steps_per_iteration.to_string(),
            "explorer.lr" => self.explorer.lr.to_string(),
            "explorer.noise_scale" => self.explorer.noise_scale.to_string(),
            "explorer.full_objective" => self.explorer.use_full_objective.to_string(),
            "sampler.step_size" => self.sampler.step_size.to_string(),
            "sampler.anneal" => self.sampler.anneal_factor.to_string(),
            "sampler.noise_std" => self.sampler.noise_std.to_string(),
            "sampler.max_steps" => self.sampler.max_steps.to_string(),
            "sampler.t_u" => self.sampler.t_u.to_string(),
            "sampler.pool_cap" => self.sampler.pool_cap.unwrap_or(0).to_string(),
            "sampler.chunk" => self.sampler.chunk.to_string(),
            _ => return None,
        })
    }

    pub fn pairs(&self) -> Vec<(String, String)> {
        Self::KEYS.iter().map(|k| (k.to_string(), self.get(k).expect("listed key"))).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("train.iterations", self.outer_iterations),
            ("train.disc_steps", self.disc_steps),
            ("train.batch_size", self.batch_size),
            ("train.eval_chunk", self.eval_chunk),
            ("model.conv_channels", self.conv_channels),
            ("model.num_layers", self.num_layers),
            ("predictor.channels", self.predictor_channels),
        ];
        if let Some((k, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Argument(format!("`{}` must be at least 1", k)));
        }
        if self.batch_size < 2 {
            return Err(Error::Argument("train.batch_size must be at least 2 for batch normalization".into()));
        }
        if !(self.lambda_gp >= 0.0 && self.critic_weight >= 0.0 && self.clip > 0.0 && self.adam.lr >= 0.0) {
            return Err(Error::Argument("lambda_gp, critic_weight and adam.lr must be nonnegative and clip positive".into()));
        }
        self.explorer.validate()?;
        self.sampler.validate()
    }

    pub fn bcnn(&self, in_channels: usize, image_size: usize, num_classes: usize) -> BCnnConfig {
        let mut c = BCnnConfig::new(in_channels, image_size, num_classes, self.mode);
        c.conv_channels = self.conv_channels;
        c.num_layers = self.num_layers;
        c
    }

    pub fn predictor(&self, in_channels: usize, image_size: usize) -> PredictorConfig {
        let mut p = PredictorConfig::new(in_channels, image_size);
        p.channels = self.predictor_channels;
        p.clip = self.clip;
        p.noise_scale = self.explorer.noise_scale;
        p
    }

    fn explorer_config(&self) -> ExplorerConfig {
        ExplorerConfig { lambda_gp: self.lambda_gp, ..self.explorer.clone() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub ce_loss: f64,
    pub w_loss: f64,
    pub gp: f64,
    pub pos_score: f64,
    pub neg_score: f64,
    pub val_error: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    pub rows: Vec<MetricsRow>,
    /// Whether `seconds` holds measured wall time (otherwise it is 0).
    pub wall_time: bool,
}

impl RunMetrics {
    pub const HEADER: &'static str = "iteration,ce_loss,w_loss,gp,pos_score,neg_score,val_error,seconds";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.6},{:.3}",
                r.iteration, r.ce_loss, r.w_loss, r.gp, r.pos_score, r.neg_score, r.val_error, r.seconds
            );
        }
        s
    }

    pub fn last_val_error(&self) -> Option<f64> {
        self.rows.last().map(|r| r.val_error)
    }
}

/// Fraction of argmax-misclassified samples under eval-mode batch norm.
pub fn evaluate(disc: &Discriminator, ds: &LabeledDataset, chunk: usize) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Argument("evaluation on an empty dataset".into()));
    }
    let pred = disc.predict(&ds.images, chunk)?;
    let wrong = pred.iter().zip(&ds.labels).filter(|(p, y)| p != y).count();
    Ok(wrong as f64 / ds.len() as f64)
}

fn check_data(train: &LabeledDataset, val: &LabeledDataset, mode: Mode) -> Result<()> {
    train.validate()?;
    val.validate()?;
    if train.sample_shape() != val.sample_shape() {
        return Err(Error::Dimension(format!("train {:?} vs validation {:?}", train.sample_shape(), val.sample_shape())));
    }
    let (_, _, h, w) = train.images.dims4()?;
    if h != w {
        return Err(Error::Dimension(format!("images must be square, got {}×{}", h, w)));
    }
    if mode == Mode::Binary && train.num_classes != 2 {
        return Err(Error::Argument(format!("binary mode needs 2 classes, dataset has {}", train.num_classes)));
    }
    if train.len() < 2 {
        return Err(Error::Argument("training set needs at least 2 samples".into()));
    }
    Ok(())
}

/// Everything a run carries from one iteration to the next.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub disc: Discriminator,
    pub predictor: Predictor,
    pub tracker: ThresholdTracker,
    pub pool: NegativePool,
    /// Samples from the initial reference distribution (the chain seeds for
    /// the first iteration and the negatives while the pool is empty).
    pub reference: Tensor,
    pub negative_tags: Vec<usize>,
    /// Chain outputs of the latest iteration, the next chain's seeds.
    pub last_samples: Option<Tensor>,
    pub iteration: usize,
    pub rng: ChaCha8Rng,
    pub best: Option<BestSnapshot>,
    pub stale: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BestSnapshot {
    pub val_error: f64,
    pub iteration: usize,
    pub params: ParamStore,
    pub running: Vec<BnStats>,
}

/// Pseudo-negative count and class tags for a training set.
fn negative_plan(config: &TrainConfig, train: &LabeledDataset) -> (usize, Vec<usize>) {
    let positives = match config.mode {
        Mode::Binary => train.labels.iter().filter(|&&y| y == 1).count().max(1),
        Mode::Multiclass => train.len(),
    };
    let n = if config.negatives_per_iteration == 0 { positives } else { config.negatives_per_iteration };
    let tags = (0..n)
        .map(|i| match config.mode {
            Mode::Binary => 0,
            Mode::Multiclass => i % train.num_classes,
        })
        .collect();
    (n, tags)
}

/// Images and labels whose scores feed the stop-threshold tracker.
fn positive_set(config: &TrainConfig, train: &LabeledDataset) -> Result<LabeledDataset> {
    match config.mode {
        Mode::Multiclass => Ok(train.clone()),
        Mode::Binary => {
            let rows: Vec<usize> = (0..train.len()).filter(|&i| train.labels[i] == 1).collect();
            if rows.is_empty() {
                return Err(Error::Argument("binary mode needs samples of class 1".into()));
            }
            train.select(&rows)
        }
    }
}

impl TrainState {
    pub fn new(config: &TrainConfig, train: &LabeledDataset) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (_, c, h, _) = train.images.dims4()?;
        let disc = Discriminator::new(config.bcnn(c, h, train.num_classes), &mut rng)?;
        let predictor = Predictor::new(config.predictor(c, h), &mut rng);
        let (n, tags) = negative_plan(config, train);
        let reference = init_reference(n, train.sample_shape(), &mut rng)?;
        Ok(Self {
            disc,
            predictor,
            tracker: ThresholdTracker::new(),
            pool: NegativePool::new(train.sample_shape(), config.sampler.pool_cap),
            reference,
            negative_tags: tags,
            last_samples: None,
            iteration: 0,
            rng,
            best: None,
            stale: 0,
        })
    }
}

fn random_rows(n: usize, count: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..count).map(|_| rng.random_range(0..n)).collect()
}

fn targets_of(labels: &[usize]) -> Vec<Target> {
    labels.iter().map(|&y| Target::Class(y)).collect()
}

/// Runs the loop on borrowed data; see [`train`].
pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub state: TrainState,
    pub metrics: RunMetrics,
    train: &'a LabeledDataset,
    val: &'a LabeledDataset,
    positives: LabeledDataset,
    /// Where to write the state when an iteration fails.
    pub abort_checkpoint: Option<PathBuf>,
    pub converged: bool,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, train: &'a LabeledDataset, val: &'a LabeledDataset) -> Result<Self> {
        check_data(train, val, config.mode)?;
        let state = TrainState::new(&config, train)?;
        let positives = positive_set(&config, train)?;
        let metrics = RunMetrics { rows: Vec::new(), wall_time: config.wall_time };
        Ok(Self { config, state, metrics, train, val, positives, abort_checkpoint: None, converged: false })
    }

    /// Resumes from a restored state.
    pub fn resume(config: TrainConfig, state: TrainState, train: &'a LabeledDataset, val: &'a LabeledDataset) -> Result<Self> {
        check_data(train, val, config.mode)?;
        let positives = positive_set(&config, train)?;
        let metrics = RunMetrics { rows: Vec::new(), wall_time: config.wall_time };
        Ok(Self { config, state, metrics, train, val, positives, abort_checkpoint: None, converged: false })
    }

    fn negative_batch(&mut self, count: usize) -> Result<(Tensor, Vec<usize>)> {
        let st = &mut self.state;
        if st.pool.is_empty() {
            let rows = random_rows(st.reference.shape()[0], count, &mut st.rng);
            let tags = rows.iter().map(|&r| st.negative_tags[r]).collect();
            Ok((st.reference.select_rows(&rows)?, tags))
        } else {
            let rows = random_rows(st.pool.len(), count, &mut st.rng);
            st.pool.gather(&rows)
        }
    }

    /// One outer iteration. Returns its metrics row.
    pub fn step(&mut self) -> Result<MetricsRow> {
        let started = Instant::now();
        let cfg = self.config.clone();
        let b = cfg.batch_size;
        let t = self.state.iteration + 1;

        // (a) exploration on a batch of positives.
        let rows = random_rows(self.train.len(), b, &mut self.state.rng);
        let xb = self.train.images.select_rows(&rows)?;
        let yb: Vec<usize> = rows.iter().map(|&r| self.train.labels[r]).collect();
        let negs = if cfg.explorer.use_full_objective { Some(self.negative_batch(b)?.0) } else { None };
        let st = &mut self.state;
        explore(&mut st.predictor, &st.disc, &xb, &yb, negs.as_ref(), &cfg.explorer_config(), &cfg.adam, &mut st.rng)?;

        // (b) joint discriminator steps.
        let (mut ce, mut wl, mut gp) = (0.0, 0.0, 0.0);
        for _ in 0..cfg.disc_steps {
            let rows = random_rows(self.train.len(), b, &mut self.state.rng);
            let pos = self.train.images.select_rows(&rows)?;
            let pos_t = targets_of(&rows.iter().map(|&r| self.train.labels[r]).collect::<Vec<_>>());
            let noise = cfg.explorer.draw_noise(b, &mut self.state.rng);
            let sigma = sigma_with(&self.state.predictor, &pos, &noise)?;
            let trans = apply_affine(&pos, &sigma)?;
            let (neg, tags) = self.negative_batch(b)?;
            let neg_t: Vec<Target> = tags.iter().map(|&k| Target::PseudoNegative(k)).collect();
            let st = &mut self.state;
            let mut g = Graph::new();
            let bound = st.disc.params.bind(&mut g, true);
            let batch = DiscBatch { positives: &pos, positive_targets: &pos_t, transformed: &trans, negatives: &neg, negative_targets: &neg_t };
            let obj = combined_objective(&mut g, &st.disc, &bound, &batch, cfg.lambda_gp, cfg.critic_weight, &mut st.rng)?;
            let total = g.value(obj.total).item()?;
            if !total.is_finite() {
                return Err(Error::Numeric(format!("non-finite discriminator objective {}", total)));
            }
            ce += g.value(obj.classification).item()?;
            let p = g.value(obj.penalty).item()?;
            wl += g.value(obj.critic_gap).item()? + p;
            gp += p;
            g.backward(obj.total)?;
            st.disc.params.zero_grad();
            st.disc.params.accumulate_grads(&g, &bound)?;
            st.disc.params.adam_step(&cfg.adam)?;
            st.disc.update_running(&obj.stats);
        }
        let k = cfg.disc_steps as f64;

        // (c) positive score history.
        let st = &mut self.state;
        let pos_score = record_positive_scores(&mut st.tracker, &self.positives.images, &self.positives.labels, &st.disc, cfg.eval_chunk)?;

        // (d) chains from the previous samples (or the reference draw).
        let seeds = st.last_samples.clone().unwrap_or_else(|| st.reference.clone());
        let score = ClassifierScore { disc: &st.disc, classes: &st.negative_tags, chunk: cfg.sampler.chunk };
        let chain = run_chain(&seeds, &score, &cfg.sampler, &st.tracker, &mut st.rng)?;
        info!(
            "iteration {}: chain {} steps, mean score {:.4} (threshold {:.4})",
            t, chain.steps_used, chain.mean_score, chain.threshold
        );

        // (e) pool growth.
        st.pool.augment(&chain.samples, &st.negative_tags, t)?;
        st.last_samples = Some(chain.samples);
        st.iteration = t;

        let val_error = evaluate(&st.disc, self.val, cfg.eval_chunk)?;
        self.track_best(val_error, t);
        let row = MetricsRow {
            iteration: t,
            ce_loss: ce / k,
            w_loss: wl / k,
            gp: gp / k,
            pos_score,
            neg_score: chain.mean_score,
            val_error,
            seconds: if cfg.wall_time { started.elapsed().as_secs_f64() } else { 0.0 },
        };
        let finite = [row.ce_loss, row.w_loss, row.gp, row.pos_score, row.neg_score].iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Numeric(format!("non-finite metrics at iteration {}", t)));
        }
        Ok(row)
    }

    fn track_best(&mut self, val_error: f64, t: usize) {
        let st = &mut self.state;
        let improved = st.best.as_ref().is_none_or(|b| val_error < b.val_error);
        if improved {
            st.best = Some(BestSnapshot { val_error, iteration: t, params: st.disc.params.clone(), running: st.disc.running.clone() });
            st.stale = 0;
        } else {
            st.stale += 1;
        }
    }

    /// Runs until `outer_iterations` or convergence. On a fault the state is
    /// checkpointed (if a path is set) and the error carries the iteration.
    pub fn run(&mut self) -> Result<&RunMetrics> {
        while self.state.iteration < self.config.outer_iterations {
            let t = self.state.iteration + 1;
            match self.step() {
                Ok(row) => {
                    info!("iteration {} val_error {:.4}", t, row.val_error);
                    self.metrics.rows.push(row);
                }
                Err(e) => {
                    if let Some(path) = &self.abort_checkpoint {
                        if let Err(ce) = state_to_container(&self.config, &self.state).save(path) {
                            warn!("could not write abort checkpoint: {}", ce);
                        }
                    }
                    return Err(Error::Aborted { iteration: t, source: Box::new(e) });
                }
            }
            if self.config.patience > 0 && self.state.stale >= self.config.patience {
                info!("no validation improvement for {} iterations; stopping", self.state.stale);
                self.converged = true;
                break;
            }
        }
        if self.config.keep_best {
            if let Some(best) = &self.state.best {
                self.state.disc.params = best.params.clone();
                self.state.disc.running = best.running.clone();
            }
        }
        Ok(&self.metrics)
    }
}

/// Trains an ITN from scratch.
pub fn train(config: &TrainConfig, train: &LabeledDataset, val: &LabeledDataset) -> Result<(TrainState, RunMetrics)> {
    let mut t = Trainer::new(config.clone(), train, val)?;
    t.run()?;
    Ok((t.state, t.metrics))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Augmentation {
    None,
    /// Every batch is the positives followed by one random affine copy of each.
    Standard(AugmentRanges),
}

/// Plain cross-entropy training of the same B-CNN with the same step budget
/// (`outer_iterations × disc_steps` Adam steps) and initialization.
pub fn train_baseline(
    config: &TrainConfig,
    train: &LabeledDataset,
    val: &LabeledDataset,
    augmentation: Augmentation,
) -> Result<(Discriminator, RunMetrics)> {
    config.validate()?;
    check_data(train, val, config.mode)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (_, c, h, _) = train.images.dims4()?;
    let mut disc = Discriminator::new(config.bcnn(c, h, train.num_classes), &mut rng)?;
    let mut metrics = RunMetrics { rows: Vec::new(), wall_time: config.wall_time };
    let mut best: Option<BestSnapshot> = None;
    let mut stale = 0;
    for t in 1..=config.outer_iterations {
        let started = Instant::now();
        let mut ce = 0.0;
        for _ in 0..config.disc_steps {
            let rows = random_rows(train.len(), config.batch_size, &mut rng);
            let pos = train.images.select_rows(&rows)?;
            let labels: Vec<usize> = rows.iter().map(|&r| train.labels[r]).collect();
            let (x, targets) = match augmentation {
                Augmentation::None => (pos, targets_of(&labels)),
                Augmentation::Standard(ranges) => {
                    let aug = standard_augment(&pos, &ranges, &mut rng)?;
                    let mut t = targets_of(&labels);
                    t.extend(targets_of(&labels));
                    (Tensor::concat(&[&pos, &aug])?, t)
                }
            };
            ce += baseline_step(&mut disc, &x, &targets, &config.adam)?;
        }
        let val_error = evaluate(&disc, val, config.eval_chunk)?;
        if best.as_ref().is_none_or(|b| val_error < b.val_error) {
            best = Some(BestSnapshot { val_error, iteration: t, params: disc.params.clone(), running: disc.running.clone() });
            stale = 0;
        } else {
            stale += 1;
        }
        metrics.rows.push(MetricsRow {
            iteration: t,
            ce_loss: ce / config.disc_steps as f64,
            w_loss: 0.0,
            gp: 0.0,
            pos_score: 0.0,
            neg_score: 0.0,
            val_error,
            seconds: if config.wall_time { started.elapsed().as_secs_f64() } else { 0.0 },
        });
        if config.patience > 0 && stale >= config.patience {
            break;
        }
    }
    if config.keep_best {
        if let Some(b) = best {
            disc.params = b.params;
            disc.running = b.running;
        }
    }
    Ok((disc, metrics))
}

/// One Adam step on the classification loss of a batch; returns the loss.
pub fn baseline_step(disc: &mut Discriminator, x: &Tensor, targets: &[Target], adam: &AdamConfig) -> Result<f64> {
    let mut g = Graph::new();
    let bound = disc.params.bind(&mut g, true);
    let xv = g.constant(x.clone());
    let out = disc.forward(&mut g, &bound, xv, ForwardMode::Train)?;
    let loss = classification_loss(&mut g, out.logits, targets, disc.config.mode, disc.config.num_classes)?;
    let value = g.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite classification loss {}", value)));
    }
    g.backward(loss)?;
    disc.params.zero_grad();
    disc.params.accumulate_grads(&g, &bound)?;
    disc.params.adam_step(adam)?;
    disc.update_running(&out.stats);
    Ok(value)
}

/// Runs a fresh chain of `count` samples from a trained state: seeds are the
/// latest pool samples (cycled) or reference draws when the pool is empty.
pub fn synthesize(state: &TrainState, sampler: &SamplerConfig, count: usize, rng: &mut impl Rng) -> Result<Tensor> {
    if count == 0 {
        return Err(Error::Argument("sample count must be at least 1".into()));
    }
    let (seeds, tags): (Tensor, Vec<usize>) = match &state.last_samples {
        Some(last) if last.shape()[0] > 0 => {
            let rows: Vec<usize> = (0..count).map(|i| i % last.shape()[0]).collect();
            (last.select_rows(&rows)?, rows.iter().map(|&r| state.negative_tags[r % state.negative_tags.len()]).collect())
        }
        _ => {
            let shape = &state.reference.shape()[1..];
            let k = state.disc.config.num_classes;
            let tags = (0..count).map(|i| if state.disc.config.mode == Mode::Binary { 0 } else { i % k }).collect();
            (init_reference(count, shape, rng)?, tags)
        }
    };
    let tracker = if state.tracker.is_empty() { ThresholdTracker::from_history(&[f64::INFINITY]) } else { state.tracker.clone() };
    let score = ClassifierScore { disc: &state.disc, classes: &tags, chunk: sampler.chunk };
    Ok(run_chain(&seeds, &score, sampler, &tracker, rng)?.samples)
}

fn put_params(c: &mut Container, prefix: &str, store: &ParamStore) {
    for p in store.iter() {
        c.put(format!("{prefix}/{}/value", p.name), p.value.clone());
        c.put(format!("{prefix}/{}/adam_m", p.name), p.adam_m.clone());
        c.put(format!("{prefix}/{}/adam_v", p.name), p.adam_v.clone());
        c.set_meta(format!("{prefix}/{}/steps", p.name), p.step_count);
    }
}

fn get_params(c: &Container, prefix: &str, store: &mut ParamStore) -> Result<()> {
    for p in store.iter_mut() {
        let value = c.get(&format!("{prefix}/{}/value", p.name))?;
        if value.shape() != p.value.shape() {
            return Err(Error::Consistency(format!("parameter `{}` has shape {:?} in the checkpoint", p.name, value.shape())));
        }
        p.value = value.clone();
        p.adam_m = c.get(&format!("{prefix}/{}/adam_m", p.name))?.clone();
        p.adam_v = c.get(&format!("{prefix}/{}/adam_v", p.name))?.clone();
        p.step_count = c.meta_parse(&format!("{prefix}/{}/steps", p.name))?;
    }
    Ok(())
}

fn put_running(c: &mut Container, prefix: &str, running: &[BnStats]) {
    for (l, s) in running.iter().enumerate() {
        c.put(format!("{prefix}/bn{l}/running_mean"), Tensor::new(&[s.mean.len()], s.mean.clone()).expect("rank-1"));
        c.put(format!("{prefix}/bn{l}/running_var"), Tensor::new(&[s.var.len()], s.var.clone()).expect("rank-1"));
        c.set_meta(format!("{prefix}/bn{l}/count"), s.count);
    }
}

fn get_running(c: &Container, prefix: &str, running: &mut [BnStats]) -> Result<()> {
    for (l, s) in running.iter_mut().enumerate() {
        s.mean = c.get(&format!("{prefix}/bn{l}/running_mean"))?.data().to_vec();
        s.var = c.get(&format!("{prefix}/bn{l}/running_var"))?.data().to_vec();
        s.count = c.meta_parse(&format!("{prefix}/bn{l}/count"))?;
    }
    Ok(())
}

fn put_shape(c: &mut Container, d: &Discriminator) {
    c.set_meta("model.in_channels", d.config.in_channels);
    c.set_meta("model.image_size", d.config.image_size);
    c.set_meta("model.num_classes", d.config.num_classes);
}

/// A discriminator alone (e.g. a trained baseline) with its configuration.
pub fn discriminator_to_container(config: &TrainConfig, disc: &Discriminator) -> Container {
    let mut c = Container::new();
    c.set_meta("kind", "classifier");
    for (k, v) in config.pairs() {
        c.set_meta(format!("config.{k}"), v);
    }
    put_shape(&mut c, disc);
    put_params(&mut c, "theta", &disc.params);
    put_running(&mut c, "theta", &disc.running);
    c
}

fn config_from_container(c: &Container) -> Result<TrainConfig> {
    let mut config = TrainConfig::default();
    for (k, v) in &c.meta {
        if let Some(key) = k.strip_prefix("config.") {
            config.set(key, v).map_err(|e| Error::Format(format!("checkpoint configuration: {}", e)))?;
        }
    }
    Ok(config)
}

fn disc_from_container(c: &Container, config: &TrainConfig) -> Result<Discriminator> {
    let cfg = config.bcnn(c.meta_parse("model.in_channels")?, c.meta_parse("model.image_size")?, c.meta_parse("model.num_classes")?);
    let mut disc = Discriminator::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    get_params(c, "theta", &mut disc.params)?;
    get_running(c, "theta", &mut disc.running)?;
    Ok(disc)
}

/// Loads the classifier from either kind of checkpoint.
pub fn discriminator_from_container(c: &Container) -> Result<(TrainConfig, Discriminator)> {
    let config = config_from_container(c)?;
    Ok((config.clone(), disc_from_container(c, &config)?))
}

/// Full training state: parameters with optimizer moments, running
/// statistics, tracker history, pool, chain seeds, iteration and RNG position.
pub fn state_to_container(config: &TrainConfig, st: &TrainState) -> Container {
    let mut c = discriminator_to_container(config, &st.disc);
    c.set_meta("kind", "itn");
    c.set_meta("iteration", st.iteration);
    c.set_meta("rng.seed", config.seed);
    c.set_meta("rng.stream", st.rng.get_stream());
    c.set_meta("rng.word_pos", st.rng.get_word_pos());
    c.set_meta("stale", st.stale);
    put_params(&mut c, "psi", &st.predictor.params);
    c.put("tracker/history", Tensor::new(&[st.tracker.history().len()], st.tracker.history().to_vec()).expect("rank-1"));
    c.put("pool/images", st.pool.images().expect("pool is consistent"));
    c.put("pool/class_tags", usize_tensor(st.pool.class_tags()));
    c.put("pool/iteration_tags", usize_tensor(st.pool.iteration_tags()));
    c.put("reference", st.reference.clone());
    c.put("negative_tags", usize_tensor(&st.negative_tags));
    if let Some(last) = &st.last_samples {
        c.put("last_samples", last.clone());
    }
    if let Some(best) = &st.best {
        c.set_meta("best.val_error", best.val_error);
        c.set_meta("best.iteration", best.iteration);
        put_params(&mut c, "best", &best.params);
        put_running(&mut c, "best", &best.running);
    }
    c
}

pub fn state_from_container(c: &Container) -> Result<(TrainConfig, TrainState)> {
    if c.meta_str("kind")? != "itn" {
        return Err(Error::Format(format!("checkpoint holds `{}`, not an ITN training state", c.meta_str("kind")?)));
    }
    let config = config_from_container(c)?;
    let disc = disc_from_container(c, &config)?;
    let (ch, size) = (disc.config.in_channels, disc.config.image_size);
    let mut predictor = Predictor::new(config.predictor(ch, size), &mut ChaCha8Rng::seed_from_u64(0));
    get_params(c, "psi", &mut predictor.params)?;
    let sample_shape = [ch, size, size];
    let pool = NegativePool::from_parts(
        &sample_shape,
        c.get("pool/images")?.data().to_vec(),
        usize_values(c.get("pool/class_tags")?)?,
        usize_values(c.get("pool/iteration_tags")?)?,
        config.sampler.pool_cap,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(c.meta_parse("rng.seed")?);
    rng.set_stream(c.meta_parse("rng.stream")?);
    rng.set_word_pos(c.meta_parse("rng.word_pos")?);
    let best = if c.meta.contains_key("best.val_error") {
        let mut params = disc.params.clone();
        let mut running = disc.running.clone();
        get_params(c, "best", &mut params)?;
        get_running(c, "best", &mut running)?;
        Some(BestSnapshot { val_error: c.meta_parse("best.val_error")?, iteration: c.meta_parse("best.iteration")?, params, running })
    } else {
        None
    };
    let state = TrainState {
        disc,
        predictor,
        tracker: ThresholdTracker::from_history(c.get("tracker/history")?.data()),
        pool,
        reference: c.get("reference")?.clone(),
        negative_tags: usize_values(c.get("negative_tags")?)?,
        last_samples: c.get("last_samples").ok().cloned(),
        iteration: c.meta_parse("iteration")?,
        rng,
        best,
        stale: c.meta_parse("stale")?,
    };
    Ok((config, state))
}

/// Writes a full training state to `path`.
pub fn save_state(path: &Path, config: &TrainConfig, st: &TrainState) -> Result<()> {
    state_to_container(config, st).save(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_toy2d, ToyRender};

    fn toy_config() -> TrainConfig {
        TrainConfig {
            outer_iterations: 1,
            disc_steps: 3,
            batch_size: 4,
            conv_channels: 4,
            num_layers: 2,
            predictor_channels: 4,
            sampler: SamplerConfig { max_steps: 3, ..Default::default() },
            ..Default::default()
        }
    }

    fn toy(n: usize, seed: u64) -> LabeledDataset {
        make_toy2d(n, &[[1.0, 1.0], [-1.0, -1.0]], 0.3, ToyRender::Patch8x8, seed).unwrap().dataset
    }

    #[test]
    fn one_iteration_smoke() {
        let (tr, va) = (toy(10, 1), toy(5, 2));
        let (state, metrics) = train(&toy_config(), &tr, &va).unwrap();
        assert_eq!(metrics.rows.len(), 1);
        assert_eq!(state.pool.len(), 20);
        assert_eq!(state.tracker.history().len(), 1);
    }

    #[test]
    fn evaluation_counts_mistakes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cfg = BCnnConfig::new(1, 8, 2, Mode::Multiclass);
        cfg.conv_channels = 2;
        cfg.num_layers = 1;
        let d = Discriminator::new(cfg, &mut rng).unwrap();
        let ds = toy(2, 4);
        let pred = d.predict(&ds.images, 8).unwrap();
        let right = LabeledDataset::new(ds.images.clone(), pred.clone(), 2).unwrap();
        assert_eq!(evaluate(&d, &right, 8).unwrap(), 0.0);
        let wrong = LabeledDataset::new(ds.images.clone(), pred.iter().map(|p| 1 - p).collect(), 2).unwrap();
        assert_eq!(evaluate(&d, &wrong, 8).unwrap(), 1.0);
        let mut one_off = pred.clone();
        one_off[0] = 1 - one_off[0];
        let quarter = LabeledDataset::new(ds.images.clone(), one_off, 2).unwrap();
        assert_eq!(evaluate(&d, &quarter, 8).unwrap(), 0.25);
    }

    #[test]
    fn config_keys_round_trip() {
        let mut c = TrainConfig::default();
        c.set("sampler.t_u", "5e-3").unwrap();
        c.set("train.mode", "binary").unwrap();
        c.set("sampler.pool_cap", "100").unwrap();
        let mut d = TrainConfig::default();
        for (k, v) in c.pairs() {
            d.set(&k, &v).unwrap();
        }
        assert_eq!(c, d);
        assert_eq!(d.sampler.t_u, 5e-3);
        assert!(matches!(c.set("sampler.tu", "1"), Err(Error::Argument(_))));
        assert!(c.set("train.keep_best", "maybe").is_err());
    }

    #[test]
    fn state_round_trip_resumes_identically() {
        let (tr, va) = (toy(6, 5), toy(3, 6));
        let mut cfg = toy_config();
        cfg.outer_iterations = 2;
        let (full, full_metrics) = train(&cfg, &tr, &va).unwrap();

        let mut first = cfg.clone();
        first.outer_iterations = 1;
        let (half, _) = train(&first, &tr, &va).unwrap();
        let mut buf = Vec::new();
        state_to_container(&cfg, &half).write_to(&mut buf).unwrap();
        let (cfg2, restored) = state_from_container(&Container::read_from(&mut buf.as_slice()).unwrap()).unwrap();
        assert_eq!(restored, half);
        let mut t = Trainer::resume(cfg2, restored, &tr, &va).unwrap();
        t.run().unwrap();
        let (a, b) = (&t.state, &full);
        assert_eq!(a.disc.params, b.disc.params, "disc");
        assert_eq!(a.disc.running, b.disc.running, "running");
        assert_eq!(a.predictor, b.predictor, "psi");
        assert_eq!(a.tracker, b.tracker, "tracker");
        assert_eq!(a.pool, b.pool, "pool");
        assert_eq!(a.rng, b.rng, "rng");
        assert_eq!(a.best, b.best, "best");
        assert_eq!(t.state, full);
        assert_eq!(t.metrics.rows[0], full_metrics.rows[1]);
    }

    #[test]
    fn baseline_shares_initialization() {
        let (tr, va) = (toy(6, 7), toy(3, 8));
        let mut cfg = toy_config();
        cfg.disc_steps = 1;
        let st = TrainState::new(&cfg, &tr).unwrap();
        let mut zero = cfg.clone();
        zero.adam.lr = 0.0;
        let (d, _) = train_baseline(&zero, &tr, &va, Augmentation::None).unwrap();
        for (a, b) in st.disc.params.iter().zip(d.params.iter()) {
            assert_eq!(a.value, b.value);
        }
    }
}
