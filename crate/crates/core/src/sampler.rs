//! Pseudo-negative synthesis by Langevin ascent on the classifier score, the
//! stop-threshold tracker and the growing pseudo-negative pool.

use log::warn;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal as StdNormal};

use crate::discriminator::{Discriminator, ForwardMode, Mode};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub step_size: f64,
    pub anneal_factor: f64,
    /// Pixel-unit scale of the Gaussian term, annealed with the step size.
    pub noise_std: f64,
    pub max_steps: usize,
    pub t_u: f64,
    /// Maximum pool size; `None` keeps every sample.
    pub pool_cap: Option<usize>,
    /// Samples per forward/backward pass when scoring.
    pub chunk: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { step_size: 0.05, anneal_factor: 0.98, noise_std: 0.01, max_steps: 200, t_u: 1e-3, pool_cap: None, chunk: 128 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.anneal_factor > 0.0 && self.anneal_factor <= 1.0) {
            return Err(Error::Argument(format!("anneal_factor must lie in (0, 1], got {}", self.anneal_factor)));
        }
        if self.max_steps == 0 {
            return Err(Error::Argument("max_steps must be at least 1".into()));
        }
        if !(self.t_u > 0.0 && self.t_u < 1.0) {
            return Err(Error::Argument(format!("t_u must lie in (0, 1), got {}", self.t_u)));
        }
        if !(self.step_size >= 0.0 && self.noise_std >= 0.0) || self.chunk == 0 {
            return Err(Error::Argument(format!("invalid sampler configuration {:?}", self)));
        }
        Ok(())
    }
}

/// History of per-iteration mean positive scores and its normal fit `N(a, b)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ThresholdTracker {
    history: Vec<f64>,
    a: f64,
    b: f64,
}

impl ThresholdTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_history(history: &[f64]) -> Self {
        let mut t = Self::new();
        history.iter().for_each(|&x| t.push(x));
        t
    }

    pub fn push(&mut self, mean_score: f64) {
        self.history.push(mean_score);
        let n = self.history.len() as f64;
        self.a = self.history.iter().sum::<f64>() / n;
        let var = self.history.iter().map(|x| (x - self.a).powi(2)).sum::<f64>() / n;
        self.b = var.sqrt();
    }

    pub fn history(&self) -> &[f64] {
        &self.history
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }

    /// Mean of the history.
    pub fn a(&self) -> f64 {
        self.a
    }

    /// Population standard deviation of the history.
    pub fn b(&self) -> f64 {
        self.b
    }
}

/// `Φ⁻¹(1 − T_u)`.
pub fn quantile_offset(t_u: f64) -> f64 {
    StdNormal::standard().inverse_cdf(1.0 - t_u)
}

/// Draws `s ~ N(a, b)` and returns `s + Φ⁻¹(1 − T_u)·b`, so a smaller `T_u`
/// demands a higher mean score before a chain may stop.
pub fn stop_threshold(tracker: &ThresholdTracker, t_u: f64, rng: &mut impl Rng) -> Result<f64> {
    if tracker.is_empty() {
        return Err(Error::Tracker("stop threshold requested before any positive score was recorded".into()));
    }
    if !(t_u > 0.0 && t_u < 1.0) {
        return Err(Error::Argument(format!("t_u must lie in (0, 1), got {}", t_u)));
    }
    let (a, b) = (tracker.a(), tracker.b());
    if b == 0.0 {
        return Ok(a);
    }
    let s = Normal::new(a, b).map_err(|e| Error::Tracker(e.to_string()))?.sample(rng);
    Ok(s + quantile_offset(t_u) * b)
}

/// I.i.d. `N(0.5, 0.3²)` pixels clipped to `[0, 1]`, `count` images of
/// `sample_shape` (`[C, H, W]`).
pub fn init_reference(count: usize, sample_shape: &[usize], rng: &mut impl Rng) -> Result<Tensor> {
    if count == 0 {
        return Err(Error::Argument("init_reference needs count ≥ 1".into()));
    }
    let mut shape = vec![count];
    shape.extend_from_slice(sample_shape);
    Ok(Tensor::from_fn(&shape, |_| (0.5 + 0.3 * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0)))
}

/// A differentiable per-sample score.
pub trait ScoreFn {
    /// Per-sample scores at `x` and the gradient of their sum.
    fn score_and_grad(&self, x: &Tensor) -> Result<(Vec<f64>, Tensor)>;
}

/// `f_t(x)` of the current classifier in eval mode: the single logit in
/// binary mode, the logit of each sample's class otherwise.
pub struct ClassifierScore<'a> {
    pub disc: &'a Discriminator,
    pub classes: &'a [usize],
    pub chunk: usize,
}

impl ScoreFn for ClassifierScore<'_> {
    fn score_and_grad(&self, x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let n = x.dims4()?.0;
        if self.classes.len() != n {
            return Err(Error::Dimension(format!("{} class tags for {} samples", self.classes.len(), n)));
        }
        let mut scores = Vec::with_capacity(n);
        let mut grad = Vec::with_capacity(x.numel());
        let mut start = 0;
        while start < n {
            let len = self.chunk.max(1).min(n - start);
            let mut g = Graph::new();
            let bound = self.disc.params.bind(&mut g, false);
            let xv = g.leaf(x.slice_batch(start, len)?, true);
            let out = self.disc.forward(&mut g, &bound, xv, ForwardMode::Eval)?;
            let cols: Vec<usize> = match self.disc.config.mode {
                Mode::Binary => vec![0; len],
                Mode::Multiclass => self.classes[start..start + len].to_vec(),
            };
            let f = g.pick(out.logits, &cols)?;
            scores.extend_from_slice(g.value(f).data());
            let s = g.sum(f);
            g.backward(s)?;
            grad.extend_from_slice(g.grad_or_zeros(xv).data());
            start += len;
        }
        Ok((scores, Tensor::new(x.shape(), grad)?))
    }
}

/// `x + step_size·∇ + noise_std·η`, clipped to `[0, 1]`, from a precomputed gradient.
pub fn langevin_update(x: &Tensor, grad: &Tensor, step_size: f64, noise_std: f64, rng: &mut impl Rng) -> Result<Tensor> {
    x.check_same_shape(grad)?;
    if !grad.is_finite() {
        return Err(Error::SamplerFault("non-finite score gradient".into()));
    }
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &d)| {
            let eta = if noise_std == 0.0 { 0.0 } else { noise_std * rng.sample::<f64, _>(StandardNormal) };
            (v + step_size * d + eta).clamp(0.0, 1.0)
        })
        .collect();
    Tensor::new(x.shape(), data)
}

/// One Langevin step on `score_fn`.
pub fn langevin_step(x: &Tensor, score_fn: &dyn ScoreFn, step_size: f64, noise_std: f64, rng: &mut impl Rng) -> Result<Tensor> {
    let (_, grad) = score_fn.score_and_grad(x)?;
    langevin_update(x, &grad, step_size, noise_std, rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainResult {
    pub samples: Tensor,
    pub steps_used: usize,
    pub mean_score: f64,
    pub threshold: f64,
    /// The chain stopped at `max_steps` without meeting the threshold.
    pub hit_max_steps: bool,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Ascends from `seeds` with step `λ₀·anneal^k` until the mean score reaches
/// a stop threshold drawn once for the chain, or `max_steps` is reached.
pub fn run_chain(
    seeds: &Tensor,
    score_fn: &dyn ScoreFn,
    config: &SamplerConfig,
    tracker: &ThresholdTracker,
    rng: &mut impl Rng,
) -> Result<ChainResult> {
    config.validate()?;
    let threshold = stop_threshold(tracker, config.t_u, rng)?;
    let mut x = seeds.clone();
    let mut k = 0;
    loop {
        let (scores, grad) = score_fn.score_and_grad(&x)?;
        let m = mean(&scores);
        if !m.is_finite() {
            return Err(Error::SamplerFault(format!("non-finite score after {} steps", k)));
        }
        let done = m >= threshold;
        if done || k == config.max_steps {
            if !done {
                warn!("chain reached max_steps={} with mean score {:.4} below threshold {:.4}", k, m, threshold);
            }
            return Ok(ChainResult { samples: x, steps_used: k, mean_score: m, threshold, hit_max_steps: !done });
        }
        let decay = config.anneal_factor.powi(k as i32);
        x = langevin_update(&x, &grad, config.step_size * decay, config.noise_std * decay, rng)?;
        k += 1;
    }
}

/// Appends the eval-mode mean of `f_t` over `positives` to the tracker and
/// returns it. In multiclass mode each sample contributes its own class
/// logit; in binary mode the single logit.
pub fn record_positive_scores(
    tracker: &mut ThresholdTracker,
    positives: &Tensor,
    labels: &[usize],
    disc: &Discriminator,
    chunk: usize,
) -> Result<f64> {
    let (logits, _) = disc.evaluate_batches(positives, chunk)?;
    let k = logits.shape()[1];
    if labels.len() != logits.shape()[0] || labels.is_empty() {
        return Err(Error::Dimension(format!("{} labels for {} positives", labels.len(), logits.shape()[0])));
    }
    let scores: Vec<f64> = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| if k == 1 { logits.data()[i] } else { logits.data()[i * k + y.min(k - 1)] })
        .collect();
    let m = mean(&scores);
    tracker.push(m);
    Ok(m)
}

/// The growing pseudo-negative set with per-sample generating class and
/// birth iteration. Eviction beyond the cap removes the oldest samples.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativePool {
    sample_shape: Vec<usize>,
    data: Vec<f64>,
    class_tags: Vec<usize>,
    iteration_tags: Vec<usize>,
    cap: Option<usize>,
}

impl NegativePool {
    pub fn new(sample_shape: &[usize], cap: Option<usize>) -> Self {
        Self { sample_shape: sample_shape.to_vec(), data: Vec::new(), class_tags: Vec::new(), iteration_tags: Vec::new(), cap }
    }

    pub fn len(&self) -> usize {
        self.class_tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_tags.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn cap(&self) -> Option<usize> {
        self.cap
    }

    pub fn class_tags(&self) -> &[usize] {
        &self.class_tags
    }

    pub fn iteration_tags(&self) -> &[usize] {
        &self.iteration_tags
    }

    fn row(&self) -> usize {
        self.sample_shape.iter().product()
    }

    /// All samples as `[N, C, H, W]`.
    pub fn images(&self) -> Result<Tensor> {
        let mut shape = vec![self.len()];
        shape.extend_from_slice(&self.sample_shape);
        Tensor::new(&shape, self.data.clone())
    }

    /// Samples at `indices` with their class tags.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let row = self.row();
        let mut data = Vec::with_capacity(indices.len() * row);
        let mut tags = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Dimension(format!("pool index {} out of {}", i, self.len())));
            }
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
            tags.push(self.class_tags[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        Ok((Tensor::new(&shape, data)?, tags))
    }

    /// The samples born in the most recent iteration still present.
    pub fn latest(&self) -> Option<(Tensor, Vec<usize>)> {
        let last = *self.iteration_tags.last()?;
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.iteration_tags[i] == last).collect();
        self.gather(&idx).ok()
    }

    /// Appends a batch synthesized in `iteration`, then evicts the oldest
    /// samples beyond the cap.
    pub fn augment(&mut self, samples: &Tensor, class_tags: &[usize], iteration: usize) -> Result<()> {
        let shape = samples.shape();
        if shape.len() != self.sample_shape.len() + 1 || shape[1..] != self.sample_shape[..] {
            return Err(Error::Dimension(format!("pool holds {:?} samples, got {:?}", self.sample_shape, shape)));
        }
        if class_tags.len() != shape[0] {
            return Err(Error::Dimension(format!("{} class tags for {} samples", class_tags.len(), shape[0])));
        }
        if let Some(&last) = self.iteration_tags.last() {
            if iteration < last {
                return Err(Error::Argument(format!("iteration {} after {}", iteration, last)));
            }
        }
        self.data.extend_from_slice(samples.data());
        self.class_tags.extend_from_slice(class_tags);
        self.iteration_tags.extend(std::iter::repeat_n(iteration, shape[0]));
        if let Some(cap) = self.cap {
            if self.len() > cap {
                let drop = self.len() - cap;
                let row = self.row();
                self.data.drain(..drop * row);
                self.class_tags.drain(..drop);
                self.iteration_tags.drain(..drop);
            }
        }
        Ok(())
    }

    /// Restores a pool from stored parts.
    pub fn from_parts(
        sample_shape: &[usize],
        data: Vec<f64>,
        class_tags: Vec<usize>,
        iteration_tags: Vec<usize>,
        cap: Option<usize>,
    ) -> Result<Self> {
        let row: usize = sample_shape.iter().product();
        if class_tags.len() != iteration_tags.len() || data.len() != row * class_tags.len() {
            return Err(Error::Consistency("pool parts disagree in length".into()));
        }
        Ok(Self { sample_shape: sample_shape.to_vec(), data, class_tags, iteration_tags, cap })
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// `augment_pool` in free-function form.
pub fn augment_pool(pool: &mut NegativePool, samples: &Tensor, class_tags: &[usize], iteration: usize) -> Result<()> {
    pool.augment(samples, class_tags, iteration)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// `-½‖x − c‖²` summed per sample.
    struct Quadratic {
        center: f64,
    }

    impl ScoreFn for Quadratic {
        fn score_and_grad(&self, x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
            let n = x.shape()[0];
            let row = x.numel() / n;
            let scores = x.data().chunks(row).map(|r| -0.5 * r.iter().map(|v| (v - self.center).powi(2)).sum::<f64>()).collect();
            Ok((scores, x.map(|v| self.center - v)))
        }
    }

    #[test]
    fn quadratic_step_contracts_toward_the_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_fn(&[2, 1, 2, 2], |i| 0.1 * i as f64);
        let y = langevin_step(&x, &Quadratic { center: 0.0 }, 0.3, 0.0, &mut rng).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((b - 0.7 * a).abs() < 1e-15);
        }
        let z = langevin_step(&x, &Quadratic { center: 0.0 }, 0.0, 0.0, &mut rng).unwrap();
        assert_eq!(z, x);
    }

    #[test]
    fn non_finite_gradient_is_a_sampler_fault() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::full(&[1, 1, 1, 2], 0.5);
        let g = Tensor::new(&[1, 1, 1, 2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(langevin_update(&x, &g, 0.1, 0.0, &mut rng), Err(Error::SamplerFault(_))));
    }

    #[test]
    fn tracker_statistics_by_hand() {
        let t = ThresholdTracker::from_history(&[1.0, 2.0, 3.0]);
        assert_eq!(t.a(), 2.0);
        assert!((t.b() - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        let t = ThresholdTracker::from_history(&[1.0, 3.0]);
        assert_eq!((t.a(), t.b()), (2.0, 1.0));
        let t = ThresholdTracker::from_history(&[1.5]);
        assert_eq!((t.a(), t.b()), (1.5, 0.0));
    }

    #[test]
    fn threshold_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = ThresholdTracker::from_history(&[2.0]);
        assert_eq!(stop_threshold(&t, 0.1, &mut rng).unwrap(), 2.0);
        assert!(matches!(stop_threshold(&ThresholdTracker::new(), 0.1, &mut rng), Err(Error::Tracker(_))));
        assert!((quantile_offset(1e-3) - 3.090_232_306_167_813_5).abs() < 1e-9);
        assert!((quantile_offset(1e-1) - 1.281_551_565_544_600_5).abs() < 1e-9);
        // Same draw of s, so the gap is exactly (z(1e-3) − z(1e-1))·b.
        let t = ThresholdTracker::from_history(&[1.0, 3.0]);
        let strict = stop_threshold(&t, 1e-3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let loose = stop_threshold(&t, 1e-1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert!((strict - loose - (quantile_offset(1e-3) - quantile_offset(1e-1))).abs() < 1e-12);
    }

    #[test]
    fn reference_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(init_reference(0, &[1, 2, 2], &mut rng).is_err());
        let x = init_reference(1000, &[1, 10, 10], &mut rng).unwrap();
        assert!(x.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        // Clipping is symmetric about 0.5, so the clipped mean is 0.5.
        let m = x.mean();
        let se = 0.3 / (x.numel() as f64).sqrt();
        assert!((m - 0.5).abs() < 3.0 * se, "mean {}", m);
    }

    #[test]
    fn chain_stops_immediately_when_satisfied() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let seeds = Tensor::full(&[3, 1, 2, 2], 0.5);
        let t = ThresholdTracker::from_history(&[-100.0]);
        let r = run_chain(&seeds, &Quadratic { center: 0.2 }, &SamplerConfig::default(), &t, &mut rng).unwrap();
        assert_eq!(r.steps_used, 0);
        assert_eq!(r.samples, seeds);
    }

    #[test]
    fn one_step_budget_takes_one_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let seeds = Tensor::full(&[3, 1, 2, 2], 0.9);
        let t = ThresholdTracker::from_history(&[100.0]);
        let cfg = SamplerConfig { max_steps: 1, ..Default::default() };
        let r = run_chain(&seeds, &Quadratic { center: 0.2 }, &cfg, &t, &mut rng).unwrap();
        assert_eq!(r.steps_used, 1);
        assert!(r.hit_max_steps);
    }

    #[test]
    fn eviction_keeps_newest() {
        let mut pool = NegativePool::new(&[1, 1, 1], Some(150));
        for it in 1..=3 {
            let x = Tensor::full(&[100, 1, 1, 1], it as f64);
            pool.augment(&x, &vec![0; 100], it).unwrap();
        }
        assert_eq!(pool.len(), 150);
        assert_eq!(pool.iteration_tags().iter().filter(|&&t| t == 3).count(), 100);
        assert_eq!(pool.iteration_tags()[0], 2);
        assert_eq!(pool.data()[0], 2.0);
        assert_eq!(pool.latest().unwrap().0.numel(), 100);
    }

    proptest! {
        #[test]
        fn tracker_matches_recomputation(xs in prop::collection::vec(-50.0f64..50.0, 1..40)) {
            let mut t = ThresholdTracker::new();
            for (i, &x) in xs.iter().enumerate() {
                t.push(x);
                let d = &xs[..=i];
                let a = d.iter().sum::<f64>() / d.len() as f64;
                let b = (d.iter().map(|v| (v - a).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
                prop_assert!((t.a() - a).abs() <= 1e-9 * (1.0 + a.abs()));
                prop_assert!((t.b() - b).abs() <= 1e-9 * (1.0 + b));
                prop_assert!(t.b() >= 0.0);
            }
        }

        #[test]
        fn pool_size_and_order(sizes in prop::collection::vec(1usize..20, 1..12), cap in prop::option::of(1usize..80)) {
            let mut pool = NegativePool::new(&[1, 2, 2], cap);
            let mut total = 0;
            for (t, &n) in sizes.iter().enumerate() {
                pool.augment(&Tensor::full(&[n, 1, 2, 2], t as f64), &vec![t % 3; n], t + 1).unwrap();
                total += n;
                prop_assert_eq!(pool.len(), cap.map_or(total, |c| total.min(c)));
                prop_assert!(pool.iteration_tags().windows(2).all(|w| w[0] <= w[1]));
            }
        }

        #[test]
        fn concave_chains_are_monotone(c in 0.1f64..0.9, start in prop::collection::vec(0.0f64..1.0, 8)) {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let f = Quadratic { center: c };
            let mut x = Tensor::new(&[2, 1, 2, 2], start).unwrap();
            let mut last = f.score_and_grad(&x).unwrap().0.iter().sum::<f64>();
            for _ in 0..50 {
                x = langevin_step(&x, &f, 0.1, 0.0, &mut rng).unwrap();
                let s = f.score_and_grad(&x).unwrap().0.iter().sum::<f64>();
                prop_assert!(s >= last);
                prop_assert!(x.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
                last = s;
            }
        }
    }
}
