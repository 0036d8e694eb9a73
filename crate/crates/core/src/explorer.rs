//! Variation exploration: gradient ascent on the predictor parameters `ψ` so
//! that transformed positives become hard for the current (frozen) classifier.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::discriminator::{classification_loss, interpolate, Discriminator, ForwardMode, Target};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::optim::AdamConfig;
use crate::spatial::{AffineParams, Predictor};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ExplorerConfig {
    pub steps_per_iteration: usize,
    pub lr: f64,
    /// Scale of the standard-normal ζ added to the predicted σ.
    pub noise_scale: f64,
    /// Adds the critic and gradient-penalty terms to the ascent objective.
    pub use_full_objective: bool,
    pub lambda_gp: f64,
}

impl Default for ExplorerConfig {
    fn default() -> Self {
        Self { steps_per_iteration: 3, lr: 1e-3, noise_scale: 0.05, use_full_objective: false, lambda_gp: 10.0 }
    }
}

impl ExplorerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps_per_iteration == 0 {
            return Err(Error::Argument("explorer steps_per_iteration must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.noise_scale >= 0.0 && self.lambda_gp >= 0.0) {
            return Err(Error::Argument(format!("invalid explorer configuration {:?}", self)));
        }
        Ok(())
    }

    pub fn draw_noise(&self, n: usize, rng: &mut impl Rng) -> Tensor {
        let k = self.noise_scale;
        Tensor::from_fn(&[n, 6], |_| if k == 0.0 { 0.0 } else { k * rng.sample::<f64, _>(StandardNormal) })
    }
}

/// The ascent objective on a graph where `bound` holds the predictor
/// parameters. The discriminator enters as constants in eval mode.
///
/// Default: mean `-log q(y | T(x; σ))`. With `use_full_objective` the mean
/// critic on the transformed batch and the gradient penalty between it and
/// `negatives` are added.
#[allow(clippy::too_many_arguments)]
pub fn exploration_objective_on(
    g: &mut Graph,
    bound: &[Var],
    predictor: &Predictor,
    disc: &Discriminator,
    positives: &Tensor,
    labels: &[usize],
    noise: &Tensor,
    negatives: Option<&Tensor>,
    config: &ExplorerConfig,
    rng: &mut impl Rng,
) -> Result<Var> {
    let n = positives.dims4()?.0;
    if labels.len() != n {
        return Err(Error::Dimension(format!("{} labels for {} positives", labels.len(), n)));
    }
    let x = g.constant(positives.clone());
    let sigma = predictor.sigma_with_noise(g, bound, x, noise)?;
    let xt = g.transform(x, sigma)?;
    let dbound = disc.params.bind(g, false);
    let out = disc.forward(g, &dbound, xt, ForwardMode::Eval)?;
    let targets: Vec<Target> = labels.iter().map(|&y| Target::Class(y)).collect();
    let j = classification_loss(g, out.logits, &targets, disc.config.mode, disc.config.num_classes)?;
    if !config.use_full_objective {
        return Ok(j);
    }
    let negatives = negatives
        .ok_or_else(|| Error::Argument("the full exploration objective needs pseudo-negatives".into()))?;
    let xn = g.constant(negatives.clone());
    let w = g.mean(out.critic);
    let x_hat = interpolate(g, xt, xn, rng)?;
    let gp = disc.gradient_penalty(g, &dbound, x_hat, config.lambda_gp)?;
    let jw = g.add(j, w)?;
    g.add(jw, gp)
}

/// Objective value for the current `ψ` with a given noise draw.
pub fn exploration_objective(
    predictor: &Predictor,
    disc: &Discriminator,
    positives: &Tensor,
    labels: &[usize],
    noise: &Tensor,
    negatives: Option<&Tensor>,
    config: &ExplorerConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    let mut g = Graph::new();
    let bound = predictor.params.bind(&mut g, false);
    let v = exploration_objective_on(&mut g, &bound, predictor, disc, positives, labels, noise, negatives, config, rng)?;
    g.value(v).item()
}

/// σ for a batch under a given noise draw.
pub fn sigma_with(predictor: &Predictor, positives: &Tensor, noise: &Tensor) -> Result<AffineParams> {
    let mut g = Graph::new();
    let bound = predictor.params.bind(&mut g, false);
    let x = g.constant(positives.clone());
    let s = predictor.sigma_with_noise(&mut g, &bound, x, noise)?;
    AffineParams::new(g.value(s).clone())
}

/// Runs `steps_per_iteration` Adam ascent steps on `ψ` and returns σ for the
/// batch. The discriminator is only read.
///
/// A non-finite objective or gradient restores `ψ` (and its optimizer state)
/// to its value on entry and reports an explorer fault.
#[allow(clippy::too_many_arguments)]
pub fn explore(
    predictor: &mut Predictor,
    disc: &Discriminator,
    positives: &Tensor,
    labels: &[usize],
    negatives: Option<&Tensor>,
    config: &ExplorerConfig,
    adam: &AdamConfig,
    rng: &mut impl Rng,
) -> Result<AffineParams> {
    config.validate()?;
    let n = positives.dims4()?.0;
    let snapshot = predictor.params.clone();
    let adam = AdamConfig { lr: config.lr, ..*adam };
    let fault = |predictor: &mut Predictor, why: String| {
        predictor.params = snapshot.clone();
        Err(Error::ExplorerFault(why))
    };
    for step in 0..config.steps_per_iteration {
        let noise = config.draw_noise(n, rng);
        let mut g = Graph::new();
        let bound = predictor.params.bind(&mut g, true);
        let obj = exploration_objective_on(
            &mut g, &bound, predictor, disc, positives, labels, &noise, negatives, config, rng,
        )?;
        let value = g.value(obj).item()?;
        if !value.is_finite() {
            return fault(predictor, format!("non-finite exploration objective at step {}", step));
        }
        g.backward(obj)?;
        predictor.params.zero_grad();
        predictor.params.accumulate_grads(&g, &bound)?;
        predictor.params.scale_grads(-1.0);
        if let Err(e) = predictor.params.adam_step(&adam) {
            return fault(predictor, format!("step {}: {}", step, e));
        }
    }
    let noise = config.draw_noise(n, rng);
    sigma_with(predictor, positives, &noise)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discriminator::{BCnnConfig, Mode};
    use crate::spatial::PredictorConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(rng: &mut ChaCha8Rng) -> (Predictor, Discriminator, Tensor, Vec<usize>) {
        let mut cfg = BCnnConfig::new(1, 8, 3, Mode::Multiclass);
        cfg.conv_channels = 4;
        cfg.num_layers = 2;
        let d = Discriminator::new(cfg, rng).unwrap();
        let mut pc = PredictorConfig::new(1, 8);
        pc.channels = 4;
        let p = Predictor::new(pc, rng);
        let x = Tensor::from_fn(&[4, 1, 8, 8], |_| rng.random::<f64>());
        (p, d, x, vec![0, 1, 2, 1])
    }

    #[test]
    fn identity_predictor_matches_plain_classification_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (p, d, x, labels) = setup(&mut rng);
        let cfg = ExplorerConfig { noise_scale: 0.0, ..Default::default() };
        let noise = cfg.draw_noise(4, &mut rng);
        let obj = exploration_objective(&p, &d, &x, &labels, &noise, None, &cfg, &mut rng).unwrap();
        let mut g = Graph::new();
        let b = d.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = d.forward(&mut g, &b, xv, ForwardMode::Eval).unwrap();
        let t: Vec<Target> = labels.iter().map(|&y| Target::Class(y)).collect();
        let j = classification_loss(&mut g, out.logits, &t, Mode::Multiclass, 3).unwrap();
        assert_eq!(obj, g.value(j).item().unwrap());
    }

    #[test]
    fn zero_learning_rate_keeps_sigma_and_discriminator() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (mut p, d, x, labels) = setup(&mut rng);
        let before = d.params.checksum();
        let cfg = ExplorerConfig { steps_per_iteration: 1, lr: 0.0, noise_scale: 0.0, ..Default::default() };
        let expected = sigma_with(&p, &x, &Tensor::zeros(&[4, 6])).unwrap();
        let sigma = explore(&mut p, &d, &x, &labels, None, &cfg, &AdamConfig::default(), &mut rng).unwrap();
        assert_eq!(sigma, expected);
        assert_eq!(d.params.checksum(), before);
    }

    #[test]
    fn zero_steps_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut p, d, x, labels) = setup(&mut rng);
        let cfg = ExplorerConfig { steps_per_iteration: 0, ..Default::default() };
        let r = explore(&mut p, &d, &x, &labels, None, &cfg, &AdamConfig::default(), &mut rng);
        assert!(matches!(r, Err(Error::Argument(_))));
    }

    #[test]
    fn constant_classifier_gives_zero_psi_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (p, mut d, x, labels) = setup(&mut rng);
        d.params.find_mut("logit.weight").unwrap().value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let cfg = ExplorerConfig::default();
        let noise = cfg.draw_noise(4, &mut rng);
        let mut g = Graph::new();
        let b = p.params.bind(&mut g, true);
        let obj = exploration_objective_on(&mut g, &b, &p, &d, &x, &labels, &noise, None, &cfg, &mut rng).unwrap();
        g.backward(obj).unwrap();
        for &v in &b {
            assert!(g.grad_or_zeros(v).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn ascent_step_does_not_decrease_objective_under_frozen_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut p, d, x, labels) = setup(&mut rng);
        let cfg = ExplorerConfig { steps_per_iteration: 1, noise_scale: 0.0, ..Default::default() };
        let zero = Tensor::zeros(&[4, 6]);
        let before = exploration_objective(&p, &d, &x, &labels, &zero, None, &cfg, &mut rng).unwrap();
        explore(&mut p, &d, &x, &labels, None, &cfg, &AdamConfig::default(), &mut rng).unwrap();
        let after = exploration_objective(&p, &d, &x, &labels, &zero, None, &cfg, &mut rng).unwrap();
        assert!(after >= before, "{} < {}", after, before);
    }

    #[test]
    fn non_finite_input_restores_psi() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (mut p, d, mut x, labels) = setup(&mut rng);
        x.data_mut()[5] = f64::NAN;
        let snap = p.params.checksum();
        let r = explore(&mut p, &d, &x, &labels, None, &ExplorerConfig::default(), &AdamConfig::default(), &mut rng);
        assert!(matches!(r, Err(Error::ExplorerFault(_))));
        assert_eq!(p.params.checksum(), snap);
    }

    #[test]
    fn full_objective_requires_negatives() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (p, d, x, labels) = setup(&mut rng);
        let cfg = ExplorerConfig { use_full_objective: true, ..Default::default() };
        let noise = cfg.draw_noise(4, &mut rng);
        assert!(exploration_objective(&p, &d, &x, &labels, &noise, None, &cfg, &mut rng).is_err());
        let neg = Tensor::full(&[4, 1, 8, 8], 0.5);
        assert!(exploration_objective(&p, &d, &x, &labels, &noise, Some(&neg), &cfg, &mut rng).unwrap().is_finite());
    }
}
