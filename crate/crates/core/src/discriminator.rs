//! The B-CNN classifier with a logit head `f(x; θ)` and a Wasserstein critic
//! head `W(·; ω)`, plus every training loss built on them.
//!
//! Both heads are single fully connected layers reading the same flattened
//! convolutional features.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::{sigmoid, Backward, Graph, Var};
use crate::nn::{log_softmax_rows, BnStats, BnStatsMode};
use crate::optim::ParamStore;
use crate::spatial::he_normal;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// One logit, `q(y|x) = 1 / (1 + exp(-y f(x)))` with `y = ±1`.
    Binary,
    /// Softmax over one logit per class.
    Multiclass,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Binary => "binary",
            Mode::Multiclass => "multiclass",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(Mode::Binary),
            "multiclass" => Ok(Mode::Multiclass),
            other => Err(Error::Argument(format!("unknown mode `{}` (binary|multiclass)", other))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BCnnConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub conv_channels: usize,
    pub num_layers: usize,
    pub num_classes: usize,
    pub mode: Mode,
}

impl BCnnConfig {
    pub fn new(in_channels: usize, image_size: usize, num_classes: usize, mode: Mode) -> Self {
        Self { in_channels, image_size, conv_channels: 64, num_layers: 4, num_classes, mode }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.image_size == 0 || self.conv_channels == 0 || self.num_layers == 0 {
            return Err(Error::Argument(format!("degenerate B-CNN configuration {:?}", self)));
        }
        match self.mode {
            Mode::Binary if self.num_classes != 2 => {
                Err(Error::Argument(format!("binary mode needs 2 classes, got {}", self.num_classes)))
            }
            Mode::Multiclass if self.num_classes < 2 => {
                Err(Error::Argument(format!("multiclass mode needs at least 2 classes, got {}", self.num_classes)))
            }
            _ => Ok(()),
        }
    }

    /// Spatial extent after the stride-2 stack.
    pub fn final_size(&self) -> usize {
        (0..self.num_layers).fold(self.image_size, |s, _| s.div_ceil(2))
    }

    pub fn feature_len(&self) -> usize {
        self.conv_channels * self.final_size() * self.final_size()
    }

    /// Width of the logit head: 1 in binary mode, `num_classes` otherwise.
    pub fn outputs(&self) -> usize {
        match self.mode {
            Mode::Binary => 1,
            Mode::Multiclass => self.num_classes,
        }
    }
}

/// How batch normalization layers obtain statistics during a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum ForwardMode<'a> {
    /// Batch statistics with gradient; the returned stats feed the running averages.
    Train,
    /// Running averages.
    Eval,
    /// Batch statistics treated as constants.
    Detached,
    /// Caller-supplied statistics, one entry per layer.
    Fixed(&'a [BnStats]),
}

pub struct Forward {
    pub logits: Var,
    pub critic: Var,
    pub features: Var,
    pub stats: Vec<BnStats>,
}

/// Classification target of one training sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    /// A real (or transformed real) sample of the given class. In binary
    /// mode class 1 is `y = +1` and class 0 is `y = -1`.
    Class(usize),
    /// A pseudo-negative synthesized for the given class (`y = -1`).
    PseudoNegative(usize),
}

impl Target {
    pub fn class(&self) -> usize {
        match *self {
            Target::Class(k) | Target::PseudoNegative(k) => k,
        }
    }
}

/// Discriminator parameters `θ` (trunk and logit head), `ω` (critic head)
/// and batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub config: BCnnConfig,
    pub params: ParamStore,
    pub running: Vec<BnStats>,
}

pub const BN_MOMENTUM: f64 = 0.9;

impl Discriminator {
    pub fn new(config: BCnnConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut c_in = config.in_channels;
        for l in 0..config.num_layers {
            params.push(format!("conv{l}.weight"), he_normal(&[config.conv_channels, c_in, 5, 5], rng));
            params.push(format!("bn{l}.gamma"), Tensor::ones(&[config.conv_channels]));
            params.push(format!("bn{l}.beta"), Tensor::zeros(&[config.conv_channels]));
            c_in = config.conv_channels;
        }
        let feat = config.feature_len();
        let std = (1.0 / feat as f64).sqrt();
        let head = |m: usize, rng: &mut dyn rand::RngCore| {
            Tensor::from_fn(&[feat, m], |_| std * rng.sample::<f64, _>(StandardNormal))
        };
        params.push("logit.weight", head(config.outputs(), rng));
        params.push("logit.bias", Tensor::zeros(&[config.outputs()]));
        params.push("critic.weight", head(1, rng));
        params.push("critic.bias", Tensor::zeros(&[1]));
        let running = (0..config.num_layers)
            .map(|_| BnStats { mean: vec![0.0; config.conv_channels], var: vec![1.0; config.conv_channels], count: 0 })
            .collect();
        Ok(Self { config, params, running })
    }

    fn slot_logit(&self) -> usize {
        3 * self.config.num_layers
    }

    fn slot_critic(&self) -> usize {
        3 * self.config.num_layers + 2
    }

    /// Indices of the critic-head parameters `ω`; all others are `θ`.
    pub fn critic_slots(&self) -> std::ops::Range<usize> {
        self.slot_critic()..self.slot_critic() + 2
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        match shape {
            &[_, ch, h, w] if ch == c.in_channels && h == c.image_size && w == c.image_size => Ok(()),
            s => Err(Error::Dimension(format!(
                "discriminator expects [N,{},{},{}], got {:?}",
                c.in_channels, c.image_size, c.image_size, s
            ))),
        }
    }

    pub fn forward(&self, g: &mut Graph, bound: &[Var], x: Var, mode: ForwardMode<'_>) -> Result<Forward> {
        self.check_input(g.value(x).shape())?;
        let n = g.value(x).shape()[0];
        let mut h = x;
        let mut stats = Vec::with_capacity(self.config.num_layers);
        for l in 0..self.config.num_layers {
            h = g.conv2d(h, bound[3 * l], 2)?;
            let bn_mode = match mode {
                ForwardMode::Train => BnStatsMode::Batch,
                ForwardMode::Detached => BnStatsMode::BatchDetached,
                ForwardMode::Eval => BnStatsMode::Fixed(self.running[l].clone()),
                ForwardMode::Fixed(s) => BnStatsMode::Fixed(
                    s.get(l).cloned().ok_or_else(|| Error::Dimension(format!("no statistics for layer {l}")))?,
                ),
            };
            let (y, s) = g.batch_norm(h, bound[3 * l + 1], bound[3 * l + 2], &bn_mode)?;
            stats.push(s);
            h = g.swish(y);
        }
        let features = g.reshape(h, &[n, self.config.feature_len()])?;
        let logits = g.linear(features, bound[self.slot_logit()], bound[self.slot_logit() + 1])?;
        let critic = g.linear(features, bound[self.slot_critic()], bound[self.slot_critic() + 1])?;
        Ok(Forward { logits, critic, features, stats })
    }

    /// Folds batch statistics from a train-mode forward into the running
    /// averages (unbiased variance).
    pub fn update_running(&mut self, stats: &[BnStats]) {
        for (run, s) in self.running.iter_mut().zip(stats) {
            let correction = if s.count > 1 { s.count as f64 / (s.count - 1) as f64 } else { 1.0 };
            for c in 0..run.mean.len() {
                run.mean[c] = BN_MOMENTUM * run.mean[c] + (1.0 - BN_MOMENTUM) * s.mean[c];
                run.var[c] = BN_MOMENTUM * run.var[c] + (1.0 - BN_MOMENTUM) * s.var[c] * correction;
            }
            run.count = s.count;
        }
    }

    /// Eval-mode logits and critic values for a dataset, in chunks.
    pub fn evaluate_batches(&self, images: &Tensor, chunk: usize) -> Result<(Tensor, Tensor)> {
        let n = images.dims4()?.0;
        let mut logits = Vec::with_capacity(n * self.config.outputs());
        let mut critic = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let len = chunk.max(1).min(n - start);
            let mut g = Graph::new();
            let bound = self.params.bind(&mut g, false);
            let x = g.constant(images.slice_batch(start, len)?);
            let out = self.forward(&mut g, &bound, x, ForwardMode::Eval)?;
            logits.extend_from_slice(g.value(out.logits).data());
            critic.extend_from_slice(g.value(out.critic).data());
            start += len;
        }
        Ok((Tensor::new(&[n, self.config.outputs()], logits)?, Tensor::new(&[n, 1], critic)?))
    }

    /// Predicted class per sample (eval mode).
    pub fn predict(&self, images: &Tensor, chunk: usize) -> Result<Vec<usize>> {
        let (logits, _) = self.evaluate_batches(images, chunk)?;
        Ok(argmax_rows(&logits, self.config.mode))
    }

    /// Gradient-penalty term `λ · mean_i (‖∇_x̂ W(f(x̂_i))‖₂ − 1)²`.
    ///
    /// The input gradient is that of `Σ_i W(f(x̂_i))` under train-mode batch
    /// normalization over the `x̂` batch (running statistics for a single
    /// sample). The gradient of the penalty is a Hessian-vector product of
    /// that sum along `v = ∂P/∂(∇_x̂ W)`, evaluated as a central difference of
    /// exact first-order gradients at `x̂ ± h v`.
    pub fn gradient_penalty(&self, g: &mut Graph, bound: &[Var], x_hat: Var, lambda: f64) -> Result<Var> {
        let xh = g.value(x_hat).clone();
        let n = xh.dims4()?.0;
        if n == 0 {
            return Err(Error::Argument("gradient penalty over an empty batch".into()));
        }
        let values: Vec<Tensor> = bound.iter().map(|&b| g.value(b).clone()).collect();
        let none = vec![false; values.len()];
        let (input_grad, _) = self.critic_sum_grads(&values, &xh, &none, true)?;
        let input_grad = input_grad.expect("input gradient requested");
        let row = xh.numel() / n;
        let mut value = 0.0;
        let mut v = vec![0.0; xh.numel()];
        for i in 0..n {
            let gi = &input_grad.data()[i * row..(i + 1) * row];
            let norm = gi.iter().map(|x| x * x).sum::<f64>().sqrt();
            value += (norm - 1.0).powi(2);
            if norm > 0.0 {
                let c = lambda * 2.0 * (norm - 1.0) / (norm * n as f64);
                v[i * row..(i + 1) * row].iter_mut().zip(gi).for_each(|(vv, gg)| *vv = c * gg);
            }
        }
        value *= lambda / n as f64;

        let params_need: Vec<bool> = bound.iter().map(|&b| g.requires_grad(b)).collect();
        let x_needs = g.requires_grad(x_hat);
        let vmax = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let mut grads: Vec<Option<Tensor>> = vec![None; bound.len() + 1];
        if vmax > 0.0 && (x_needs || params_need.iter().any(|&b| b)) {
            let h = 1e-4 / vmax;
            let shifted = |sign: f64| {
                Tensor::new(xh.shape(), xh.data().iter().zip(&v).map(|(x, d)| x + sign * h * d).collect())
            };
            let (gx_p, gp_p) = self.critic_sum_grads(&values, &shifted(1.0)?, &params_need, x_needs)?;
            let (gx_m, gp_m) = self.critic_sum_grads(&values, &shifted(-1.0)?, &params_need, x_needs)?;
            let diff = |a: &Tensor, b: &Tensor| a.zip_map(b, |p, q| (p - q) / (2.0 * h));
            for (k, (a, b)) in gp_p.iter().zip(&gp_m).enumerate() {
                if let (Some(a), Some(b)) = (a, b) {
                    grads[k] = Some(diff(a, b)?);
                }
            }
            if let (Some(a), Some(b)) = (&gx_p, &gx_m) {
                grads[bound.len()] = Some(diff(a, b)?);
            }
        }
        let mut inputs = bound.to_vec();
        inputs.push(x_hat);
        Ok(g.record(&inputs, Tensor::scalar(value), Box::new(PenaltyRule { grads })))
    }

    /// Gradients of `Σ_i W(f(x_i))` with respect to `x` and the flagged
    /// parameters, with parameter values `values` in slot order. Uses train-mode
    /// batch statistics for two or more samples, running statistics otherwise.
    pub fn critic_sum_grads(
        &self,
        values: &[Tensor],
        x: &Tensor,
        params_need: &[bool],
        x_needs: bool,
    ) -> Result<(Option<Tensor>, Vec<Option<Tensor>>)> {
        let mut g = Graph::new();
        let bound: Vec<Var> = values.iter().zip(params_need).map(|(t, &need)| g.leaf(t.clone(), need)).collect();
        let xv = g.leaf(x.clone(), x_needs);
        let mode = if x.dims4()?.0 >= 2 { ForwardMode::Train } else { ForwardMode::Eval };
        let out = self.forward(&mut g, &bound, xv, mode)?;
        let s = g.sum(out.critic);
        if !(x_needs || params_need.iter().any(|&b| b)) {
            return Ok((None, vec![None; values.len()]));
        }
        g.backward(s)?;
        let pg = bound.iter().zip(params_need).map(|(&b, &need)| need.then(|| g.grad_or_zeros(b))).collect();
        Ok((x_needs.then(|| g.grad_or_zeros(xv)), pg))
    }
}

/// Gradients of the penalty precomputed at construction.
struct PenaltyRule {
    grads: Vec<Option<Tensor>>,
}

impl Backward for PenaltyRule {
    fn name(&self) -> &str {
        "gradient_penalty"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let k = g.item()?;
        Ok(self.grads.iter().map(|t| t.as_ref().map(|t| t.scale(k))).collect())
    }
}

pub fn argmax_rows(logits: &Tensor, mode: Mode) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| match mode {
            Mode::Binary => usize::from(row[0] > 0.0),
            Mode::Multiclass => {
                row.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best }).0
            }
        })
        .collect()
}

/// `q(y|x) = 1 / (1 + exp(-y f))` elementwise, `y = ±1`.
pub fn binary_prob(f: &Tensor, y: f64) -> Tensor {
    f.map(|v| sigmoid(y * v))
}

/// Row-wise softmax.
pub fn multiclass_prob(logits: &Tensor) -> Result<Tensor> {
    let (_, k) = logits.dims2()?;
    if k < 2 {
        return Err(Error::Argument(format!("softmax over {} classes", k)));
    }
    Ok(log_softmax_rows(logits)?.map(f64::exp))
}

fn validate_targets(targets: &[Target], mode: Mode, num_classes: usize) -> Result<()> {
    for t in targets {
        let (k, limit) = match (mode, t) {
            (Mode::Binary, Target::Class(k)) => (*k, 2),
            (Mode::Binary, Target::PseudoNegative(k)) => (*k, 1),
            (Mode::Multiclass, _) => (t.class(), num_classes),
        };
        if k >= limit {
            return Err(Error::Label(format!("{:?} out of range for {} mode with {} classes", t, mode.as_str(), num_classes)));
        }
    }
    Ok(())
}

/// Classification loss `J`.
///
/// Binary: mean of `-log q(y|x)` over every sample. Multiclass: mean
/// cross-entropy over real and transformed samples plus the mean of
/// `log(1 + exp(1 + f_k(x)))` over pseudo-negatives synthesized for class `k`.
pub fn classification_loss(g: &mut Graph, logits: Var, targets: &[Target], mode: Mode, num_classes: usize) -> Result<Var> {
    let n = g.value(logits).shape()[0];
    if targets.len() != n {
        return Err(Error::Dimension(format!("{} targets for {} rows", targets.len(), n)));
    }
    if n == 0 {
        return Err(Error::Argument("classification loss over an empty batch".into()));
    }
    validate_targets(targets, mode, num_classes)?;
    match mode {
        Mode::Binary => {
            let f = g.pick(logits, &vec![0; n])?;
            let signs: Vec<f64> = targets
                .iter()
                .map(|t| match t {
                    Target::Class(1) => -1.0,
                    _ => 1.0,
                })
                .collect();
            let z = g.scale_rows(f, &signs)?;
            let l = g.softplus(z);
            Ok(g.mean(l))
        }
        Mode::Multiclass => {
            let (real, neg): (Vec<usize>, Vec<usize>) =
                (0..n).partition(|&i| matches!(targets[i], Target::Class(_)));
            let mut terms = Vec::new();
            if !real.is_empty() {
                let rows = g.select_rows(logits, &real)?;
                let lsm = g.log_softmax(rows)?;
                let cols: Vec<usize> = real.iter().map(|&i| targets[i].class()).collect();
                let picked = g.pick(lsm, &cols)?;
                let m = g.mean(picked);
                terms.push(g.scale(m, -1.0));
            }
            if !neg.is_empty() {
                let rows = g.select_rows(logits, &neg)?;
                let cols: Vec<usize> = neg.iter().map(|&i| targets[i].class()).collect();
                let f = g.pick(rows, &cols)?;
                let shifted = g.add_scalar(f, 1.0);
                let sp = g.softplus(shifted);
                terms.push(g.mean(sp));
            }
            let mut total = terms[0];
            for &t in &terms[1..] {
                total = g.add(total, t)?;
            }
            Ok(total)
        }
    }
}

/// `x̂ = ε x_t + (1 − ε) x_n` for the first `min(|x_t|, |x_n|)` pairs, with
/// `ε ~ U(0, 1)` per pair.
pub fn interpolate(g: &mut Graph, x_t: Var, x_n: Var, rng: &mut impl Rng) -> Result<Var> {
    let nt = g.value(x_t).dims4()?.0;
    let nn = g.value(x_n).dims4()?.0;
    let pairs = nt.min(nn);
    if pairs == 0 {
        return Err(Error::Argument("interpolation between empty batches".into()));
    }
    let eps: Vec<f64> = (0..pairs).map(|_| rng.random::<f64>()).collect();
    let a = g.slice_batch(x_t, 0, pairs)?;
    let b = g.slice_batch(x_n, 0, pairs)?;
    let a = g.scale_rows(a, &eps)?;
    let one_minus: Vec<f64> = eps.iter().map(|e| 1.0 - e).collect();
    let b = g.scale_rows(b, &one_minus)?;
    g.add(a, b)
}

/// Parts of the Wasserstein objective, all scalars on the graph.
pub struct WassersteinLoss {
    pub total: Var,
    pub critic_gap: Var,
    pub penalty: Var,
}

/// `mean W(f(x_t)) − mean W(f(x_n))` from critic outputs `[N, 1]`.
pub fn critic_gap(g: &mut Graph, critic_t: Var, critic_n: Var) -> Result<Var> {
    let a = g.mean(critic_t);
    let b = g.mean(critic_n);
    g.sub(a, b)
}

/// Wasserstein loss with gradient penalty between transformed positives and
/// pseudo-negatives (train-mode forward over both batches).
pub fn wasserstein_loss(
    g: &mut Graph,
    disc: &Discriminator,
    bound: &[Var],
    x_t: Var,
    x_n: Var,
    lambda: f64,
    rng: &mut impl Rng,
) -> Result<(WassersteinLoss, Vec<BnStats>)> {
    let nt = g.value(x_t).dims4()?.0;
    let nn = g.value(x_n).dims4()?.0;
    if nt == 0 || nn == 0 {
        return Err(Error::Argument("wasserstein loss needs nonempty batches".into()));
    }
    let both = g.concat(&[x_t, x_n])?;
    let out = disc.forward(g, bound, both, ForwardMode::Train)?;
    let ct = g.slice_batch(out.critic, 0, nt)?;
    let cn = g.slice_batch(out.critic, nt, nn)?;
    let gap = critic_gap(g, ct, cn)?;
    let x_hat = interpolate(g, x_t, x_n, rng)?;
    let penalty = disc.gradient_penalty(g, bound, x_hat, lambda)?;
    let total = g.add(gap, penalty)?;
    Ok((WassersteinLoss { total, critic_gap: gap, penalty }, out.stats))
}

/// One discriminator mini-batch: positives, their transformations and
/// pseudo-negatives, each with targets.
pub struct DiscBatch<'a> {
    pub positives: &'a Tensor,
    pub positive_targets: &'a [Target],
    pub transformed: &'a Tensor,
    pub negatives: &'a Tensor,
    pub negative_targets: &'a [Target],
}

pub struct Objective {
    pub total: Var,
    pub classification: Var,
    pub critic_gap: Var,
    pub penalty: Var,
    pub stats: Vec<BnStats>,
}

/// `J(θ) + D(θ, ω)` over one mini-batch, as a single scalar for a joint step.
pub fn combined_objective(
    g: &mut Graph,
    disc: &Discriminator,
    bound: &[Var],
    batch: &DiscBatch<'_>,
    lambda: f64,
    critic_weight: f64,
    rng: &mut impl Rng,
) -> Result<Objective> {
    let np = batch.positives.dims4()?.0;
    let nt = batch.transformed.dims4()?.0;
    let nn = batch.negatives.dims4()?.0;
    if nt == 0 || nn == 0 {
        return Err(Error::Argument("combined objective needs transformed positives and pseudo-negatives".into()));
    }
    let xp = g.constant(batch.positives.clone());
    let xt = g.constant(batch.transformed.clone());
    let xn = g.constant(batch.negatives.clone());
    let all = g.concat(&[xp, xt, xn])?;
    let out = disc.forward(g, bound, all, ForwardMode::Train)?;
    let mut targets = Vec::with_capacity(np + nt + nn);
    targets.extend_from_slice(batch.positive_targets);
    targets.extend_from_slice(&batch.positive_targets[..nt.min(batch.positive_targets.len())]);
    targets.extend_from_slice(batch.negative_targets);
    let classification = classification_loss(g, out.logits, &targets, disc.config.mode, disc.config.num_classes)?;
    let ct = g.slice_batch(out.critic, np, nt)?;
    let cn = g.slice_batch(out.critic, np + nt, nn)?;
    let gap = critic_gap(g, ct, cn)?;
    let x_hat = interpolate(g, xt, xn, rng)?;
    let penalty = disc.gradient_penalty(g, bound, x_hat, lambda)?;
    let w = g.add(gap, penalty)?;
    let w = if critic_weight == 1.0 { w } else { g.scale(w, critic_weight) };
    let total = g.add(classification, w)?;
    Ok(Objective { total, classification, critic_gap: gap, penalty, stats: out.stats })
}
