//! Central finite-difference checks of every differentiable operation and
//! training loss against the reverse-mode gradients of the tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::discriminator::{
    classification_loss, combined_objective, critic_gap, wasserstein_loss, BCnnConfig, DiscBatch, Discriminator, Mode,
    Target,
};
use crate::error::{Error, Result};
use crate::explorer::{exploration_objective_on, ExplorerConfig};
use crate::graph::{Backward, Graph, Var};
use crate::nn::{BnStats, BnStatsMode};
use crate::spatial::{Predictor, PredictorConfig};
use crate::tensor::Tensor;

pub const OP_TOLERANCE: f64 = 1e-4;
pub const LOSS_TOLERANCE: f64 = 1e-3;
/// Coordinates whose analytic and numeric values differ by less than this
/// pass regardless of relative error.
pub const ABS_FLOOR: f64 = 1e-7;
const STEP: f64 = 1e-5;
const COORDS_PER_INPUT: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaseKind {
    Op,
    Loss,
}

impl CaseKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CaseKind::Op => "op",
            CaseKind::Loss => "loss",
        }
    }

    pub fn tolerance(&self) -> f64 {
        match self {
            CaseKind::Op => OP_TOLERANCE,
            CaseKind::Loss => LOSS_TOLERANCE,
        }
    }
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// A function under test together with the point it is checked at.
pub struct Setup {
    pub inputs: Vec<Tensor>,
    pub f: Build,
}

pub struct GradCase {
    pub name: &'static str,
    pub kind: CaseKind,
    setup: fn(&mut ChaCha8Rng) -> Setup,
}

impl GradCase {
    pub fn setup(&self, rng: &mut ChaCha8Rng) -> Setup {
        (self.setup)(rng)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub name: &'static str,
    pub kind: CaseKind,
    pub worst_rel: f64,
    pub worst_abs: f64,
    pub coords: usize,
    pub passed: bool,
}

fn normal(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| scale * rng.sample::<f64, _>(StandardNormal))
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn setup(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> Setup {
    Setup { inputs, f: Box::new(f) }
}

fn unary(rng: &mut ChaCha8Rng, f: fn(&mut Graph, Var) -> Var) -> Setup {
    setup(vec![normal(&[3, 4], 1.0, rng)], move |g, v| Ok(f(g, v[0])))
}

fn tiny_disc(mode: Mode, classes: usize, rng: &mut ChaCha8Rng) -> Discriminator {
    let mut cfg = BCnnConfig::new(1, 6, classes, mode);
    cfg.conv_channels = 3;
    cfg.num_layers = 2;
    let mut d = Discriminator::new(cfg, rng).expect("valid tiny config");
    // Nonzero β and γ away from 1 so every parameter matters.
    for p in d.params.iter_mut() {
        if p.name.contains("beta") || p.name.ends_with("bias") {
            p.value = normal(p.value.shape(), 0.3, rng);
        } else if p.name.contains("gamma") {
            p.value = uniform(p.value.shape(), 0.5, 1.5, rng);
        }
    }
    for r in &mut d.running {
        r.mean.iter_mut().for_each(|m| *m = rng.random_range(-0.2..0.2));
        r.var.iter_mut().for_each(|v| *v = rng.random_range(0.5..2.0));
    }
    d
}

fn disc_inputs(d: &Discriminator) -> Vec<Tensor> {
    d.params.iter().map(|p| p.value.clone()).collect()
}

fn images(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    uniform(&[n, 1, 6, 6], 0.0, 1.0, rng)
}

/// Every registered case. Names are unique.
pub fn registry() -> Vec<GradCase> {
    use CaseKind::{Loss, Op};
    macro_rules! case {
        ($name:expr, $kind:expr, $f:expr) => {
            GradCase { name: $name, kind: $kind, setup: $f }
        };
    }
    vec![
        case!("add", Op, |r| setup(vec![normal(&[3, 4], 1.0, r), normal(&[3, 4], 1.0, r)], |g, v| g.add(v[0], v[1]))),
        case!("sub", Op, |r| setup(vec![normal(&[3, 4], 1.0, r), normal(&[3, 4], 1.0, r)], |g, v| g.sub(v[0], v[1]))),
        case!("mul", Op, |r| setup(vec![normal(&[3, 4], 1.0, r), normal(&[3, 4], 1.0, r)], |g, v| g.mul(v[0], v[1]))),
        case!("scale", Op, |r| unary(r, |g, a| g.scale(a, -1.7))),
        case!("add_scalar", Op, |r| unary(r, |g, a| g.add_scalar(a, 0.3))),
        case!("sigmoid", Op, |r| unary(r, Graph::sigmoid)),
        case!("exp", Op, |r| unary(r, Graph::exp)),
        case!("log", Op, |r| setup(vec![uniform(&[3, 4], 0.5, 2.0, r)], |g, v| Ok(g.log(v[0])))),
        case!("softplus", Op, |r| unary(r, Graph::softplus)),
        case!("square", Op, |r| unary(r, Graph::square)),
        case!("clamp", Op, |r| {
            // Values kept clear of the kinks at ±0.5.
            let x = Tensor::from_fn(&[3, 4], |i| {
                let m = r.random_range(0.0..0.4);
                [m - 0.2, 0.6 + m, -0.6 - m][i % 3]
            });
            setup(vec![x], |g, v| Ok(g.clamp(v[0], -0.5, 0.5)))
        }),
        case!("sum", Op, |r| unary(r, Graph::sum)),
        case!("mean", Op, |r| unary(r, Graph::mean)),
        case!("reshape", Op, |r| setup(vec![normal(&[3, 4], 1.0, r)], |g, v| g.reshape(v[0], &[2, 6]))),
        case!("concat", Op, |r| {
            setup(vec![normal(&[2, 3], 1.0, r), normal(&[1, 3], 1.0, r)], |g, v| g.concat(&[v[0], v[1]]))
        }),
        case!("slice_batch", Op, |r| setup(vec![normal(&[4, 3], 1.0, r)], |g, v| g.slice_batch(v[0], 1, 2))),
        case!("select_rows", Op, |r| setup(vec![normal(&[4, 3], 1.0, r)], |g, v| g.select_rows(v[0], &[3, 0, 3]))),
        case!("pick", Op, |r| setup(vec![normal(&[4, 3], 1.0, r)], |g, v| g.pick(v[0], &[2, 0, 1, 2]))),
        case!("scale_rows", Op, |r| {
            setup(vec![normal(&[3, 2, 2], 1.0, r)], |g, v| g.scale_rows(v[0], &[0.5, -2.0, 1.5]))
        }),
        case!("conv2d", Op, |r| {
            setup(vec![normal(&[2, 2, 7, 7], 1.0, r), normal(&[3, 2, 5, 5], 0.3, r)], |g, v| g.conv2d(v[0], v[1], 2))
        }),
        case!("conv2d_stride1", Op, |r| {
            setup(vec![normal(&[1, 2, 5, 5], 1.0, r), normal(&[2, 2, 5, 5], 0.3, r)], |g, v| g.conv2d(v[0], v[1], 1))
        }),
        case!("batch_norm", Op, |r| {
            let ins = vec![normal(&[3, 2, 3, 3], 1.0, r), uniform(&[2], 0.5, 1.5, r), normal(&[2], 0.5, r)];
            setup(ins, |g, v| Ok(g.batch_norm(v[0], v[1], v[2], &BnStatsMode::Batch)?.0))
        }),
        case!("batch_norm_detached", Op, |r| {
            // Gradient treats the statistics as constants, so only γ and β are checked.
            let x = normal(&[3, 2, 3, 3], 1.0, r);
            let ins = vec![uniform(&[2], 0.5, 1.5, r), normal(&[2], 0.5, r)];
            setup(ins, move |g, v| {
                let x = g.constant(x.clone());
                Ok(g.batch_norm(x, v[0], v[1], &BnStatsMode::BatchDetached)?.0)
            })
        }),
        case!("batch_norm_fixed", Op, |r| {
            let stats = BnStats { mean: vec![0.2, -0.1], var: vec![0.7, 1.9], count: 0 };
            let ins = vec![normal(&[2, 2, 3, 3], 1.0, r), uniform(&[2], 0.5, 1.5, r), normal(&[2], 0.5, r)];
            setup(ins, move |g, v| Ok(g.batch_norm(v[0], v[1], v[2], &BnStatsMode::Fixed(stats.clone()))?.0))
        }),
        case!("linear", Op, |r| {
            let ins = vec![normal(&[3, 5], 1.0, r), normal(&[5, 4], 0.5, r), normal(&[4], 0.5, r)];
            setup(ins, |g, v| g.linear(v[0], v[1], v[2]))
        }),
        case!("swish", Op, |r| unary(r, Graph::swish)),
        case!("channel_bias", Op, |r| {
            setup(vec![normal(&[2, 3, 2, 2], 1.0, r), normal(&[3], 1.0, r)], |g, v| g.channel_bias(v[0], v[1]))
        }),
        case!("log_softmax", Op, |r| setup(vec![normal(&[3, 4], 2.0, r)], |g, v| g.log_softmax(v[0]))),
        case!("affine_grid", Op, |r| setup(vec![normal(&[2, 2, 3], 1.0, r)], |g, v| g.affine_grid(v[0], 3, 4))),
        case!("bilinear_sample", Op, |r| {
            let ins = vec![uniform(&[2, 2, 4, 5], 0.0, 1.0, r), uniform(&[2, 3, 3, 2], -1.2, 1.2, r)];
            setup(ins, |g, v| g.bilinear_sample(v[0], v[1]))
        }),
        case!("spatial_transform", Op, |r| {
            let theta = Tensor::from_fn(&[2, 2, 3], |i| [1.0, 0.0, 0.0, 0.0, 1.0, 0.0][i % 6] + 0.2 * r.random::<f64>());
            setup(vec![uniform(&[2, 1, 5, 5], 0.0, 1.0, r), theta], |g, v| g.transform(v[0], v[1]))
        }),
        case!("predictor_sigma", Op, |r| {
            let mut cfg = PredictorConfig::new(1, 6);
            cfg.channels = 3;
            let mut p = Predictor::new(cfg, r);
            p.params.find_mut("predictor.fc.weight").expect("fc weight").value = normal(&[12, 6], 0.05, r);
            let x = images(2, r);
            let noise = p.draw_noise(2, r);
            let ins = p.params.iter().map(|q| q.value.clone()).collect();
            setup(ins, move |g, v| {
                let x = g.constant(x.clone());
                p.sigma_with_noise(g, v, x, &noise)
            })
        }),
        case!("discriminator_forward", Op, |r| {
            let d = tiny_disc(Mode::Multiclass, 3, r);
            let mut ins = disc_inputs(&d);
            ins.push(images(3, r));
            setup(ins, move |g, v| {
                let n = v.len() - 1;
                let out = d.forward(g, &v[..n], v[n], crate::discriminator::ForwardMode::Train)?;
                let l = g.reshape(out.logits, &[9])?;
                let c = g.reshape(out.critic, &[3])?;
                g.concat(&[l, c])
            })
        }),
        case!("classification_loss_binary", Loss, |r| {
            let targets = [Target::Class(1), Target::Class(0), Target::PseudoNegative(0), Target::Class(1)];
            setup(vec![normal(&[4, 1], 2.0, r)], move |g, v| classification_loss(g, v[0], &targets, Mode::Binary, 2))
        }),
        case!("classification_loss_multiclass", Loss, |r| {
            let targets = [Target::Class(2), Target::Class(0), Target::PseudoNegative(1), Target::PseudoNegative(2)];
            setup(vec![normal(&[4, 3], 2.0, r)], move |g, v| classification_loss(g, v[0], &targets, Mode::Multiclass, 3))
        }),
        case!("critic_gap", Loss, |r| {
            setup(vec![normal(&[3, 1], 1.0, r), normal(&[2, 1], 1.0, r)], |g, v| critic_gap(g, v[0], v[1]))
        }),
        case!("gradient_penalty", Loss, |r| {
            let d = tiny_disc(Mode::Multiclass, 3, r);
            let mut ins = disc_inputs(&d);
            ins.push(images(3, r));
            setup(ins, move |g, v| {
                let n = v.len() - 1;
                d.gradient_penalty(g, &v[..n], v[n], 10.0)
            })
        }),
        case!("gradient_penalty_single", Loss, |r| {
            let d = tiny_disc(Mode::Binary, 2, r);
            let mut ins = disc_inputs(&d);
            ins.push(images(1, r));
            setup(ins, move |g, v| {
                let n = v.len() - 1;
                d.gradient_penalty(g, &v[..n], v[n], 10.0)
            })
        }),
        case!("wasserstein_loss", Loss, |r| {
            let d = tiny_disc(Mode::Multiclass, 3, r);
            let mut ins = disc_inputs(&d);
            ins.push(images(3, r));
            ins.push(images(2, r));
            setup(ins, move |g, v| {
                let n = v.len() - 2;
                let mut eps = ChaCha8Rng::seed_from_u64(11);
                Ok(wasserstein_loss(g, &d, &v[..n], v[n], v[n + 1], 10.0, &mut eps)?.0.total)
            })
        }),
        case!("combined_objective_binary", Loss, |r| combined_setup(Mode::Binary, 2, r)),
        case!("combined_objective_multiclass", Loss, |r| combined_setup(Mode::Multiclass, 3, r)),
        case!("exploration_objective", Loss, |r| exploration_setup(false, r)),
        case!("exploration_objective_full", Loss, |r| exploration_setup(true, r)),
    ]
}

fn combined_setup(mode: Mode, classes: usize, r: &mut ChaCha8Rng) -> Setup {
    let d = tiny_disc(mode, classes, r);
    let pos = images(2, r);
    let trans = images(2, r);
    let neg = images(2, r);
    let pos_t = [Target::Class(1), Target::Class(classes - 1)];
    let neg_t = [Target::PseudoNegative(0), Target::PseudoNegative(if mode == Mode::Binary { 0 } else { 1 })];
    let ins = disc_inputs(&d);
    setup(ins, move |g, v| {
        let batch = DiscBatch {
            positives: &pos,
            positive_targets: &pos_t,
            transformed: &trans,
            negatives: &neg,
            negative_targets: &neg_t,
        };
        let mut eps = ChaCha8Rng::seed_from_u64(5);
        Ok(combined_objective(g, &d, v, &batch, 10.0, 0.5, &mut eps)?.total)
    })
}

fn exploration_setup(full: bool, r: &mut ChaCha8Rng) -> Setup {
    let mut d = tiny_disc(Mode::Multiclass, 3, r);
    d.running.iter_mut().for_each(|s| s.count = 10);
    let mut cfg = PredictorConfig::new(1, 6);
    cfg.channels = 3;
    let mut p = Predictor::new(cfg, r);
    p.params.find_mut("predictor.fc.weight").expect("fc weight").value = normal(&[12, 6], 0.05, r);
    let x = images(3, r);
    let labels = vec![0, 2, 1];
    let noise = p.draw_noise(3, r);
    let negatives = images(3, r);
    let config = ExplorerConfig { use_full_objective: full, ..ExplorerConfig::default() };
    let ins = p.params.iter().map(|q| q.value.clone()).collect();
    setup(ins, move |g, v| {
        let mut eps = ChaCha8Rng::seed_from_u64(3);
        exploration_objective_on(g, v, &p, &d, &x, &labels, &noise, Some(&negatives), &config, &mut eps)
    })
}

/// Identity in the forward pass with a skewed backward pass, used to confirm
/// that the suite catches a broken rule.
struct Skewed;

impl Backward for Skewed {
    fn name(&self) -> &str {
        "skewed"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(g.scale(1.5))])
    }
}

fn scalar_output(f: &Build, g: &mut Graph, vars: &[Var], proj: &mut Option<Tensor>, corrupt: bool, seed: u64) -> Result<Var> {
    let mut out = f(g, vars)?;
    if corrupt {
        let v = g.value(out).clone();
        out = g.record(&[out], v, Box::new(Skewed));
    }
    if g.value(out).numel() == 1 {
        let shape = g.value(out).shape().to_vec();
        return if shape.is_empty() { Ok(out) } else { Ok(g.sum(out)) };
    }
    let p = proj
        .get_or_insert_with(|| {
            let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
            normal(g.value(out).shape(), 1.0, &mut r)
        })
        .clone();
    let p = g.constant(p);
    let m = g.mul(out, p)?;
    Ok(g.sum(m))
}

fn evaluate(f: &Build, inputs: &[Tensor], proj: &mut Option<Tensor>, seed: u64) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let s = scalar_output(f, &mut g, &vars, proj, false, seed)?;
    g.value(s).item()
}

/// Compares analytic and central-difference gradients of one case on a
/// random subset of coordinates of every input.
pub fn check(case: &GradCase, seed: u64, corrupt: bool) -> Result<CaseReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let setup = case.setup(&mut rng);
    let mut proj = None;

    let mut g = Graph::new();
    let vars: Vec<Var> = setup.inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let s = scalar_output(&setup.f, &mut g, &vars, &mut proj, corrupt, seed)?;
    g.backward(s)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();

    let tol = case.kind.tolerance();
    let mut report = CaseReport { name: case.name, kind: case.kind, worst_rel: 0.0, worst_abs: 0.0, coords: 0, passed: true };
    let mut inputs = setup.inputs.clone();
    for k in 0..inputs.len() {
        let numel = inputs[k].numel();
        let coords: Vec<usize> = if numel <= COORDS_PER_INPUT {
            (0..numel).collect()
        } else {
            (0..COORDS_PER_INPUT).map(|_| rng.random_range(0..numel)).collect()
        };
        for c in coords {
            let x0 = inputs[k].data()[c];
            inputs[k].data_mut()[c] = x0 + STEP;
            let fp = evaluate(&setup.f, &inputs, &mut proj, seed)?;
            inputs[k].data_mut()[c] = x0 - STEP;
            let fm = evaluate(&setup.f, &inputs, &mut proj, seed)?;
            inputs[k].data_mut()[c] = x0;
            let numeric = (fp - fm) / (2.0 * STEP);
            let a = analytic[k].data()[c];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::Numeric(format!("{}: non-finite gradient at input {} coord {}", case.name, k, c)));
            }
            let abs = (a - numeric).abs();
            report.coords += 1;
            report.worst_abs = report.worst_abs.max(abs);
            if abs > ABS_FLOOR {
                let rel = abs / a.abs().max(numeric.abs());
                report.worst_rel = report.worst_rel.max(rel);
                if rel >= tol {
                    report.passed = false;
                }
            }
        }
    }
    Ok(report)
}

/// Runs every registered case; `corrupt` names a case whose backward pass is
/// deliberately skewed.
pub fn run_all(seed: u64, corrupt: Option<&str>) -> Result<Vec<CaseReport>> {
    let cases = registry();
    if let Some(name) = corrupt {
        if !cases.iter().any(|c| c.name == name) {
            return Err(Error::Argument(format!("no gradient case named `{}`", name)));
        }
    }
    cases.iter().map(|c| check(c, seed, corrupt == Some(c.name))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut names: Vec<_> = registry().iter().map(|c| c.name).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    #[test]
    fn skewed_rule_is_caught() {
        let cases = registry();
        let swish = cases.iter().find(|c| c.name == "swish").unwrap();
        assert!(check(swish, 1, false).unwrap().passed);
        let bad = check(swish, 1, true).unwrap();
        assert!(!bad.passed);
        assert!((bad.worst_rel - 1.0 / 3.0).abs() < 1e-3);
    }
}
