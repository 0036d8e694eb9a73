//! Differentiable affine spatial transformer and the transformation-parameter
//! predictor.
//!
//! Coordinates are normalized so the image frame spans `[-1, 1]` on both
//! axes, with `-1` and `1` at the centers of the border pixels. Samples that
//! fall outside the frame read zeros.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::{Backward, Graph, Var};
use crate::optim::ParamStore;
use crate::tensor::Tensor;

pub const IDENTITY_AFFINE: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

/// Per-sample 2×3 affine matrices stored as `[N, 2, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineParams(Tensor);

impl AffineParams {
    pub fn new(matrices: Tensor) -> Result<Self> {
        match matrices.shape() {
            [_, 2, 3] => Ok(Self(matrices)),
            [n, 6] => Ok(Self(matrices.reshape(&[*n, 2, 3])?)),
            s => Err(Error::Dimension(format!("affine parameters must be [N,2,3], got {:?}", s))),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self(Tensor::from_fn(&[n, 2, 3], |i| IDENTITY_AFFINE[i % 6]))
    }

    pub fn from_rows(rows: &[[f64; 6]]) -> Self {
        let data = rows.iter().flatten().copied().collect();
        Self(Tensor::new(&[rows.len(), 2, 3], data).expect("rows are 6 wide"))
    }

    pub fn len(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn matrix(&self, i: usize) -> [f64; 6] {
        let mut m = [0.0; 6];
        m.copy_from_slice(&self.0.data()[i * 6..(i + 1) * 6]);
        m
    }
}

/// Normalized target coordinate of index `i` on an axis of `extent` sites.
fn lattice(i: usize, extent: usize) -> f64 {
    if extent <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (extent - 1) as f64
    }
}

struct AffineGridRule {
    h: usize,
    w: usize,
}

impl Backward for AffineGridRule {
    fn name(&self) -> &str {
        "affine_grid"
    }
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let n = x[0].shape()[0];
        let mut d = vec![0.0; n * 6];
        let gd = g.data();
        for s in 0..n {
            let dt = &mut d[s * 6..(s + 1) * 6];
            for i in 0..self.h {
                let yv = lattice(i, self.h);
                for j in 0..self.w {
                    let xv = lattice(j, self.w);
                    let o = ((s * self.h + i) * self.w + j) * 2;
                    let (gx, gy) = (gd[o], gd[o + 1]);
                    dt[0] += gx * xv;
                    dt[1] += gx * yv;
                    dt[2] += gx;
                    dt[3] += gy * xv;
                    dt[4] += gy * yv;
                    dt[5] += gy;
                }
            }
        }
        Ok(vec![Some(Tensor::new(x[0].shape(), d)?)])
    }
}

/// Snapped bilinear cell: base index and fractional offset along one axis.
#[inline]
fn cell(p: f64) -> (isize, f64) {
    let f = p.floor();
    let t = p - f;
    if t < 1e-9 {
        (f as isize, 0.0)
    } else if t > 1.0 - 1e-9 {
        (f as isize + 1, 0.0)
    } else {
        (f as isize, t)
    }
}

struct Bilinear {
    h: usize,
    w: usize,
}

impl Bilinear {
    #[inline]
    fn at(&self, plane: &[f64], y: isize, x: isize) -> f64 {
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            0.0
        } else {
            plane[y as usize * self.w + x as usize]
        }
    }

    #[inline]
    fn source(&self, gx: f64, gy: f64) -> (f64, f64) {
        ((gx + 1.0) * 0.5 * (self.w as f64 - 1.0), (gy + 1.0) * 0.5 * (self.h as f64 - 1.0))
    }
}

struct BilinearRule;

impl Backward for BilinearRule {
    fn name(&self) -> &str {
        "bilinear_sample"
    }
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (n, c, h, w) = x[0].dims4()?;
        let (oh, ow) = (x[1].shape()[1], x[1].shape()[2]);
        let bl = Bilinear { h, w };
        let img = x[0].data();
        let grid = x[1].data();
        let gd = g.data();
        let mut dimg = vec![0.0; img.len()];
        let mut dgrid = vec![0.0; grid.len()];
        let sx = 0.5 * (w as f64 - 1.0);
        let sy = 0.5 * (h as f64 - 1.0);
        for s in 0..n {
            for i in 0..oh {
                for j in 0..ow {
                    let o = ((s * oh + i) * ow + j) * 2;
                    let (px, py) = bl.source(grid[o], grid[o + 1]);
                    let (x0, tx) = cell(px);
                    let (y0, ty) = cell(py);
                    let (mut dpx, mut dpy) = (0.0, 0.0);
                    for ch in 0..c {
                        let base = (s * c + ch) * h * w;
                        let plane = &img[base..base + h * w];
                        let go = gd[((s * c + ch) * oh + i) * ow + j];
                        if go == 0.0 {
                            continue;
                        }
                        let v00 = bl.at(plane, y0, x0);
                        let v01 = bl.at(plane, y0, x0 + 1);
                        let v10 = bl.at(plane, y0 + 1, x0);
                        let v11 = bl.at(plane, y0 + 1, x0 + 1);
                        dpx += go * ((1.0 - ty) * (v01 - v00) + ty * (v11 - v10));
                        dpy += go * ((1.0 - tx) * (v10 - v00) + tx * (v11 - v01));
                        for (dy, dx, wgt) in [
                            (0, 0, (1.0 - tx) * (1.0 - ty)),
                            (0, 1, tx * (1.0 - ty)),
                            (1, 0, (1.0 - tx) * ty),
                            (1, 1, tx * ty),
                        ] {
                            let (yy, xx) = (y0 + dy, x0 + dx);
                            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w && wgt != 0.0 {
                                dimg[base + yy as usize * w + xx as usize] += go * wgt;
                            }
                        }
                    }
                    dgrid[o] = dpx * sx;
                    dgrid[o + 1] = dpy * sy;
                }
            }
        }
        Ok(vec![Some(Tensor::new(x[0].shape(), dimg)?), Some(Tensor::new(x[1].shape(), dgrid)?)])
    }
}

impl Graph {
    /// Sampling grid `[N, out_h, out_w, 2]` with
    /// `grid[n, i, j] = θ_n · (x_j, y_i, 1)ᵀ` on the normalized target lattice.
    pub fn affine_grid(&mut self, theta: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let n = match self.value(theta).shape() {
            &[n, 2, 3] => n,
            s => return Err(Error::Dimension(format!("affine_grid: theta must be [N,2,3], got {:?}", s))),
        };
        if out_h == 0 || out_w == 0 {
            return Err(Error::Argument("affine_grid: output extent must be at least 1".into()));
        }
        let t = self.value(theta).data();
        let mut out = vec![0.0; n * out_h * out_w * 2];
        for s in 0..n {
            let m = &t[s * 6..(s + 1) * 6];
            for i in 0..out_h {
                let yv = lattice(i, out_h);
                for j in 0..out_w {
                    let xv = lattice(j, out_w);
                    let o = ((s * out_h + i) * out_w + j) * 2;
                    out[o] = m[0] * xv + m[1] * yv + m[2];
                    out[o + 1] = m[3] * xv + m[4] * yv + m[5];
                }
            }
        }
        let v = Tensor::new(&[n, out_h, out_w, 2], out)?;
        Ok(self.record(&[theta], v, Box::new(AffineGridRule { h: out_h, w: out_w })))
    }

    /// Bilinear interpolation of `image: [N, C, H, W]` at `grid: [N, H', W', 2]`
    /// (`x` first), zero outside the image.
    pub fn bilinear_sample(&mut self, image: Var, grid: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(image).dims4()?;
        let (oh, ow) = match self.value(grid).shape() {
            &[gn, oh, ow, 2] if gn == n => (oh, ow),
            s => {
                return Err(Error::Dimension(format!(
                    "bilinear_sample: grid {:?} does not match image batch {}",
                    s, n
                )))
            }
        };
        let bl = Bilinear { h, w };
        let img = self.value(image).data();
        let gr = self.value(grid).data();
        let mut out = vec![0.0; n * c * oh * ow];
        for s in 0..n {
            for i in 0..oh {
                for j in 0..ow {
                    let o = ((s * oh + i) * ow + j) * 2;
                    let (px, py) = bl.source(gr[o], gr[o + 1]);
                    let (x0, tx) = cell(px);
                    let (y0, ty) = cell(py);
                    for ch in 0..c {
                        let plane = &img[(s * c + ch) * h * w..][..h * w];
                        let mut v = (1.0 - tx) * (1.0 - ty) * bl.at(plane, y0, x0);
                        if tx != 0.0 {
                            v += tx * (1.0 - ty) * bl.at(plane, y0, x0 + 1);
                        }
                        if ty != 0.0 {
                            v += (1.0 - tx) * ty * bl.at(plane, y0 + 1, x0);
                            if tx != 0.0 {
                                v += tx * ty * bl.at(plane, y0 + 1, x0 + 1);
                            }
                        }
                        out[((s * c + ch) * oh + i) * ow + j] = v;
                    }
                }
            }
        }
        let v = Tensor::new(&[n, c, oh, ow], out)?;
        Ok(self.record(&[image, grid], v, Box::new(BilinearRule)))
    }

    /// `T(x; θ)`: affine warp at the input's own resolution.
    pub fn transform(&mut self, image: Var, theta: Var) -> Result<Var> {
        let (_, _, h, w) = self.value(image).dims4()?;
        let grid = self.affine_grid(theta, h, w)?;
        self.bilinear_sample(image, grid)
    }
}

/// Applies fixed affine parameters to a batch outside of any training graph.
pub fn apply_affine(images: &Tensor, params: &AffineParams) -> Result<Tensor> {
    let (n, _, h, w) = images.dims4()?;
    apply_affine_to(images, params, h, w, n)
}

/// Warps `images` onto an `out_h × out_w` canvas.
pub fn apply_affine_resized(images: &Tensor, params: &AffineParams, out_h: usize, out_w: usize) -> Result<Tensor> {
    let n = images.dims4()?.0;
    apply_affine_to(images, params, out_h, out_w, n)
}

fn apply_affine_to(images: &Tensor, params: &AffineParams, out_h: usize, out_w: usize, n: usize) -> Result<Tensor> {
    if params.len() != n {
        return Err(Error::Dimension(format!("{} affine matrices for {} images", params.len(), n)));
    }
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let t = g.constant(params.tensor().clone());
    let grid = g.affine_grid(t, out_h, out_w)?;
    let y = g.bilinear_sample(x, grid)?;
    Ok(g.value(y).clone())
}

/// Architecture of the transformation-parameter predictor `g(x; ψ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub channels: usize,
    pub noise_scale: f64,
    /// Half-width of the per-entry box around the identity that σ is clipped to.
    pub clip: f64,
}

impl PredictorConfig {
    pub fn new(in_channels: usize, image_size: usize) -> Self {
        Self { in_channels, image_size, channels: 16, noise_scale: 0.05, clip: 1.5 }
    }

    fn feature_len(&self) -> usize {
        let s = self.image_size.div_ceil(2).div_ceil(2);
        self.channels * s * s
    }
}

/// Two stride-2 5×5 convolutions with bias and swish, then a fully connected
/// layer emitting six affine entries per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictor {
    pub config: PredictorConfig,
    pub params: ParamStore,
}

const P_CONV1: usize = 0;
const P_BIAS1: usize = 1;
const P_CONV2: usize = 2;
const P_BIAS2: usize = 3;
const P_FC_W: usize = 4;
const P_FC_B: usize = 5;

impl Predictor {
    pub fn new(config: PredictorConfig, rng: &mut impl Rng) -> Self {
        let c = config.channels;
        let mut params = ParamStore::new();
        params.push("predictor.conv1.weight", he_normal(&[c, config.in_channels, 5, 5], rng));
        params.push("predictor.conv1.bias", Tensor::zeros(&[c]));
        params.push("predictor.conv2.weight", he_normal(&[c, c, 5, 5], rng));
        params.push("predictor.conv2.bias", Tensor::zeros(&[c]));
        params.push("predictor.fc.weight", Tensor::zeros(&[config.feature_len(), 6]));
        params.push("predictor.fc.bias", Tensor::new(&[6], IDENTITY_AFFINE.to_vec()).expect("six entries"));
        Self { config, params }
    }

    /// Raw predictor output `g(x; ψ)` as `[N, 6]`.
    pub fn raw(&self, g: &mut Graph, bound: &[Var], x: Var) -> Result<Var> {
        let n = g.value(x).dims4()?.0;
        let h = g.conv2d(x, bound[P_CONV1], 2)?;
        let h = g.channel_bias(h, bound[P_BIAS1])?;
        let h = g.swish(h);
        let h = g.conv2d(h, bound[P_CONV2], 2)?;
        let h = g.channel_bias(h, bound[P_BIAS2])?;
        let h = g.swish(h);
        let len = g.value(h).numel() / n.max(1);
        let h = g.reshape(h, &[n, len])?;
        g.linear(h, bound[P_FC_W], bound[P_FC_B])
    }

    /// `σ = clip(g(x; ψ) + noise)` reshaped to `[N, 2, 3]`, where `noise` is the
    /// already-scaled ζ draw (`[N, 6]`) and clipping is to identity ± `clip`.
    pub fn sigma_with_noise(&self, g: &mut Graph, bound: &[Var], x: Var, noise: &Tensor) -> Result<Var> {
        let raw = self.raw(g, bound, x)?;
        let n = g.value(raw).shape()[0];
        let noise = g.constant(noise.clone());
        let noisy = g.add(raw, noise)?;
        let eye = g.constant(Tensor::from_fn(&[n, 6], |i| IDENTITY_AFFINE[i % 6]));
        let delta = g.sub(noisy, eye)?;
        let clipped = g.clamp(delta, -self.config.clip, self.config.clip);
        let sigma = g.add(clipped, eye)?;
        g.reshape(sigma, &[n, 2, 3])
    }

    /// Draws `noise_scale · ζ`, `ζ ~ N(0, 1)` i.i.d., for `n` samples.
    pub fn draw_noise(&self, n: usize, rng: &mut impl Rng) -> Tensor {
        let k = self.config.noise_scale;
        Tensor::from_fn(&[n, 6], |_| if k == 0.0 { 0.0 } else { k * rng.sample::<f64, _>(StandardNormal) })
    }

    /// `predict_sigma`: evaluates σ for a batch without recording gradients.
    pub fn predict(&self, batch: &Tensor, rng: &mut impl Rng) -> Result<AffineParams> {
        let n = batch.dims4()?.0;
        let noise = self.draw_noise(n, rng);
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let x = g.constant(batch.clone());
        let s = self.sigma_with_noise(&mut g, &bound, x, &noise)?;
        AffineParams::new(g.value(s).clone())
    }
}

/// He-normal initialization for a conv kernel `[K, C, kh, kw]` or a matrix `[D, M]`.
pub fn he_normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let fan_in: usize = match shape {
        [_, c, kh, kw] => c * kh * kw,
        [d, _] => *d,
        _ => shape.iter().product(),
    };
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal))
}
