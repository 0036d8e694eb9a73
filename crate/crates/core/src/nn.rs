//! Layer primitives: same-padded convolution, batch normalization, fully
//! connected layers, swish and log-softmax.

use crate::error::{Error, Result};
use crate::graph::{sigmoid, Backward, Graph, Var};
use crate::tensor::Tensor;

/// Dense matrix product `c = op(a) · op(b) (+ c)` on row-major buffers,
/// where `op` optionally transposes. `a` is `m×k` after `op`, `b` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index reachable from the given
    // dimensions and strides within the three slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a zero-padded "same" convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize) -> Result<Self> {
        let (n, c, h, w) = match input {
            &[n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::Dimension(format!("conv2d input must be [N,C,H,W], got {:?}", input))),
        };
        let (k, kc, kh, kw) = match kernel {
            &[k, kc, kh, kw] => (k, kc, kh, kw),
            _ => return Err(Error::Dimension(format!("conv2d kernel must be [K,C,kh,kw], got {:?}", kernel))),
        };
        if kc != c {
            return Err(Error::Dimension(format!("conv2d: input has {} channels, kernel expects {}", c, kc)));
        }
        if stride == 0 {
            return Err(Error::Argument("conv2d stride must be at least 1".into()));
        }
        if h == 0 || w == 0 {
            return Err(Error::Dimension("conv2d input has an empty spatial extent".into()));
        }
        let oh = h.div_ceil(stride);
        let ow = w.div_ceil(stride);
        let pad_h = ((oh - 1) * stride + kh).saturating_sub(h);
        let pad_w = ((ow - 1) * stride + kw).saturating_sub(w);
        Ok(Self { n, c, h, w, k, kh, kw, stride, oh, ow, pad_top: pad_h / 2, pad_left: pad_w / 2 })
    }

    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.n * self.oh * self.ow
    }

    /// Source pixel for output site `(o, kernel tap)` along one axis.
    #[inline]
    fn src(o: usize, tap: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let p = (o * stride + tap) as isize - pad as isize;
        (p >= 0 && (p as usize) < extent).then_some(p as usize)
    }

    /// Unfolds the input into a `[C·kh·kw, N·OH·OW]` matrix.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let cols = self.cols();
        let mut out = vec![0.0; self.patch_len() * cols];
        for c in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let dst = &mut out[row * cols..(row + 1) * cols];
                    for n in 0..self.n {
                        let plane = &x[(n * self.c + c) * self.h * self.w..][..self.h * self.w];
                        for oy in 0..self.oh {
                            let Some(sy) = Self::src(oy, i, self.stride, self.pad_top, self.h) else { continue };
                            let base = (n * self.oh + oy) * self.ow;
                            for ox in 0..self.ow {
                                if let Some(sx) = Self::src(ox, j, self.stride, self.pad_left, self.w) {
                                    dst[base + ox] = plane[sy * self.w + sx];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`ConvGeometry::im2col`].
    fn col2im(&self, cols_mat: &[f64]) -> Vec<f64> {
        let cols = self.cols();
        let mut x = vec![0.0; self.n * self.c * self.h * self.w];
        for c in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let src = &cols_mat[row * cols..(row + 1) * cols];
                    for n in 0..self.n {
                        let plane = &mut x[(n * self.c + c) * self.h * self.w..][..self.h * self.w];
                        for oy in 0..self.oh {
                            let Some(sy) = Self::src(oy, i, self.stride, self.pad_top, self.h) else { continue };
                            let base = (n * self.oh + oy) * self.ow;
                            for ox in 0..self.ow {
                                if let Some(sx) = Self::src(ox, j, self.stride, self.pad_left, self.w) {
                                    plane[sy * self.w + sx] += src[base + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        x
    }

    /// `[K, N·OH·OW]` → `[N, K, OH, OW]`.
    fn kmajor_to_nchw(&self, m: &[f64]) -> Vec<f64> {
        let plane = self.oh * self.ow;
        let mut out = vec![0.0; self.n * self.k * plane];
        for k in 0..self.k {
            for n in 0..self.n {
                out[(n * self.k + k) * plane..][..plane].copy_from_slice(&m[k * self.cols() + n * plane..][..plane]);
            }
        }
        out
    }

    fn nchw_to_kmajor(&self, t: &[f64]) -> Vec<f64> {
        let plane = self.oh * self.ow;
        let mut out = vec![0.0; self.k * self.cols()];
        for k in 0..self.k {
            for n in 0..self.n {
                out[k * self.cols() + n * plane..][..plane].copy_from_slice(&t[(n * self.k + k) * plane..][..plane]);
            }
        }
        out
    }
}

/// Forward convolution on raw buffers.
pub fn conv2d_forward(input: &Tensor, kernel: &Tensor, stride: usize) -> Result<Tensor> {
    let geo = ConvGeometry::new(input.shape(), kernel.shape(), stride)?;
    let cols = geo.im2col(input.data());
    let mut out = vec![0.0; geo.k * geo.cols()];
    gemm(geo.k, geo.patch_len(), geo.cols(), kernel.data(), false, &cols, false, &mut out, false);
    Tensor::new(&[geo.n, geo.k, geo.oh, geo.ow], geo.kmajor_to_nchw(&out))
}

struct Conv2dRule {
    geo: ConvGeometry,
}

impl Backward for Conv2dRule {
    fn name(&self) -> &str {
        "conv2d"
    }
    fn backward(&self, x: &[&Tensor], out: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        self.backward_masked(x, out, g, &[true, true])
    }
    fn backward_masked(&self, x: &[&Tensor], _: &Tensor, g: &Tensor, needed: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let geo = &self.geo;
        let gm = geo.nchw_to_kmajor(g.data());
        let dk = if needed[1] {
            let cols = geo.im2col(x[0].data());
            let mut dk = vec![0.0; geo.k * geo.patch_len()];
            gemm(geo.k, geo.cols(), geo.patch_len(), &gm, false, &cols, true, &mut dk, false);
            Some(Tensor::new(x[1].shape(), dk)?)
        } else {
            None
        };
        let dx = if needed[0] {
            let mut dcols = vec![0.0; geo.patch_len() * geo.cols()];
            gemm(geo.patch_len(), geo.k, geo.cols(), x[1].data(), true, &gm, false, &mut dcols, false);
            Some(Tensor::new(x[0].shape(), geo.col2im(&dcols))?)
        } else {
            None
        };
        Ok(vec![dx, dk])
    }
}

/// Per-channel batch statistics (biased variance) and the number of
/// elements each channel was reduced over.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

/// How batch normalization obtains its statistics.
#[derive(Clone, Debug)]
pub enum BnStatsMode {
    /// Statistics of the current batch, differentiated through.
    Batch,
    /// Statistics of the current batch, treated as constants.
    BatchDetached,
    /// Externally supplied statistics (running averages or a frozen batch).
    Fixed(BnStats),
}

pub const BN_EPS: f64 = 1e-5;

struct BatchNormRule {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    through_stats: bool,
    dims: (usize, usize, usize),
}

impl Backward for BatchNormRule {
    fn name(&self) -> &str {
        "batch_norm"
    }
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (n, c, hw) = self.dims;
        let gamma = x[1].data();
        let gd = g.data();
        let m = (n * hw) as f64;
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for ch in 0..c {
            for s in 0..n {
                let off = (s * c + ch) * hw;
                for i in off..off + hw {
                    dgamma[ch] += gd[i] * self.xhat[i];
                    dbeta[ch] += gd[i];
                }
            }
        }
        let mut dx = vec![0.0; gd.len()];
        for ch in 0..c {
            let scale = gamma[ch] * self.inv_std[ch];
            // Σ dxhat = γ·Σdy and Σ dxhat·xhat = γ·Σ dy·xhat.
            let (mean_d, mean_dx) = if self.through_stats { (dbeta[ch] / m, dgamma[ch] / m) } else { (0.0, 0.0) };
            for s in 0..n {
                let off = (s * c + ch) * hw;
                for i in off..off + hw {
                    dx[i] = scale * (gd[i] - mean_d - self.xhat[i] * mean_dx);
                }
            }
        }
        Ok(vec![
            Some(Tensor::new(x[0].shape(), dx)?),
            Some(Tensor::new(&[c], dgamma)?),
            Some(Tensor::new(&[c], dbeta)?),
        ])
    }
}

/// Per-channel mean and biased variance over `N, H, W`.
pub fn channel_stats(x: &Tensor) -> Result<BnStats> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let m = (n * hw) as f64;
    let d = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for i in 0..n {
            s += d[(i * c + ch) * hw..][..hw].iter().sum::<f64>();
        }
        let mu = s / m;
        let mut v = 0.0;
        for i in 0..n {
            v += d[(i * c + ch) * hw..][..hw].iter().map(|x| (x - mu) * (x - mu)).sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = v / m;
    }
    Ok(BnStats { mean, var, count: n * hw })
}

struct LinearRule;

impl Backward for LinearRule {
    fn name(&self) -> &str {
        "fully_connected"
    }
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (n, d) = x[0].dims2()?;
        let (_, m) = x[1].dims2()?;
        let mut dx = vec![0.0; n * d];
        gemm(n, m, d, g.data(), false, x[1].data(), true, &mut dx, false);
        let mut dw = vec![0.0; d * m];
        gemm(d, n, m, x[0].data(), true, g.data(), false, &mut dw, false);
        let mut db = vec![0.0; m];
        for row in g.data().chunks(m.max(1)) {
            db.iter_mut().zip(row).for_each(|(b, v)| *b += v);
        }
        Ok(vec![
            Some(Tensor::new(&[n, d], dx)?),
            Some(Tensor::new(&[d, m], dw)?),
            Some(Tensor::new(&[m], db)?),
        ])
    }
}

struct SwishRule;

impl Backward for SwishRule {
    fn name(&self) -> &str {
        "swish"
    }
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(g.zip_map(x[0], |g, v| {
            let s = sigmoid(v);
            g * (s + v * s * (1.0 - s))
        })?)])
    }
}

struct ChannelBiasRule;

impl Backward for ChannelBiasRule {
    fn name(&self) -> &str {
        "channel_bias"
    }
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (n, c, h, w) = x[0].dims4()?;
        let hw = h * w;
        let mut db = vec![0.0; c];
        for s in 0..n {
            for (ch, b) in db.iter_mut().enumerate() {
                *b += g.data()[(s * c + ch) * hw..][..hw].iter().sum::<f64>();
            }
        }
        Ok(vec![Some(g.clone()), Some(Tensor::new(&[c], db)?)])
    }
}

struct LogSoftmaxRule;

impl Backward for LogSoftmaxRule {
    fn name(&self) -> &str {
        "log_softmax"
    }
    fn backward(&self, _: &[&Tensor], y: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (_, k) = y.dims2()?;
        let mut dx = g.clone();
        for (row, (gr, yr)) in dx.data_mut().chunks_mut(k).zip(y.data().chunks(k)).enumerate() {
            let _ = row;
            let total: f64 = gr.iter().sum();
            gr.iter_mut().zip(yr).for_each(|(d, &ly)| *d -= ly.exp() * total);
        }
        Ok(vec![Some(dx)])
    }
}

/// Row-wise log-softmax of a `[N, K]` matrix.
pub fn log_softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (_, k) = x.dims2()?;
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(k.max(1)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    Ok(out)
}

impl Graph {
    /// Zero-padded "same" convolution: output extent is `ceil(extent / stride)`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        let geo = ConvGeometry::new(self.value(input).shape(), self.value(kernel).shape(), stride)?;
        let v = conv2d_forward(self.value(input), self.value(kernel), stride)?;
        Ok(self.record(&[input, kernel], v, Box::new(Conv2dRule { geo })))
    }

    /// Batch normalization of `[N, C, H, W]` with affine `gamma`, `beta`.
    ///
    /// Returns the output and the statistics it normalized with.
    pub fn batch_norm(&mut self, input: Var, gamma: Var, beta: Var, mode: &BnStatsMode) -> Result<(Var, BnStats)> {
        let (n, c, h, w) = self.value(input).dims4()?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return Err(Error::Dimension(format!(
                    "batch_norm: affine parameter shape {:?}, expected [{}]",
                    self.value(p).shape(),
                    c
                )));
            }
        }
        let stats = match mode {
            BnStatsMode::Batch | BnStatsMode::BatchDetached => {
                if n < 2 {
                    return Err(Error::DegenerateBatch(n));
                }
                channel_stats(self.value(input))?
            }
            BnStatsMode::Fixed(s) => {
                if s.mean.len() != c || s.var.len() != c {
                    return Err(Error::Dimension(format!("batch_norm: statistics for {} channels, input has {}", s.mean.len(), c)));
                }
                s.clone()
            }
        };
        let hw = h * w;
        let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let xd = self.value(input).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * hw;
                for i in off..off + hw {
                    xhat[i] = (xd[i] - stats.mean[ch]) * inv_std[ch];
                    out[i] = gd[ch] * xhat[i] + bd[ch];
                }
            }
        }
        let rule = BatchNormRule { xhat, inv_std, through_stats: matches!(mode, BnStatsMode::Batch), dims: (n, c, hw) };
        let v = Tensor::new(&[n, c, h, w], out)?;
        Ok((self.record(&[input, gamma, beta], v, Box::new(rule)), stats))
    }

    /// `input · weight + bias` for `input: [N, D]`, `weight: [D, M]`, `bias: [M]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.value(input).dims2()?;
        let (d2, m) = self.value(weight).dims2()?;
        if d != d2 || self.value(bias).shape() != [m] {
            return Err(Error::Dimension(format!(
                "fully_connected: input {:?}, weight {:?}, bias {:?}",
                self.value(input).shape(),
                self.value(weight).shape(),
                self.value(bias).shape()
            )));
        }
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(self.value(bias).data());
        }
        gemm(n, d, m, self.value(input).data(), false, self.value(weight).data(), false, &mut out, true);
        let v = Tensor::new(&[n, m], out)?;
        Ok(self.record(&[input, weight, bias], v, Box::new(LinearRule)))
    }

    /// `x · sigmoid(x)`.
    pub fn swish(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.record(&[a], v, Box::new(SwishRule))
    }

    /// Adds a per-channel bias `[C]` to `[N, C, H, W]`.
    pub fn channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (_, c, h, w) = self.value(input).dims4()?;
        if self.value(bias).shape() != [c] {
            return Err(Error::Dimension(format!("channel_bias: bias {:?} for {} channels", self.value(bias).shape(), c)));
        }
        let hw = h * w;
        let b = self.value(bias).data().to_vec();
        let mut v = self.value(input).clone();
        for (i, chunk) in v.data_mut().chunks_mut(hw.max(1)).enumerate() {
            let add = b[i % c];
            chunk.iter_mut().for_each(|x| *x += add);
        }
        Ok(self.record(&[input, bias], v, Box::new(ChannelBiasRule)))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let v = log_softmax_rows(self.value(a))?;
        Ok(self.record(&[a], v, Box::new(LogSoftmaxRule)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct nested-loop "same" convolution.
    fn conv_oracle(x: &Tensor, k: &Tensor, stride: usize) -> Tensor {
        let (n, c, h, w) = x.dims4().unwrap();
        let (ko, _, kh, kw) = k.dims4().unwrap();
        let oh = (h + stride - 1) / stride;
        let ow = (w + stride - 1) / stride;
        let pt = (((oh - 1) * stride + kh).saturating_sub(h)) / 2;
        let pl = (((ow - 1) * stride + kw).saturating_sub(w)) / 2;
        let mut out = Tensor::zeros(&[n, ko, oh, ow]);
        for b in 0..n {
            for o in 0..ko {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let sy = (y * stride + i) as isize - pt as isize;
                                    let sx = (xx * stride + j) as isize - pl as isize;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    acc += x.data()[((b * c + ci) * h + sy as usize) * w + sx as usize]
                                        * k.data()[((o * c + ci) * kh + i) * kw + j];
                                }
                            }
                        }
                        out.data_mut()[((b * ko + o) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64 + 1.0);
        let mut k = Tensor::zeros(&[1, 1, 5, 5]);
        k.data_mut()[12] = 1.0;
        assert_eq!(conv2d_forward(&x, &k, 1).unwrap(), x);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = random(&[3, 2, 5, 5], &mut rng);
        let y = conv2d_forward(&Tensor::zeros(&[2, 2, 6, 6]), &k, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (xs, ks, stride) in [
            ([1, 2, 6, 6], [3, 2, 5, 5], 2),
            ([4, 4, 8, 8], [3, 4, 5, 5], 2),
            ([2, 3, 7, 5], [2, 3, 5, 5], 1),
            ([4, 4, 8, 8], [4, 4, 5, 5], 3),
        ] {
            let x = random(&xs, &mut rng);
            let k = random(&ks, &mut rng);
            let fast = conv2d_forward(&x, &k, stride).unwrap();
            let slow = conv_oracle(&x, &k, stride);
            assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12);
        }
    }

    #[test]
    fn conv_channel_mismatch_is_a_dimension_error() {
        let r = conv2d_forward(&Tensor::zeros(&[1, 2, 4, 4]), &Tensor::zeros(&[1, 3, 5, 5]), 1);
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn twenty_eight_pixels_reduce_to_two_after_four_layers() {
        let mut size = 28;
        for _ in 0..4 {
            size = ConvGeometry::new(&[1, 1, size, size], &[1, 1, 5, 5], 2).unwrap().oh;
        }
        assert_eq!(size, 2);
    }

    #[test]
    fn linear_matches_naive_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 3], &mut rng);
        let w = random(&[3, 4], &mut rng);
        let b = random(&[4], &mut rng);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.linear(xv, wv, bv).unwrap();
        for i in 0..2 {
            for j in 0..4 {
                let mut acc = b.data()[j];
                for k in 0..3 {
                    acc += x.data()[i * 3 + k] * w.data()[k * 4 + j];
                }
                assert!((g.value(y).data()[i * 4 + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_identity_and_zero_input() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
        let eye = g.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let zb = g.constant(Tensor::zeros(&[3]));
        let y = g.linear(x, eye, zb).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let z = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = g.linear(z, eye, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let bad = g.constant(Tensor::zeros(&[4, 3]));
        assert!(g.linear(x, bad, zb).is_err());
    }

    #[test]
    fn swish_values() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[3], vec![0.0, 20.0, 1.0]).unwrap(), true);
        let y = g.swish(x);
        let v = g.value(y).data().to_vec();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 20.0).abs() < 1e-6);
        assert!((v[2] - 0.731_058_578_630_004_9).abs() < 1e-12);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!((g.grad(x).unwrap().data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn batch_norm_normalizes_each_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[5, 3, 4, 4], &mut rng).map(|v| 3.0 * v + 2.0);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let gamma = g.constant(Tensor::ones(&[3]));
        let beta = g.constant(Tensor::zeros(&[3]));
        let (y, _) = g.batch_norm(xv, gamma, beta, &BnStatsMode::Batch).unwrap();
        let stats = channel_stats(g.value(y)).unwrap();
        for c in 0..3 {
            assert!(stats.mean[c].abs() < 1e-10);
            // Unit variance up to the eps in the denominator.
            let expected = 1.0 / (1.0 + BN_EPS / channel_stats(g.value(xv)).unwrap().var[c]);
            assert!((stats.var[c] - expected).abs() < 1e-10);
            assert!((stats.var[c] - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn batch_norm_identity_on_standardized_input() {
        // Two samples per channel at ±1: mean 0, variance 1.
        let x = Tensor::new(&[2, 1, 1, 2], vec![1.0, -1.0, -1.0, 1.0]).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let gamma = g.constant(Tensor::ones(&[1]));
        let beta = g.constant(Tensor::zeros(&[1]));
        let (y, _) = g.batch_norm(xv, gamma, beta, &BnStatsMode::Batch).unwrap();
        assert!(g.value(y).max_abs_diff(&x).unwrap() < 1e-5);
    }

    #[test]
    fn batch_norm_zero_gamma_gives_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let xv = g.constant(random(&[3, 2, 2, 2], &mut rng));
        let gamma = g.constant(Tensor::zeros(&[2]));
        let beta = g.constant(Tensor::new(&[2], vec![0.25, -4.0]).unwrap());
        let (y, _) = g.batch_norm(xv, gamma, beta, &BnStatsMode::Batch).unwrap();
        for (i, v) in g.value(y).data().iter().enumerate() {
            assert_eq!(*v, if (i / 4) % 2 == 0 { 0.25 } else { -4.0 });
        }
    }

    #[test]
    fn batch_norm_rejects_single_sample_in_train_mode() {
        let mut g = Graph::new();
        let xv = g.constant(Tensor::ones(&[1, 2, 3, 3]));
        let gamma = g.constant(Tensor::ones(&[2]));
        let beta = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(g.batch_norm(xv, gamma, beta, &BnStatsMode::Batch), Err(Error::DegenerateBatch(1))));
        let fixed = BnStatsMode::Fixed(BnStats { mean: vec![0.0; 2], var: vec![1.0; 2], count: 0 });
        assert!(g.batch_norm(xv, gamma, beta, &fixed).is_ok());
    }

    #[test]
    fn log_softmax_rows_exponentiate_to_distributions() {
        let x = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, -50.0, 0.0, 50.0]).unwrap();
        let y = log_softmax_rows(&x).unwrap();
        for row in y.data().chunks(3) {
            assert!((row.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
