//! Datasets: IDX loading, class-balanced subsampling, random affine
//! augmentation, the frozen perturbed test set, synthetic toys and the exact
//! discrete introspective update.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::spatial::{apply_affine, apply_affine_resized, AffineParams};
use crate::tensor::Tensor;

/// Images in `[0, 1]` with integer labels. `indices` identify each sample in
/// the source it was drawn from, so splits can be checked for overlap.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub indices: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let n = labels.len();
        let ds = Self { images, labels, num_classes, indices: (0..n).collect() };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.images.dims4()?.0;
        if n != self.labels.len() || n != self.indices.len() {
            return Err(Error::Consistency(format!(
                "{} images, {} labels, {} indices",
                n,
                self.labels.len(),
                self.indices.len()
            )));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::Label(format!("label {} with {} classes", y, self.num_classes)));
        }
        if self.images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Argument("pixel outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[3]
    }

    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        Ok(Self {
            images: self.images.select_rows(rows)?,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            num_classes: self.num_classes,
            indices: rows.iter().map(|&r| self.indices[r]).collect(),
        })
    }

    /// Random disjoint split into `(rest, held_out)` with `held_out` samples
    /// in the second part.
    pub fn split(&self, held_out: usize, seed: u64) -> Result<(Self, Self)> {
        if held_out > self.len() {
            return Err(Error::Argument(format!("cannot hold out {} of {}", held_out, self.len())));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (a, b) = order.split_at(self.len() - held_out);
        let (mut a, mut b) = (a.to_vec(), b.to_vec());
        a.sort_unstable();
        b.sort_unstable();
        Ok((self.select(&a)?, self.select(&b)?))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        self.labels.iter().for_each(|&y| c[y] += 1);
        c
    }

    /// Replaces the images through `f`, keeping labels and indices.
    pub fn map_images(&self, f: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<Self> {
        let images = f(&self.images)?;
        let ds = Self { images, labels: self.labels.clone(), num_classes: self.num_classes, indices: self.indices.clone() };
        ds.validate()?;
        Ok(ds)
    }
}

/// Whether two datasets drawn from one source share any sample.
pub fn disjoint(a: &LabeledDataset, b: &LabeledDataset) -> bool {
    let set: std::collections::HashSet<usize> = a.indices.iter().copied().collect();
    !b.indices.iter().any(|i| set.contains(i))
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Length(format!("header truncated at byte {}", at)))
}

/// Parses an IDX image file (magic `0x00000803`) into `[N, 1, H, W]` in `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = be_u32(bytes, 0)?;
    if magic != 0x0803 {
        return Err(Error::Format(format!("image file magic {:#010x}, expected 0x00000803", magic)));
    }
    let (n, h, w) = (be_u32(bytes, 4)? as usize, be_u32(bytes, 8)? as usize, be_u32(bytes, 12)? as usize);
    let payload = &bytes[16..];
    let need = n * h * w;
    if payload.len() < need {
        return Err(Error::Length(format!("image payload has {} bytes, header declares {}", payload.len(), need)));
    }
    Tensor::new(&[n, 1, h, w], payload[..need].iter().map(|&b| b as f64 / 255.0).collect())
}

/// Parses an IDX label file (magic `0x00000801`).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != 0x0801 {
        return Err(Error::Format(format!("label file magic {:#010x}, expected 0x00000801", magic)));
    }
    let n = be_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return Err(Error::Length(format!("label payload has {} bytes, header declares {}", payload.len(), n)));
    }
    Ok(payload[..n].iter().map(|&b| b as usize).collect())
}

/// Loads a pair of IDX files. The class count is one past the largest label.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let images = parse_idx_images(&std::fs::read(images_path)?)?;
    let labels = parse_idx_labels(&std::fs::read(labels_path)?)?;
    if images.shape()[0] != labels.len() {
        return Err(Error::Consistency(format!("{} images but {} labels", images.shape()[0], labels.len())));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    LabeledDataset::new(images, labels, k)
}

/// Class-balanced random subset with `floor(fraction · N / K)` samples per
/// class, in shuffled order.
pub fn subsample(ds: &LabeledDataset, fraction: f64, seed: u64) -> Result<LabeledDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Argument(format!("fraction must lie in (0, 1], got {}", fraction)));
    }
    let k = ds.num_classes.max(1);
    let per_class = (fraction * ds.len() as f64 / k as f64 + 1e-9).floor() as usize;
    if per_class == 0 {
        return Err(Error::Argument(format!("fraction {} leaves no samples per class", fraction)));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in ds.labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(per_class * k);
    for c in 0..ds.num_classes {
        let mut members = by_class.remove(&c).unwrap_or_default();
        if members.len() < per_class {
            return Err(Error::Argument(format!("class {} has {} samples, {} requested", c, members.len(), per_class)));
        }
        members.shuffle(&mut rng);
        rows.extend_from_slice(&members[..per_class]);
    }
    rows.shuffle(&mut rng);
    ds.select(&rows)
}

/// Half-widths of the uniform ranges for random affine maps. Translation is
/// a fraction of the canvas side.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentRanges {
    pub rotation_deg: f64,
    pub translation: f64,
    pub scale: f64,
    pub shear: f64,
}

impl AugmentRanges {
    pub const ZERO: Self = Self { rotation_deg: 0.0, translation: 0.0, scale: 0.0, shear: 0.0 };

    /// Rotation ±20°, translation ±20%, scale 0.8 to 1.2, shear ±0.2.
    pub fn perturbed_default() -> Self {
        Self { rotation_deg: 20.0, translation: 0.2, scale: 0.2, shear: 0.2 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.rotation_deg, self.translation, self.scale, self.shear].iter().all(|v| v.is_finite() && *v >= 0.0);
        if !ok || self.scale >= 1.0 {
            return Err(Error::Argument(format!("invalid augmentation ranges {:?}", self)));
        }
        Ok(())
    }

    /// Ranges covering the `percentile` of each factor of the given affine
    /// maps, factored as `A = R(θ) · [[s_x, h], [0, s_y]]` plus translation.
    pub fn from_affines(maps: &[[f64; 6]], percentile: f64) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::Argument("no affine maps to derive ranges from".into()));
        }
        let mut rot = Vec::new();
        let mut tr = Vec::new();
        let mut sc = Vec::new();
        let mut sh = Vec::new();
        for m in maps {
            let f = AffineFactors::of(m);
            rot.push(f.rotation.abs().to_degrees());
            tr.push(f.tx.abs().max(f.ty.abs()) / 2.0);
            sc.push((f.sx - 1.0).abs().max((f.sy - 1.0).abs()));
            sh.push(f.shear.abs());
        }
        let r = Self {
            rotation_deg: percentile_of(&mut rot, percentile),
            translation: percentile_of(&mut tr, percentile),
            scale: percentile_of(&mut sc, percentile).min(0.95),
            shear: percentile_of(&mut sh, percentile),
        };
        r.validate()?;
        Ok(r)
    }
}

fn percentile_of(v: &mut [f64], p: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = ((p / 100.0) * (v.len() - 1) as f64).round() as usize;
    v[k.min(v.len() - 1)]
}

/// Rotation/upper-triangular factorization of an affine map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineFactors {
    pub rotation: f64,
    pub sx: f64,
    pub sy: f64,
    pub shear: f64,
    pub tx: f64,
    pub ty: f64,
}

impl AffineFactors {
    /// Factors `m = [a, b, tx, c, d, ty]`; `sy` is reported as a magnitude.
    pub fn of(m: &[f64; 6]) -> Self {
        let (a, b, c, d) = (m[0], m[1], m[3], m[4]);
        let rotation = c.atan2(a);
        let (s, co) = rotation.sin_cos();
        Self { rotation, sx: a.hypot(c), sy: (-s * b + co * d).abs(), shear: co * b + s * d, tx: m[2], ty: m[5] }
    }

    pub fn matrix(&self) -> [f64; 6] {
        let (s, c) = self.rotation.sin_cos();
        [c * self.sx, c * self.shear - s * self.sy, self.tx, s * self.sx, s * self.shear + c * self.sy, self.ty]
    }
}

/// One affine map drawn uniformly from `ranges`, in normalized coordinates.
pub fn random_affine(ranges: &AugmentRanges, rng: &mut impl Rng) -> [f64; 6] {
    let mut u = |w: f64| if w == 0.0 { 0.0 } else { rng.random_range(-w..=w) };
    let rotation = u(ranges.rotation_deg) * PI / 180.0;
    let tx = 2.0 * u(ranges.translation);
    let ty = 2.0 * u(ranges.translation);
    let sx = 1.0 + u(ranges.scale);
    let sy = 1.0 + u(ranges.scale);
    let shear = u(ranges.shear);
    AffineFactors { rotation, sx, sy, shear, tx, ty }.matrix()
}

/// Applies an independent random affine from `ranges` to every sample.
pub fn standard_augment(batch: &Tensor, ranges: &AugmentRanges, rng: &mut impl Rng) -> Result<Tensor> {
    ranges.validate()?;
    let n = batch.dims4()?.0;
    let maps: Vec<[f64; 6]> = (0..n).map(|_| random_affine(ranges, rng)).collect();
    apply_affine(batch, &AffineParams::from_rows(&maps))
}

/// Places every image at the center of a `size × size` zero canvas.
pub fn pad_to(images: &Tensor, size: usize) -> Result<Tensor> {
    let (n, c, h, w) = images.dims4()?;
    if size < h || size < w {
        return Err(Error::Argument(format!("canvas {} smaller than {}×{}", size, h, w)));
    }
    let (top, left) = ((size - h) / 2, (size - w) / 2);
    let mut out = vec![0.0; n * c * size * size];
    let src = images.data();
    for p in 0..n * c {
        for i in 0..h {
            let o = p * size * size + (top + i) * size + left;
            out[o..o + w].copy_from_slice(&src[(p * h + i) * w..(p * h + i + 1) * w]);
        }
    }
    Tensor::new(&[n, c, size, size], out)
}

/// Central `size × size` window of every image.
pub fn center_crop(images: &Tensor, size: usize) -> Result<Tensor> {
    let (n, c, h, w) = images.dims4()?;
    if size > h || size > w || size == 0 {
        return Err(Error::Argument(format!("cannot crop {}×{} to {}", h, w, size)));
    }
    let (top, left) = ((h - size) / 2, (w - size) / 2);
    let src = images.data();
    let mut out = Vec::with_capacity(n * c * size * size);
    for p in 0..n * c {
        for i in 0..size {
            let o = (p * h + top + i) * w + left;
            out.extend_from_slice(&src[o..o + size]);
        }
    }
    Tensor::new(&[n, c, size, size], out)
}

/// 2×2 average pooling (even extents).
pub fn downsample2(images: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = images.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Argument(format!("downsample2 needs even extents, got {}×{}", h, w)));
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = images.data();
    let out = (0..n * c * oh * ow)
        .map(|o| {
            let (p, r) = (o / (oh * ow), o % (oh * ow));
            let (i, j) = (2 * (r / ow), 2 * (r % ow));
            let at = |di: usize, dj: usize| src[(p * h + i + di) * w + j + dj];
            0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1))
        })
        .collect();
    Tensor::new(&[n, c, oh, ow], out)
}

/// Frozen affine-perturbed copy of a test set on a `pad_to` canvas: each image
/// is centered on the canvas and then warped by its own random map.
pub fn make_perturbed_testset(ds: &LabeledDataset, ranges: &AugmentRanges, pad_to_size: usize, seed: u64) -> Result<LabeledDataset> {
    ranges.validate()?;
    let canvas = pad_to(&ds.images, pad_to_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let maps: Vec<[f64; 6]> = (0..ds.len()).map(|_| random_affine(ranges, &mut rng)).collect();
    let warped = apply_affine_resized(&canvas, &AffineParams::from_rows(&maps), pad_to_size, pad_to_size)?;
    ds.map_images(|_| Ok(warped.map(|v| v.clamp(0.0, 1.0))))
}

/// A probability vector over a finite set of bins.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteDistribution {
    p: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() || p.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::Argument("probabilities must be finite and nonnegative".into()));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::Argument(format!("probabilities sum to {}", s)));
        }
        Ok(Self { p })
    }

    /// Normalizes nonnegative weights.
    pub fn from_weights(w: &[f64]) -> Result<Self> {
        let s: f64 = w.iter().sum();
        if !(s > 0.0) {
            return Err(Error::Argument("weights must have positive mass".into()));
        }
        Self::new(w.iter().map(|v| v / s).collect())
    }

    /// Uniform on the simplex (normalized unit exponentials).
    pub fn random(bins: usize, rng: &mut impl Rng) -> Self {
        let w: Vec<f64> = (0..bins).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
        Self::from_weights(&w).expect("exponential weights are positive")
    }

    pub fn probs(&self) -> &[f64] {
        &self.p
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }
}

/// `Σ p log(p/q)` with `0 log 0 = 0`.
pub fn kl_divergence(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Dimension(format!("{} bins against {}", p.len(), q.len())));
    }
    let mut kl = 0.0;
    for (i, (&a, &b)) in p.probs().iter().zip(q.probs()).enumerate() {
        if a > 0.0 {
            if b == 0.0 {
                return Err(Error::Support(format!("bin {} has p > 0 and q = 0", i)));
            }
            kl += a * (a / b).ln();
        }
    }
    Ok(kl)
}

/// One exact introspective step
/// `p_{t+1}(x) = (1/Z_t) · r(x) · p_t(x)` with the classifier ratio
/// `r = (p_pos / p_t)^(2·quality − 1)`, which is uniform at quality 0.5 and
/// the Bayes ratio at quality 1.
pub fn discrete_introspective_update(
    p_pos: &DiscreteDistribution,
    p_t: &DiscreteDistribution,
    quality: f64,
) -> Result<DiscreteDistribution> {
    if !(0.5..=1.0).contains(&quality) {
        return Err(Error::Argument(format!("classifier quality must lie in [0.5, 1], got {}", quality)));
    }
    if p_pos.len() != p_t.len() {
        return Err(Error::Dimension(format!("{} bins against {}", p_pos.len(), p_t.len())));
    }
    let e = 2.0 * quality - 1.0;
    let mut un = Vec::with_capacity(p_t.len());
    for (i, (&a, &b)) in p_pos.probs().iter().zip(p_t.probs()).enumerate() {
        if b == 0.0 {
            if a > 0.0 {
                return Err(Error::Support(format!("bin {} has p_pos > 0 and p_t = 0", i)));
            }
            un.push(0.0);
        } else if e == 0.0 {
            un.push(b);
        } else {
            un.push((a / b).powf(e) * b);
        }
    }
    let z: f64 = un.iter().sum();
    DiscreteDistribution::new(un.iter().map(|v| v / z).collect())
        .or_else(|_| DiscreteDistribution::from_weights(&un))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToyRender {
    /// Coordinates mapped from `[-3, 3]` to `[0, 1]`, as `[N, 2, 1, 1]`.
    Raw,
    /// A Gaussian bump on an 8×8 image, as `[N, 1, 8, 8]`.
    Patch8x8,
}

pub struct Toy2d {
    pub points: Vec<[f64; 2]>,
    pub dataset: LabeledDataset,
}

/// Isotropic Gaussian blobs, one per mean, `n_per_class` points each.
pub fn make_toy2d(n_per_class: usize, means: &[[f64; 2]], std: f64, render: ToyRender, seed: u64) -> Result<Toy2d> {
    if !(std > 0.0) {
        return Err(Error::Argument(format!("std must be positive, got {}", std)));
    }
    if means.len() < 2 {
        return Err(Error::Argument("need at least two classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..n_per_class {
        for (k, m) in means.iter().enumerate() {
            let x = m[0] + std * rng.sample::<f64, _>(StandardNormal);
            let y = m[1] + std * rng.sample::<f64, _>(StandardNormal);
            points.push([x, y]);
            labels.push(k);
        }
    }
    let n = points.len();
    let images = match render {
        ToyRender::Raw => {
            Tensor::from_fn(&[n, 2, 1, 1], |i| ((points[i / 2][i % 2] + 3.0) / 6.0).clamp(0.0, 1.0))
        }
        ToyRender::Patch8x8 => Tensor::from_fn(&[n, 1, 8, 8], |i| {
            let (s, r) = (i / 64, i % 64);
            let (row, col) = ((r / 8) as f64, (r % 8) as f64);
            let cx = ((points[s][0] + 2.0) / 4.0 * 7.0).clamp(0.0, 7.0);
            let cy = ((2.0 - points[s][1]) / 4.0 * 7.0).clamp(0.0, 7.0);
            (-((row - cy).powi(2) + (col - cx).powi(2)) / 2.0).exp()
        }),
    };
    Ok(Toy2d { points, dataset: LabeledDataset::new(images, labels, means.len())? })
}
