//! Dataset specs such as `toy`, `mnist-train:fraction=0.01,seed=2,frame=crop`,
//! `perturbed:seed=7` or `file:PATH`, resolved into datasets.
//!
//! Frames bring 28×28 digits to the working resolution: `crop` keeps the
//! central 20×20, `pad` centers the digit on a 40×40 canvas and halves it to
//! 20×20, `full` keeps 28×28.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use itn_core::checkpoint::{dataset_from_container, Container};
use itn_core::data::{center_crop, downsample2, load_idx, make_perturbed_testset, make_toy2d, pad_to, AugmentRanges, LabeledDataset, ToyRender};

use crate::error::CliError;

/// Samples held out of the 60k MNIST training set for validation.
pub const HOLDOUT: usize = 5000;
const HOLDOUT_SEED: u64 = 0x5eed;
/// Canvas side of the perturbed test set.
pub const CANVAS: usize = 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Frame {
    Crop,
    Pad,
    Full,
}

impl Frame {
    fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "crop" => Ok(Frame::Crop),
            "pad" => Ok(Frame::Pad),
            "full" => Ok(Frame::Full),
            _ => Err(CliError::Usage(format!("unknown frame `{}` (crop, pad, full)", s))),
        }
    }

    pub fn apply(self, ds: &LabeledDataset) -> Result<LabeledDataset, CliError> {
        Ok(match self {
            Frame::Crop => ds.map_images(|x| center_crop(x, 20))?,
            Frame::Pad => ds.map_images(|x| downsample2(&pad_to(x, CANVAS)?))?,
            Frame::Full => ds.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSpec {
    pub name: String,
    pub options: BTreeMap<String, String>,
}

impl DataSpec {
    pub fn parse(spec: &str) -> Result<Self, CliError> {
        let (name, rest) = spec.split_once(':').unwrap_or((spec, ""));
        let mut options = BTreeMap::new();
        if name == "file" {
            options.insert("path".to_string(), rest.to_string());
        } else {
            for kv in rest.split(',').filter(|s| !s.is_empty()) {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| CliError::Usage(format!("dataset option `{}` is not key=value", kv)))?;
                options.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(Self { name: name.trim().to_string(), options })
    }

    fn take<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, CliError> {
        match self.options.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| CliError::Usage(format!("dataset `{}`: bad {} `{}`", self.name, key, v))),
        }
    }

    fn check_keys(&self, allowed: &[&str]) -> Result<(), CliError> {
        match self.options.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(CliError::Usage(format!("dataset `{}` has no option `{}`", self.name, k))),
            None => Ok(()),
        }
    }

    fn frame(&self) -> Result<Frame, CliError> {
        Frame::parse(self.options.get("frame").map_or("full", String::as_str))
    }
}

/// MNIST split once into training pool, validation hold-out and test set.
pub struct Mnist {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
}

impl Mnist {
    pub fn load(root: &Path) -> Result<Self, CliError> {
        let file = |name: &str| {
            let p = root.join(name);
            if p.is_file() {
                Ok(p)
            } else {
                Err(CliError::Usage(format!("missing MNIST file {} (see scripts/fetch-mnist.sh)", p.display())))
            }
        };
        let full = load_idx(&file("train-images-idx3-ubyte")?, &file("train-labels-idx1-ubyte")?)?;
        let test = load_idx(&file("t10k-images-idx3-ubyte")?, &file("t10k-labels-idx1-ubyte")?)?;
        let (train, val) = full.split(HOLDOUT, HOLDOUT_SEED)?;
        Ok(Self { train, val, test })
    }
}

/// Resolves specs, loading MNIST at most once.
pub struct Resolver {
    root: PathBuf,
    mnist: OnceLock<Mnist>,
}

impl Resolver {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into(), mnist: OnceLock::new() }
    }

    pub fn mnist(&self) -> Result<&Mnist, CliError> {
        if let Some(m) = self.mnist.get() {
            return Ok(m);
        }
        let m = Mnist::load(&self.root)?;
        Ok(self.mnist.get_or_init(|| m))
    }

    pub fn resolve(&self, spec: &str) -> Result<LabeledDataset, CliError> {
        let s = DataSpec::parse(spec)?;
        match s.name.as_str() {
            "toy" => {
                s.check_keys(&["n", "seed", "std", "render"])?;
                let render = match s.options.get("render").map_or("patch", String::as_str) {
                    "patch" => ToyRender::Patch8x8,
                    "raw" => ToyRender::Raw,
                    r => return Err(CliError::Usage(format!("unknown toy render `{}`", r))),
                };
                let means = [[1.0, 1.0], [-1.0, -1.0]];
                Ok(make_toy2d(s.take("n", 100)?, &means, s.take("std", 0.3)?, render, s.take("seed", 0)?)?.dataset)
            }
            "mnist-train" => {
                s.check_keys(&["fraction", "seed", "frame"])?;
                let fraction: f64 = s.take("fraction", 1.0)?;
                let pool = &self.mnist()?.train;
                let ds = if fraction >= 1.0 { pool.clone() } else { itn_core::data::subsample(pool, fraction, s.take("seed", 0)?)? };
                s.frame()?.apply(&ds)
            }
            "mnist-val" => {
                s.check_keys(&["count", "frame"])?;
                let val = &self.mnist()?.val;
                let count = s.take("count", val.len())?.min(val.len());
                s.frame()?.apply(&val.select(&(0..count).collect::<Vec<_>>())?)
            }
            "mnist-test" => {
                s.check_keys(&["frame"])?;
                s.frame()?.apply(&self.mnist()?.test)
            }
            "perturbed" => {
                s.check_keys(&["seed", "size"])?;
                let set = make_perturbed_testset(&self.mnist()?.test, &AugmentRanges::perturbed_default(), CANVAS, s.take("seed", 7)?)?;
                match s.take("size", 20usize)? {
                    20 => Ok(set.map_images(downsample2)?),
                    CANVAS => Ok(set),
                    n => Err(CliError::Usage(format!("perturbed size must be 20 or {}, got {}", CANVAS, n))),
                }
            }
            "file" => {
                let path = PathBuf::from(&s.options["path"]);
                let c = Container::load(&path).map_err(|e| CliError::Usage(format!("cannot read dataset {}: {}", path.display(), e)))?;
                Ok(dataset_from_container(&c)?)
            }
            other => Err(CliError::Usage(format!(
                "unknown dataset `{}` (toy, mnist-train, mnist-val, mnist-test, perturbed, file)",
                other
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_specs() {
        let s = DataSpec::parse("mnist-train:fraction=0.01,seed=2,frame=crop").unwrap();
        assert_eq!(s.name, "mnist-train");
        assert_eq!(s.options["fraction"], "0.01");
        assert_eq!(DataSpec::parse("perturbed").unwrap().options.len(), 0);
        assert_eq!(DataSpec::parse("file:/tmp/a:b.itn").unwrap().options["path"], "/tmp/a:b.itn");
        assert!(DataSpec::parse("toy:n").is_err());
    }

    #[test]
    fn toy_resolves_without_mnist() {
        let r = Resolver::new("/nonexistent");
        let ds = r.resolve("toy:n=5,seed=3").unwrap();
        assert_eq!((ds.len(), ds.num_classes, ds.image_size()), (10, 2, 8));
        assert!(matches!(r.resolve("toy:bogus=1"), Err(CliError::Usage(_))));
        assert!(matches!(r.resolve("mnist-test"), Err(CliError::Usage(_))));
    }
}
