//! Run configuration: every trainer key plus data and protocol settings,
//! read from a `key = value` file and overridden by `--key value` flags.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use itn_core::trainer::TrainConfig;

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Directory holding the four MNIST IDX files.
    pub data_root: PathBuf,
    pub train_data: String,
    pub val_data: String,
    pub seeds: Vec<u64>,
    pub t_u_values: Vec<f64>,
    /// Training fraction for `reproduce`; 0 selects the protocol default.
    pub fraction: f64,
    /// Percentile of the learned transformation factors used as the
    /// matched standard-augmentation ranges.
    pub da_percentile: f64,
    /// Number of pool samples written to the grid after training.
    pub sample_grid: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            data_root: PathBuf::from("data/mnist"),
            train_data: "toy".into(),
            val_data: "toy:seed=1".into(),
            seeds: vec![0, 1, 2],
            t_u_values: vec![1e-3, 1e-1],
            fraction: 0.0,
            da_percentile: 90.0,
            sample_grid: 64,
        }
    }
}

const OWN_KEYS: &[&str] = &[
    "data.root",
    "data.train",
    "data.val",
    "reproduce.seeds",
    "reproduce.t_u_values",
    "reproduce.fraction",
    "reproduce.da_percentile",
    "output.sample_grid",
];

fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, CliError> {
    let items: Result<Vec<T>, _> = value.split(',').map(|s| s.trim().parse()).collect();
    match items {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(CliError::Usage(format!("`{}`: expected a comma-separated list, got `{}`", key, value))),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn scalar<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value.trim().parse().map_err(|_| CliError::Usage(format!("`{}`: cannot parse `{}`", key, value)))
}

impl RunConfig {
    pub fn keys() -> impl Iterator<Item = &'static str> {
        TrainConfig::KEYS.iter().chain(OWN_KEYS).copied()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "data.root" => self.data_root = PathBuf::from(value.trim()),
            "data.train" => self.train_data = value.trim().to_string(),
            "data.val" => self.val_data = value.trim().to_string(),
            "reproduce.seeds" => self.seeds = list(key, value)?,
            "reproduce.t_u_values" => self.t_u_values = list(key, value)?,
            "reproduce.fraction" => self.fraction = scalar(key, value)?,
            "reproduce.da_percentile" => self.da_percentile = scalar(key, value)?,
            "output.sample_grid" => self.sample_grid = scalar(key, value)?,
            _ => self.train.set(key, value).map_err(|e| CliError::Usage(e.to_string()))?,
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "data.root" => self.data_root.display().to_string(),
            "data.train" => self.train_data.clone(),
            "data.val" => self.val_data.clone(),
            "reproduce.seeds" => join(&self.seeds),
            "reproduce.t_u_values" => join(&self.t_u_values),
            "reproduce.fraction" => self.fraction.to_string(),
            "reproduce.da_percentile" => self.da_percentile.to_string(),
            "output.sample_grid" => self.sample_grid.to_string(),
            _ => return self.train.get(key),
        })
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{}:{}: expected `key = value`", origin, n + 1)))?;
            self.set(k.trim(), v.trim()).map_err(|e| CliError::Usage(format!("{}:{}: {}", origin, n + 1, e)))?;
        }
        Ok(())
    }

    /// Applies `--key value` or `--key=value` pairs.
    pub fn apply_overrides(&mut self, args: &[String]) -> Result<(), CliError> {
        let mut it = args.iter();
        while let Some(arg) = it.next() {
            let flag = arg
                .strip_prefix("--")
                .ok_or_else(|| CliError::Usage(format!("unexpected argument `{}` (overrides look like --key value)", arg)))?;
            let (key, value) = match flag.split_once('=') {
                Some((k, v)) => (k.to_string(), v.to_string()),
                None => {
                    let v = it.next().ok_or_else(|| CliError::Usage(format!("override `--{}` has no value", flag)))?;
                    (flag.to_string(), v.clone())
                }
            };
            self.set(&key, &value)?;
        }
        Ok(())
    }

    /// Defaults, then the file (if any), then the overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut rc = Self::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read config {}: {}", p.display(), e)))?;
            rc.apply_text(&text, &p.display().to_string())?;
        }
        rc.apply_overrides(overrides)?;
        rc.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(rc)
    }

    /// Every key with its resolved value, loadable by [`RunConfig::apply_text`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in Self::keys() {
            let _ = writeln!(s, "{} = {}", k, self.get(k).expect("listed key"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut rc = RunConfig::default();
        rc.apply_overrides(&["--sampler.t_u".into(), "5e-3".into(), "--reproduce.seeds=4,5".into()]).unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&rc.to_text(), "echo").unwrap();
        assert_eq!(back, rc);
        assert!(rc.to_text().contains("sampler.t_u = 0.005\n"));
        assert_eq!(back.seeds, vec![4, 5]);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let mut rc = RunConfig::default();
        assert!(matches!(rc.apply_overrides(&["--sampler.tu".into(), "1".into()]), Err(CliError::Usage(_))));
        assert!(rc.apply_overrides(&["--train.seed".into()]).is_err());
        assert!(rc.apply_overrides(&["train.seed".into(), "1".into()]).is_err());
        assert!(rc.apply_text("train.seed 3", "f").is_err());
        assert!(rc.apply_text("# comment only\n\ntrain.seed = 3 # trailing", "f").is_ok());
        assert_eq!(rc.train.seed, 3);
    }
}
