//! Self-describing binary container: string metadata plus named tensors of
//! little-endian `f64` values.
//!
//! Layout: the 8-byte magic `ITNCKPT1`, a `u64` metadata count followed by
//! length-prefixed key/value strings, then a `u64` tensor count followed by
//! (name, rank, dims, values) records. All integers are little-endian `u64`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ITNCKPT1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub meta: BTreeMap<String, String>,
    tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.meta.insert(key.into(), value.to_string());
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta.get(key).map(String::as_str).ok_or_else(|| Error::Format(format!("missing metadata `{}`", key)))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let s = self.meta_str(key)?;
        s.parse().map_err(|_| Error::Format(format!("metadata `{}` has unparsable value `{}`", key, s)))
    }

    /// Adds or replaces a tensor.
    pub fn put(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        match self.tensors.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = t,
            None => self.tensors.push((name, t)),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("missing tensor `{}`", name)))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        put_u64(w, self.meta.len() as u64)?;
        for (k, v) in &self.meta {
            put_str(w, k)?;
            put_str(w, v)?;
        }
        put_u64(w, self.tensors.len() as u64)?;
        for (name, t) in &self.tensors {
            put_str(w, name)?;
            put_u64(w, t.ndim() as u64)?;
            for &d in t.shape() {
                put_u64(w, d as u64)?;
            }
            let mut buf = Vec::with_capacity(t.numel() * 8);
            t.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint container (bad magic)".into()));
        }
        let mut c = Self::new();
        for _ in 0..get_u64(r)? {
            let k = get_str(r)?;
            let v = get_str(r)?;
            c.meta.insert(k, v);
        }
        for _ in 0..get_u64(r)? {
            let name = get_str(r)?;
            let rank = get_u64(r)? as usize;
            if rank > 8 {
                return Err(Error::Format(format!("tensor `{}` has rank {}", name, rank)));
            }
            let shape = (0..rank).map(|_| get_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.filter(|&n| n <= 1 << 32).ok_or_else(|| Error::Format(format!("tensor `{}` too large", name)))?;
            let mut buf = vec![0u8; numel * 8];
            read_exact(r, &mut buf)?;
            let data = buf.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
            c.tensors.push((name, Tensor::new(&shape, data)?));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_str(w: &mut impl Write, s: &str) -> Result<()> {
    put_u64(w, s.len() as u64)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Length("checkpoint truncated".into()),
        _ => Error::Io(e),
    })
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_str(r: &mut impl Read) -> Result<String> {
    let n = get_u64(r)? as usize;
    if n > 1 << 20 {
        return Err(Error::Format(format!("string of {} bytes", n)));
    }
    let mut b = vec![0u8; n];
    read_exact(r, &mut b)?;
    String::from_utf8(b).map_err(|_| Error::Format("metadata is not UTF-8".into()))
}

/// Stores integers exactly as `f64`.
pub fn usize_tensor(v: &[usize]) -> Tensor {
    Tensor::new(&[v.len()], v.iter().map(|&x| x as f64).collect()).expect("rank-1")
}

/// Integer contents of a tensor written by this module.
pub fn usize_values(t: &Tensor) -> Result<Vec<usize>> {
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v < 9.0e15 {
                Ok(v as usize)
            } else {
                Err(Error::Format(format!("expected a nonnegative integer, found {}", v)))
            }
        })
        .collect()
}

/// Wraps a dataset with a `kind = dataset` header.
pub fn dataset_to_container(ds: &LabeledDataset) -> Container {
    let mut c = Container::new();
    c.set_meta("kind", "dataset");
    c.set_meta("num_classes", ds.num_classes);
    c.set_meta("len", ds.len());
    c.put("images", ds.images.clone());
    c.put("labels", usize_tensor(&ds.labels));
    c.put("indices", usize_tensor(&ds.indices));
    c
}

pub fn dataset_from_container(c: &Container) -> Result<LabeledDataset> {
    if c.meta_str("kind")? != "dataset" {
        return Err(Error::Format(format!("container holds `{}`, not a dataset", c.meta_str("kind")?)));
    }
    let ds = LabeledDataset {
        images: c.get("images")?.clone(),
        labels: usize_values(c.get("labels")?)?,
        num_classes: c.meta_parse("num_classes")?,
        indices: usize_values(c.get("indices")?)?,
    };
    ds.validate()?;
    if ds.len() != c.meta_parse::<usize>("len")? {
        return Err(Error::Consistency("dataset length disagrees with its header".into()));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_truncation() {
        let mut c = Container::new();
        c.set_meta("iteration", 7);
        c.put("w", Tensor::new(&[2, 2], vec![1.5, -0.0, f64::MIN_POSITIVE, 3.0]).unwrap());
        c.put("s", Tensor::scalar(2.0));
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let back = Container::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.meta_parse::<u32>("iteration").unwrap(), 7);
        assert!(matches!(Container::read_from(&mut &buf[..buf.len() - 3]), Err(Error::Length(_))));
        buf[0] = b'X';
        assert!(matches!(Container::read_from(&mut buf.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn values_are_little_endian_f64() {
        let mut c = Container::new();
        c.put("x", Tensor::new(&[1], vec![1.0]).unwrap());
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        assert_eq!(&buf[buf.len() - 8..], &1.0f64.to_le_bytes());
    }

    #[test]
    fn dataset_round_trip() {
        let ds = LabeledDataset::new(Tensor::full(&[3, 1, 2, 2], 0.25), vec![0, 2, 1], 3).unwrap();
        let back = dataset_from_container(&dataset_to_container(&ds)).unwrap();
        assert_eq!(back, ds);
    }
}
