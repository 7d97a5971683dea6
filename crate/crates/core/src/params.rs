//! Named parameter storage and the `AMARCKPT` checkpoint container.
//!
//! Layout (all integers little-endian):
//! `"AMARCKPT"`, version `u16`, tensor count `u32`, then per tensor
//! name length `u16`, UTF-8 name, rank `u8`, extents `u32` each, and the
//! values as `f64`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AMARCKPT";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug)]
struct Entry<S> {
    value: Tensor<S>,
    trainable: bool,
}

/// Every tensor of a model, addressable by a stable dotted name.
///
/// Non-trainable entries are buffers (batch-norm running statistics): they
/// are checkpointed but never receive gradients.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    entries: BTreeMap<String, Entry<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) {
        self.entries.insert(
            name.into(),
            Entry {
                value,
                trainable: true,
            },
        );
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor<S>) {
        self.entries.insert(
            name.into(),
            Entry {
                value,
                trainable: false,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|e| e.trainable)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars whose name starts with `prefix`.
    pub fn count_trainable(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, e)| e.trainable && k.starts_with(prefix))
            .map(|(_, e)| e.value.len())
            .sum()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        Entry {
                            value: e.value.cast(),
                            trainable: e.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, e) in &self.entries {
            let bytes = name.as_bytes();
            let len = u16::try_from(bytes.len())
                .map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(bytes)?;
            let shape = e.value.shape();
            w.write_all(&[u8::try_from(shape.len())
                .map_err(|_| Error::Checkpoint(format!("rank too large for {name}")))?])?;
            for &x in shape {
                w.write_all(&(x as u32).to_le_bytes())?;
            }
            for v in e.value.data() {
                w.write_all(&v.as_f64().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    /// Overwrites every entry from a checkpoint. The checkpoint must carry
    /// exactly this store's names and shapes.
    pub fn load_from<R: Read>(&mut self, r: R) -> Result<()> {
        let tensors = read_checkpoint(r)?;
        if tensors.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                tensors.len(),
                self.entries.len()
            )));
        }
        for (name, t) in tensors {
            let e = self
                .entries
                .get_mut(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name:?}")))?;
            if e.value.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    e.value.shape()
                )));
            }
            e.value = t.cast();
        }
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        self.load_from(bytes.as_slice())
    }
}

fn read_exact<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0; n];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

/// Reads a checkpoint into `(name, tensor)` pairs in file order.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor<f64>)>> {
    let magic = read_exact(&mut r, 8)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u16::from_le_bytes(read_exact(&mut r, 2)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(read_exact(&mut r, 4)?.try_into().unwrap());
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u16::from_le_bytes(read_exact(&mut r, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(read_exact(&mut r, len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = read_exact(&mut r, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(read_exact(&mut r, 4)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = read_exact(&mut r, n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_preserves_bits() {
        let mut s = ParamStore::<f64>::new();
        s.insert(
            "a.w",
            Tensor::from_f64(vec![2, 2], &[1.0, -2.5, 1e-300, std::f64::consts::PI]).unwrap(),
        );
        s.insert_buffer(
            "a.running_mean",
            Tensor::from_f64(vec![3], &[0.1, 0.2, 0.3]).unwrap(),
        );
        let mut buf = Vec::new();
        s.write_checkpoint(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"AMARCKPT");
        let mut t = s.clone();
        t.get_mut("a.w").unwrap().data_mut()[0] = 9.0;
        t.load_from(buf.as_slice()).unwrap();
        assert_eq!(t.get("a.w"), s.get("a.w"));
        assert!(!t.is_trainable("a.running_mean"));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::zeros(&[2]));
        let mut buf = Vec::new();
        s.write_checkpoint(&mut buf).unwrap();
        let mut other = ParamStore::<f64>::new();
        other.insert("w", Tensor::zeros(&[3]));
        assert!(matches!(
            other.load_from(buf.as_slice()),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn truncated_checkpoint_rejected() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::zeros(&[4]));
        let mut buf = Vec::new();
        s.write_checkpoint(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_checkpoint(buf.as_slice()).is_err());
    }
}
