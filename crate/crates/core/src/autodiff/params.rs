//! Named parameter storage and `CKPT1` checkpoints.
//!
//! `CKPT1` layout, little-endian: magic `CKPT1`, `u32` tensor count, then per
//! tensor a `u32` name length, the UTF-8 name, `u32` rank, `rank` `u32`
//! dimensions and the `f64` values.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CKPT_MAGIC: &[u8; 5] = b"CKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Frozen entries (e.g. batch-norm running statistics) are stored and
    /// checkpointed but never optimized.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> usize {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.entries[i] = ParamEntry { name, value, trainable };
            return i;
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, value, trainable });
        self.entries.len() - 1
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|i| &self.entries[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.id(name)?;
        Some(&mut self.entries[i].value)
    }

    pub fn entry(&self, i: usize) -> &ParamEntry {
        &self.entries[i]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    /// Set every value (trainable or not) to zero.
    pub fn zero_all(&mut self) {
        for e in &mut self.entries {
            e.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.value.rank() as u32).to_le_bytes());
            for &d in e.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parse a checkpoint into `(name, tensor)` pairs in file order.
    pub fn decode(bytes: &[u8], file: &str) -> Result<Vec<(String, Tensor)>> {
        let mut r = Reader { bytes, pos: 0, file };
        if r.take(5, "header")? != CKPT_MAGIC {
            return Err(Error::parse(file, "header", 0, "bad magic, expected CKPT1"));
        }
        let count = r.u32("header")? as usize;
        let mut out = Vec::with_capacity(count);
        for t in 0..count {
            let section = format!("tensor {t}");
            let nlen = r.u32(&section)? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(nlen, &section)?)
                .map_err(|_| Error::parse(file, &section, at as u64, "name is not UTF-8"))?
                .to_string();
            let rank = r.u32(&section)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32(&section)? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * 8, &section)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            out.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::parse(file, "trailer", r.pos as u64, "trailing bytes"));
        }
        Ok(out)
    }

    /// Overwrite values from a checkpoint. Every stored entry must be present
    /// with a matching shape.
    pub fn load_from(&mut self, bytes: &[u8], file: &str) -> Result<()> {
        let tensors = Self::decode(bytes, file)?;
        let mut seen = vec![false; self.entries.len()];
        for (name, t) in tensors {
            let i = self
                .id(&name)
                .ok_or_else(|| Error::parse(file, &name, 0, "unknown parameter"))?;
            if self.entries[i].value.shape() != t.shape() {
                return Err(Error::parse(
                    file,
                    &name,
                    0,
                    format!("shape {:?}, expected {:?}", t.shape(), self.entries[i].value.shape()),
                ));
            }
            self.entries[i].value = t;
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::parse(file, &self.entries[i].name, 0, "missing parameter"));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        self.load_from(&bytes, &path.display().to_string())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::parse(self.file, section, self.pos as u64, "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, section: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("enc.w", Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.5]).unwrap(), true);
        s.insert("enc.bn.mean", Tensor::vector(vec![0.25, -1e-300]), false);
        s.insert("s", Tensor::scalar(f64::MIN_POSITIVE), true);
        s
    }

    #[test]
    fn checkpoint_round_trip() {
        let s = store();
        let bytes = s.encode();
        assert_eq!(&bytes[..5], b"CKPT1");
        let mut t = store();
        t.zero_all();
        t.load_from(&bytes, "mem").unwrap();
        assert_eq!(t, s);
    }

    #[test]
    fn truncated_checkpoint_names_section() {
        let bytes = store().encode();
        let err = ParamStore::decode(&bytes[..bytes.len() - 3], "c.ckpt").unwrap_err();
        match err {
            Error::Parse { section, .. } => assert_eq!(section, "tensor 2"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let bytes = store().encode();
        let mut other = ParamStore::new();
        other.insert("enc.w", Tensor::zeros(&[3, 2]), true);
        assert!(other.load_from(&bytes, "m").is_err());
    }
}
