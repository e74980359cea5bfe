//! Named parameter sets, binding them onto a tape, and the checkpoint file.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::ops::{Deref, DerefMut};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8] = b"CLNET-CKPT-1\n";

/// Ordered map from parameter name to value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    /// Binary layout: magic line, entry count, then per entry the name,
    /// rank, dims and little-endian `f64` values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader { buf, pos: 0 };
        if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
            return Err(r.err("missing CLNET-CKPT-1 header"));
        }
        let count = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.err("parameter name is not utf-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
            }
            store.insert(name, Tensor::new(shape, data)?);
        }
        if r.pos != buf.len() {
            return Err(r.err("trailing bytes after last entry"));
        }
        Ok(store)
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn err(&self, msg: &str) -> Error {
        Error::Parse {
            line: 0,
            offset: self.pos,
            msg: msg.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.err("truncated checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// A tape plus lazily bound parameter leaves.
pub struct Graph<'p> {
    tape: Tape,
    params: &'p ParamStore,
    bound: HashMap<String, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            tape: Tape::new(),
            params,
            bound: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    /// Leaf for the named parameter, created on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.params.get(name)?.clone();
        let v = self.tape.leaf(t);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradient per parameter; parameters the loss never touched get zeros.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, t)| {
                let g = match self.bound.get(name) {
                    Some(&v) => grads.get(v),
                    None => Tensor::zeros(t.shape()),
                };
                (name.clone(), g)
            })
            .collect()
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("a.w", Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.25]).unwrap());
        p.insert("b", Tensor::scalar(0.1));
        p
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let p = sample();
        let q = ParamStore::from_bytes(&p.to_bytes()).unwrap();
        for ((n1, t1), (n2, t2)) in p.iter().zip(q.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_truncation() {
        let bytes = sample().to_bytes();
        assert!(ParamStore::from_bytes(b"NOT-A-CKPT\n").is_err());
        assert!(ParamStore::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn unused_params_get_zero_grads() {
        let p = sample();
        let mut g = Graph::new(&p);
        let b = g.param("b").unwrap();
        let loss = g.sum(b);
        let grads = g.backward(loss).unwrap();
        let pg = g.param_grads(&grads);
        assert_eq!(pg["b"].data(), &[1.0]);
        assert!(pg["a.w"].data().iter().all(|&v| v == 0.0));
    }
}
