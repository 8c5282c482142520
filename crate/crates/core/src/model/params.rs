use std::collections::HashMap;

use ndarray::{Array2, NdFloat};

use crate::error::{Error, Result};

const BLOB_MAGIC: &[u8; 4] = b"VTPB";
const BLOB_VERSION: u32 = 1;

/// Ordered set of named 2-D tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Array2<F>>,
    index: HashMap<String, usize>,
}

impl<F: NdFloat> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: NdFloat> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn push(&mut self, name: String, tensor: Array2<F>) -> usize {
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let i = self.names.len();
        self.index.insert(name.clone(), i);
        self.names.push(name);
        self.tensors.push(tensor);
        i
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn tensors(&self) -> &[Array2<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Array2<F>] {
        &mut self.tensors
    }

    pub fn tensor(&self, i: usize) -> &Array2<F> {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Array2<F> {
        &mut self.tensors[i]
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Array2<F>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<F>> {
        self.position(name).map(|i| &mut self.tensors[i])
    }

    /// Total scalar count.
    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(Array2::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|t| Array2::zeros(t.raw_dim()))
    }

    pub fn map<G: NdFloat>(&self, f: impl Fn(&Array2<F>) -> Array2<G>) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(f).collect(),
            index: self.index.clone(),
        }
    }

    pub fn cast<G: NdFloat>(&self) -> ParamStore<G> {
        self.map(|t| t.mapv(|v| G::from(v).expect("castable")))
    }

    /// Names and shapes agree exactly, in order.
    pub fn same_layout<G>(&self, other: &ParamStore<G>) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.dim() == b.dim())
    }
}

impl ParamStore<f32> {
    /// `VTPB`, version, count, then per tensor: name length, name, rows,
    /// cols and the row-major LE float32 payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.n_scalars() + 32 * self.len());
        out.extend_from_slice(BLOB_MAGIC);
        out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for (name, t) in self.names.iter().zip(&self.tensors) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.ncols() as u32).to_le_bytes());
            for &v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(format!("parameter blob: {m}"));
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4).ok_or_else(|| bad("truncated header"))? != BLOB_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = cur.u32().ok_or_else(|| bad("truncated header"))?;
        if version != BLOB_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let count = cur.u32().ok_or_else(|| bad("truncated header"))? as usize;
        let mut store = Self::new();
        for _ in 0..count {
            let len = cur.u32().ok_or_else(|| bad("truncated name"))? as usize;
            let name = std::str::from_utf8(cur.take(len).ok_or_else(|| bad("truncated name"))?)
                .map_err(|_| bad("name is not utf-8"))?
                .to_string();
            let rows = cur.u32().ok_or_else(|| bad("truncated shape"))? as usize;
            let cols = cur.u32().ok_or_else(|| bad("truncated shape"))? as usize;
            let n = rows.checked_mul(cols).ok_or_else(|| bad("shape overflow"))?;
            let payload = cur
                .take(n.checked_mul(4).ok_or_else(|| bad("shape overflow"))?)
                .ok_or_else(|| bad(&format!("truncated tensor {name}")))?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if store.position(&name).is_some() {
                return Err(bad(&format!("duplicate tensor {name}")));
            }
            store.push(name, Array2::from_shape_vec((rows, cols), data).expect("sized"));
        }
        if cur.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(store)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}
