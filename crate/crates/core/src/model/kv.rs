//! Per-layer key/value caches.
//!
//! Each layer stores keys and values row-major as `[span × n_heads × head_dim]`
//! so appending a token is a push; [`KvCache::keys_tensor`] exposes the
//! head-major `[n_heads × span × head_dim]` view.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerKv {
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    width: usize,
    n_heads: usize,
    start: usize,
    layers: Vec<LayerKv>,
    positions: Vec<usize>,
}

impl KvCache {
    /// Empty cache whose first token will sit at position `start`.
    pub fn new(n_layers: usize, n_heads: usize, width: usize, start: usize) -> Self {
        Self {
            width,
            n_heads,
            start,
            layers: vec![
                LayerKv {
                    keys: Vec::new(),
                    values: Vec::new(),
                };
                n_layers
            ],
            positions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn next_position(&self) -> usize {
        self.positions.last().map_or(self.start, |p| p + 1)
    }

    pub fn layer(&self, l: usize) -> &LayerKv {
        &self.layers[l]
    }

    /// Advances a layer-less cache (used by models without real KV state).
    pub fn extend_positions(&mut self, n: usize) -> Result<()> {
        if !self.layers.is_empty() {
            return Err(Error::contract("extend_positions on a cache with layers"));
        }
        let next = self.next_position();
        self.positions.extend(next..next + n);
        Ok(())
    }

    pub(crate) fn push_positions(&mut self, positions: &[usize]) {
        self.positions.extend_from_slice(positions);
    }

    pub(crate) fn append_layer(&mut self, l: usize, keys: &[f64], values: &[f64]) {
        self.layers[l].keys.extend_from_slice(keys);
        self.layers[l].values.extend_from_slice(values);
    }

    /// Drops every token past `len`; earlier entries are untouched.
    pub fn truncate(&mut self, len: usize) {
        if len >= self.len() {
            return;
        }
        self.positions.truncate(len);
        for layer in &mut self.layers {
            layer.keys.truncate(len * self.width);
            layer.values.truncate(len * self.width);
        }
    }

    /// Checks that all layers and the position list agree on span length.
    pub fn check_consistent(&self) -> Result<()> {
        let span = self.len();
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.keys.len() != span * self.width || layer.values.len() != span * self.width {
                return Err(Error::contract(format!("kv layer {l} disagrees with span {span}")));
            }
        }
        if self.positions.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::contract("kv positions must be strictly increasing"));
        }
        Ok(())
    }

    fn head_major(&self, data: &[f64]) -> Tensor {
        let span = self.len();
        let hd = self.width / self.n_heads.max(1);
        let mut out = Vec::with_capacity(data.len());
        for h in 0..self.n_heads {
            for t in 0..span {
                out.extend_from_slice(&data[t * self.width + h * hd..t * self.width + (h + 1) * hd]);
            }
        }
        Tensor::new(vec![self.n_heads, span, hd], out).expect("consistent kv shape")
    }

    pub fn keys_tensor(&self, l: usize) -> Tensor {
        self.head_major(&self.layers[l].keys)
    }

    pub fn values_tensor(&self, l: usize) -> Tensor {
        self.head_major(&self.layers[l].values)
    }

    /// Binary encoding: `b"EWEKV001"`, layers, heads, width, start, span (u64 LE),
    /// the positions (u64 LE), then keys and values of each layer (f64 LE).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"EWEKV001");
        for v in [
            self.layers.len(),
            self.n_heads,
            self.width,
            self.start,
            self.len(),
        ] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for &p in &self.positions {
            out.extend_from_slice(&(p as u64).to_le_bytes());
        }
        for layer in &self.layers {
            for &v in layer.keys.iter().chain(&layer.values) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::format("kv cache file", d.to_string());
        if bytes.len() < 48 || &bytes[..8] != b"EWEKV001" {
            return Err(bad("bad header"));
        }
        let word = |i: usize| -> Result<u64> {
            bytes
                .get(i..i + 8)
                .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
                .ok_or_else(|| bad("truncated"))
        };
        let n_layers = word(8)? as usize;
        let n_heads = word(16)? as usize;
        let width = word(24)? as usize;
        let start = word(32)? as usize;
        let span = word(40)? as usize;
        let expected = 48 + span * 8 + n_layers * 2 * span * width * 8;
        if bytes.len() != expected {
            return Err(bad("length mismatch"));
        }
        let mut off = 48;
        let mut cache = Self::new(n_layers, n_heads, width, start);
        for _ in 0..span {
            cache.positions.push(word(off)? as usize);
            off += 8;
        }
        let mut read_f = |n: usize| -> Vec<f64> {
            let v = bytes[off..off + n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            off += n * 8;
            v
        };
        for layer in &mut cache.layers {
            layer.keys = read_f(span * width);
            layer.values = read_f(span * width);
        }
        cache.check_consistent()?;
        Ok(cache)
    }
}
