//! Parameter storage, seeded initialization and the binary checkpoint format.
//!
//! Checkpoint layout (all integers `u64` little-endian):
//! `b"EWECKPT1"`, the seven [`ModelConfig`] fields in declaration order, the
//! tensor count, then for every tensor its rank, its dimensions and its values
//! as little-endian `f64`, in [`TransformerWeights::tensors`] order.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"EWECKPT1";

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerWeights {
    pub config: ModelConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
    pub head: Tensor,
}

impl LayerWeights {
    fn zeros(d: usize, ff: usize) -> Self {
        Self {
            ln1_gain: Tensor::zeros(&[d]),
            ln1_bias: Tensor::zeros(&[d]),
            wq: Tensor::zeros(&[d, d]),
            wk: Tensor::zeros(&[d, d]),
            wv: Tensor::zeros(&[d, d]),
            wo: Tensor::zeros(&[d, d]),
            ln2_gain: Tensor::zeros(&[d]),
            ln2_bias: Tensor::zeros(&[d]),
            w1: Tensor::zeros(&[d, ff]),
            b1: Tensor::zeros(&[ff]),
            w2: Tensor::zeros(&[ff, d]),
            b2: Tensor::zeros(&[d]),
        }
    }

    fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

const LAYER_TENSOR_NAMES: [&str; 12] = [
    "ln1_gain", "ln1_bias", "wq", "wk", "wv", "wo", "ln2_gain", "ln2_bias", "w1", "b1", "w2", "b2",
];

impl TransformerWeights {
    /// All-zero parameters with the right shapes (also used as a gradient buffer).
    pub fn zeros(config: ModelConfig) -> Self {
        let d = config.d_model;
        Self {
            config,
            token_embedding: Tensor::zeros(&[config.vocab_size, d]),
            position_embedding: Tensor::zeros(&[config.max_positions, d]),
            layers: (0..config.n_layers)
                .map(|_| LayerWeights::zeros(d, config.d_ff))
                .collect(),
            final_gain: Tensor::zeros(&[d]),
            final_bias: Tensor::zeros(&[d]),
            head: Tensor::zeros(&[d, config.vocab_size]),
        }
    }

    /// Seeded scaled-uniform initialization; bit-identical for a fixed config.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut w = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model as f64;
        let ff = config.d_ff as f64;
        let mut fill = |t: &mut Tensor, scale: f64| {
            for v in t.data_mut() {
                *v = rng.gen_range(-scale..scale);
            }
        };
        fill(&mut w.token_embedding, 0.5);
        fill(&mut w.position_embedding, 0.1);
        for layer in &mut w.layers {
            layer.ln1_gain.data_mut().fill(1.0);
            layer.ln2_gain.data_mut().fill(1.0);
            fill(&mut layer.wq, 1.0 / d.sqrt());
            fill(&mut layer.wk, 1.0 / d.sqrt());
            fill(&mut layer.wv, 1.0 / d.sqrt());
            fill(&mut layer.wo, 1.0 / d.sqrt());
            fill(&mut layer.w1, 1.0 / d.sqrt());
            fill(&mut layer.w2, 1.0 / ff.sqrt());
        }
        w.final_gain.data_mut().fill(1.0);
        fill(&mut w.head, 1.0 / d.sqrt());
        Ok(w)
    }

    /// Every parameter tensor in declaration order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.token_embedding, &self.position_embedding];
        for layer in &self.layers {
            out.extend(layer.tensors());
        }
        out.extend([&self.final_gain, &self.final_bias, &self.head]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.extend([&mut self.final_gain, &mut self.final_bias, &mut self.head]);
        out
    }

    /// Human-readable names aligned with [`Self::tensors`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = vec!["token_embedding".to_string(), "position_embedding".to_string()];
        for l in 0..self.layers.len() {
            out.extend(LAYER_TENSOR_NAMES.iter().map(|n| format!("layers.{l}.{n}")));
        }
        out.extend(["final_gain", "final_bias", "head"].map(String::from));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        for (t, name) in self.tensors().into_iter().zip(self.tensor_names()) {
            t.check_finite(&name)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::with_capacity(64 + self.parameter_count() * 8);
        out.extend_from_slice(MAGIC);
        for v in [
            c.vocab_size as u64,
            c.d_model as u64,
            c.n_heads as u64,
            c.n_layers as u64,
            c.d_ff as u64,
            c.max_positions as u64,
            c.seed,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let tensors = self.tensors();
        out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
        for t in tensors {
            out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
            for &dim in t.shape() {
                out.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::format("checkpoint", "bad magic string"));
        }
        let mut next = || r.u64();
        let config = ModelConfig {
            vocab_size: next()? as usize,
            d_model: next()? as usize,
            n_heads: next()? as usize,
            n_layers: next()? as usize,
            d_ff: next()? as usize,
            max_positions: next()? as usize,
            seed: next()?,
        };
        config.validate()?;
        let mut w = Self::zeros(config);
        let count = r.u64()? as usize;
        let mut slots = w.tensors_mut();
        if count != slots.len() {
            return Err(Error::format(
                "checkpoint",
                format!("expected {} tensors, found {count}", slots.len()),
            ));
        }
        for slot in slots.iter_mut() {
            let rank = r.u64()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if shape != slot.shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!("tensor shape {shape:?} != expected {:?}", slot.shape()),
                ));
            }
            for v in slot.data_mut() {
                *v = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(w)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Stable content hash used to key precomputed memory encodings.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format("checkpoint", "truncated file"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 12,
            max_positions: 16,
            seed,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = TransformerWeights::init(tiny(1)).unwrap();
        let b = TransformerWeights::init(tiny(1)).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn seeds_give_distinct_streams() {
        let a = TransformerWeights::init(tiny(1)).unwrap();
        let b = TransformerWeights::init(tiny(2)).unwrap();
        assert_ne!(a.token_embedding, b.token_embedding);
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = ModelConfig {
            d_model: 6,
            n_heads: 4,
            ..tiny(1)
        };
        assert!(matches!(TransformerWeights::init(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let w = TransformerWeights::init(tiny(3)).unwrap();
        let back = TransformerWeights::from_bytes(&w.to_bytes()).unwrap();
        assert_eq!(w, back);
        let mut bad = w.to_bytes();
        bad[0] = b'X';
        assert!(TransformerWeights::from_bytes(&bad).is_err());
        assert!(TransformerWeights::from_bytes(&w.to_bytes()[..100]).is_err());
    }
}
