//! The compiled buffer: per-layer keys and values of the K buffer positions,
//! bound to the fingerprint of the weights that produced them.
//!
//! The byte format lives in the `lcc` crate; this type is its in-memory form.

use crate::error::{Error, Result};
use crate::kv::{KvCache, LayerKv};
use crate::model::{Fingerprint, ModelWeights};
use crate::tensor::Tensor;
use alloc::vec::Vec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum StorageDtype {
    #[default]
    F32,
    F64,
}

impl StorageDtype {
    pub fn width(self) -> usize {
        match self {
            StorageDtype::F32 => 4,
            StorageDtype::F64 => 8,
        }
    }
}

/// Where the buffer came from. Carries no context tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct ArtifactMeta {
    pub context_len: u64,
    pub ratio: u32,
    pub config_hash: [u8; 32],
}

#[derive(Clone, Debug, PartialEq)]
pub struct BufferArtifact {
    pub model_fingerprint: Fingerprint,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub k_tokens: usize,
    /// Position id the first query token must use.
    pub first_free_position: usize,
    pub dtype: StorageDtype,
    /// Per layer, `[n_heads × k_tokens × head_dim]`. In `F32` mode every
    /// value is already rounded to single precision.
    pub keys: Vec<Tensor>,
    pub values: Vec<Tensor>,
    pub meta: ArtifactMeta,
}

fn round(t: &Tensor, dtype: StorageDtype) -> Tensor {
    match dtype {
        StorageDtype::F64 => t.clone(),
        StorageDtype::F32 => {
            Tensor::new(t.shape(), t.data().iter().map(|&x| x as f32 as f64).collect()).expect("same shape")
        }
    }
}

impl BufferArtifact {
    /// Package a buffer cache; positions must be contiguous.
    pub fn from_cache(
        fingerprint: Fingerprint,
        cache: &KvCache,
        dtype: StorageDtype,
        meta: ArtifactMeta,
    ) -> Result<Self> {
        cache.validate()?;
        let k_tokens = cache.len();
        if k_tokens == 0 || cache.n_layers() == 0 {
            return Err(Error::InvalidLayout("artifact needs at least one layer and one buffer token".into()));
        }
        let first = cache.positions[0];
        if cache.positions.iter().enumerate().any(|(i, &p)| p != first + i) {
            return Err(Error::InvalidLayout("buffer positions must be contiguous".into()));
        }
        let shape = cache.layers[0].k.shape();
        let (n_heads, head_dim) = (shape[0], shape[2]);
        Ok(Self {
            model_fingerprint: fingerprint,
            n_layers: cache.n_layers(),
            n_heads,
            head_dim,
            k_tokens,
            first_free_position: first + k_tokens,
            dtype,
            keys: cache.layers.iter().map(|l| round(&l.k, dtype)).collect(),
            values: cache.layers.iter().map(|l| round(&l.v, dtype)).collect(),
            meta,
        })
    }

    /// Shape, dtype and position consistency.
    pub fn validate(&self) -> Result<()> {
        let expect = [self.n_heads, self.k_tokens, self.head_dim];
        if self.keys.len() != self.n_layers || self.values.len() != self.n_layers {
            return Err(Error::InvalidLayout("layer count does not match tensors".into()));
        }
        for t in self.keys.iter().chain(&self.values) {
            if t.shape() != expect {
                return Err(crate::error::shape_err("artifact", t.shape(), &expect));
            }
        }
        if self.k_tokens == 0 || self.first_free_position < self.k_tokens {
            return Err(Error::InvalidLayout("bad buffer positions".into()));
        }
        Ok(())
    }

    /// Number of scalars in the payload (keys and values, all layers).
    pub fn payload_len(&self) -> usize {
        2 * self.n_layers * self.n_heads * self.k_tokens * self.head_dim
    }

    pub fn positions(&self) -> Vec<usize> {
        (self.first_free_position - self.k_tokens..self.first_free_position).collect()
    }

    pub fn to_cache(&self) -> Result<KvCache> {
        self.validate()?;
        let cache = KvCache {
            layers: self
                .keys
                .iter()
                .zip(&self.values)
                .map(|(k, v)| LayerKv { k: k.clone(), v: v.clone() })
                .collect(),
            positions: self.positions(),
        };
        cache.validate()?;
        Ok(cache)
    }
}

/// A fresh cache for decoding against `weights`, which must be the model the
/// artifact was compiled with.
pub fn attach(weights: &ModelWeights, artifact: &BufferArtifact) -> Result<KvCache> {
    let c = &weights.config;
    if artifact.model_fingerprint != weights.fingerprint()
        || artifact.n_layers != c.n_layers
        || artifact.n_heads != c.n_heads
        || artifact.head_dim != c.head_dim
    {
        return Err(Error::IncompatibleModel);
    }
    if artifact.first_free_position >= c.max_position {
        return Err(Error::PositionOverflow {
            position: artifact.first_free_position,
            max_position: c.max_position,
        });
    }
    artifact.to_cache()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::RngState;

    fn cache(t: usize, first: usize) -> KvCache {
        let rows = (0..2)
            .map(|l| {
                let k = (0..t * 4).map(|i| (i + l) as f64 / 3.0).collect();
                let v = (0..t * 4).map(|i| -((i * l) as f64) / 7.0).collect();
                (k, v)
            })
            .collect();
        KvCache::from_rows(rows, (first..first + t).collect(), 2).unwrap()
    }

    #[test]
    fn f32_mode_rounds_and_f64_mode_is_exact() {
        let c = cache(3, 5);
        let fp = Fingerprint([1; 32]);
        let a64 = BufferArtifact::from_cache(fp, &c, StorageDtype::F64, ArtifactMeta::default()).unwrap();
        assert!(a64.to_cache().unwrap().bits_eq(&c));
        let a32 = BufferArtifact::from_cache(fp, &c, StorageDtype::F32, ArtifactMeta::default()).unwrap();
        let back = a32.to_cache().unwrap();
        assert!(!back.bits_eq(&c));
        assert!(back.max_abs_diff(&c) < 1e-6);
        assert_eq!(back.positions, [5, 6, 7]);
        assert_eq!(a32.first_free_position, 8);
        assert_eq!(a32.payload_len(), 2 * 2 * 2 * 3 * 2);
    }

    #[test]
    fn attach_checks_the_fingerprint() {
        let cfg = ModelConfig {
            vocab_size: 8,
            d_model: 4,
            n_layers: 2,
            n_heads: 2,
            head_dim: 2,
            d_ff: 4,
            max_position: 16,
            rope_base: 100.0,
        };
        let mut w = ModelWeights::init(&cfg, &mut RngState::new(0)).unwrap();
        let a = BufferArtifact::from_cache(w.fingerprint(), &cache(2, 3), StorageDtype::F32, ArtifactMeta::default())
            .unwrap();
        let first = attach(&w, &a).unwrap();
        let second = attach(&w, &a).unwrap();
        assert!(first.bits_eq(&second));
        w.head.data_mut()[0] += 1e-12;
        assert!(matches!(attach(&w, &a), Err(Error::IncompatibleModel)));
    }

    #[test]
    fn gaps_in_positions_are_rejected() {
        let mut c = cache(2, 0);
        c.positions = alloc::vec![0, 2];
        assert!(BufferArtifact::from_cache(Fingerprint([0; 32]), &c, StorageDtype::F32, ArtifactMeta::default()).is_err());
    }
}
