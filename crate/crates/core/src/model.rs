//! Model configuration, weights and the frozen-weight fingerprint.

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::ops::Deref;
use sha2::{Digest, Sha256};

pub const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub d_ff: usize,
    pub max_position: usize,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    /// Four pre-norm layers, width 128, four heads.
    fn default() -> Self {
        Self {
            vocab_size: 128,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            head_dim: 32,
            d_ff: 512,
            max_position: 1024,
            rope_base: 10_000.0,
        }
    }
}

impl ModelConfig {
    /// Small enough to pretrain and compile on one CPU core in minutes.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 48,
            n_layers: 2,
            n_heads: 4,
            head_dim: 12,
            d_ff: 128,
            max_position: 256,
            rope_base: 10_000.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("d_ff", self.d_ff),
            ("max_position", self.max_position),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
        }
        if self.d_model != self.n_heads * self.head_dim {
            return Err(Error::InvalidConfig(format!(
                "d_model {} != n_heads {} x head_dim {}",
                self.d_model, self.n_heads, self.head_dim
            )));
        }
        if self.head_dim % 2 != 0 {
            return Err(Error::InvalidConfig("head_dim must be even for rotary positions".into()));
        }
        if !(self.rope_base > 1.0) {
            return Err(Error::InvalidConfig("rope_base must exceed 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub mlp_norm: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

impl LayerWeights {
    const NAMES: [&'static str; 9] = [
        "attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_gate", "w_up", "w_down",
    ];

    fn tensors(&self) -> [&Tensor; 9] {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.mlp_norm,
            &self.w_gate,
            &self.w_up,
            &self.w_down,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.mlp_norm,
            &mut self.w_gate,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }
}

/// Base-model parameters. Tensor order (also the checkpoint order):
/// `tok_emb`, then per layer `attn_norm wq wk wv wo mlp_norm w_gate w_up
/// w_down`, then `final_norm`, `head`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub tok_emb: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    pub head: Tensor,
}

impl ModelWeights {
    pub fn init(config: &ModelConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let ff = config.d_ff;
        let out_scale = 1.0 / libm::sqrt(2.0 * config.n_layers as f64);
        let mut normal = |shape: &[usize], std: f64| Tensor::from_fn(shape, |_| rng.normal() * std);
        let tok_emb = normal(&[config.vocab_size, d], 1.0);
        let sd = 1.0 / libm::sqrt(d as f64);
        let sff = 1.0 / libm::sqrt(ff as f64);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_norm: Tensor::from_fn(&[d], |_| 1.0),
                wq: normal(&[d, d], sd),
                wk: normal(&[d, d], sd),
                wv: normal(&[d, d], sd),
                wo: normal(&[d, d], sd * out_scale),
                mlp_norm: Tensor::from_fn(&[d], |_| 1.0),
                w_gate: normal(&[ff, d], sd),
                w_up: normal(&[ff, d], sd),
                w_down: normal(&[d, ff], sff * out_scale),
            })
            .collect();
        let head = normal(&[config.vocab_size, d], sd);
        Ok(Self {
            config: config.clone(),
            tok_emb,
            layers,
            final_norm: Tensor::from_fn(&[d], |_| 1.0),
            head,
        })
    }

    /// Expected tensor shapes in checkpoint order.
    pub fn expected_shapes(config: &ModelConfig) -> Vec<Vec<usize>> {
        let (d, ff, v) = (config.d_model, config.d_ff, config.vocab_size);
        let mut out = alloc::vec![alloc::vec![v, d]];
        for _ in 0..config.n_layers {
            out.extend([
                alloc::vec![d],
                alloc::vec![d, d],
                alloc::vec![d, d],
                alloc::vec![d, d],
                alloc::vec![d, d],
                alloc::vec![d],
                alloc::vec![ff, d],
                alloc::vec![ff, d],
                alloc::vec![d, ff],
            ]);
        }
        out.push(alloc::vec![d]);
        out.push(alloc::vec![v, d]);
        out
    }

    /// Rebuild from tensors in checkpoint order.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = Self::expected_shapes(&config);
        if tensors.len() != shapes.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} tensors, found {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for (t, s) in tensors.iter().zip(&shapes) {
            if t.shape() != s.as_slice() {
                return Err(crate::error::shape_err("from_tensors", t.shape(), s));
            }
        }
        let mut it = tensors.into_iter();
        let tok_emb = it.next().unwrap();
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let mut take = || it.next().unwrap();
            layers.push(LayerWeights {
                attn_norm: take(),
                wq: take(),
                wk: take(),
                wv: take(),
                wo: take(),
                mlp_norm: take(),
                w_gate: take(),
                w_up: take(),
                w_down: take(),
            });
        }
        let final_norm = it.next().unwrap();
        let head = it.next().unwrap();
        Ok(Self {
            config,
            tok_emb,
            layers,
            final_norm,
            head,
        })
    }

    /// `(name, tensor)` pairs in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = alloc::vec![(String::from("tok_emb"), &self.tok_emb)];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in LayerWeights::NAMES.iter().zip(layer.tensors()) {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        out.push((String::from("final_norm"), &self.final_norm));
        out.push((String::from("head"), &self.head));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = alloc::vec![&mut self.tok_emb];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.head);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// SHA-256 over the configuration and every weight (little-endian f64,
    /// checkpoint order).
    pub fn fingerprint(&self) -> Fingerprint {
        let mut h = Sha256::new();
        h.update(b"LCCM-weights");
        let c = &self.config;
        for v in [c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.head_dim, c.d_ff, c.max_position] {
            h.update((v as u64).to_le_bytes());
        }
        h.update(c.rope_base.to_le_bytes());
        for (_, t) in self.named_tensors() {
            for x in t.data() {
                h.update(x.to_le_bytes());
            }
        }
        let out = h.finalize();
        let mut bytes = [0u8; 32];
        bytes.copy_from_slice(&out);
        Fingerprint(bytes)
    }

    /// Seal the weights. A frozen model only hands out shared references.
    pub fn freeze(self) -> FrozenModel {
        let fingerprint = self.fingerprint();
        FrozenModel {
            weights: self,
            fingerprint,
        }
    }

    /// Mean of the token-embedding rows.
    pub fn mean_embedding(&self) -> Vec<f64> {
        let (v, d) = (self.config.vocab_size, self.config.d_model);
        let mut mean = alloc::vec![0.0; d];
        for r in 0..v {
            crate::kernels::axpy(1.0, self.tok_emb.row(r), &mut mean);
        }
        mean.iter_mut().for_each(|m| *m /= v as f64);
        mean
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Fingerprint(pub [u8; 32]);

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fingerprint({self})")
    }
}

/// Immutable base model with its fingerprint computed once at freeze time.
#[derive(Clone, Debug)]
pub struct FrozenModel {
    weights: ModelWeights,
    fingerprint: Fingerprint,
}

impl FrozenModel {
    pub fn fingerprint(&self) -> Fingerprint {
        self.fingerprint
    }

    /// Recompute the hash and compare with the one taken at freeze time.
    pub fn verify(&self) -> bool {
        self.weights.fingerprint() == self.fingerprint
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn into_weights(self) -> ModelWeights {
        self.weights
    }
}

impl Deref for FrozenModel {
    type Target = ModelWeights;

    fn deref(&self) -> &ModelWeights {
        &self.weights
    }
}
