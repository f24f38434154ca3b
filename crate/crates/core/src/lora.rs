//! Stage-gated low-rank adapters on the attention projections.
//!
//! A slot adds `(alpha / r) · B · A · x` to a projection, but only for tokens
//! whose segment is in the adapter's active set. With the default set
//! `{context, buffer}` the generation-stage tokens always see base weights.

use crate::error::{shape_err, Error, Result};
use crate::kernels;
use crate::mask::{Segment, SegmentSet};
use crate::model::ModelConfig;
use crate::rng::RngState;
use crate::tensor::Tensor;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

pub const DEFAULT_RANK: usize = 8;
pub const DEFAULT_ALPHA: f64 = 16.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Projection {
    Q,
    K,
    V,
    O,
}

impl Projection {
    pub const ALL: [Projection; 4] = [Projection::Q, Projection::K, Projection::V, Projection::O];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        ["q", "k", "v", "o"][self as usize]
    }
}

/// `A: [r × d_in]`, `B: [d_out × r]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair {
    pub a: Tensor,
    pub b: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub rank: usize,
    pub alpha: f64,
    pub active: SegmentSet,
    /// Indexed by layer, then [`Projection::index`].
    pub layers: Vec<[Option<LoraPair>; 4]>,
}

impl LoraAdapter {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn slot(&self, layer: usize, proj: Projection) -> Option<&LoraPair> {
        self.layers.get(layer).and_then(|l| l[proj.index()].as_ref())
    }

    pub fn projections(&self) -> Vec<Projection> {
        Projection::ALL
            .into_iter()
            .filter(|p| self.layers.first().is_some_and(|l| l[p.index()].is_some()))
            .collect()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, slots) in self.layers.iter().enumerate() {
            for p in Projection::ALL {
                if let Some(pair) = &slots[p.index()] {
                    out.push((format!("lora.{l}.{}.a", p.name()), &pair.a));
                    out.push((format!("lora.{l}.{}.b", p.name()), &pair.b));
                }
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for slots in &mut self.layers {
            for pair in slots.iter_mut().flatten() {
                out.push(&mut pair.a);
                out.push(&mut pair.b);
            }
        }
        out
    }

    pub fn is_active(&self, s: Segment) -> bool {
        self.active.contains(s)
    }

    /// Release the adapter once the buffer cache has been extracted.
    pub fn discard(self) {}
}

/// Adapter on all four attention projections with `A ~ N(0, 1/r)` and
/// `B = 0`, so the initial delta is exactly zero.
pub fn init_adapter(config: &ModelConfig, rank: usize, alpha: f64, rng: &mut RngState) -> Result<LoraAdapter> {
    init_adapter_for(config, rank, alpha, &Projection::ALL, rng)
}

pub fn init_adapter_for(
    config: &ModelConfig,
    rank: usize,
    alpha: f64,
    projections: &[Projection],
    rng: &mut RngState,
) -> Result<LoraAdapter> {
    config.validate()?;
    let d = config.d_model;
    if rank == 0 || rank > d {
        return Err(Error::RankTooLarge { rank, limit: d });
    }
    if !(alpha.is_finite()) {
        return Err(Error::InvalidConfig(format!("alpha {alpha}")));
    }
    let std = 1.0 / libm::sqrt(rank as f64);
    let layers = (0..config.n_layers)
        .map(|_| {
            let mut slots: [Option<LoraPair>; 4] = [None, None, None, None];
            for p in Projection::ALL {
                if projections.contains(&p) {
                    slots[p.index()] = Some(LoraPair {
                        a: Tensor::from_fn(&[rank, d], |_| rng.normal() * std),
                        b: Tensor::zeros(&[d, rank]),
                    });
                }
            }
            slots
        })
        .collect();
    Ok(LoraAdapter {
        rank,
        alpha,
        active: SegmentSet::compression(),
        layers,
    })
}

/// One projection of one token: `W·x`, plus `(alpha/r)·B·A·x` when the
/// token's segment is active.
pub fn apply_projection(
    base_w: &Tensor,
    slot: Option<(&LoraPair, usize, f64)>,
    x: &[f64],
    token_segment: Segment,
    active: SegmentSet,
) -> Result<Vec<f64>> {
    let (d_out, d_in) = (base_w.rows(), base_w.cols());
    if x.len() != d_in {
        return Err(shape_err("apply_projection", base_w.shape(), &[x.len()]));
    }
    let mut y: Vec<f64> = (0..d_out).map(|o| kernels::dot(base_w.row(o), x)).collect();
    if let Some((pair, rank, alpha)) = slot {
        if pair.a.shape() != [rank, d_in] || pair.b.shape() != [d_out, rank] {
            return Err(shape_err("apply_projection", pair.a.shape(), pair.b.shape()));
        }
        if active.contains(token_segment) {
            let ax: Vec<f64> = (0..rank).map(|i| kernels::dot(pair.a.row(i), x)).collect();
            let scale = alpha / rank as f64;
            let mut delta = vec![0.0; d_out];
            for (o, dv) in delta.iter_mut().enumerate() {
                *dv = kernels::dot(pair.b.row(o), &ax);
            }
            kernels::axpy(scale, &delta, &mut y);
        }
    }
    Ok(y)
}
