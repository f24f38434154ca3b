//! Per-layer key/value cache.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;
use alloc::vec::Vec;

/// Keys and values of one layer, each `[n_heads × T × head_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerKv {
    pub k: Tensor,
    pub v: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    pub layers: Vec<LayerKv>,
    pub positions: Vec<usize>,
}

impl KvCache {
    pub fn empty(n_layers: usize, n_heads: usize, head_dim: usize) -> Self {
        let z = || Tensor::zeros(&[n_heads, 0, head_dim]);
        Self {
            layers: (0..n_layers).map(|_| LayerKv { k: z(), v: z() }).collect(),
            positions: Vec::new(),
        }
    }

    /// Build from per-layer row-major `[T × (heads·head_dim)]` blocks.
    pub fn from_rows(rows: Vec<(Vec<f64>, Vec<f64>)>, positions: Vec<usize>, n_heads: usize) -> Result<Self> {
        let t = positions.len();
        let mut layers = Vec::with_capacity(rows.len());
        for (k, v) in rows {
            if k.len() != v.len() || (t > 0 && k.len() % (t * n_heads) != 0) {
                return Err(shape_err("kv_cache", &[k.len()], &[t, n_heads]));
            }
            let hd = if t == 0 { 0 } else { k.len() / (t * n_heads) };
            layers.push(LayerKv {
                k: Tensor::new(&[n_heads, t, hd], rows_to_heads(&k, t, n_heads, hd))?,
                v: Tensor::new(&[n_heads, t, hd], rows_to_heads(&v, t, n_heads, hd))?,
            });
        }
        let cache = Self { layers, positions };
        cache.validate()?;
        Ok(cache)
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

    /// First position after the cached tokens.
    pub fn next_position(&self) -> usize {
        self.positions.last().map_or(0, |p| p + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        for layer in &self.layers {
            let ks = layer.k.shape();
            if ks.len() != 3 || ks[1] != t || layer.v.shape() != ks {
                return Err(shape_err("kv_cache", ks, layer.v.shape()));
            }
        }
        if self.positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidLayout("cache positions must strictly increase".into()));
        }
        Ok(())
    }

    /// Keys and values of `layer` as row-major `[T × d]` blocks.
    pub fn layer_rows(&self, layer: usize) -> (Vec<f64>, Vec<f64>) {
        let l = &self.layers[layer];
        let s = l.k.shape();
        (
            heads_to_rows(l.k.data(), s[0], s[1], s[2]),
            heads_to_rows(l.v.data(), s[0], s[1], s[2]),
        )
    }

    /// Keep only the cached tokens in `range`.
    pub fn slice(&self, range: core::ops::Range<usize>) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let s = l.k.shape();
                let (h, hd) = (s[0], s[2]);
                let pick = |t: &Tensor| {
                    let mut out = Vec::with_capacity(h * range.len() * hd);
                    for head in 0..h {
                        let base = head * s[1] * hd;
                        out.extend_from_slice(&t.data()[base + range.start * hd..base + range.end * hd]);
                    }
                    Tensor::new(&[h, range.len(), hd], out).expect("slice shape")
                };
                LayerKv {
                    k: pick(&l.k),
                    v: pick(&l.v),
                }
            })
            .collect();
        Self {
            layers,
            positions: self.positions[range].to_vec(),
        }
    }

    pub fn bits_eq(&self, other: &KvCache) -> bool {
        self.positions == other.positions
            && self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.k.bits_eq(&b.k) && a.v.bits_eq(&b.v))
    }

    pub fn max_abs_diff(&self, other: &KvCache) -> f64 {
        self.layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| a.k.max_abs_diff(&b.k).max(a.v.max_abs_diff(&b.v)))
            .fold(0.0, f64::max)
    }
}

fn rows_to_heads(rows: &[f64], t: usize, h: usize, hd: usize) -> Vec<f64> {
    let mut out = alloc::vec![0.0; rows.len()];
    for r in 0..t {
        for head in 0..h {
            let src = r * h * hd + head * hd;
            let dst = head * t * hd + r * hd;
            out[dst..dst + hd].copy_from_slice(&rows[src..src + hd]);
        }
    }
    out
}

fn heads_to_rows(heads: &[f64], h: usize, t: usize, hd: usize) -> Vec<f64> {
    let mut out = alloc::vec![0.0; heads.len()];
    for head in 0..h {
        for r in 0..t {
            let src = head * t * hd + r * hd;
            let dst = r * h * hd + head * hd;
            out[dst..dst + hd].copy_from_slice(&heads[src..src + hd]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_head_layout_roundtrip() {
        let rows: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let cache = KvCache::from_rows(alloc::vec![(rows.clone(), rows.clone())], alloc::vec![3, 4, 5], 2).unwrap();
        assert_eq!(cache.layers[0].k.shape(), &[2, 3, 4]);
        assert_eq!(cache.layer_rows(0).0, rows);
        // head 1, token 0 starts at row element 4
        assert_eq!(cache.layers[0].k.data()[12], 4.0);
        assert_eq!(cache.next_position(), 6);
    }

    #[test]
    fn slicing_keeps_positions() {
        let rows: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let cache = KvCache::from_rows(alloc::vec![(rows.clone(), rows)], alloc::vec![0, 1, 2], 2).unwrap();
        let s = cache.slice(1..3);
        assert_eq!(s.positions, [1, 2]);
        assert_eq!(s.layer_rows(0).0, (8..24).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn positions_must_increase() {
        let rows = alloc::vec![0.0; 8];
        assert!(KvCache::from_rows(alloc::vec![(rows.clone(), rows)], alloc::vec![2, 2], 1).is_err());
    }
}
