//! Segment layouts and the compressive-bottleneck attention mask.

use crate::error::{Error, Result};
use alloc::vec;
use alloc::vec::Vec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Segment {
    Context,
    Buffer,
    Query,
    Response,
}

impl Segment {
    pub const ALL: [Segment; 4] = [Segment::Context, Segment::Buffer, Segment::Query, Segment::Response];

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

/// Small set over [`Segment`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SegmentSet(u8);

impl SegmentSet {
    pub const EMPTY: SegmentSet = SegmentSet(0);

    /// `{context, buffer}`: the compression stage only.
    pub fn compression() -> Self {
        Self::of(&[Segment::Context, Segment::Buffer])
    }

    pub fn all() -> Self {
        Self::of(&Segment::ALL)
    }

    pub fn of(segments: &[Segment]) -> Self {
        SegmentSet(segments.iter().fold(0, |acc, s| acc | s.bit()))
    }

    pub fn contains(self, s: Segment) -> bool {
        self.0 & s.bit() != 0
    }

    pub fn insert(&mut self, s: Segment) {
        self.0 |= s.bit();
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    /// `None` if a bit outside the four segments is set.
    pub fn from_bits(bits: u8) -> Option<Self> {
        (bits & !0b1111 == 0).then_some(SegmentSet(bits))
    }

    pub fn iter(self) -> impl Iterator<Item = Segment> {
        Segment::ALL.into_iter().filter(move |s| self.contains(*s))
    }
}

impl Default for SegmentSet {
    fn default() -> Self {
        Self::compression()
    }
}

/// Contiguous spans: context, then buffer, then query, then response.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentLayout {
    pub n_ctx: usize,
    pub k_buf: usize,
    pub n_query: usize,
    pub n_resp: usize,
}

impl SegmentLayout {
    pub fn new(n_ctx: usize, k_buf: usize, n_query: usize, n_resp: usize) -> Result<Self> {
        if k_buf == 0 {
            return Err(Error::InvalidLayout("at least one buffer token is required".into()));
        }
        Ok(Self {
            n_ctx,
            k_buf,
            n_query,
            n_resp,
        })
    }

    pub fn len(&self) -> usize {
        self.n_ctx + self.k_buf + self.n_query + self.n_resp
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn segment_of(&self, pos: usize) -> Segment {
        if pos < self.n_ctx {
            Segment::Context
        } else if pos < self.n_ctx + self.k_buf {
            Segment::Buffer
        } else if pos < self.n_ctx + self.k_buf + self.n_query {
            Segment::Query
        } else {
            Segment::Response
        }
    }

    pub fn segments(&self) -> Vec<Segment> {
        (0..self.len()).map(|p| self.segment_of(p)).collect()
    }

    pub fn buffer_range(&self) -> core::ops::Range<usize> {
        self.n_ctx..self.n_ctx + self.k_buf
    }
}

/// Boolean attention-visibility matrix (`true` = attend permitted).
///
/// `rows` are the positions being computed and `cols` the positions they
/// may read; a mask for incremental decoding has `cols = cached + rows`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentMask {
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
}

impl SegmentMask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allow = vec![false; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                allow[i * cols + j] = f(i, j);
            }
        }
        Self { rows, cols, allow }
    }

    pub fn causal(n: usize) -> Self {
        Self::causal_after(0, n)
    }

    /// `new` rows appended after `cached` positions, causal over all of them.
    pub fn causal_after(cached: usize, new: usize) -> Self {
        Self::from_fn(new, cached + new, |i, j| j <= cached + i)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allow
    }

    /// Rows as `'1'`/`'0'` strings, handy in assertions.
    pub fn pattern(&self) -> Vec<alloc::string::String> {
        (0..self.rows)
            .map(|i| {
                (0..self.cols)
                    .map(|j| if self.allowed(i, j) { '1' } else { '0' })
                    .collect()
            })
            .collect()
    }
}

/// The bottleneck mask: context is causal, buffer tokens read the context
/// and earlier buffer tokens, query/response tokens read the buffer and
/// earlier query/response tokens but never the context.
pub fn build_segment_mask(layout: &SegmentLayout) -> SegmentMask {
    let n = layout.len();
    let seg: Vec<Segment> = layout.segments();
    SegmentMask::from_fn(n, n, |i, j| {
        if j > i {
            return false;
        }
        match seg[i] {
            Segment::Context => seg[j] == Segment::Context,
            Segment::Buffer => matches!(seg[j], Segment::Context | Segment::Buffer),
            Segment::Query | Segment::Response => seg[j] != Segment::Context,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_token_layout() {
        let m = build_segment_mask(&SegmentLayout::new(2, 1, 1, 1).unwrap());
        assert_eq!(m.pattern(), ["10000", "11000", "11100", "00110", "00111"]);
    }

    #[test]
    fn empty_context_layout() {
        let m = build_segment_mask(&SegmentLayout::new(0, 1, 1, 0).unwrap());
        assert_eq!(m.pattern(), ["10", "11"]);
    }

    #[test]
    fn buffer_only_sequence_is_causal() {
        let layout = SegmentLayout::new(0, 4, 0, 0).unwrap();
        assert_eq!(build_segment_mask(&layout), SegmentMask::causal(4));
    }

    #[test]
    fn zero_buffer_is_invalid() {
        assert!(SegmentLayout::new(3, 0, 1, 1).is_err());
    }

    #[test]
    fn segment_set_defaults_to_compression_stage() {
        let s = SegmentSet::default();
        assert!(s.contains(Segment::Context) && s.contains(Segment::Buffer));
        assert!(!s.contains(Segment::Query) && !s.contains(Segment::Response));
        assert_eq!(SegmentSet::all().iter().count(), 4);
    }
}
