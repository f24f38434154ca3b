//! Probe accuracy and distribution drift under the evaluation conditions.

use crate::autograd::Tape;
use crate::data::{context_cache, ProbeSet, STOP};
use crate::error::Result;
use crate::kv::KvCache;
use crate::lora::LoraAdapter;
use crate::mask::Segment;
use crate::mask::SegmentMask;
use crate::model::ModelWeights;
use crate::tensor::Tensor;
use crate::transformer::{causal_mask_builder, decode_greedy_adapted, forward, ForwardArgs, Slot};
use alloc::vec;
use alloc::vec::Vec;

/// What the model is conditioned on when answering.
#[derive(Clone, Copy)]
pub enum Conditioning<'a> {
    /// Causal cache of the raw context.
    Context(&'a KvCache),
    /// Nothing; queries start at position 0.
    Nothing,
    /// An attached buffer cache, optionally with an adapter kept active.
    Buffer(&'a KvCache, Option<&'a LoraAdapter>),
    /// No cache; an adapter tuned on the context.
    Adapter(&'a LoraAdapter),
}

impl<'a> Conditioning<'a> {
    fn parts(self) -> (Option<&'a KvCache>, Option<&'a LoraAdapter>) {
        match self {
            Conditioning::Context(c) => (Some(c), None),
            Conditioning::Nothing => (None, None),
            Conditioning::Buffer(c, a) => (Some(c), a),
            Conditioning::Adapter(a) => (None, Some(a)),
        }
    }
}

/// Greedy answer with the trailing stop token removed.
pub fn answer(weights: &ModelWeights, cond: Conditioning<'_>, query: &[u32], max_new: usize) -> Result<Vec<u32>> {
    let (cache, adapter) = cond.parts();
    let mut out = decode_greedy_adapted(weights, adapter, query, &causal_mask_builder, cache, max_new, STOP)?;
    if out.last() == Some(&STOP) {
        out.pop();
    }
    Ok(out)
}

/// Fraction of probes answered with exactly the gold tokens.
pub fn probe_accuracy(weights: &ModelWeights, cond: Conditioning<'_>, probes: &ProbeSet) -> Result<f64> {
    if probes.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for p in &probes.items {
        if answer(weights, cond, &p.query, p.gold.len() + 1)? == p.gold {
            hits += 1;
        }
    }
    Ok(hits as f64 / probes.len() as f64)
}

/// Logit rows predicting each of `target` after `query`, teacher-forced.
pub fn forced_logits(weights: &ModelWeights, cond: Conditioning<'_>, query: &[u32], target: &[u32]) -> Result<Tensor> {
    let vocab = weights.config.vocab_size;
    if target.is_empty() {
        return Tensor::new(&[0, vocab], Vec::new());
    }
    let (cache, adapter) = cond.parts();
    let input: Vec<Slot> = query
        .iter()
        .chain(&target[..target.len() - 1])
        .map(|&t| Slot::Token(t))
        .collect();
    let start = cache.map_or(0, |c| c.next_position());
    let cached = cache.map_or(0, |c| c.len());
    let positions: Vec<usize> = (start..start + input.len()).collect();
    let mut segments = vec![Segment::Query; query.len()];
    segments.resize(input.len(), Segment::Response);
    let mask = SegmentMask::causal_after(cached, input.len());
    let args = ForwardArgs {
        adapter,
        cache_in: cache,
        ..ForwardArgs::tokens(&input, &positions, &segments, &mask)
    };
    let (lg, _) = forward(weights, args)?;
    let first = query.len() - 1;
    Tensor::new(
        &[target.len(), vocab],
        lg.data()[first * vocab..(first + target.len()) * vocab].to_vec(),
    )
}

/// Mean over `queries` of `D(P(·|C, q) ‖ P(·|cond, q))`, averaged over the
/// positions of the context-conditioned greedy answer.
pub fn kl_drift(
    weights: &ModelWeights,
    context: &[u32],
    cond: Conditioning<'_>,
    queries: &[Vec<u32>],
    max_decode: usize,
) -> Result<f64> {
    if queries.is_empty() {
        return Ok(0.0);
    }
    let ctx = context_cache(weights, context)?;
    let mut total = 0.0;
    for q in queries {
        let target = decode_greedy_adapted(weights, None, q, &causal_mask_builder, Some(&ctx), max_decode, STOP)?;
        let p = forced_logits(weights, Conditioning::Context(&ctx), q, &target)?;
        let s = forced_logits(weights, cond, q, &target)?;
        let mut tape = Tape::inference();
        let sv = tape.constant(s);
        let kl = tape.kl_divergence_logits(&p, sv)?;
        total += tape.value(kl).data()[0];
    }
    Ok(total / queries.len() as f64)
}
