//! Compilation: train buffer embeddings and a disposable adapter so that the
//! bottlenecked student matches the full-context teacher, then extract the
//! buffer's cache.
//!
//! Under the bottleneck mask the `[context][buffer]` prefix is plain causal
//! attention and query/response rows see only the buffer plus themselves.
//! A training step therefore runs the prefix once and lets every sample in
//! the batch attend to (a differentiable slice of) its keys and values. This
//! is exactly the combined masked forward, reorganised; `student_logits`
//! keeps the literal form for checking.

use crate::artifact::{ArtifactMeta, BufferArtifact, StorageDtype};
use crate::autograd::{Tape, Var};
use crate::data::{build_surrogate, context_cache, SampleKind, SurrogateOptions, SurrogateSample, Vocab};
use crate::error::{Error, Result};
use crate::kv::KvCache;
use crate::lora::{init_adapter_for, LoraAdapter, Projection, DEFAULT_ALPHA, DEFAULT_RANK};
use crate::mask::{build_segment_mask, Segment, SegmentLayout, SegmentMask, SegmentSet};
use crate::math;
use crate::model::{Fingerprint, ModelWeights};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::transformer::{
    embed, extract_buffer_cache, forward, logits, run_stack, AdapterVars, ForwardArgs, ModelVars, PastKv, Slot,
};
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum LossKind {
    #[default]
    Kl,
    Mse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Schedule {
    Constant,
    #[default]
    LinearDecay,
}

/// Student attention regime.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum MaskMode {
    /// Query and response see the context only through the buffer.
    #[default]
    Bottleneck,
    /// Diagnostic: plain causal attention over `[context][query][response]`
    /// with no buffer, which makes a fresh adapter reproduce the teacher.
    Relaxed,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct CompileConfig {
    /// Context tokens per buffer token.
    pub ratio: usize,
    /// Explicit buffer size; overrides `ratio`.
    pub k_tokens: Option<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub adam: AdamWConfig,
    pub loss_kind: LossKind,
    /// Keep the adapter active on query/response positions and ship it.
    pub coupled: bool,
    /// Reconstruction presentations over the whole run.
    pub n_recon: usize,
    /// Context-agnostic presentations over the whole run.
    pub n_agnostic: usize,
    pub batch_size: usize,
    pub rank: usize,
    pub alpha: f64,
    pub projections: Vec<Projection>,
    /// When false only the buffer embeddings train (diagnostic).
    pub train_adapter: bool,
    pub mask_mode: MaskMode,
    pub max_decode: usize,
    pub no_context_teacher: bool,
    /// Share of agnostic queries that probe keys absent from the context.
    /// The answers come from the teacher like any other query, and no key
    /// that a held-out probe could ask about is ever used.
    pub absent_key_probes: f64,
    pub dtype: StorageDtype,
    pub seed: u64,
}

impl Default for CompileConfig {
    fn default() -> Self {
        Self {
            ratio: 16,
            k_tokens: None,
            epochs: 45,
            // Calibrated for the desk-scale model; see `large_model_preset`.
            learning_rate: 1e-2,
            schedule: Schedule::LinearDecay,
            adam: AdamWConfig::default(),
            loss_kind: LossKind::Kl,
            coupled: false,
            n_recon: 2000,
            n_agnostic: 2000,
            batch_size: 8,
            rank: DEFAULT_RANK,
            alpha: DEFAULT_ALPHA,
            projections: Projection::ALL.to_vec(),
            train_adapter: true,
            mask_mode: MaskMode::Bottleneck,
            max_decode: crate::data::DEFAULT_MAX_DECODE,
            no_context_teacher: false,
            absent_key_probes: 0.5,
            dtype: StorageDtype::F32,
            seed: 0,
        }
    }
}

impl CompileConfig {
    /// Settings for billion-parameter backbones, where generic instruction
    /// data is rich enough on its own.
    pub fn large_model_preset() -> Self {
        Self {
            learning_rate: 2e-5,
            absent_key_probes: 0.0,
            ..Self::default()
        }
    }

    pub fn buffer_len(&self, n_ctx: usize) -> usize {
        self.k_tokens.unwrap_or_else(|| (n_ctx / self.ratio.max(1)).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.ratio == 0 {
            return bad("ratio must be positive");
        }
        if self.k_tokens == Some(0) {
            return bad("k_tokens must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if self.n_recon + self.n_agnostic < self.epochs {
            return bad("fewer presentations than epochs");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if self.max_decode == 0 {
            return bad("max_decode must be positive");
        }
        Ok(())
    }

    /// SHA-256 over every field, in declaration order.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"LCC-compile-config");
        let u = |h: &mut Sha256, x: u64| h.update(x.to_le_bytes());
        let f = |h: &mut Sha256, x: f64| h.update(x.to_le_bytes());
        u(&mut h, self.ratio as u64);
        u(&mut h, self.k_tokens.map_or(0, |k| k as u64 + 1));
        u(&mut h, self.epochs as u64);
        f(&mut h, self.learning_rate);
        u(&mut h, self.schedule as u64);
        for x in [self.adam.beta1, self.adam.beta2, self.adam.eps, self.adam.weight_decay] {
            f(&mut h, x);
        }
        u(&mut h, self.loss_kind as u64);
        u(&mut h, self.coupled as u64);
        u(&mut h, self.n_recon as u64);
        u(&mut h, self.n_agnostic as u64);
        u(&mut h, self.batch_size as u64);
        u(&mut h, self.rank as u64);
        f(&mut h, self.alpha);
        u(&mut h, self.projections.len() as u64);
        for p in &self.projections {
            u(&mut h, p.index() as u64);
        }
        u(&mut h, self.train_adapter as u64);
        u(&mut h, self.mask_mode as u64);
        u(&mut h, self.max_decode as u64);
        u(&mut h, self.no_context_teacher as u64);
        f(&mut h, self.absent_key_probes);
        u(&mut h, self.dtype as u64);
        u(&mut h, self.seed);
        h.finalize().into()
    }

    fn active_segments(&self) -> SegmentSet {
        if self.coupled {
            SegmentSet::all()
        } else {
            SegmentSet::compression()
        }
    }
}

/// The `K × d` table of trainable buffer-token embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct BufferEmbeddings {
    pub table: Tensor,
}

impl BufferEmbeddings {
    /// `K = max(1, floor(n_ctx / ratio))` rows, each the mean token embedding.
    pub fn new(weights: &ModelWeights, n_ctx: usize, ratio: usize) -> Result<Self> {
        if ratio == 0 {
            return Err(Error::InvalidConfig("ratio must be positive".into()));
        }
        Self::with_len(weights, (n_ctx / ratio).max(1))
    }

    pub fn with_len(weights: &ModelWeights, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidConfig("buffer needs at least one token".into()));
        }
        let mean = weights.mean_embedding();
        let d = mean.len();
        Ok(Self {
            table: Tensor::from_fn(&[k, d], |i| mean[i % d]),
        })
    }

    pub fn len(&self) -> usize {
        self.table.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_budget(weights: &ModelWeights, needed: usize) -> Result<()> {
    let max = weights.config.max_position;
    if needed > max {
        return Err(Error::PositionOverflow {
            position: needed - 1,
            max_position: max,
        });
    }
    Ok(())
}

/// Teacher rows predicting each target token, from a causal cache of the
/// context (or none, for the no-context teacher).
pub fn teacher_logits_cached(
    weights: &ModelWeights,
    ctx_cache: Option<&KvCache>,
    n_ctx: usize,
    query: &[u32],
    target: &[u32],
) -> Result<Tensor> {
    let vocab = weights.config.vocab_size;
    if target.is_empty() {
        return Tensor::new(&[0, vocab], Vec::new());
    }
    if query.is_empty() {
        return Err(Error::InvalidConfig("query must not be empty".into()));
    }
    check_budget(weights, n_ctx + query.len() + target.len())?;
    let input: Vec<Slot> = query
        .iter()
        .chain(&target[..target.len() - 1])
        .map(|&t| Slot::Token(t))
        .collect();
    let cached = ctx_cache.map_or(0, |c| c.len());
    let positions: Vec<usize> = (cached..cached + input.len()).collect();
    let mut segments = vec![Segment::Query; query.len()];
    segments.resize(input.len(), Segment::Response);
    let mask = SegmentMask::causal_after(cached, input.len());
    let args = ForwardArgs {
        cache_in: ctx_cache,
        ..ForwardArgs::tokens(&input, &positions, &segments, &mask)
    };
    let (lg, _) = forward(weights, args)?;
    let first = query.len() - 1;
    let data = lg.data()[first * vocab..(first + target.len()) * vocab].to_vec();
    Tensor::new(&[target.len(), vocab], data)
}

/// `P(·|C, x)` at every position predicting a target token: a plain causal
/// pass over `[context][query][target]` with no adapter.
pub fn teacher_logits(weights: &ModelWeights, context: &[u32], query: &[u32], target: &[u32]) -> Result<Tensor> {
    check_budget(weights, context.len() + query.len() + target.len())?;
    let cache = context_cache(weights, context)?;
    teacher_logits_cached(weights, Some(&cache), context.len(), query, target)
}

/// Literal student pass over `[context][buffer][query][target]` under the
/// full segment mask (or the relaxed diagnostic), on any tape.
#[allow(clippy::too_many_arguments)]
pub fn student_block(
    tape: &mut Tape<'_>,
    weights: &ModelWeights,
    mv: &ModelVars,
    av: Option<&AdapterVars>,
    buffer: Var,
    context: &[u32],
    query: &[u32],
    target: &[u32],
    mode: MaskMode,
) -> Result<Var> {
    let k = tape.shape(buffer)[0];
    let (layout, slots) = match mode {
        MaskMode::Bottleneck => (
            SegmentLayout::new(context.len(), k, query.len(), target.len())?,
            context
                .iter()
                .map(|&t| Slot::Token(t))
                .chain((0..k).map(Slot::Buffer))
                .chain(query.iter().chain(target).map(|&t| Slot::Token(t)))
                .collect::<Vec<_>>(),
        ),
        MaskMode::Relaxed => (
            SegmentLayout::new(context.len(), 1, query.len(), target.len())?,
            context.iter().chain(query).chain(target).map(|&t| Slot::Token(t)).collect(),
        ),
    };
    check_budget(weights, slots.len())?;
    let (segments, mask) = match mode {
        MaskMode::Bottleneck => (layout.segments(), build_segment_mask(&layout)),
        MaskMode::Relaxed => {
            let mut s = vec![Segment::Context; context.len()];
            s.extend(core::iter::repeat_n(Segment::Query, query.len()));
            s.extend(core::iter::repeat_n(Segment::Response, target.len()));
            (s, SegmentMask::causal(slots.len()))
        }
    };
    let positions: Vec<usize> = (0..slots.len()).collect();
    let x = embed(tape, mv, Some(buffer), &slots)?;
    let (h, _) = run_stack(tape, &weights.config, mv, av, x, &positions, &segments, &mask, None)?;
    let offset = if mode == MaskMode::Bottleneck { k } else { 0 };
    let first = context.len() + offset + query.len() - 1;
    let rows: Vec<usize> = (first..first + target.len()).collect();
    logits(tape, mv, h, Some(&rows))
}

/// Student logits aligned with [`teacher_logits`] (the `+K` offset removed).
#[allow(clippy::too_many_arguments)]
pub fn student_logits(
    weights: &ModelWeights,
    adapter: Option<&LoraAdapter>,
    buffer: &BufferEmbeddings,
    context: &[u32],
    query: &[u32],
    target: &[u32],
    mode: MaskMode,
) -> Result<Tensor> {
    if target.is_empty() {
        return Tensor::new(&[0, weights.config.vocab_size], Vec::new());
    }
    let mut tape = Tape::inference();
    let mv = ModelVars::bind(&mut tape, weights, false);
    let av = adapter.map(|a| AdapterVars::bind(&mut tape, a, false));
    let b = tape.constant_ref(&buffer.table);
    let out = student_block(&mut tape, weights, &mv, av.as_ref(), b, context, query, target, mode)?;
    Ok(tape.into_value(out))
}

/// Per-sample loss between position-aligned teacher and student blocks.
/// KL is `D(softmax(teacher) ‖ softmax(student))` averaged over positions;
/// MSE averages squared raw-logit differences.
pub fn loss(tape: &mut Tape<'_>, teacher: &Tensor, student: Var, kind: LossKind) -> Result<Var> {
    let rows = tape.shape(student).first().copied().unwrap_or(0);
    if teacher.shape() != tape.shape(student) {
        return Err(Error::Misaligned {
            teacher: teacher.shape().first().copied().unwrap_or(0),
            student: rows,
        });
    }
    match kind {
        LossKind::Kl => tape.kl_divergence_logits(teacher, student),
        LossKind::Mse => tape.mse(student, teacher),
    }
}

/// Shared `[context][buffer]` prefix; returns the keys/values student
/// suffixes may attend to.
fn student_prefix(
    tape: &mut Tape<'_>,
    weights: &ModelWeights,
    mv: &ModelVars,
    av: Option<&AdapterVars>,
    buffer: Var,
    context: &[u32],
    mode: MaskMode,
) -> Result<PastKv> {
    let k = tape.shape(buffer)[0];
    let mut slots: Vec<Slot> = context.iter().map(|&t| Slot::Token(t)).collect();
    let mut segments = vec![Segment::Context; context.len()];
    if mode == MaskMode::Bottleneck {
        slots.extend((0..k).map(Slot::Buffer));
        segments.extend(core::iter::repeat_n(Segment::Buffer, k));
    }
    let positions: Vec<usize> = (0..slots.len()).collect();
    let mask = SegmentMask::causal(slots.len());
    let x = embed(tape, mv, Some(buffer), &slots)?;
    let (_, kv) = run_stack(tape, &weights.config, mv, av, x, &positions, &segments, &mask, None)?;
    match mode {
        MaskMode::Bottleneck => kv.slice(tape, context.len()..context.len() + k),
        MaskMode::Relaxed => Ok(kv),
    }
}

fn student_suffix(
    tape: &mut Tape<'_>,
    weights: &ModelWeights,
    mv: &ModelVars,
    av: Option<&AdapterVars>,
    past: &PastKv,
    query: &[u32],
    target: &[u32],
) -> Result<Var> {
    let input: Vec<Slot> = query
        .iter()
        .chain(&target[..target.len() - 1])
        .map(|&t| Slot::Token(t))
        .collect();
    let start = past.positions.last().map_or(0, |p| p + 1);
    let positions: Vec<usize> = (start..start + input.len()).collect();
    let mut segments = vec![Segment::Query; query.len()];
    segments.resize(input.len(), Segment::Response);
    let mask = SegmentMask::causal_after(past.len(), input.len());
    let x = embed(tape, mv, None, &input)?;
    let (h, _) = run_stack(tape, &weights.config, mv, av, x, &positions, &segments, &mask, Some(past))?;
    let first = query.len() - 1;
    let rows: Vec<usize> = (first..first + target.len()).collect();
    logits(tape, mv, h, Some(&rows))
}

/// Loss summary of one step, measured before the update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// Mean reconstruction loss over the batch's reconstruction samples.
    pub recon: Option<f64>,
    /// Mean agnostic-query loss over the batch's agnostic samples.
    pub reg: Option<f64>,
    pub grad_norm: f64,
}

/// Optimisation state of one compile run.
pub struct Trainer<'w> {
    weights: &'w ModelWeights,
    context: Vec<u32>,
    config: CompileConfig,
    pub adapter: LoraAdapter,
    pub buffer: BufferEmbeddings,
    opt: AdamW,
    ctx_cache: KvCache,
    teacher: BTreeMap<(Vec<u32>, Vec<u32>), Tensor>,
    steps: usize,
}

impl<'w> Trainer<'w> {
    pub fn new(weights: &'w ModelWeights, context: &[u32], config: &CompileConfig) -> Result<Self> {
        config.validate()?;
        if context.is_empty() {
            return Err(Error::InvalidConfig("context is empty".into()));
        }
        let mut rng = RngState::new(config.seed).fork(1);
        let mut adapter = init_adapter_for(&weights.config, config.rank, config.alpha, &config.projections, &mut rng)?;
        adapter.active = config.active_segments();
        let buffer = BufferEmbeddings::with_len(weights, config.buffer_len(context.len()))?;
        let mut trainer = Self {
            weights,
            context: context.to_vec(),
            config: config.clone(),
            adapter,
            buffer,
            opt: AdamW::new(config.adam, &[]),
            ctx_cache: context_cache(weights, context)?,
            teacher: BTreeMap::new(),
            steps: 0,
        };
        let sizes: Vec<usize> = trainer.trainable_mut().iter().map(|t| t.len()).collect();
        trainer.opt = AdamW::new(config.adam, &sizes);
        Ok(trainer)
    }

    /// Names of every tensor the optimiser may change, in update order.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut out = vec![String::from("buffer")];
        if self.config.train_adapter {
            out.extend(self.adapter.named_tensors().into_iter().map(|(n, _)| n));
        }
        out
    }

    fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.buffer.table];
        if self.config.train_adapter {
            out.extend(self.adapter.tensors_mut());
        }
        out
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    fn teacher_block(&mut self, query: &[u32], target: &[u32]) -> Result<Tensor> {
        let key = (query.to_vec(), target.to_vec());
        if let Some(t) = self.teacher.get(&key) {
            return Ok(t.clone());
        }
        let (cache, n_ctx) = if self.config.no_context_teacher {
            (None, 0)
        } else {
            (Some(&self.ctx_cache), self.context.len())
        };
        let t = teacher_logits_cached(self.weights, cache, n_ctx, query, target)?;
        self.teacher.insert(key, t.clone());
        Ok(t)
    }

    /// Batch loss and gradients (in [`Self::trainable_names`] order).
    fn evaluate(&mut self, batch: &[SurrogateSample], want_grads: bool) -> Result<(StepStats, Vec<Vec<f64>>)> {
        if batch.is_empty() {
            return Err(Error::InvalidConfig("empty batch".into()));
        }
        // Identical samples share one forward pass, weighted by multiplicity.
        let mut unique: Vec<(&SurrogateSample, usize)> = Vec::new();
        for s in batch {
            match unique.iter_mut().find(|(u, _)| u.query == s.query && u.target == s.target) {
                Some((_, n)) => *n += 1,
                None => unique.push((s, 1)),
            }
        }
        let blocks = unique
            .iter()
            .map(|(s, _)| self.teacher_block(&s.query, &s.target))
            .collect::<Result<Vec<_>>>()?;
        let cfg = &self.config;
        let mut tape = if want_grads { Tape::new() } else { Tape::inference() };
        let mv = ModelVars::bind(&mut tape, self.weights, false);
        let av = AdapterVars::bind(&mut tape, &self.adapter, cfg.train_adapter);
        let buf = tape.param_ref(&self.buffer.table);
        let past = student_prefix(&mut tape, self.weights, &mv, Some(&av), buf, &self.context, cfg.mask_mode)?;
        let total = batch.len() as f64;
        let mut terms = Vec::new();
        let (mut recon, mut reg) = ((0.0, 0usize), (0.0, 0usize));
        for ((s, n), block) in unique.iter().zip(&blocks) {
            if s.target.is_empty() {
                continue;
            }
            let student = student_suffix(&mut tape, self.weights, &mv, Some(&av), &past, &s.query, &s.target)?;
            let l = loss(&mut tape, block, student, cfg.loss_kind)?;
            let value = tape.value(l).data()[0];
            let acc = match s.kind {
                SampleKind::Reconstruction => &mut recon,
                SampleKind::Agnostic => &mut reg,
            };
            acc.0 += value * *n as f64;
            acc.1 += n;
            terms.push((l, *n as f64 / total));
        }
        let mean = |(sum, n): (f64, usize)| (n > 0).then(|| sum / n as f64);
        let mut stats = StepStats {
            loss: 0.0,
            recon: mean(recon),
            reg: mean(reg),
            grad_norm: 0.0,
        };
        if terms.is_empty() {
            return Ok((stats, Vec::new()));
        }
        let objective = tape.weighted_sum(&terms)?;
        stats.loss = tape.value(objective).data()[0];
        if !stats.loss.is_finite() {
            return Err(Error::Divergence {
                step: self.steps,
                loss: stats.loss,
            });
        }
        let mut grads = Vec::new();
        if want_grads {
            tape.backward(objective)?;
            let mut vars = vec![buf];
            if cfg.train_adapter {
                vars.extend(av.all());
            }
            for v in vars {
                let len = tape.value(v).len();
                grads.push(tape.grad(v).map_or_else(|| vec![0.0; len], |g| g.to_vec()));
            }
            let sq: f64 = grads.iter().flatten().map(|g| g * g).sum();
            stats.grad_norm = math::sqrt(sq);
            if !stats.grad_norm.is_finite() {
                return Err(Error::Divergence {
                    step: self.steps,
                    loss: stats.grad_norm,
                });
            }
        }
        Ok((stats, grads))
    }

    /// Loss of `batch` at the current parameters, without updating.
    pub fn batch_loss(&mut self, batch: &[SurrogateSample]) -> Result<StepStats> {
        Ok(self.evaluate(batch, false)?.0)
    }

    /// Gradients of the batch loss, in [`Self::trainable_names`] order.
    pub fn gradients(&mut self, batch: &[SurrogateSample]) -> Result<Vec<Vec<f64>>> {
        Ok(self.evaluate(batch, true)?.1)
    }

    /// Max relative error between [`Self::gradients`] and central
    /// differences of [`Self::batch_loss`] at `(tensor, element)` entries,
    /// tensors indexed as in [`Self::trainable_names`].
    pub fn check_gradients(&mut self, batch: &[SurrogateSample], entries: &[(usize, usize)], eps: f64) -> Result<f64> {
        let grads = self.gradients(batch)?;
        let mut worst = 0.0f64;
        for &(t, i) in entries {
            let analytic = *grads.get(t).and_then(|g| g.get(i)).ok_or_else(|| {
                Error::InvalidConfig(format!("no trainable entry ({t}, {i})"))
            })?;
            let orig = self.trainable_mut()[t].data()[i];
            let at = |x: f64, me: &mut Self| -> Result<f64> {
                me.trainable_mut()[t].data_mut()[i] = x;
                Ok(me.batch_loss(batch)?.loss)
            };
            let plus = at(orig + eps, self)?;
            let minus = at(orig - eps, self)?;
            at(orig, self)?;
            let numeric = (plus - minus) / (2.0 * eps);
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
        Ok(worst)
    }

    /// Accumulate gradients over `batch` and apply one AdamW update.
    pub fn train_step(&mut self, batch: &[SurrogateSample], lr: f64) -> Result<StepStats> {
        let (stats, grads) = self.evaluate(batch, true)?;
        if !grads.is_empty() {
            let refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
            let mut opt = core::mem::replace(&mut self.opt, AdamW::new(self.config.adam, &[]));
            let result = opt.update(&mut self.trainable_mut(), &refs, lr);
            self.opt = opt;
            result?;
        }
        self.steps += 1;
        Ok(stats)
    }

    /// Final compression-stage pass: the buffer's cache.
    pub fn extract(&self) -> Result<KvCache> {
        let layout = SegmentLayout::new(self.context.len(), self.buffer.len(), 0, 0)?;
        extract_buffer_cache(self.weights, &self.context, &layout, Some(&self.adapter), &self.buffer.table)
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: usize,
    pub mean_recon: Option<f64>,
    pub mean_reg: Option<f64>,
    pub mean_loss: f64,
    pub mean_grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainReport {
    pub n_ctx: usize,
    pub k_tokens: usize,
    pub steps: usize,
    /// Loss of the first batch before any update.
    pub initial_loss: f64,
    pub epochs: Vec<EpochStats>,
    /// Tensors whose values differ from their initial state.
    pub mutated: Vec<String>,
    pub base_fingerprint: String,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.mean_loss)
    }
}

pub struct CompileOutput {
    pub artifact: BufferArtifact,
    pub report: TrainReport,
    pub buffer: BufferEmbeddings,
    /// Present only in coupled mode; otherwise the adapter was discarded.
    pub adapter: Option<LoraAdapter>,
}

/// Presentation order: the two streams alternate, each keeping its
/// shuffled order, until both run out.
pub fn interleave(samples: Vec<SurrogateSample>) -> Vec<SurrogateSample> {
    let (recon, agn): (Vec<_>, Vec<_>) = samples.into_iter().partition(|s| s.kind == SampleKind::Reconstruction);
    let mut out = Vec::with_capacity(recon.len() + agn.len());
    let (mut r, mut a) = (recon.into_iter(), agn.into_iter());
    loop {
        match (r.next(), a.next()) {
            (None, None) => break,
            (x, y) => out.extend(x.into_iter().chain(y)),
        }
    }
    out
}

/// Learning rate for step `t` of `total`.
pub fn lr_at(config: &CompileConfig, t: usize, total: usize) -> f64 {
    match config.schedule {
        Schedule::Constant => config.learning_rate,
        Schedule::LinearDecay => config.learning_rate * (1.0 - t as f64 / total.max(1) as f64),
    }
}

fn snapshot(adapter: &LoraAdapter, buffer: &BufferEmbeddings) -> Vec<(String, Tensor)> {
    let mut out = vec![(String::from("buffer"), buffer.table.clone())];
    out.extend(adapter.named_tensors().into_iter().map(|(n, t)| (n, t.clone())));
    out
}

/// Compile `context` into a buffer artifact for `weights`.
///
/// The presentations (`n_recon + n_agnostic`) are split into `epochs`
/// contiguous chunks and consumed in batches of `batch_size`.
pub fn compile(vocab: &Vocab, weights: &ModelWeights, context: &[u32], config: &CompileConfig) -> Result<CompileOutput> {
    config.validate()?;
    let fingerprint: Fingerprint = weights.fingerprint();
    let k = config.buffer_len(context.len());
    let mut trainer = Trainer::new(weights, context, config)?;
    let mut rng = RngState::new(config.seed).fork(2);
    let opts = SurrogateOptions {
        max_decode: config.max_decode,
        no_context_teacher: config.no_context_teacher,
        absent_key_probes: config.absent_key_probes,
    };
    let samples = interleave(build_surrogate(
        vocab,
        context,
        weights,
        config.n_recon,
        config.n_agnostic,
        &mut rng,
        opts,
    )?);
    let longest = samples.iter().map(|s| s.query.len() + s.target.len()).max().unwrap_or(0);
    check_budget(weights, context.len() + k + longest)?;
    let before = snapshot(&trainer.adapter, &trainer.buffer);

    let n = samples.len();
    let bounds: Vec<usize> = (0..=config.epochs).map(|e| e * n / config.epochs).collect();
    let total_steps: usize = bounds.windows(2).map(|w| (w[1] - w[0]).div_ceil(config.batch_size)).sum();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut initial_loss = None;
    for e in 0..config.epochs {
        let chunk = &samples[bounds[e]..bounds[e + 1]];
        let mut acc = EpochAcc::default();
        for batch in chunk.chunks(config.batch_size) {
            let lr = lr_at(config, trainer.steps(), total_steps);
            let stats = trainer.train_step(batch, lr)?;
            initial_loss.get_or_insert(stats.loss);
            acc.add(&stats);
        }
        epochs.push(acc.finish(e));
    }

    let cache = trainer.extract()?;
    let meta = ArtifactMeta {
        context_len: context.len() as u64,
        ratio: config.ratio as u32,
        config_hash: config.hash(),
    };
    let artifact = BufferArtifact::from_cache(fingerprint, &cache, config.dtype, meta)?;
    let after = snapshot(&trainer.adapter, &trainer.buffer);
    let mutated = before
        .iter()
        .zip(&after)
        .filter(|((_, a), (_, b))| !a.bits_eq(b))
        .map(|((name, _), _)| name.clone())
        .collect();
    if weights.fingerprint() != fingerprint {
        return Err(Error::IncompatibleModel);
    }
    let report = TrainReport {
        n_ctx: context.len(),
        k_tokens: k,
        steps: trainer.steps(),
        initial_loss: initial_loss.unwrap_or(0.0),
        epochs,
        mutated,
        base_fingerprint: format!("{fingerprint}"),
    };
    let Trainer { adapter, buffer, .. } = trainer;
    let adapter = if config.coupled {
        Some(adapter)
    } else {
        adapter.discard();
        None
    };
    Ok(CompileOutput {
        artifact,
        report,
        buffer,
        adapter,
    })
}

#[derive(Default)]
struct EpochAcc {
    steps: usize,
    loss: f64,
    grad: f64,
    recon: (f64, usize),
    reg: (f64, usize),
}

impl EpochAcc {
    fn add(&mut self, s: &StepStats) {
        self.steps += 1;
        self.loss += s.loss;
        self.grad += s.grad_norm;
        if let Some(r) = s.recon {
            self.recon.0 += r;
            self.recon.1 += 1;
        }
        if let Some(r) = s.reg {
            self.reg.0 += r;
            self.reg.1 += 1;
        }
    }

    fn finish(self, epoch: usize) -> EpochStats {
        let n = self.steps.max(1) as f64;
        let mean = |(s, c): (f64, usize)| (c > 0).then(|| s / c as f64);
        EpochStats {
            epoch,
            steps: self.steps,
            mean_recon: mean(self.recon),
            mean_reg: mean(self.reg),
            mean_loss: self.loss / n,
            mean_grad_norm: self.grad / n,
        }
    }
}

/// Context-free comparison point: an adapter active everywhere, tuned by
/// next-token prediction on the raw context and kept at query time.
pub fn tune_adapter_on_context(
    weights: &ModelWeights,
    context: &[u32],
    config: &CompileConfig,
    steps: usize,
) -> Result<LoraAdapter> {
    if context.len() < 2 {
        return Err(Error::InvalidConfig("context too short to tune on".into()));
    }
    check_budget(weights, context.len())?;
    let mut rng = RngState::new(config.seed).fork(3);
    let mut adapter = init_adapter_for(&weights.config, config.rank, config.alpha, &config.projections, &mut rng)?;
    adapter.active = SegmentSet::all();
    let sizes: Vec<usize> = adapter.tensors_mut().iter().map(|t| t.len()).collect();
    let mut opt = AdamW::new(config.adam, &sizes);
    let slots: Vec<Slot> = context[..context.len() - 1].iter().map(|&t| Slot::Token(t)).collect();
    let positions: Vec<usize> = (0..slots.len()).collect();
    let segments = vec![Segment::Query; slots.len()];
    let mask = SegmentMask::causal(slots.len());
    for step in 0..steps {
        let grads = {
            let mut tape = Tape::new();
            let mv = ModelVars::bind(&mut tape, weights, false);
            let av = AdapterVars::bind(&mut tape, &adapter, true);
            let x = embed(&mut tape, &mv, None, &slots)?;
            let (h, _) = run_stack(&mut tape, &weights.config, &mv, Some(&av), x, &positions, &segments, &mask, None)?;
            let lg = logits(&mut tape, &mv, h, None)?;
            let l = tape.cross_entropy(lg, &context[1..])?;
            let value = tape.value(l).data()[0];
            if !value.is_finite() {
                return Err(Error::Divergence { step, loss: value });
            }
            tape.backward(l)?;
            av.all()
                .into_iter()
                .map(|v| tape.grad(v).map_or_else(|| vec![0.0; tape.value(v).len()], |g| g.to_vec()))
                .collect::<Vec<_>>()
        };
        let refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
        let lr = match config.schedule {
            Schedule::Constant => config.learning_rate,
            Schedule::LinearDecay => config.learning_rate * (1.0 - step as f64 / steps as f64),
        };
        opt.update(&mut adapter.tensors_mut(), &refs, lr)?;
    }
    Ok(adapter)
}
