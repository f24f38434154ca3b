//! Pretraining the small base model on the synthetic language.
//!
//! Each training sequence starts with a fresh random context and continues
//! with supervised segments: fact probes and agnostic instructions in random
//! order, or the repeat-the-context task. Some sequences carry instructions
//! only. Loss is next-token cross-entropy averaged over every supervised
//! token in the batch, so long answers weigh more than short ones.

use crate::autograd::Tape;
use crate::data::{gen_context, gen_instruction, Vocab, STOP, TRIGGER};
use crate::error::{Error, Result};
use crate::metrics::{answer, probe_accuracy, Conditioning};
use crate::model::{ModelConfig, ModelWeights};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::RngState;
use crate::transformer::{embed, logits, run_stack, ModelVars, Slot};
use crate::{data, mask::Segment, mask::SegmentMask};
use alloc::vec;
use alloc::vec::Vec;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub vocab: Vocab,
    pub seed: u64,
    /// Training contexts hold between 1 and `max_facts` facts...
    pub max_facts: usize,
    /// ...in `min_ctx_len..=max_ctx_len` tokens.
    pub min_ctx_len: usize,
    pub max_ctx_len: usize,
    /// Held-out evaluation contexts use exactly these sizes.
    pub eval_facts: usize,
    pub eval_ctx_len: usize,
    pub eval_contexts: usize,
    pub eval_every: usize,
    pub max_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup: usize,
    pub adam: AdamWConfig,
    /// Probability that a sequence is the reconstruction task.
    pub p_reconstruct: f64,
    /// Probability that a sequence has no context at all.
    pub p_no_context: f64,
    pub instructions_per_sequence: usize,
    /// Every fact is probed this many times per sequence.
    pub probe_rounds: usize,
    pub target_recall: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        let vocab = Vocab::default();
        Self {
            model: ModelConfig::desk(vocab.size()),
            vocab,
            seed: 0,
            max_facts: 4,
            min_ctx_len: 16,
            max_ctx_len: 32,
            eval_facts: 4,
            eval_ctx_len: 64,
            eval_contexts: 32,
            eval_every: 250,
            max_steps: 6000,
            // Retrieval does not form with a handful of sequences per step.
            batch_size: 16,
            learning_rate: 3e-3,
            warmup: 100,
            adam: AdamWConfig::default(),
            p_reconstruct: 0.3,
            p_no_context: 0.1,
            instructions_per_sequence: 2,
            probe_rounds: 3,
            target_recall: 0.95,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalPoint {
    pub step: usize,
    pub train_loss: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PretrainReport {
    pub steps: usize,
    /// Held-out probe accuracy with the raw context in view.
    pub recall: f64,
    /// Same probes with no context.
    pub no_context_recall: f64,
    /// Exact-answer rate on held-out instructions following a context.
    pub instruction_accuracy: f64,
    /// Exact repetition rate of held-out contexts.
    pub reconstruction_accuracy: f64,
    pub history: Vec<EvalPoint>,
    pub fingerprint: alloc::string::String,
}

/// One training sequence with the rows whose next token is supervised.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingSequence {
    pub tokens: Vec<u32>,
    /// `(row, next token)` pairs.
    pub supervised: Vec<(usize, u32)>,
}

impl TrainingSequence {
    fn push_prompt(&mut self, tokens: &[u32]) {
        self.tokens.extend(tokens);
    }

    fn push_answer(&mut self, tokens: &[u32]) {
        for &t in tokens {
            self.supervised.push((self.tokens.len() - 1, t));
            self.tokens.push(t);
        }
    }
}

/// Draw one pretraining sequence.
pub fn sample_sequence(cfg: &PretrainConfig, rng: &mut RngState) -> Result<TrainingSequence> {
    let v = &cfg.vocab;
    let mut seq = TrainingSequence {
        tokens: Vec::new(),
        supervised: Vec::new(),
    };
    let instructions = |seq: &mut TrainingSequence, rng: &mut RngState| {
        let ins = gen_instruction(v, rng);
        seq.push_prompt(&ins.query);
        seq.push_answer(&ins.answer);
    };
    if rng.uniform() < cfg.p_no_context {
        for _ in 0..cfg.instructions_per_sequence.max(1) {
            instructions(&mut seq, rng);
        }
        return Ok(seq);
    }
    let n_facts = 1 + rng.below(cfg.max_facts);
    let min_len = cfg.min_ctx_len.max(2 * n_facts);
    let len = min_len + rng.below(cfg.max_ctx_len.max(min_len) - min_len + 1);
    let ctx = gen_context(v, rng.next_u64(), n_facts, len)?;
    seq.push_prompt(&ctx.tokens);
    if rng.uniform() < cfg.p_reconstruct {
        seq.push_prompt(&TRIGGER);
        let mut target = ctx.tokens.clone();
        target.push(STOP);
        seq.push_answer(&target);
        return Ok(seq);
    }
    // Probes for every fact plus a few instructions, shuffled together.
    let mut items: Vec<Option<usize>> = (0..ctx.facts.len() * cfg.probe_rounds.max(1))
        .map(|i| Some(i % ctx.facts.len()))
        .collect();
    items.extend(core::iter::repeat_n(None, cfg.instructions_per_sequence));
    rng.shuffle(&mut items);
    for item in items {
        match item {
            Some(i) => {
                let f = ctx.facts[i];
                seq.push_prompt(&[data::ASK, f.key]);
                seq.push_answer(&[f.value, STOP]);
            }
            None => instructions(&mut seq, rng),
        }
    }
    Ok(seq)
}

fn sequence_grads(weights: &ModelWeights, seq: &TrainingSequence, scale: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    let n = seq.tokens.len();
    let mut tape = Tape::new();
    let mv = ModelVars::bind(&mut tape, weights, true);
    let slots: Vec<Slot> = seq.tokens.iter().map(|&t| Slot::Token(t)).collect();
    let positions: Vec<usize> = (0..n).collect();
    let segments = vec![Segment::Query; n];
    let mask = SegmentMask::causal(n);
    let x = embed(&mut tape, &mv, None, &slots)?;
    let (h, _) = run_stack(&mut tape, &weights.config, &mv, None, x, &positions, &segments, &mask, None)?;
    let rows: Vec<usize> = seq.supervised.iter().map(|s| s.0).collect();
    let targets: Vec<u32> = seq.supervised.iter().map(|s| s.1).collect();
    let lg = logits(&mut tape, &mv, h, Some(&rows))?;
    let ce = tape.cross_entropy(lg, &targets)?;
    let l = tape.scale(ce, scale);
    let value = tape.value(ce).data()[0];
    tape.backward(l)?;
    let grads = mv
        .all()
        .into_iter()
        .map(|v| tape.grad(v).map_or_else(|| vec![0.0; tape.value(v).len()], |g| g.to_vec()))
        .collect();
    Ok((value, grads))
}

/// Held-out metrics on contexts the training stream never draws.
pub fn evaluate(weights: &ModelWeights, cfg: &PretrainConfig) -> Result<(f64, f64, f64, f64)> {
    let eval_rng = RngState::new(cfg.seed).fork(0xE7A1);
    let mut rng = eval_rng.clone();
    let (mut recall, mut blind, mut instr, mut recon) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..cfg.eval_contexts {
        let ctx = gen_context(&cfg.vocab, rng.next_u64() | 1 << 63, cfg.eval_facts, cfg.eval_ctx_len)?;
        let probes = ctx.probes();
        let cache = data::context_cache(weights, &ctx.tokens)?;
        recall += probe_accuracy(weights, Conditioning::Context(&cache), &probes)?;
        blind += probe_accuracy(weights, Conditioning::Nothing, &probes)?;
        let ins = gen_instruction(&cfg.vocab, &mut rng);
        let got = answer(weights, Conditioning::Context(&cache), &ins.query, ins.answer.len())?;
        if got[..] == ins.answer[..ins.answer.len() - 1] {
            instr += 1.0;
        }
        let rep = answer(weights, Conditioning::Context(&cache), &TRIGGER, ctx.len() + 1)?;
        if rep == ctx.tokens {
            recon += 1.0;
        }
    }
    let n = cfg.eval_contexts.max(1) as f64;
    Ok((recall / n, blind / n, instr / n, recon / n))
}

/// Train until held-out full-context recall reaches the target (checked
/// every `eval_every` steps) or the step budget runs out.
pub fn pretrain(cfg: &PretrainConfig) -> Result<(ModelWeights, PretrainReport)> {
    pretrain_with(cfg, &mut |_| {})
}

/// [`pretrain`], reporting each evaluation point to `progress`.
pub fn pretrain_with(
    cfg: &PretrainConfig,
    progress: &mut dyn FnMut(&EvalPoint),
) -> Result<(ModelWeights, PretrainReport)> {
    cfg.vocab.validate()?;
    if cfg.model.vocab_size < cfg.vocab.size() {
        return Err(Error::InvalidConfig("model vocabulary smaller than the language".into()));
    }
    if cfg.max_facts == 0 || cfg.batch_size == 0 || cfg.eval_every == 0 {
        return Err(Error::InvalidConfig("max_facts, batch_size and eval_every must be positive".into()));
    }
    let root = RngState::new(cfg.seed);
    let mut weights = ModelWeights::init(&cfg.model, &mut root.fork(1))?;
    let sizes: Vec<usize> = weights.tensors_mut().iter().map(|t| t.len()).collect();
    let mut opt = AdamW::new(cfg.adam, &sizes);
    let mut data_rng = root.fork(2);
    let mut history = Vec::new();
    let mut running = 0.0;
    let mut recall = 0.0;
    for step in 1..=cfg.max_steps {
        let mut acc: Option<Vec<Vec<f64>>> = None;
        let mut batch_loss = 0.0;
        let batch = (0..cfg.batch_size)
            .map(|_| sample_sequence(cfg, &mut data_rng))
            .collect::<Result<Vec<_>>>()?;
        let total: usize = batch.iter().map(|s| s.supervised.len()).sum();
        for seq in batch.iter().filter(|s| !s.supervised.is_empty()) {
            let share = seq.supervised.len() as f64 / total as f64;
            let (l, g) = sequence_grads(&weights, seq, share)?;
            if !l.is_finite() {
                return Err(Error::Divergence { step, loss: l });
            }
            batch_loss += l * share;
            match &mut acc {
                None => acc = Some(g),
                Some(a) => a
                    .iter_mut()
                    .zip(&g)
                    .for_each(|(a, g)| a.iter_mut().zip(g).for_each(|(x, y)| *x += y)),
            }
        }
        let grads = acc.unwrap_or_default();
        let refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
        let warm = (step as f64 / cfg.warmup.max(1) as f64).min(1.0);
        opt.update(&mut weights.tensors_mut(), &refs, cfg.learning_rate * warm)?;
        running = if step == 1 { batch_loss } else { 0.98 * running + 0.02 * batch_loss };
        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            recall = evaluate(&weights, cfg)?.0;
            history.push(EvalPoint {
                step,
                train_loss: running,
                recall,
            });
            progress(history.last().expect("just pushed"));
            if recall >= cfg.target_recall {
                let (recall, no_context_recall, instruction_accuracy, reconstruction_accuracy) = evaluate(&weights, cfg)?;
                let report = PretrainReport {
                    steps: step,
                    recall,
                    no_context_recall,
                    instruction_accuracy,
                    reconstruction_accuracy,
                    history,
                    fingerprint: alloc::format!("{}", weights.fingerprint()),
                };
                return Ok((weights, report));
            }
        }
    }
    Err(Error::RecallNotReached {
        recall,
        target: cfg.target_recall,
        steps: cfg.max_steps,
    })
}
