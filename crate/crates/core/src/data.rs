//! Synthetic fact language and surrogate-dataset construction.
//!
//! A context is a run of fact clauses `[key value]` separated by filler
//! tokens. Probes ask `[ASK key]` and expect `[value STOP]`. Context-agnostic
//! queries come from a few fixed templates (greetings, copy, count, reverse)
//! over token ranges disjoint from keys and values.

use crate::error::{Error, Result};
use crate::kv::KvCache;
use crate::mask::{Segment, SegmentMask};
use crate::model::ModelWeights;
use crate::rng::RngState;
use crate::transformer::{causal_mask_builder, decode_greedy, forward, ForwardArgs, Slot};
use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

pub const STOP: u32 = 0;
pub const ASK: u32 = 1;
pub const REPEAT: u32 = 2;
pub const CONTEXT: u32 = 3;
pub const HELLO: u32 = 4;
pub const HI: u32 = 5;
pub const THANKS: u32 = 6;
pub const WELCOME: u32 = 7;
pub const COPY: u32 = 8;
pub const COUNT: u32 = 9;
pub const REV: u32 = 10;
const N_SPECIAL: u32 = 11;

/// The fixed query asking the model to repeat its context.
pub const TRIGGER: [u32; 2] = [REPEAT, CONTEXT];

/// Default cap on teacher-decoded agnostic targets.
pub const DEFAULT_MAX_DECODE: usize = 32;

/// Token-id layout of the synthetic language: specials, then keys, values,
/// fillers, words and digits as contiguous ranges.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Vocab {
    pub n_keys: u32,
    pub n_values: u32,
    pub n_fillers: u32,
    pub n_words: u32,
    pub n_digits: u32,
}

impl Default for Vocab {
    fn default() -> Self {
        Self {
            n_keys: 32,
            n_values: 16,
            n_fillers: 8,
            n_words: 16,
            n_digits: 10,
        }
    }
}

/// Token class, for detokenization and stream-purity checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenClass {
    Special,
    Key(u32),
    Value(u32),
    Filler(u32),
    Word(u32),
    Digit(u32),
    Unknown,
}

impl Vocab {
    fn key_base(&self) -> u32 {
        N_SPECIAL
    }
    fn value_base(&self) -> u32 {
        self.key_base() + self.n_keys
    }
    fn filler_base(&self) -> u32 {
        self.value_base() + self.n_values
    }
    fn word_base(&self) -> u32 {
        self.filler_base() + self.n_fillers
    }
    fn digit_base(&self) -> u32 {
        self.word_base() + self.n_words
    }

    pub fn size(&self) -> usize {
        (self.digit_base() + self.n_digits) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_keys == 0 || self.n_values == 0 || self.n_fillers == 0 || self.n_words == 0 || self.n_digits < 2 {
            return Err(Error::InvalidConfig("every token class needs members (digits at least 2)".into()));
        }
        Ok(())
    }

    pub fn key(&self, i: u32) -> u32 {
        self.key_base() + i
    }
    pub fn value(&self, i: u32) -> u32 {
        self.value_base() + i
    }
    pub fn filler(&self, i: u32) -> u32 {
        self.filler_base() + i
    }
    pub fn word(&self, i: u32) -> u32 {
        self.word_base() + i
    }
    pub fn digit(&self, i: u32) -> u32 {
        self.digit_base() + i
    }

    pub fn class(&self, t: u32) -> TokenClass {
        let ranges = [
            (self.key_base(), self.n_keys, TokenClass::Key as fn(u32) -> TokenClass),
            (self.value_base(), self.n_values, TokenClass::Value),
            (self.filler_base(), self.n_fillers, TokenClass::Filler),
            (self.word_base(), self.n_words, TokenClass::Word),
            (self.digit_base(), self.n_digits, TokenClass::Digit),
        ];
        if t < N_SPECIAL {
            return TokenClass::Special;
        }
        for (base, n, f) in ranges {
            if t >= base && t < base + n {
                return f(t - base);
            }
        }
        TokenClass::Unknown
    }

    pub fn is_key(&self, t: u32) -> bool {
        matches!(self.class(t), TokenClass::Key(_))
    }

    /// Human-readable rendering, e.g. `k3 v7 f0 ask k3`.
    pub fn detokenize(&self, tokens: &[u32]) -> String {
        let mut out = String::new();
        for (i, &t) in tokens.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            let word: String = match self.class(t) {
                TokenClass::Special => SPECIAL_WORDS[t as usize].into(),
                TokenClass::Key(i) => alloc::format!("k{i}"),
                TokenClass::Value(i) => alloc::format!("v{i}"),
                TokenClass::Filler(i) => alloc::format!("f{i}"),
                TokenClass::Word(i) => alloc::format!("w{i}"),
                TokenClass::Digit(i) => alloc::format!("d{i}"),
                TokenClass::Unknown => alloc::format!("<{t}>"),
            };
            out.push_str(&word);
        }
        out
    }

    /// Inverse of [`Vocab::detokenize`] for one word.
    pub fn parse_word(&self, word: &str) -> Option<u32> {
        if let Some(i) = SPECIAL_WORDS.iter().position(|&w| w == word) {
            return Some(i as u32);
        }
        let (prefix, rest) = word.split_at_checked(1)?;
        let i: u32 = rest.parse().ok()?;
        let (n, f): (u32, fn(&Self, u32) -> u32) = match prefix {
            "k" => (self.n_keys, Self::key),
            "v" => (self.n_values, Self::value),
            "f" => (self.n_fillers, Self::filler),
            "w" => (self.n_words, Self::word),
            "d" => (self.n_digits, Self::digit),
            _ => return None,
        };
        (i < n).then(|| f(self, i))
    }
}

const SPECIAL_WORDS: [&str; N_SPECIAL as usize] = [
    "<stop>", "ask", "repeat", "context", "hello", "hi", "thanks", "welcome", "copy", "count", "reverse",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fact {
    pub key: u32,
    pub value: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticContext {
    pub facts: Vec<Fact>,
    pub tokens: Vec<u32>,
    pub seed: u64,
}

impl SyntheticContext {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// One probe per fact, tagged by where the fact sits (early/middle/late).
    pub fn probes(&self) -> ProbeSet {
        let n = self.tokens.len().max(1);
        let items = self
            .facts
            .iter()
            .map(|f| {
                let at = self.tokens.iter().position(|&t| t == f.key).unwrap_or(0);
                let tag = match 3 * at / n {
                    0 => Difficulty::Early,
                    1 => Difficulty::Middle,
                    _ => Difficulty::Late,
                };
                Probe {
                    query: vec![ASK, f.key],
                    gold: vec![f.value],
                    difficulty: tag,
                }
            })
            .collect();
        ProbeSet { items }
    }
}

/// Emit `n_facts` clauses with filler spread randomly between them so the
/// total is exactly `ctx_len` tokens.
pub fn gen_context(vocab: &Vocab, seed: u64, n_facts: usize, ctx_len: usize) -> Result<SyntheticContext> {
    vocab.validate()?;
    if n_facts > vocab.n_keys as usize {
        return Err(Error::Budget {
            needed: n_facts,
            available: vocab.n_keys as usize,
        });
    }
    if ctx_len < 2 * n_facts || ctx_len == 0 {
        return Err(Error::Budget {
            needed: (2 * n_facts).max(1),
            available: ctx_len,
        });
    }
    let mut rng = RngState::new(seed);
    let mut keys: Vec<u32> = (0..vocab.n_keys).collect();
    rng.shuffle(&mut keys);
    let facts: Vec<Fact> = keys[..n_facts]
        .iter()
        .map(|&k| Fact {
            key: vocab.key(k),
            value: vocab.value(rng.below(vocab.n_values as usize) as u32),
        })
        .collect();
    // Filler counts for the n_facts + 1 gaps.
    let mut gaps = vec![0usize; n_facts + 1];
    for _ in 0..ctx_len - 2 * n_facts {
        gaps[rng.below(n_facts + 1)] += 1;
    }
    let mut tokens = Vec::with_capacity(ctx_len);
    for (i, &gap) in gaps.iter().enumerate() {
        for _ in 0..gap {
            tokens.push(vocab.filler(rng.below(vocab.n_fillers as usize) as u32));
        }
        if let Some(f) = facts.get(i) {
            tokens.extend([f.key, f.value]);
        }
    }
    Ok(SyntheticContext { facts, tokens, seed })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Difficulty {
    Early,
    Middle,
    Late,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Probe {
    pub query: Vec<u32>,
    pub gold: Vec<u32>,
    pub difficulty: Difficulty,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ProbeSet {
    pub items: Vec<Probe>,
}

impl ProbeSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// An agnostic query together with its reference answer under the
/// synthetic grammar (used for pretraining; compile targets come from the
/// teacher instead).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instruction {
    pub query: Vec<u32>,
    pub answer: Vec<u32>,
}

/// Draw one instance of a context-independent template.
pub fn gen_instruction(vocab: &Vocab, rng: &mut RngState) -> Instruction {
    let words = |rng: &mut RngState| -> Vec<u32> {
        let n = 1 + rng.below(3);
        (0..n).map(|_| vocab.word(rng.below(vocab.n_words as usize) as u32)).collect()
    };
    match rng.below(5) {
        0 => Instruction {
            query: vec![HELLO],
            answer: vec![HI, STOP],
        },
        1 => Instruction {
            query: vec![THANKS],
            answer: vec![WELCOME, STOP],
        },
        2 => {
            let w = words(rng);
            let mut query = vec![COPY];
            query.extend(&w);
            let mut answer = w;
            answer.push(STOP);
            Instruction { query, answer }
        }
        3 => {
            let d = rng.below(vocab.n_digits as usize) as u32;
            let answer = (1..=3)
                .map(|i| vocab.digit((d + i) % vocab.n_digits))
                .chain([STOP])
                .collect();
            Instruction {
                query: vec![COUNT, vocab.digit(d)],
                answer,
            }
        }
        _ => {
            let w = words(rng);
            let mut query = vec![REV];
            query.extend(&w);
            let mut answer: Vec<u32> = w.into_iter().rev().collect();
            answer.push(STOP);
            Instruction { query, answer }
        }
    }
}

/// `n` context-agnostic queries; none contains a key token.
pub fn gen_agnostic_pool(vocab: &Vocab, seed: u64, n: usize) -> Vec<Vec<u32>> {
    let mut rng = RngState::new(seed);
    (0..n).map(|_| gen_instruction(vocab, &mut rng).query).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum SampleKind {
    Reconstruction,
    Agnostic,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SurrogateSample {
    pub kind: SampleKind,
    pub query: Vec<u32>,
    pub target: Vec<u32>,
    /// Positions in the teacher sequence `[C][query][target]` whose logits
    /// predict each target token.
    pub teacher_logit_positions: Vec<usize>,
}

impl SurrogateSample {
    pub fn new(kind: SampleKind, n_ctx: usize, query: Vec<u32>, target: Vec<u32>) -> Self {
        let first = n_ctx + query.len() - 1;
        let teacher_logit_positions = (first..first + target.len()).collect();
        Self {
            kind,
            query,
            target,
            teacher_logit_positions,
        }
    }
}

/// Options for [`build_surrogate`] beyond the two stream sizes.
#[derive(Clone, Copy, Debug)]
pub struct SurrogateOptions {
    pub max_decode: usize,
    /// Decode agnostic targets without the context in view.
    pub no_context_teacher: bool,
    /// Fraction of agnostic queries replaced by probes of keys the context
    /// does not contain.
    pub absent_key_probes: f64,
}

impl Default for SurrogateOptions {
    fn default() -> Self {
        Self {
            max_decode: DEFAULT_MAX_DECODE,
            no_context_teacher: false,
            absent_key_probes: 0.0,
        }
    }
}

/// Causal cache of the raw context, shared by every teacher query.
pub fn context_cache(teacher: &ModelWeights, context: &[u32]) -> Result<KvCache> {
    let c = &teacher.config;
    if context.is_empty() {
        return Ok(KvCache::empty(c.n_layers, c.n_heads, c.head_dim));
    }
    let slots: Vec<Slot> = context.iter().map(|&t| Slot::Token(t)).collect();
    let positions: Vec<usize> = (0..context.len()).collect();
    let segments = vec![Segment::Context; context.len()];
    let mask = SegmentMask::causal(context.len());
    Ok(forward(teacher, ForwardArgs::tokens(&slots, &positions, &segments, &mask))?.1)
}

/// Reconstruction and agnostic samples for one context, shuffled.
///
/// Agnostic targets are the teacher's greedy continuation of
/// `[context][query]`, capped at `opts.max_decode` tokens. Repeated queries
/// are decoded once.
pub fn build_surrogate(
    vocab: &Vocab,
    context: &[u32],
    teacher: &ModelWeights,
    n_recon: usize,
    n_agnostic: usize,
    rng: &mut RngState,
    opts: SurrogateOptions,
) -> Result<Vec<SurrogateSample>> {
    if n_recon + n_agnostic == 0 {
        return Err(Error::InvalidConfig("surrogate set needs at least one sample".into()));
    }
    if context.is_empty() {
        return Err(Error::InvalidConfig("context is empty".into()));
    }
    let mut samples = Vec::with_capacity(n_recon + n_agnostic);
    let recon = SurrogateSample::new(SampleKind::Reconstruction, context.len(), TRIGGER.to_vec(), context.to_vec());
    samples.extend(core::iter::repeat_n(recon, n_recon));
    if n_agnostic > 0 {
        let mut pool = gen_agnostic_pool(vocab, rng.next_u64(), n_agnostic);
        let absent: Vec<u32> = (0..vocab.n_keys).map(|i| vocab.key(i)).filter(|k| !context.contains(k)).collect();
        if opts.absent_key_probes > 0.0 && !absent.is_empty() {
            for q in pool.iter_mut() {
                if rng.uniform() < opts.absent_key_probes {
                    *q = vec![ASK, absent[rng.below(absent.len())]];
                }
            }
        }
        let cache = if opts.no_context_teacher {
            None
        } else {
            Some(context_cache(teacher, context)?)
        };
        let mut decoded: BTreeMap<Vec<u32>, Vec<u32>> = BTreeMap::new();
        for q in pool {
            let target = match decoded.get(&q) {
                Some(t) => t.clone(),
                None => {
                    let t = decode_greedy(teacher, &q, &causal_mask_builder, cache.as_ref(), opts.max_decode, STOP)?;
                    decoded.insert(q.clone(), t.clone());
                    t
                }
            };
            samples.push(SurrogateSample::new(SampleKind::Agnostic, context.len(), q, target));
        }
    }
    rng.shuffle(&mut samples);
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_budget_is_one_clause() {
        let v = Vocab::default();
        let c = gen_context(&v, 1, 1, 2).unwrap();
        assert_eq!(c.tokens, [c.facts[0].key, c.facts[0].value]);
        assert!(matches!(gen_context(&v, 1, 3, 5), Err(Error::Budget { needed: 6, available: 5 })));
    }

    #[test]
    fn contexts_are_reproducible_and_sized() {
        let v = Vocab::default();
        let a = gen_context(&v, 9, 4, 64).unwrap();
        assert_eq!(a, gen_context(&v, 9, 4, 64).unwrap());
        assert_eq!(a.len(), 64);
        assert_ne!(a.tokens, gen_context(&v, 10, 4, 64).unwrap().tokens);
    }

    #[test]
    fn templates_answer_correctly() {
        let v = Vocab::default();
        let mut rng = RngState::new(2);
        for _ in 0..200 {
            let ins = gen_instruction(&v, &mut rng);
            assert_eq!(*ins.answer.last().unwrap(), STOP);
            match ins.query[0] {
                COPY => assert_eq!(ins.query[1..], ins.answer[..ins.answer.len() - 1]),
                REV => {
                    let mut r = ins.query[1..].to_vec();
                    r.reverse();
                    assert_eq!(r, ins.answer[..ins.answer.len() - 1]);
                }
                _ => {}
            }
        }
    }

    #[test]
    fn words_roundtrip() {
        let v = Vocab::default();
        for t in 0..v.size() as u32 {
            let w = v.detokenize(&[t]);
            assert_eq!(v.parse_word(&w), Some(t), "{w}");
        }
        assert_eq!(v.parse_word("k99"), None);
    }

    #[test]
    fn vocab_ranges_are_disjoint() {
        let v = Vocab::default();
        assert_eq!(v.size(), 93);
        for t in 0..v.size() as u32 {
            assert_ne!(v.class(t), TokenClass::Unknown);
        }
        assert_eq!(v.class(v.key(0)), TokenClass::Key(0));
        assert_eq!(v.class(v.digit(9)), TokenClass::Digit(9));
        assert_eq!(v.detokenize(&[ASK, v.key(3), v.value(7), STOP]), "ask k3 v7 <stop>");
    }
}
