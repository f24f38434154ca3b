//! Invariant suite run by `lcc verify`.
//!
//! Each check is self-contained on a small random model. [`Fault`]s let
//! tests mutate one rule and confirm the matching check catches it.

use crate::format;
use lcc_core::autograd::Tape;
use lcc_core::data::{build_surrogate, gen_context, SurrogateOptions, Vocab, STOP};
use lcc_core::gradcheck::kernel_suite;
use lcc_core::lora::init_adapter;
use lcc_core::trainer::{compile, student_logits, teacher_logits, MaskMode, Trainer};
use lcc_core::transformer::{causal_mask_builder, decode_with_logits};
use lcc_core::{
    attach, build_segment_mask, BufferArtifact, BufferEmbeddings, CompileConfig, ModelConfig, ModelWeights, RngState,
    Segment, SegmentLayout, SegmentMask, StorageDtype,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Let query tokens see the context, breaking the bottleneck.
    MaskRule,
    /// Flip one bit of the deserialized artifact payload.
    ArtifactBit,
}

impl Fault {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mask-rule" => Some(Fault::MaskRule),
            "artifact-bit" => Some(Fault::ArtifactBit),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Segment of position `p` and whether `(i, j)` is visible, written as a
/// rule table rather than the production `match`.
pub fn oracle_mask(n_ctx: usize, k_buf: usize, n_query: usize, n_resp: usize) -> Vec<Vec<bool>> {
    // Row = reader, column = source. Order: context, buffer, query, response.
    const SEES: [[bool; 4]; 4] = [
        [true, false, false, false],
        [true, true, false, false],
        [false, true, true, false],
        [false, true, true, true],
    ];
    let bounds = [n_ctx, n_ctx + k_buf, n_ctx + k_buf + n_query, n_ctx + k_buf + n_query + n_resp];
    let seg = |p: usize| bounds.iter().position(|&b| p < b).expect("position inside the layout");
    let n = bounds[3];
    (0..n)
        .map(|i| (0..n).map(|j| j <= i && SEES[seg(i)][seg(j)]).collect())
        .collect()
}

fn mutated_mask(layout: &SegmentLayout) -> SegmentMask {
    let segs = layout.segments();
    let base = build_segment_mask(layout);
    SegmentMask::from_fn(layout.len(), layout.len(), |i, j| {
        base.allowed(i, j) || (j <= i && segs[i] == Segment::Query && segs[j] == Segment::Context)
    })
}

/// Compare the mask builder with the oracle on the full small grid.
pub fn mask_grid_mismatches(builder: &dyn Fn(&SegmentLayout) -> SegmentMask) -> Vec<(usize, usize, usize, usize)> {
    let mut bad = Vec::new();
    for n_ctx in 0..=3 {
        for k in 1..=3 {
            for q in 0..=2 {
                for r in 0..=2 {
                    let layout = SegmentLayout::new(n_ctx, k, q, r).expect("k ≥ 1");
                    let got = builder(&layout);
                    let want = oracle_mask(n_ctx, k, q, r);
                    let n = layout.len();
                    let same = got.rows() == n
                        && got.cols() == n
                        && (0..n).all(|i| (0..n).all(|j| got.allowed(i, j) == want[i][j]));
                    if !same {
                        bad.push((n_ctx, k, q, r));
                    }
                }
            }
        }
    }
    bad
}

/// The small model the suite runs on: two layers, `d_model = 32`.
pub fn small_model(seed: u64) -> ModelWeights {
    let cfg = ModelConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        head_dim: 16,
        d_ff: 64,
        max_position: 128,
        ..ModelConfig::desk(Vocab::default().size())
    };
    ModelWeights::init(&cfg, &mut RngState::new(seed)).expect("valid config")
}

type Check = std::result::Result<String, String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn check_kernels() -> Check {
    let results = kernel_suite(7).map_err(err)?;
    let worst = results.iter().cloned().fold(("", 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    if worst.1 <= 1e-4 {
        Ok(format!("{} ops, worst {} {:.1e}", results.len(), worst.0, worst.1))
    } else {
        Err(format!("{} relative error {:.3e}", worst.0, worst.1))
    }
}

/// End-to-end compile-loss gradient on sampled buffer and adapter-B
/// entries, at a point where B is non-zero.
pub fn compile_loss_gradient_error(seed: u64) -> lcc_core::Result<f64> {
    let vocab = Vocab::default();
    let w = small_model(seed);
    let ctx = gen_context(&vocab, seed, 2, 12)?;
    let config = CompileConfig {
        ratio: 4,
        seed,
        ..CompileConfig::default()
    };
    let mut rng = RngState::new(seed).fork(9);
    let batch = build_surrogate(&vocab, &ctx.tokens, &w, 2, 4, &mut rng, SurrogateOptions {
        max_decode: 3,
        ..SurrogateOptions::default()
    })?;
    let mut trainer = Trainer::new(&w, &ctx.tokens, &config)?;
    for t in trainer.adapter.tensors_mut() {
        t.data_mut().iter_mut().for_each(|x| *x += 0.05 * rng.normal());
    }
    let names = trainer.trainable_names();
    let mut entries = Vec::new();
    for (ti, name) in names.iter().enumerate() {
        if name == "buffer" || name.ends_with(".b") {
            for _ in 0..3 {
                entries.push((ti, rng.below(if name == "buffer" { 3 * 32 } else { 32 * 8 })));
            }
        }
    }
    trainer.check_gradients(&batch, &entries, 1e-5)
}

fn check_compile_gradients() -> Check {
    let e = compile_loss_gradient_error(3).map_err(err)?;
    if e <= 1e-4 {
        Ok(format!("worst {e:.1e}"))
    } else {
        Err(format!("relative error {e:.3e}"))
    }
}

fn check_mask(faults: &[Fault]) -> Check {
    let bad = if faults.contains(&Fault::MaskRule) {
        mask_grid_mismatches(&mutated_mask)
    } else {
        mask_grid_mismatches(&build_segment_mask)
    };
    if bad.is_empty() {
        Ok("4x3x3x3 grid exact".into())
    } else {
        Err(format!("{} layouts differ, first {:?}", bad.len(), bad[0]))
    }
}

/// Largest KL between teacher and relaxed-mask student with a fresh
/// adapter, over a few agnostic queries.
pub fn identity_at_init_kl(seed: u64) -> lcc_core::Result<f64> {
    let vocab = Vocab::default();
    let w = small_model(seed);
    let ctx = gen_context(&vocab, seed, 3, 16)?;
    let adapter = init_adapter(&w.config, 8, 16.0, &mut RngState::new(seed))?;
    let buffer = BufferEmbeddings::new(&w, ctx.len(), 16)?;
    let mut worst = 0.0f64;
    let mut rng = RngState::new(seed).fork(4);
    for _ in 0..4 {
        let ins = lcc_core::data::gen_instruction(&vocab, &mut rng);
        let teacher = teacher_logits(&w, &ctx.tokens, &ins.query, &ins.answer)?;
        let student = student_logits(&w, Some(&adapter), &buffer, &ctx.tokens, &ins.query, &ins.answer, MaskMode::Relaxed)?;
        let mut tape = Tape::inference();
        let s = tape.constant(student);
        let kl = tape.kl_divergence_logits(&teacher, s)?;
        worst = worst.max(tape.value(kl).data()[0]);
    }
    Ok(worst)
}

fn check_identity() -> Check {
    let kl = identity_at_init_kl(5).map_err(err)?;
    if kl <= 1e-10 {
        Ok(format!("max KL {kl:.1e}"))
    } else {
        Err(format!("KL {kl:.3e}"))
    }
}

fn tiny_compile_config(seed: u64, dtype: StorageDtype) -> CompileConfig {
    CompileConfig {
        ratio: 4,
        epochs: 2,
        n_recon: 4,
        n_agnostic: 4,
        max_decode: 4,
        dtype,
        seed,
        ..CompileConfig::default()
    }
}

fn check_roundtrip(faults: &[Fault]) -> Check {
    let vocab = Vocab::default();
    let w = small_model(11);
    let ctx = gen_context(&vocab, 11, 2, 12).map_err(err)?;
    let out = compile(&vocab, &w, &ctx.tokens, &tiny_compile_config(11, StorageDtype::F64)).map_err(err)?;
    let exact = out.artifact;
    let cache = exact.to_cache().map_err(err)?;
    let rounded = BufferArtifact::from_cache(exact.model_fingerprint, &cache, StorageDtype::F32, exact.meta).map_err(err)?;
    let query = [lcc_core::data::ASK, ctx.facts[0].key];
    let decode = |a: &BufferArtifact| -> lcc_core::Result<(Vec<u32>, Vec<Vec<f64>>)> {
        let c = attach(&w, a)?;
        decode_with_logits(&w, None, &query, &causal_mask_builder, Some(&c), 4, STOP)
    };
    let reference = decode(&exact).map_err(err)?;
    for (a, tol) in [(&exact, 0.0), (&rounded, 1e-6)] {
        let bytes = format::serialize_artifact(a);
        let mut back = format::deserialize_artifact(&bytes).map_err(err)?;
        if faults.contains(&Fault::ArtifactBit) {
            let v = back.values[0].data_mut();
            v[0] = f64::from_bits(v[0].to_bits() ^ (1 << 40));
        }
        let got = decode(&back).map_err(err)?;
        if got.0 != reference.0 {
            return Err(format!("{:?} tokens differ after roundtrip", a.dtype));
        }
        let diff = got
            .1
            .iter()
            .flatten()
            .zip(reference.1.iter().flatten())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        if diff > tol {
            return Err(format!("{:?} logits differ by {diff:.3e} (tolerance {tol:e})", a.dtype));
        }
    }
    Ok("f64 exact, f32 within 1e-6".into())
}

/// Buffer plus every adapter tensor that can receive gradient. Last-layer
/// query/output deltas only feed compression-stage outputs that nothing
/// reads, so they never move.
pub fn expected_mutated(config: &ModelConfig) -> lcc_core::Result<Vec<String>> {
    let adapter = init_adapter(config, 8, 16.0, &mut RngState::new(0))?;
    let last = config.n_layers - 1;
    let dead = [format!("lora.{last}.q."), format!("lora.{last}.o.")];
    let mut out = vec![String::from("buffer")];
    out.extend(
        adapter
            .named_tensors()
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| !dead.iter().any(|d| n.starts_with(d.as_str()))),
    );
    Ok(out)
}

fn check_fingerprint() -> Check {
    let vocab = Vocab::default();
    let w = small_model(13);
    let before = w.fingerprint();
    let ctx = gen_context(&vocab, 13, 2, 12).map_err(err)?;
    let out = compile(&vocab, &w, &ctx.tokens, &tiny_compile_config(13, StorageDtype::F32)).map_err(err)?;
    if w.fingerprint() != before {
        return Err("base weights changed".into());
    }
    let mut expected = expected_mutated(&w.config).map_err(err)?;
    let mut got = out.report.mutated.clone();
    got.sort();
    expected.sort();
    if got != expected {
        return Err(format!("mutated set {got:?}"));
    }
    Ok(format!("{} tensors mutated, base unchanged", got.len()))
}

/// Run every check; `faults` mutate rules for fault-injection tests.
pub fn run(faults: &[Fault]) -> Vec<CheckResult> {
    let checks: [(&'static str, Box<dyn Fn() -> Check>); 6] = [
        ("kernel_gradients", Box::new(check_kernels)),
        ("compile_loss_gradients", Box::new(check_compile_gradients)),
        ("mask_oracle", Box::new(|| check_mask(faults))),
        ("identity_at_init", Box::new(check_identity)),
        ("portability_roundtrip", Box::new(|| check_roundtrip(faults))),
        ("frozen_fingerprint", Box::new(check_fingerprint)),
    ];
    checks
        .into_iter()
        .map(|(name, f)| {
            let r = f();
            CheckResult {
                name,
                passed: r.is_ok(),
                detail: r.unwrap_or_else(|e| e),
            }
        })
        .collect()
}
