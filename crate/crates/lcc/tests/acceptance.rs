//! End-to-end acceptance run on the desk-scale model.
//!
//! One test drives all eleven criteria in order so the expensive pieces
//! (two full pretrain → compile → eval pipelines and the sweeps) are built
//! once. Each criterion prints a single PASS/FAIL line to stderr; the test
//! fails if any criterion fails.

use lcc::ablate::{self, Axis, SweepReport, SweepSpec};
use lcc::commands::{self, CompileDoc, PretrainDoc, QueryOutput, MODEL_FILE};
use lcc::error::FormatError;
use lcc::format::{artifact_file_len, deserialize_artifact, serialize_artifact};
use lcc::io;
use lcc::verify::{compile_loss_gradient_error, expected_mutated, identity_at_init_kl, mask_grid_mismatches};
use lcc_core::artifact::ArtifactMeta;
use lcc_core::data::{gen_context, Vocab, ASK, HELLO};
use lcc_core::gradcheck::kernel_suite;
use lcc_core::kv::KvCache;
use lcc_core::model::Fingerprint;
use lcc_core::trainer::Trainer;
use lcc_core::{build_segment_mask, compile, BufferArtifact, CompileConfig, ModelWeights, RngState, Segment, StorageDtype};
use serde_json::Value;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

const LCC: &str = env!("CARGO_BIN_EXE_lcc");
const CONTEXT_SEEDS: [u64; 3] = [0, 1, 2];
/// Fixed header of an artifact file; see docs/formats.md.
const HEADER_BYTES: usize = 107;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn line(msg: &str) {
    // Bypasses the test harness's capture so the lines always show.
    let mut e = std::io::stderr().lock();
    let _ = writeln!(e, "{msg}");
}

fn lcc(args: &[&str]) -> std::process::Output {
    let out = Command::new(LCC).args(args).output().expect("lcc binary runs");
    assert!(
        out.status.success(),
        "lcc {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

/// pretrain → gen-context → compile → eval, all through the binary.
fn pipeline(root: &Path) -> f64 {
    let started = Instant::now();
    lcc(&["pretrain", "--out", p(root)]);
    let model = root.join(MODEL_FILE);
    let (contexts, artifacts, eval) = (root.join("contexts"), root.join("artifacts"), root.join("eval"));
    for d in [&contexts, &artifacts, &eval] {
        std::fs::create_dir_all(d).unwrap();
    }
    for s in CONTEXT_SEEDS {
        let ctx = contexts.join(format!("c{s}.json"));
        lcc(&["gen-context", "--seed", &s.to_string(), "--out", p(&ctx)]);
        lcc(&[
            "compile",
            "--model",
            p(&model),
            "--context",
            p(&ctx),
            "--seed",
            &s.to_string(),
            "--out",
            p(&artifacts),
        ]);
    }
    lcc(&[
        "eval",
        "--model",
        p(&model),
        "--contexts",
        p(&contexts),
        "--artifacts",
        p(&artifacts),
        "--out",
        p(&eval),
    ]);
    started.elapsed().as_secs_f64()
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn sweep(weights: &ModelWeights, axis: Axis, values: Vec<Value>, seeds: &[u64]) -> (SweepReport, f64) {
    let spec = SweepSpec {
        axis,
        values,
        seeds: seeds.to_vec(),
        ..SweepSpec::default()
    };
    let started = Instant::now();
    let report = ablate::run_sweep(weights, &spec, 1).expect("sweep runs");
    for c in &report.cells {
        assert!(c.error.is_none(), "cell {} failed: {:?}", c.cell, c.error);
    }
    (report, started.elapsed().as_secs_f64())
}

fn metric(report: &SweepReport, value: &Value, seed: u64, name: &str) -> f64 {
    report
        .cells
        .iter()
        .find(|c| &c.value == value && c.seed == seed)
        .and_then(|c| c.metric(name))
        .unwrap_or_else(|| panic!("{name} missing for {value}/{seed}"))
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn c1_gradients() -> Outcome {
    let ops = kernel_suite(7).expect("kernel suite runs");
    let worst = ops.iter().map(|o| o.1).fold(0.0f64, f64::max);
    let e2e = compile_loss_gradient_error(3).expect("compile gradcheck runs");
    outcome(
        worst <= 1e-4 && e2e <= 1e-4,
        format!("{} kernels worst rel err {worst:.1e}; compile loss {e2e:.1e}", ops.len()),
    )
}

fn c2_mask() -> Outcome {
    let bad = mask_grid_mismatches(&build_segment_mask);
    outcome(bad.is_empty(), format!("108 layouts, {} mismatches", bad.len()))
}

fn c3_identity() -> Outcome {
    let kl = identity_at_init_kl(5).expect("identity check runs");
    outcome(kl <= 1e-10, format!("max KL {kl:.1e}"))
}

fn c4_isolation(weights: &ModelWeights) -> Outcome {
    let vocab = Vocab::default();
    let before = weights.fingerprint();
    let ctx = gen_context(&vocab, 0, 4, 64).unwrap();
    let out = compile(&vocab, weights, &ctx.tokens, &CompileConfig::default()).unwrap();
    let mut got = out.report.mutated.clone();
    let mut want = expected_mutated(&weights.config).unwrap();
    got.sort();
    want.sort();
    let same_fp = weights.fingerprint() == before;
    outcome(
        same_fp && got == want,
        format!("fingerprint unchanged: {same_fp}; {} tensors mutated, expected {}", got.len(), want.len()),
    )
}

fn c5_portability(weights: &ModelWeights, model: &Path, dir: &Path) -> Outcome {
    let vocab = Vocab::default();
    let ctx = gen_context(&vocab, 4, 4, 64).unwrap();
    let config = CompileConfig {
        dtype: StorageDtype::F64,
        seed: 4,
        ..CompileConfig::default()
    };
    let exact = compile(&vocab, weights, &ctx.tokens, &config).unwrap().artifact;
    let started = Instant::now();
    let rounded =
        BufferArtifact::from_cache(exact.model_fingerprint, &exact.to_cache().unwrap(), StorageDtype::F32, exact.meta)
            .unwrap();
    let mut queries: Vec<Vec<u32>> = ctx.facts.iter().map(|f| vec![ASK, f.key]).collect();
    queries.push(vec![HELLO]);
    let mut worst = [0.0f64; 2];
    let mut tokens_match = true;
    for (i, (art, name)) in [(&exact, "exact.lcc"), (&rounded, "rounded.lcc")].into_iter().enumerate() {
        let path = dir.join(name);
        io::save_artifact(&path, art).unwrap();
        for q in &queries {
            let reference = commands::query_loaded(weights, &exact, None, q, 16).unwrap();
            let mut args = vec!["query", "--model", p(model), "--artifact", p(&path), "--max-new", "16", "--json"];
            let ids: Vec<String> = q.iter().map(u32::to_string).collect();
            args.extend(ids.iter().map(String::as_str));
            let got: QueryOutput = serde_json::from_slice(&lcc(&args).stdout).unwrap();
            tokens_match &= got.tokens == reference.tokens;
            for (a, b) in got.logits.iter().flatten().zip(reference.logits.iter().flatten()) {
                worst[i] = worst[i].max((a - b).abs());
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        tokens_match && worst[0] == 0.0 && worst[1] <= 1e-6 && secs <= 30.0,
        format!(
            "{} queries x 2 dtypes; tokens equal: {tokens_match}; f64 diff {:.1e}, f32 diff {:.1e}; {secs:.1}s",
            queries.len(),
            worst[0],
            worst[1]
        ),
    )
}

fn c6_fidelity(doc: &PretrainDoc, pretrain_secs: f64, ratio16: &SweepReport, sweep_secs: f64) -> Outcome {
    let r = doc.report.as_ref().expect("pretrain reached its target");
    let chance = 1.0 / 16.0;
    let v = Value::from(16);
    let buf = mean(CONTEXT_SEEDS.map(|s| metric(ratio16, &v, s, "accuracy")));
    let none = mean(CONTEXT_SEEDS.map(|s| metric(ratio16, &v, s, "no_context_accuracy")));
    let secs = pretrain_secs + sweep_secs;
    outcome(
        r.recall >= 0.95 && r.no_context_recall <= chance + 0.05 && buf - none >= 0.30 && secs <= 20.0 * 60.0,
        format!(
            "pretrain recall {:.3}, no-context {:.3}; 16x buffer {buf:.3} vs no-context {none:.3}; {secs:.0}s",
            r.recall, r.no_context_recall
        ),
    )
}

fn c7_collapse(weights: &ModelWeights, ratio16: &SweepReport) -> Outcome {
    let (zero, secs) = sweep(weights, Axis::NAgnostic, vec![Value::from(0)], &CONTEXT_SEEDS);
    let pairs: Vec<(f64, f64)> = CONTEXT_SEEDS
        .iter()
        .map(|&s| {
            (
                metric(&zero, &Value::from(0), s, "kl_drift"),
                metric(ratio16, &Value::from(16), s, "kl_drift"),
            )
        })
        .collect();
    let shown: Vec<String> = pairs.iter().map(|(a, b)| format!("{a:.3}>{b:.3}")).collect();
    outcome(
        pairs.iter().all(|(a, b)| a > b) && secs <= 20.0 * 60.0,
        format!("KL drift n_agnostic 0 vs 2000: {}; {secs:.0}s", shown.join(", ")),
    )
}

fn c8_capacity(ratios: &SweepReport, secs: f64) -> Outcome {
    let at = |r: u64| ratios.mean(&Value::from(r), "accuracy").unwrap();
    let mut csv = Vec::new();
    ablate::write_csv(ratios, &mut csv).unwrap();
    let mut reader = csv::Reader::from_reader(csv.as_slice());
    let mut seen: Vec<String> = reader
        .records()
        .map(|r| r.unwrap())
        .filter(|r| &r[5] == "ok" && &r[6] == "accuracy")
        .map(|r| r[3].to_string())
        .collect();
    seen.sort_by_key(|v| v.parse::<u32>().unwrap());
    seen.dedup();
    let means: Vec<String> = [2, 4, 8, 16, 32].iter().map(|&r| format!("{r}x {:.3}", at(r))).collect();
    outcome(
        at(32) <= at(8) && seen == ["2", "4", "8", "16", "32"] && secs <= 45.0 * 60.0,
        format!("mean recall over 5 seeds: {}; CSV ratios {seen:?}; {secs:.0}s", means.join(", ")),
    )
}

fn c9_entanglement(weights: &ModelWeights) -> Outcome {
    let (coupled, secs) = sweep(weights, Axis::Coupled, vec![Value::from(true)], &CONTEXT_SEEDS);
    let v = Value::from(true);
    let rows: Vec<(f64, f64, f64)> = CONTEXT_SEEDS
        .iter()
        .map(|&s| {
            (
                metric(&coupled, &v, s, "accuracy"),
                metric(&coupled, &v, s, "no_context_accuracy"),
                metric(&coupled, &v, s, "accuracy_with_adapter"),
            )
        })
        .collect();
    let collapsed = rows.iter().all(|(without, none, _)| *without <= none + 0.05);

    let vocab = Vocab::default();
    let ctx = gen_context(&vocab, 0, 4, 64).unwrap();
    let standard = CompileConfig::default();
    let trainer = Trainer::new(weights, &ctx.tokens, &standard).unwrap();
    let generation_free = [Segment::Query, Segment::Response]
        .iter()
        .all(|&s| !trainer.adapter.active.contains(s));
    let shown: Vec<String> = rows
        .iter()
        .map(|(w, n, a)| format!("{w:.2}/{n:.2}/{a:.2}"))
        .collect();
    outcome(
        collapsed && generation_free && secs <= 20.0 * 60.0,
        format!(
            "coupled without/no-context/with adapter per seed: {}; standard adapter off generation rows: {generation_free}; {secs:.0}s",
            shown.join(", ")
        ),
    )
}

fn c10_format() -> Outcome {
    let started = Instant::now();
    let shapes = [
        (1, 1, 1, 2),
        (1, 2, 3, 4),
        (2, 1, 4, 8),
        (2, 4, 4, 12),
        (2, 4, 32, 12),
        (3, 2, 5, 6),
        (4, 8, 2, 16),
        (1, 3, 7, 10),
        (6, 2, 1, 4),
        (2, 2, 16, 32),
    ];
    let mut rng = RngState::new(10);
    let mut law_ok = true;
    let mut samples = Vec::new();
    for &(l, h, k, d) in &shapes {
        let rows = (0..l)
            .map(|_| {
                let n = k * h * d;
                ((0..n).map(|_| rng.normal()).collect(), (0..n).map(|_| rng.normal()).collect())
            })
            .collect();
        let cache = KvCache::from_rows(rows, (0..k).collect(), h).unwrap();
        let a = BufferArtifact::from_cache(Fingerprint([7; 32]), &cache, StorageDtype::F32, ArtifactMeta::default())
            .unwrap();
        let bytes = serialize_artifact(&a);
        let law = HEADER_BYTES + 4 * 2 * l * h * k * d + 4;
        law_ok &= bytes.len() == law && artifact_file_len(l, h, k, d, StorageDtype::F32) == law;
        samples.push(bytes);
    }
    let mut crc = 0;
    for i in 0..100 {
        let bytes = &samples[i % samples.len()];
        let mut bad = bytes.clone();
        let at = HEADER_BYTES + rng.below(bytes.len() - HEADER_BYTES);
        bad[at] ^= 1 + rng.below(255) as u8;
        if matches!(deserialize_artifact(&bad), Err(FormatError::CrcMismatch { .. })) {
            crc += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        law_ok && crc == 100 && secs <= 5.0,
        format!("size law on {} shapes: {law_ok}; {crc}/100 flips rejected by CRC; {secs:.2}s", shapes.len()),
    )
}

fn c11_determinism(a: &Path, b: &Path, first_secs: f64, second_secs: f64) -> Outcome {
    let timing = |f: &PathBuf| f.to_string_lossy().ends_with(".timing.json");
    let fa: Vec<PathBuf> = files(a).into_iter().filter(|f| !timing(f)).collect();
    let fb: Vec<PathBuf> = files(b).into_iter().filter(|f| !timing(f)).collect();
    let differing: Vec<String> = fa
        .iter()
        .filter(|f| std::fs::read(a.join(f)).ok() != std::fs::read(b.join(f)).ok())
        .map(|f| f.display().to_string())
        .collect();
    outcome(
        fa == fb && differing.is_empty() && second_secs <= 40.0 * 60.0,
        format!(
            "{} files compared, {} differ {differing:?}; runs took {first_secs:.0}s and {second_secs:.0}s",
            fa.len(),
            differing.len()
        ),
    )
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().unwrap();
    let (run_a, run_b, scratch) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("scratch"));
    for d in [&run_a, &run_b, &scratch] {
        std::fs::create_dir_all(d).unwrap();
    }
    line("");
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut record = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let started = Instant::now();
        let o = f();
        let secs = started.elapsed().as_secs_f64();
        line(&format!(
            "criterion {n:>2} {} {name}: {} [{secs:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        ));
        results.push((n, name, o, secs));
    };

    record(1, "gradient correctness", &mut c1_gradients);
    record(2, "mask oracle", &mut c2_mask);
    record(3, "identity at init", &mut c3_identity);

    let first_secs = pipeline(&run_a);
    let model = run_a.join(MODEL_FILE);
    let weights = io::load_checkpoint(&model).unwrap();
    let doc: PretrainDoc = io::read_json(&run_a.join("pretrain.json")).unwrap();
    let pretrain_secs = {
        let t: Value = io::read_json(&run_a.join("pretrain.timing.json")).unwrap();
        t["seconds"].as_f64().unwrap_or(first_secs)
    };
    let compiled: CompileDoc = io::read_json(&run_a.join("artifacts/c0.train.json")).unwrap();
    assert_eq!(compiled.model, format!("{}", weights.fingerprint()));

    record(4, "gradient isolation", &mut || c4_isolation(&weights));
    record(5, "portability roundtrip", &mut || c5_portability(&weights, &model, &scratch));
    let (ratio16, r16_secs) = sweep(&weights, Axis::Ratio, vec![Value::from(16)], &CONTEXT_SEEDS);
    record(6, "desk-scale fidelity", &mut || c6_fidelity(&doc, pretrain_secs, &ratio16, r16_secs));
    record(7, "regularization collapse", &mut || c7_collapse(&weights, &ratio16));
    let (ratios, ratio_secs) = sweep(&weights, Axis::Ratio, Axis::Ratio.standard_values(), &[0, 1, 2, 3, 4]);
    record(8, "channel-capacity trend", &mut || c8_capacity(&ratios, ratio_secs));
    record(9, "coupled entanglement", &mut || c9_entanglement(&weights));
    record(10, "format conformance", &mut c10_format);
    let second_secs = pipeline(&run_b);
    record(11, "determinism", &mut || c11_determinism(&run_a, &run_b, first_secs, second_secs));

    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.2.pass)
        .map(|r| format!("{} ({})", r.0, r.1))
        .collect();
    line(&format!("{} of {} criteria passed", results.len() - failed.len(), results.len()));
    assert!(failed.is_empty(), "failed criteria: {}", failed.join(", "));
}
