use lcc::error::exit;
use std::process::{Command, Output};

fn lcc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lcc")).args(args).output().unwrap()
}

#[test]
fn verify_passes_on_a_clean_build() {
    let out = lcc(&["verify"]);
    assert_eq!(out.status.code(), Some(exit::OK), "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn injected_mask_fault_fails_verify_and_names_the_check() {
    let out = lcc(&["verify", "--inject", "mask-rule"]);
    assert_eq!(out.status.code(), Some(exit::CHECK_FAILED));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("FAIL") && l.contains("mask_oracle")));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mask_oracle"));
}

#[test]
fn injected_artifact_fault_fails_the_roundtrip() {
    let out = lcc(&["verify", "--inject", "artifact-bit"]);
    assert_eq!(out.status.code(), Some(exit::CHECK_FAILED));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL portability_roundtrip"));
}

#[test]
fn missing_inputs_exit_with_five() {
    let dir = tempfile::tempdir().unwrap();
    let nowhere = dir.path().join("nope.lccm");
    let out = lcc(&["query", "--model", nowhere.to_str().unwrap(), "--artifact", "x.lcc", "ask", "k0"]);
    assert_eq!(out.status.code(), Some(exit::MISSING_INPUT));
    assert_eq!(lcc(&["compile"]).status.code(), Some(exit::MISSING_INPUT));
}

#[test]
fn unreadable_checkpoint_is_a_missing_input() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = dir.path().join("c.json");
    assert!(lcc(&["gen-context", "--seed", "3", "--out", ctx.to_str().unwrap()]).status.success());
    let model = dir.path().join("m.lccm");
    std::fs::write(&model, b"LCCM\x01\x00garbage").unwrap();
    let out = lcc(&["compile", "--model", model.to_str().unwrap(), "--context", ctx.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(exit::MISSING_INPUT));
}

#[test]
fn checkpoint_whose_weights_disagree_with_its_fingerprint_exits_four() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = dir.path().join("c.json");
    assert!(lcc(&["gen-context", "--seed", "3", "--out", ctx.to_str().unwrap()]).status.success());
    let mut bytes = lcc::format::serialize_checkpoint(&lcc::verify::small_model(1));
    // Change a weight and re-seal the CRC so only the fingerprint catches it.
    let n = bytes.len();
    bytes[200] ^= 0x10;
    let crc = crc32fast::hash(&bytes[..n - 4]);
    bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
    let model = dir.path().join("m.lccm");
    std::fs::write(&model, &bytes).unwrap();
    let out = lcc(&["compile", "--model", model.to_str().unwrap(), "--context", ctx.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(exit::FINGERPRINT));
}

#[test]
fn query_in_a_fresh_process_reproduces_f64_logits_exactly() {
    use lcc_core::data::{gen_context, Vocab, ASK};
    use lcc_core::{compile, CompileConfig, StorageDtype};
    let dir = tempfile::tempdir().unwrap();
    let vocab = Vocab::default();
    let w = lcc::verify::small_model(2);
    let ctx = gen_context(&vocab, 2, 2, 12).unwrap();
    let config = CompileConfig {
        ratio: 4,
        epochs: 2,
        n_recon: 4,
        n_agnostic: 4,
        max_decode: 4,
        dtype: StorageDtype::F64,
        ..CompileConfig::default()
    };
    let artifact = compile(&vocab, &w, &ctx.tokens, &config).unwrap().artifact;
    let (model, art) = (dir.path().join("m.lccm"), dir.path().join("a.lcc"));
    lcc::io::save_checkpoint(&model, &w).unwrap();
    lcc::io::save_artifact(&art, &artifact).unwrap();
    let query = [ASK, ctx.facts[0].key];
    let want = lcc::commands::query_loaded(&w, &artifact, None, &query, 6).unwrap();
    let ids: Vec<String> = query.iter().map(u32::to_string).collect();
    let mut args = vec!["query", "--json", "--max-new", "6", "--model", model.to_str().unwrap(), "--artifact", art.to_str().unwrap()];
    args.extend(ids.iter().map(String::as_str));
    let out = lcc(&args);
    assert!(out.status.success());
    let got: lcc::commands::QueryOutput = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(got, want);
}
