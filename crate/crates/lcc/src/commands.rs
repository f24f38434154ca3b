//! The subcommands as library calls. `main` only parses flags and maps
//! errors to exit codes.

use crate::error::{LccError, Result};
use crate::eval::{evaluate_context, Compiled, EvalOptions, EvalReport};
use crate::io::{self, ContextFile};
use lcc_core::data::{gen_context, SyntheticContext, Vocab, STOP};
use lcc_core::transformer::{causal_mask_builder, decode_with_logits};
use lcc_core::pretrain::{pretrain_with, EvalPoint, PretrainConfig, PretrainReport};
use lcc_core::trainer::{compile, TrainReport};
use lcc_core::{attach, CompileConfig, ModelWeights};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const MODEL_FILE: &str = "model.lccm";

pub fn pretrain_config_hash(cfg: &PretrainConfig) -> String {
    let mut h = Sha256::new();
    h.update(b"LCC-pretrain-config");
    h.update(io::to_json(cfg));
    io::hex(&h.finalize())
}

/// Wall-clock timings live apart from the reports so reports stay
/// byte-reproducible.
#[derive(Serialize)]
struct Timing<'a> {
    command: &'a str,
    seconds: f64,
}

fn write_timing(path: &Path, command: &str, started: Instant) -> Result<()> {
    io::write_json(
        path,
        &Timing {
            command,
            seconds: started.elapsed().as_secs_f64(),
        },
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainDoc {
    pub config_hash: String,
    pub seed: u64,
    /// False when the recall target was not reached.
    pub reached: bool,
    pub config: PretrainConfig,
    pub report: Option<PretrainReport>,
    pub history: Vec<EvalPoint>,
}

fn write_history_csv(path: &Path, doc: &PretrainDoc) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["config_hash", "seed", "step", "metric", "value"])?;
    for p in &doc.history {
        for (m, v) in [("train_loss", p.train_loss), ("recall", p.recall)] {
            w.write_record([&doc.config_hash, &doc.seed.to_string(), &p.step.to_string(), m, &v.to_string()])?;
        }
    }
    if let Some(r) = &doc.report {
        let finals = [
            ("final_recall", r.recall),
            ("final_no_context_recall", r.no_context_recall),
            ("final_instruction_accuracy", r.instruction_accuracy),
            ("final_reconstruction_accuracy", r.reconstruction_accuracy),
        ];
        for (m, v) in finals {
            w.write_record([&doc.config_hash, &doc.seed.to_string(), &r.steps.to_string(), m, &v.to_string()])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| LccError::io(path, e.into_error()))?;
    io::write_bytes(path, &bytes)
}

/// Train the base model into `out/model.lccm` with `pretrain.json`,
/// `pretrain.csv` and a timing sidecar. Progress goes to `log`.
pub fn pretrain(cfg: &PretrainConfig, out: &Path, log: &mut dyn FnMut(&EvalPoint)) -> Result<(ModelWeights, PretrainDoc)> {
    let started = Instant::now();
    let mut history = Vec::new();
    let result = pretrain_with(cfg, &mut |p| {
        history.push(p.clone());
        log(p);
    });
    let mut doc = PretrainDoc {
        config_hash: pretrain_config_hash(cfg),
        seed: cfg.seed,
        reached: result.is_ok(),
        config: cfg.clone(),
        report: None,
        history,
    };
    let outcome = match result {
        Ok((weights, report)) => {
            io::save_checkpoint(&out.join(MODEL_FILE), &weights)?;
            doc.report = Some(report);
            Ok(weights)
        }
        Err(e) => Err(e),
    };
    io::write_json(&out.join("pretrain.json"), &doc)?;
    write_history_csv(&out.join("pretrain.csv"), &doc)?;
    write_timing(&out.join("pretrain.timing.json"), "pretrain", started)?;
    Ok((outcome?, doc))
}

pub fn gen_context_file(vocab: &Vocab, seed: u64, n_facts: usize, len: usize, out: &Path) -> Result<SyntheticContext> {
    let ctx = gen_context(vocab, seed, n_facts, len)?;
    io::write_json(out, &ContextFile::from(&ctx))?;
    Ok(ctx)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompileDoc {
    pub config_hash: String,
    pub seed: u64,
    pub model: String,
    pub context: String,
    pub config: CompileConfig,
    pub report: TrainReport,
    pub artifact_bytes: u64,
}

pub struct CompilePaths {
    pub artifact: PathBuf,
    pub adapter: Option<PathBuf>,
    pub report: PathBuf,
}

/// Compile one context file; outputs are named after the context's stem.
pub fn compile_file(model: &Path, context: &Path, config: &CompileConfig, out: &Path) -> Result<(CompileDoc, CompilePaths)> {
    let started = Instant::now();
    let weights = io::load_checkpoint(model)?;
    let ctx: ContextFile = io::read_json(context)?;
    let stem = io::stem(context);
    let vocab = Vocab::default();
    let output = compile(&vocab, &weights, &ctx.tokens, config)?;
    let artifact_path = io::sibling(out, &stem, "lcc");
    let bytes = crate::format::serialize_artifact(&output.artifact);
    io::write_bytes(&artifact_path, &bytes)?;
    let adapter = match &output.adapter {
        Some(a) => {
            let p = io::sibling(out, &stem, "lcca");
            io::save_adapter(&p, a, &output.artifact, weights.config.d_model)?;
            Some(p)
        }
        None => None,
    };
    let doc = CompileDoc {
        config_hash: io::hex(&config.hash()),
        seed: config.seed,
        model: format!("{}", weights.fingerprint()),
        context: stem.clone(),
        config: config.clone(),
        report: output.report,
        artifact_bytes: bytes.len() as u64,
    };
    let report = io::sibling(out, &stem, "train.json");
    io::write_json(&report, &doc)?;
    write_timing(&io::sibling(out, &stem, "timing.json"), "compile", started)?;
    Ok((
        doc,
        CompilePaths {
            artifact: artifact_path,
            adapter,
            report,
        },
    ))
}

/// Parse query tokens given as ids or as words of the synthetic language.
pub fn parse_tokens(vocab: &Vocab, words: &[String]) -> Result<Vec<u32>> {
    words
        .iter()
        .flat_map(|w| w.split_whitespace())
        .map(|w| {
            w.parse::<u32>()
                .ok()
                .or_else(|| vocab.parse_word(w))
                .ok_or_else(|| LccError::Usage(format!("unknown token {w:?}")))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryOutput {
    /// Generated ids, including the stop token when produced.
    pub tokens: Vec<u32>,
    pub text: String,
    /// Logit row behind each generated token.
    pub logits: Vec<Vec<f64>>,
}

/// Greedy answer from an artifact (and optional coupled sidecar).
pub fn query(model: &Path, artifact: &Path, adapter: Option<&Path>, tokens: &[u32], max_new: usize) -> Result<QueryOutput> {
    let weights = io::load_checkpoint(model)?;
    let art = io::load_artifact(artifact)?;
    let adapter = adapter
        .map(|p| io::load_adapter(p, weights.fingerprint(), &art))
        .transpose()?;
    query_loaded(&weights, &art, adapter.as_ref(), tokens, max_new)
}

pub fn query_loaded(
    weights: &ModelWeights,
    artifact: &lcc_core::BufferArtifact,
    adapter: Option<&lcc_core::LoraAdapter>,
    tokens: &[u32],
    max_new: usize,
) -> Result<QueryOutput> {
    let cache = attach(weights, artifact)?;
    let (ids, logits) = decode_with_logits(weights, adapter, tokens, &causal_mask_builder, Some(&cache), max_new, STOP)?;
    Ok(QueryOutput {
        text: Vocab::default().detokenize(&ids),
        tokens: ids,
        logits,
    })
}

/// Evaluate every `*.json` context in `contexts` against `artifacts`,
/// writing `eval.json` and `eval.csv` to `out`.
pub fn eval_dirs(model: &Path, contexts: &Path, artifacts: &Path, opts: &EvalOptions, out: &Path) -> Result<EvalReport> {
    let weights = io::load_checkpoint(model)?;
    let vocab = Vocab::default();
    let mut names: Vec<PathBuf> = std::fs::read_dir(contexts)
        .map_err(|e| LccError::io(contexts, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(LccError::Missing(vec![format!("{}/*.json (no contexts)", contexts.display())]));
    }
    let gaps: Vec<String> = names
        .iter()
        .map(|p| io::sibling(artifacts, &io::stem(p), "lcc"))
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if !gaps.is_empty() {
        return Err(LccError::Missing(gaps));
    }
    let mut rows = Vec::new();
    for path in &names {
        let stem = io::stem(path);
        let ctx: SyntheticContext = io::read_json::<ContextFile>(path)?.into();
        let art_path = io::sibling(artifacts, &stem, "lcc");
        let artifact = io::load_artifact(&art_path)?;
        let sidecar = io::sibling(artifacts, &stem, "lcca");
        let adapter = if sidecar.exists() {
            Some(io::load_adapter(&sidecar, weights.fingerprint(), &artifact)?)
        } else {
            None
        };
        let file_bytes = std::fs::metadata(&art_path).map_err(|e| LccError::io(&art_path, e))?.len();
        let compiled = Compiled {
            artifact: &artifact,
            adapter: adapter.as_ref(),
            file_bytes,
        };
        rows.extend(evaluate_context(&weights, &vocab, &stem, &ctx, Some(&compiled), opts)?);
    }
    let report = EvalReport {
        config_hash: opts.hash(),
        model: format!("{}", weights.fingerprint()),
        seeds: vec![opts.seed],
        options: opts.clone(),
        rows,
    };
    io::write_json(&out.join("eval.json"), &report)?;
    let mut csv = Vec::new();
    crate::eval::write_csv(&report, &mut csv)?;
    io::write_bytes(&out.join("eval.csv"), &csv)?;
    Ok(report)
}
