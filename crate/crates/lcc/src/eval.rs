//! Probe accuracy and drift under each conditioning regime.

use crate::error::Result;
use lcc_core::data::{context_cache, gen_agnostic_pool, SyntheticContext, Vocab, DEFAULT_MAX_DECODE};
use lcc_core::lora::LoraAdapter;
use lcc_core::metrics::{kl_drift, probe_accuracy, Conditioning};
use lcc_core::trainer::tune_adapter_on_context;
use lcc_core::{attach, BufferArtifact, CompileConfig, ModelWeights};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    /// Seeds the held-out agnostic queries.
    pub seed: u64,
    pub n_queries: usize,
    pub max_decode: usize,
    /// Steps of next-token adapter tuning for the TLM-like row; `None`
    /// skips that row.
    pub tlm_steps: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            n_queries: 16,
            max_decode: DEFAULT_MAX_DECODE,
            tlm_steps: None,
        }
    }
}

impl EvalOptions {
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"LCC-eval");
        h.update(crate::io::to_json(self));
        crate::io::hex(&h.finalize())
    }

    fn queries(&self, vocab: &Vocab) -> Vec<Vec<u32>> {
        // Offset so the pool differs from any compile-time pool drawn from
        // the same seed.
        gen_agnostic_pool(vocab, self.seed ^ 0x5EED_E7A1, self.n_queries)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Condition {
    /// Teacher with the raw context (upper bound).
    FullContext,
    /// Teacher with nothing (lower bound).
    NoContext,
    /// Attached artifact, base weights only.
    Buffer { ratio: u32 },
    /// Attached artifact plus its coupled adapter sidecar.
    Coupled { ratio: u32 },
    /// No context and no buffer; adapter tuned on the context and kept.
    TlmLike,
}

impl Condition {
    pub fn label(&self) -> String {
        match self {
            Condition::FullContext => "full_context".into(),
            Condition::NoContext => "no_context".into(),
            Condition::Buffer { ratio } => format!("buffer_{ratio}x"),
            Condition::Coupled { ratio } => format!("coupled_{ratio}x"),
            Condition::TlmLike => "tlm_like".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub condition: Condition,
    pub context: String,
    pub seed: u64,
    pub accuracy: f64,
    /// Mean KL from the context-conditioned teacher on held-out agnostic
    /// queries.
    pub kl_drift: f64,
    pub artifact_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub model: String,
    pub seeds: Vec<u64>,
    pub options: EvalOptions,
    pub rows: Vec<EvalRow>,
}

/// A compiled context as the evaluator sees it.
pub struct Compiled<'a> {
    pub artifact: &'a BufferArtifact,
    pub adapter: Option<&'a LoraAdapter>,
    pub file_bytes: u64,
}

/// Rows for one context: full-context, no-context, then the artifact rows
/// (if any) and the TLM-like row (if enabled).
pub fn evaluate_context(
    weights: &ModelWeights,
    vocab: &Vocab,
    name: &str,
    ctx: &SyntheticContext,
    compiled: Option<&Compiled<'_>>,
    opts: &EvalOptions,
) -> Result<Vec<EvalRow>> {
    let probes = ctx.probes();
    let queries = opts.queries(vocab);
    let full = context_cache(weights, &ctx.tokens)?;
    let row = |condition, cond: Conditioning<'_>, bytes| -> Result<EvalRow> {
        Ok(EvalRow {
            condition,
            context: name.to_string(),
            seed: opts.seed,
            accuracy: probe_accuracy(weights, cond, &probes)?,
            kl_drift: kl_drift(weights, &ctx.tokens, cond, &queries, opts.max_decode)?,
            artifact_bytes: bytes,
        })
    };
    let mut rows = vec![
        row(Condition::FullContext, Conditioning::Context(&full), 0)?,
        row(Condition::NoContext, Conditioning::Nothing, 0)?,
    ];
    if let Some(c) = compiled {
        let cache = attach(weights, c.artifact)?;
        let ratio = c.artifact.meta.ratio;
        rows.push(row(Condition::Buffer { ratio }, Conditioning::Buffer(&cache, None), c.file_bytes)?);
        if let Some(adapter) = c.adapter {
            rows.push(row(
                Condition::Coupled { ratio },
                Conditioning::Buffer(&cache, Some(adapter)),
                c.file_bytes,
            )?);
        }
    }
    if let Some(steps) = opts.tlm_steps {
        let config = CompileConfig {
            seed: opts.seed,
            ..CompileConfig::default()
        };
        let adapter = tune_adapter_on_context(weights, &ctx.tokens, &config, steps)?;
        rows.push(row(Condition::TlmLike, Conditioning::Adapter(&adapter), 0)?);
    }
    Ok(rows)
}

/// Tidy rows: one metric per line.
pub fn write_csv(report: &EvalReport, out: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["config_hash", "seed", "context", "condition", "metric", "value"])?;
    for r in &report.rows {
        let metrics = [
            ("accuracy", r.accuracy),
            ("kl_drift", r.kl_drift),
            ("artifact_bytes", r.artifact_bytes as f64),
        ];
        for (m, v) in metrics {
            w.write_record([
                report.config_hash.as_str(),
                &r.seed.to_string(),
                &r.context,
                &r.condition.label(),
                m,
                &v.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| crate::error::LccError::io("<csv>", e))?;
    Ok(())
}

/// Mean of `f` over rows matching `pred`.
pub fn mean_of(rows: &[EvalRow], pred: impl Fn(&Condition) -> bool, f: impl Fn(&EvalRow) -> f64) -> Option<f64> {
    let xs: Vec<f64> = rows.iter().filter(|r| pred(&r.condition)).map(f).collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}
