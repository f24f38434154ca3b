//! Ablation sweeps: one compile per (value, seed) cell, aggregated into a
//! tidy CSV ordered by cell index.

use crate::error::{LccError, Result};
use crate::eval::{evaluate_context, Compiled, Condition, EvalOptions, EvalRow};
use crate::io;
use lcc_core::data::{gen_context, Vocab};
use lcc_core::trainer::compile;
use lcc_core::{CompileConfig, LossKind, ModelWeights};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Ratio,
    NAgnostic,
    NRecon,
    LossKind,
    Coupled,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Ratio => "ratio",
            Axis::NAgnostic => "n_agnostic",
            Axis::NRecon => "n_recon",
            Axis::LossKind => "loss_kind",
            Axis::Coupled => "coupled",
        }
    }

    /// The grid points the experiments use.
    pub fn standard_values(self) -> Vec<Value> {
        match self {
            Axis::Ratio => [2, 4, 8, 16, 32].map(Value::from).to_vec(),
            Axis::NAgnostic => [0, 1000, 2000, 8000].map(Value::from).to_vec(),
            Axis::NRecon => [0, 500, 1000, 2000].map(Value::from).to_vec(),
            Axis::LossKind => ["kl", "mse"].map(Value::from).to_vec(),
            Axis::Coupled => [false, true].map(Value::from).to_vec(),
        }
    }

    fn apply(self, base: &CompileConfig, v: &Value) -> Result<CompileConfig> {
        let bad = || LccError::Usage(format!("value {v} is not valid for axis {}", self.name()));
        let int = || v.as_u64().map(|x| x as usize).ok_or_else(bad);
        let mut c = base.clone();
        match self {
            Axis::Ratio => {
                c.ratio = int()?;
                c.k_tokens = None;
            }
            Axis::NAgnostic => c.n_agnostic = int()?,
            Axis::NRecon => c.n_recon = int()?,
            Axis::LossKind => c.loss_kind = serde_json::from_value::<LossKind>(v.clone()).map_err(|_| bad())?,
            Axis::Coupled => c.coupled = v.as_bool().ok_or_else(bad)?,
        }
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    pub axis: Axis,
    pub values: Vec<Value>,
    pub seeds: Vec<u64>,
    /// Settings shared by every cell; the axis field and the seed are
    /// overridden per cell.
    pub base: CompileConfig,
    /// Each seed gets one context, shared by all values of the axis.
    pub n_facts: usize,
    pub ctx_len: usize,
    pub eval: EvalOptions,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            axis: Axis::Ratio,
            values: Axis::Ratio.standard_values(),
            seeds: vec![0, 1, 2],
            base: CompileConfig::default(),
            n_facts: 4,
            ctx_len: 64,
            eval: EvalOptions::default(),
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() || self.seeds.is_empty() {
            return Err(LccError::Usage("sweep needs at least one value and one seed".into()));
        }
        for v in &self.values {
            self.axis.apply(&self.base, v)?;
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"LCC-sweep");
        h.update(io::to_json(self));
        io::hex(&h.finalize())
    }

    /// `(value, seed)` in cell order: values outer, seeds inner.
    pub fn cells(&self) -> Vec<(Value, u64)> {
        self.values
            .iter()
            .flat_map(|v| self.seeds.iter().map(move |&s| (v.clone(), s)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: usize,
    pub value: Value,
    pub seed: u64,
    /// `None` on success, else the error that stopped the cell.
    pub error: Option<String>,
    pub metrics: Vec<(String, f64)>,
}

impl CellResult {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| n == name).map(|m| m.1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config_hash: String,
    pub spec: SweepSpec,
    pub cells: Vec<CellResult>,
}

impl SweepReport {
    /// Mean of `metric` over the successful cells with this axis value.
    pub fn mean(&self, value: &Value, metric: &str) -> Option<f64> {
        let xs: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| &c.value == value)
            .filter_map(|c| c.metric(metric))
            .collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

fn accuracy(rows: &[EvalRow], pred: impl Fn(&Condition) -> bool) -> Option<(f64, f64)> {
    rows.iter().find(|r| pred(&r.condition)).map(|r| (r.accuracy, r.kl_drift))
}

fn run_cell(weights: &ModelWeights, spec: &SweepSpec, value: &Value, seed: u64) -> Result<Vec<(String, f64)>> {
    let vocab = Vocab::default();
    let config = CompileConfig {
        seed,
        ..spec.axis.apply(&spec.base, value)?
    };
    let ctx = gen_context(&vocab, seed, spec.n_facts, spec.ctx_len)?;
    let out = compile(&vocab, weights, &ctx.tokens, &config)?;
    let file_bytes = crate::format::serialize_artifact(&out.artifact).len() as u64;
    let compiled = Compiled {
        artifact: &out.artifact,
        adapter: out.adapter.as_ref(),
        file_bytes,
    };
    let opts = EvalOptions { seed, ..spec.eval.clone() };
    let rows = evaluate_context(weights, &vocab, &format!("seed{seed}"), &ctx, Some(&compiled), &opts)?;
    let mut m = Vec::new();
    let mut put = |k: &str, v: f64| m.push((k.to_string(), v));
    if let Some((a, d)) = accuracy(&rows, |c| matches!(c, Condition::Buffer { .. })) {
        put("accuracy", a);
        put("kl_drift", d);
    }
    if let Some((a, d)) = accuracy(&rows, |c| matches!(c, Condition::Coupled { .. })) {
        put("accuracy_with_adapter", a);
        put("kl_drift_with_adapter", d);
    }
    if let Some((a, _)) = accuracy(&rows, |c| *c == Condition::FullContext) {
        put("full_context_accuracy", a);
    }
    if let Some((a, d)) = accuracy(&rows, |c| *c == Condition::NoContext) {
        put("no_context_accuracy", a);
        put("no_context_kl_drift", d);
    }
    put("k_tokens", out.artifact.k_tokens as f64);
    put("artifact_bytes", file_bytes as f64);
    put("final_loss", out.report.final_loss());
    Ok(m)
}

/// Run every cell with up to `jobs` worker threads. A failing cell is
/// recorded and the sweep continues.
pub fn run_sweep(weights: &ModelWeights, spec: &SweepSpec, jobs: usize) -> Result<SweepReport> {
    spec.validate()?;
    let cells = spec.cells();
    let results: Mutex<Vec<Option<CellResult>>> = Mutex::new(vec![None; cells.len()]);
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, cells.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((value, seed)) = cells.get(i) else { break };
                let (error, metrics) = match run_cell(weights, spec, value, *seed) {
                    Ok(m) => (None, m),
                    Err(e) => (Some(e.to_string()), Vec::new()),
                };
                results.lock().expect("no worker panics while holding the lock")[i] = Some(CellResult {
                    cell: i,
                    value: value.clone(),
                    seed: *seed,
                    error,
                    metrics,
                });
            });
        }
    });
    let cells = results
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|c| c.expect("every cell ran"))
        .collect();
    Ok(SweepReport {
        config_hash: spec.hash(),
        spec: spec.clone(),
        cells,
    })
}

/// One row per cell per metric; failed cells get a single `error` row.
pub fn write_csv(report: &SweepReport, out: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["config_hash", "cell", "axis", "value", "seed", "status", "metric", "metric_value"])?;
    let axis = report.spec.axis.name();
    for c in &report.cells {
        let value = match &c.value {
            Value::String(s) => s.clone(),
            v => v.to_string(),
        };
        let head = [report.config_hash.clone(), c.cell.to_string(), axis.to_string(), value, c.seed.to_string()];
        match &c.error {
            Some(e) => {
                let mut rec = head.to_vec();
                rec.extend(["error".to_string(), "error".to_string(), e.clone()]);
                w.write_record(rec)?;
            }
            None => {
                for (m, v) in &c.metrics {
                    let mut rec = head.to_vec();
                    rec.extend(["ok".to_string(), m.clone(), v.to_string()]);
                    w.write_record(rec)?;
                }
            }
        }
    }
    w.flush().map_err(|e| LccError::io("<csv>", e))?;
    Ok(())
}
