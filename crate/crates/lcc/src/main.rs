use clap::{Args, Parser, Subcommand, ValueEnum};
use lcc::ablate::{self, SweepSpec};
use lcc::commands;
use lcc::error::{exit, LccError, Result};
use lcc::eval::EvalOptions;
use lcc::io;
use lcc::verify::{self, Fault};
use lcc_core::data::{Vocab, DEFAULT_MAX_DECODE};
use lcc_core::pretrain::PretrainConfig;
use lcc_core::{CompileConfig, LossKind};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "lcc", version, about = "Compile contexts into portable buffer-token KV artifacts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the base model until held-out recall reaches the target.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Write a synthetic fact context as JSON.
    GenContext {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        facts: usize,
        #[arg(long, default_value_t = 64)]
        len: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compile one context file into an `.lcc` artifact.
    Compile {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        context: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ratio: Option<usize>,
        #[arg(long)]
        loss: Option<Loss>,
        #[arg(long)]
        coupled: bool,
    },
    /// Answer a query from an artifact alone.
    Query {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        artifact: PathBuf,
        /// Coupled adapter sidecar (`.lcca`).
        #[arg(long)]
        adapter: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_MAX_DECODE)]
        max_new: usize,
        /// Print ids, text and logits as JSON.
        #[arg(long)]
        json: bool,
        /// Token ids or words, e.g. `ask k3`.
        #[arg(required = true)]
        tokens: Vec<String>,
    },
    /// Score every context in a directory against its artifact.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        contexts: PathBuf,
        #[arg(long)]
        artifacts: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run a sweep over one compile setting.
    Ablate {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run the invariant suite.
    Verify {
        /// Deliberately break a rule to check the suite notices.
        #[arg(long, value_parser = ["mask-rule", "artifact-bit"])]
        inject: Vec<String>,
    },
}

#[derive(Args)]
struct Common {
    /// JSON settings; unset fields keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Loss {
    Kl,
    Mse,
}

impl Common {
    fn load<T: serde::de::DeserializeOwned + Default>(&self) -> Result<T> {
        self.config.as_deref().map_or_else(|| Ok(T::default()), io::read_json)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { common } => {
            let mut cfg: PretrainConfig = common.load()?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let (_, doc) = commands::pretrain(&cfg, &common.out, &mut |p| {
                eprintln!("step {:>6}  loss {:.4}  recall {:.3}", p.step, p.train_loss, p.recall);
            })?;
            if let Some(r) = doc.report {
                println!(
                    "recall {:.3}  no-context {:.3}  steps {}  -> {}",
                    r.recall,
                    r.no_context_recall,
                    r.steps,
                    common.out.join(commands::MODEL_FILE).display()
                );
            }
        }
        Command::GenContext { seed, facts, len, out } => {
            let ctx = commands::gen_context_file(&Vocab::default(), seed, facts, len, &out)?;
            println!("{}", Vocab::default().detokenize(&ctx.tokens));
        }
        Command::Compile {
            model,
            context,
            common,
            ratio,
            loss,
            coupled,
        } => {
            let mut cfg: CompileConfig = common.load()?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            if let Some(r) = ratio {
                cfg.ratio = r;
                cfg.k_tokens = None;
            }
            if let Some(l) = loss {
                cfg.loss_kind = match l {
                    Loss::Kl => LossKind::Kl,
                    Loss::Mse => LossKind::Mse,
                };
            }
            cfg.coupled |= coupled;
            let (doc, paths) = commands::compile_file(&model, &context, &cfg, &common.out)?;
            println!(
                "K={}  final loss {:.5}  -> {}",
                doc.report.k_tokens,
                doc.report.final_loss(),
                paths.artifact.display()
            );
            if let Some(p) = paths.adapter {
                println!("adapter -> {}", p.display());
            }
        }
        Command::Query {
            model,
            artifact,
            adapter,
            max_new,
            json,
            tokens,
        } => {
            let ids = commands::parse_tokens(&Vocab::default(), &tokens)?;
            let out = commands::query(&model, &artifact, adapter.as_deref(), &ids, max_new)?;
            if json {
                print!("{}", String::from_utf8_lossy(&io::to_json(&out)));
            } else {
                let ids: Vec<String> = out.tokens.iter().map(u32::to_string).collect();
                println!("{}", ids.join(" "));
                println!("{}", out.text);
            }
        }
        Command::Eval {
            model,
            contexts,
            artifacts,
            common,
        } => {
            let mut opts: EvalOptions = common.load()?;
            if let Some(s) = common.seed {
                opts.seed = s;
            }
            let report = commands::eval_dirs(&model, &contexts, &artifacts, &opts, &common.out)?;
            for r in &report.rows {
                println!("{:<14} {:<16} acc {:.3}  kl {:.5}", r.context, r.condition.label(), r.accuracy, r.kl_drift);
            }
        }
        Command::Ablate { model, common, jobs } => {
            let mut spec: SweepSpec = common.load()?;
            if let Some(s) = common.seed {
                spec.seeds = vec![s];
            }
            let weights = io::load_checkpoint(&model)?;
            let report = ablate::run_sweep(&weights, &spec, jobs)?;
            io::write_json(&common.out.join("sweep.json"), &report)?;
            let mut csv = Vec::new();
            ablate::write_csv(&report, &mut csv)?;
            io::write_bytes(&common.out.join("sweep.csv"), &csv)?;
            for v in &spec.values {
                let acc = report.mean(v, "accuracy").map_or("-".into(), |a| format!("{a:.3}"));
                println!("{}={v}  accuracy {acc}", spec.axis.name());
            }
            let failed = report.cells.iter().filter(|c| c.error.is_some()).count();
            if failed > 0 {
                eprintln!("{failed} cells failed; see sweep.csv");
            }
        }
        Command::Verify { inject } => {
            let faults: Vec<Fault> = inject.iter().filter_map(|s| Fault::parse(s)).collect();
            let results = verify::run(&faults);
            for r in &results {
                println!("{} {:<24} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            let failed: Vec<String> = results.iter().filter(|r| !r.passed).map(|r| r.name.to_string()).collect();
            if !failed.is_empty() {
                return Err(LccError::ChecksFailed(failed));
            }
        }
    }
    Ok(())
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::MISSING_INPUT } else { exit::OK };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
