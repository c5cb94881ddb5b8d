//! Argument parsing and dispatch.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dapt_core::metrics::TaskKind;

use crate::commands::{cmd_adapt, cmd_baseline, cmd_compare, cmd_evaluate, cmd_finetune, cmd_vocab, REPORT_FILE};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::fixtures::{generate, FixtureFiles, FixtureSizes};
use crate::manifest::write_manifest;

#[derive(Debug, Parser)]
#[command(name = "dapt", about = "Domain-adaptive MLM pretraining, staged fine-tuning and evaluation")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON config file, or a manifest written by an earlier run.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted override such as `train.mlm.epochs=3` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; takes precedence over DAPT_OUTPUT_DIR and the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; every kernel currently runs on one thread.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Corpus file (repeatable); replaces `paths.corpus`.
    #[arg(long, global = true)]
    pub corpus: Vec<PathBuf>,
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a subword vocabulary on the corpus.
    Vocab,
    /// MLM adaptation on the corpus.
    Adapt {
        /// Checkpoint directory to start from; a fresh model when absent.
        #[arg(long)]
        base: Option<String>,
    },
    /// Staged classifier fine-tuning on the labeled dataset.
    Finetune {
        /// `vanilla` for a fresh model, or a checkpoint directory.
        #[arg(long)]
        base: Option<String>,
    },
    /// Score a checkpoint on the test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        task: Task,
    },
    /// TF-IDF and linear SVM baseline on the labeled dataset.
    Baseline,
    /// Table of classification reports, each given as PATH or NAME=PATH.
    Compare {
        #[arg(required = true, num_args = 2..)]
        reports: Vec<String>,
    },
    /// Synthetic datasets.
    Fixtures {
        #[command(subcommand)]
        action: FixtureAction,
    },
    /// Print the resolved configuration.
    Config,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Task {
    Mlm,
    Classify,
}

#[derive(Debug, Subcommand)]
pub enum FixtureAction {
    /// Write the two-domain corpus, the labeled domain-B dataset and the separable dataset.
    Generate {
        #[arg(long, default_value_t = FixtureSizes::default().domain_docs)]
        domain_docs: usize,
        #[arg(long, default_value_t = FixtureSizes::default().labeled_docs)]
        labeled_docs: usize,
        #[arg(long, default_value_t = FixtureSizes::default().separable_docs)]
        separable_docs: usize,
    },
}

/// `NAME=PATH` or `PATH`; a bare path is named after its directory. A
/// directory argument stands for the report file inside it.
pub fn parse_report_arg(arg: &str) -> (String, PathBuf) {
    let (name, path) = match arg.split_once('=') {
        Some((n, p)) if !n.is_empty() => (Some(n.to_string()), PathBuf::from(p)),
        _ => (None, PathBuf::from(arg)),
    };
    let path = if path.is_dir() { path.join(REPORT_FILE) } else { path };
    let name = name.unwrap_or_else(|| {
        path.parent()
            .and_then(|p| p.file_name())
            .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
    });
    (name, path)
}

fn resolved_config(g: &GlobalArgs, base: Option<&String>) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(g.config.as_deref(), &g.overrides)?;
    if !g.corpus.is_empty() {
        cfg.paths.corpus = g.corpus.clone();
    }
    if let Some(d) = &g.dataset {
        cfg.paths.dataset = Some(d.clone());
    }
    if let Some(v) = &g.vocab {
        cfg.paths.vocab = Some(v.clone());
    }
    if let Some(t) = g.threads {
        cfg.threads = t;
    }
    if let Some(b) = base {
        cfg.paths.base = Some(b.clone());
    }
    cfg.resolve(g.seed, g.out.clone())
}

/// Runs one command and returns the text to print on success.
pub fn run(cli: Cli) -> CliResult<String> {
    let g = &cli.global;
    let base = match &cli.command {
        Command::Adapt { base } | Command::Finetune { base } => base.as_ref(),
        _ => None,
    };
    let cfg = resolved_config(g, base)?;
    if cfg.threads > 1 {
        eprintln!("note: threads = {} requested; all kernels run single-threaded", cfg.threads);
    }
    let out = cfg.output_dir().display().to_string();
    Ok(match &cli.command {
        Command::Config => cfg.to_json()?,
        Command::Vocab => {
            let o = cmd_vocab(&cfg)?;
            format!(
                "vocabulary of {} tokens (coverage {:.4}) written to {out}\n",
                o.stats.vocab_size, o.stats.coverage
            )
        }
        Command::Adapt { .. } => {
            let o = cmd_adapt(&cfg)?;
            format!(
                "adapted for {} epochs; test perplexity {:.4}; outputs in {out}\n",
                o.curves.len(),
                o.report.perplexity.expect("mlm report")
            )
        }
        Command::Finetune { .. } => {
            let o = cmd_finetune(&cfg)?;
            format!(
                "fine-tuned ({} curve rows); test F1 {:.4}; outputs in {out}\n",
                o.curves.len(),
                o.report.f1.expect("classification report")
            )
        }
        Command::Evaluate { checkpoint, task } => {
            let kind = match task {
                Task::Mlm => TaskKind::Mlm,
                Task::Classify => TaskKind::Classify,
            };
            let o = cmd_evaluate(&cfg, checkpoint, kind)?;
            o.report.to_json()?
        }
        Command::Baseline => {
            let o = cmd_baseline(&cfg)?;
            format!("baseline lambda {}; test F1 {:.4}; outputs in {out}\n", o.lambda, o.report.f1.expect("classification report"))
        }
        Command::Compare { reports } => {
            let entries: Vec<(String, PathBuf)> = reports.iter().map(|r| parse_report_arg(r)).collect();
            cmd_compare(&cfg, &entries)?.table
        }
        Command::Fixtures { action: FixtureAction::Generate { domain_docs, labeled_docs, separable_docs } } => {
            let sizes = FixtureSizes {
                domain_docs: *domain_docs,
                labeled_docs: *labeled_docs,
                separable_docs: *separable_docs,
            };
            if sizes.domain_docs == 0 || sizes.labeled_docs == 0 || sizes.separable_docs == 0 {
                return Err(CliError::Usage("fixture sizes must be positive".into()));
            }
            generate(cfg.output_dir(), sizes, cfg.seed())?;
            write_manifest("fixtures", &cfg, &[], &FixtureFiles::names(), serde_json::json!({ "sizes": sizes }))?;
            format!("fixtures written to {out}\n")
        }
    })
}
