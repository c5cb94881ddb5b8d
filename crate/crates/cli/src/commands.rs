//! The pipeline commands. Each reads only its declared inputs, writes only
//! under the configured output directory, re-reads and validates what it
//! wrote, and finishes with a run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use dapt_core::baseline::{fit_tfidf, transform_all, tune_lsvm, BaselineModel};
use dapt_core::checkpoint::Checkpoint;
use dapt_core::corpus::{chunk_stream, load_documents, split_indices, split_indices_holdout, Chunk, Document, Format, SplitIndices};
use dapt_core::metrics::{EvalReport, TaskKind, DEFAULT_THRESHOLD};
use dapt_core::model::{classification_ids, EncoderConfig, Model};
use dapt_core::tokenizer::{coverage, encode, train_vocab, Vocabulary};
use dapt_core::trainer::{adapt_mlm, evaluate_classifier, evaluate_mlm, finetune_staged, read_curves, write_curves, CurvePoint, Example};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::compare::{render_table, rows_from_reports, to_csv, ComparisonRow};
use crate::config::{RunConfig, SplitMode};
use crate::error::{CliError, CliResult};
use crate::manifest::{write_manifest, RunManifest};

pub const VOCAB_FILE: &str = "vocab.json";
pub const VOCAB_STATS_FILE: &str = "vocab_stats.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const CURVES_FILE: &str = "curves.csv";
pub const REPORT_FILE: &str = "report.json";
pub const BASELINE_FILE: &str = "baseline.json";
pub const COMPARISON_TEXT: &str = "comparison.txt";
pub const COMPARISON_CSV: &str = "comparison.csv";

/// Base name that selects a freshly initialized model for fine-tuning.
pub const VANILLA: &str = "vanilla";

fn require_input(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("input not found: {}", path.display())))
    }
}

fn prepare_output(cfg: &RunConfig) -> CliResult<PathBuf> {
    let out = cfg.output_dir().to_path_buf();
    fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    Ok(out)
}

fn load_docs(path: &Path) -> CliResult<Vec<Document>> {
    require_input(path)?;
    Ok(load_documents(path, Format::from_path(path)?)?)
}

fn load_corpus(cfg: &RunConfig) -> CliResult<Vec<Document>> {
    if cfg.paths.corpus.is_empty() {
        return Err(CliError::Usage("no corpus: set `paths.corpus` or pass --corpus".into()));
    }
    for p in &cfg.paths.corpus {
        require_input(p)?;
    }
    let mut docs = Vec::new();
    for p in &cfg.paths.corpus {
        docs.extend(load_docs(p)?);
    }
    if docs.is_empty() {
        return Err(CliError::Core(dapt_core::Error::EmptyCorpus));
    }
    Ok(docs)
}

fn vocab_path(cfg: &RunConfig) -> CliResult<&Path> {
    let p = cfg
        .paths
        .vocab
        .as_deref()
        .ok_or_else(|| CliError::Usage("no vocabulary: set `paths.vocab` or pass --vocab".into()))?;
    require_input(p)?;
    Ok(p)
}

fn dataset_path(cfg: &RunConfig) -> CliResult<&Path> {
    let p = cfg
        .paths
        .dataset
        .as_deref()
        .ok_or_else(|| CliError::Usage("no dataset: set `paths.dataset` or pass --dataset".into()))?;
    require_input(p)?;
    Ok(p)
}

/// Every document must carry a label.
fn load_labeled(path: &Path) -> CliResult<Vec<Document>> {
    let docs = load_docs(path)?;
    if docs.is_empty() {
        return Err(CliError::Usage(format!("{}: dataset is empty", path.display())));
    }
    if let Some(i) = docs.iter().position(|d| d.label.is_none()) {
        return Err(CliError::Usage(format!(
            "{}: label missing for document {i} (a `label` column or field is required)",
            path.display()
        )));
    }
    Ok(docs)
}

/// Shared by fine-tuning, evaluation and the baseline, so all of them see
/// the same test documents for a given seed.
pub fn labeled_split(cfg: &RunConfig, n: usize) -> CliResult<SplitIndices> {
    Ok(match cfg.split_mode {
        SplitMode::Fixed => split_indices(n, &cfg.train.classification_split)?,
        SplitMode::Holdout { test_ratio, val_fraction } => split_indices_holdout(n, test_ratio, val_fraction, cfg.seed())?,
    })
}

fn encoder_for(cfg: &RunConfig, vocab: &Vocabulary) -> CliResult<EncoderConfig> {
    let mut enc = cfg.encoder.clone();
    if enc.vocab_size == 0 {
        enc.vocab_size = vocab.size();
    } else if enc.vocab_size != vocab.size() {
        return Err(CliError::Usage(format!(
            "encoder.vocab_size is {} but the vocabulary has {} tokens",
            enc.vocab_size,
            vocab.size()
        )));
    }
    Ok(enc)
}

fn load_base_checkpoint(path: &Path, vocab: &Vocabulary) -> CliResult<Checkpoint> {
    require_input(path)?;
    let ckpt = Checkpoint::load(path)?;
    if ckpt.model.config.vocab_size != vocab.size() {
        return Err(CliError::Usage(format!(
            "{}: checkpoint vocabulary size {} differs from the vocabulary ({})",
            path.display(),
            ckpt.model.config.vocab_size,
            vocab.size()
        )));
    }
    Ok(ckpt)
}

fn save_checkpoint(out: &Path, ckpt: &Checkpoint) -> CliResult<()> {
    let dir = out.join(CHECKPOINT_DIR);
    ckpt.save(&dir)?;
    if Checkpoint::load(&dir)?.encode()? != ckpt.encode()? {
        return Err(CliError::Validation(format!("{}: checkpoint did not reload identically", dir.display())));
    }
    Ok(())
}

fn save_curves(out: &Path, curves: &[CurvePoint]) -> CliResult<()> {
    let path = out.join(CURVES_FILE);
    write_curves(&path, curves)?;
    if read_curves(&path)?.len() != curves.len() {
        return Err(CliError::Validation(format!("{}: curve rows did not reload", path.display())));
    }
    Ok(())
}

fn save_report(out: &Path, report: &EvalReport) -> CliResult<()> {
    report.validate()?;
    let path = out.join(REPORT_FILE);
    report.save(&path)?;
    EvalReport::load(&path)?.validate()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabStats {
    pub documents: usize,
    pub words: usize,
    pub tokens: usize,
    /// Fraction of tokens that are not the unknown token.
    pub coverage: f64,
    pub target_size: usize,
    pub vocab_size: usize,
}

pub struct VocabOutcome {
    pub vocab: Vocabulary,
    pub stats: VocabStats,
    pub manifest: RunManifest,
}

pub fn cmd_vocab(cfg: &RunConfig) -> CliResult<VocabOutcome> {
    let docs = load_corpus(cfg)?;
    let out = prepare_output(cfg)?;
    let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
    let vocab = train_vocab(&texts, cfg.vocab_size)?;
    let stats = VocabStats {
        documents: docs.len(),
        words: texts.iter().map(|t| t.split_whitespace().count()).sum(),
        tokens: texts.iter().map(|t| encode(&vocab, t).len()).sum(),
        coverage: coverage(&vocab, &texts),
        target_size: cfg.vocab_size,
        vocab_size: vocab.size(),
    };
    let path = out.join(VOCAB_FILE);
    vocab.save(&path)?;
    if Vocabulary::load(&path)? != vocab {
        return Err(CliError::Validation(format!("{}: vocabulary did not reload identically", path.display())));
    }
    let stats_path = out.join(VOCAB_STATS_FILE);
    fs::write(&stats_path, serde_json::to_string_pretty(&stats)? + "\n").map_err(|e| CliError::io(&stats_path, e))?;
    let inputs: Vec<&Path> = cfg.paths.corpus.iter().map(PathBuf::as_path).collect();
    let manifest = write_manifest("vocab", cfg, &inputs, &[VOCAB_FILE, VOCAB_STATS_FILE], json!({ "stats": stats }))?;
    Ok(VocabOutcome { vocab, stats, manifest })
}

/// Train, validation and test chunks of the corpus. Documents are split
/// before chunking, so no chunk straddles two splits.
pub fn corpus_chunks(cfg: &RunConfig, docs: &[Document], vocab: &Vocabulary) -> CliResult<[Vec<Chunk>; 3]> {
    let (train, val, test) = split_indices(docs.len(), &cfg.train.mlm_split)?.select(docs);
    let mut parts = Vec::with_capacity(3);
    for (split_docs, name) in [train, val, test].iter().zip(["train", "validation", "test"]) {
        let chunks = chunk_stream(split_docs, vocab, cfg.train.chunk_size)?.chunks;
        if chunks.is_empty() {
            return Err(CliError::Usage(format!(
                "the {name} split holds fewer than {} tokens; supply more text or lower train.chunk_size",
                cfg.train.chunk_size
            )));
        }
        parts.push(chunks);
    }
    Ok(parts.try_into().expect("three splits"))
}

pub struct AdaptOutcome {
    pub checkpoint: Checkpoint,
    pub curves: Vec<CurvePoint>,
    pub report: EvalReport,
    pub manifest: RunManifest,
}

/// MLM adaptation from `paths.base` (or a fresh model) on the corpus, with
/// a perplexity report on the held-out test chunks.
pub fn cmd_adapt(cfg: &RunConfig) -> CliResult<AdaptOutcome> {
    let vocab_file = vocab_path(cfg)?;
    let base_path = cfg.paths.base.as_deref().map(Path::new);
    if let Some(p) = base_path {
        require_input(p)?;
    }
    let docs = load_corpus(cfg)?;
    let vocab = Vocabulary::load(vocab_file)?;
    let base = match base_path {
        Some(p) => load_base_checkpoint(p, &vocab)?,
        None => Checkpoint::new(Model::init(encoder_for(cfg, &vocab)?)?),
    };
    if cfg.train.chunk_size > base.model.config.max_len {
        return Err(CliError::Usage(format!(
            "train.chunk_size {} exceeds the model's max_len {}",
            cfg.train.chunk_size, base.model.config.max_len
        )));
    }
    let [train, val, test] = corpus_chunks(cfg, &docs, &vocab)?;
    let out = prepare_output(cfg)?;
    let outcome = adapt_mlm(&base, &train, &val, &vocab, &cfg.train)?;
    let report = evaluate_mlm(&outcome.checkpoint, &test, &vocab, &cfg.train.masking, cfg.train.mlm.batch)?;
    save_checkpoint(&out, &outcome.checkpoint)?;
    save_curves(&out, &outcome.curves)?;
    save_report(&out, &report)?;

    let mut inputs: Vec<&Path> = vec![vocab_file];
    inputs.extend(cfg.paths.corpus.iter().map(PathBuf::as_path));
    inputs.extend(base_path);
    let details = json!({
        "base": cfg.paths.base,
        "chunks": { "train": train.len(), "validation": val.len(), "test": test.len() },
        "schedule": outcome.schedule,
    });
    let manifest = write_manifest("adapt", cfg, &inputs, &[CHECKPOINT_DIR, CURVES_FILE, REPORT_FILE], details)?;
    Ok(AdaptOutcome { checkpoint: outcome.checkpoint, curves: outcome.curves, report, manifest })
}

fn examples(docs: &[Document], idx: &[usize], vocab: &Vocabulary, max_len: usize) -> Vec<Example> {
    idx.iter()
        .map(|&i| Example {
            ids: classification_ids(vocab, &docs[i].text, max_len),
            label: docs[i].label.expect("labels checked on load"),
        })
        .collect()
}

pub struct FinetuneOutcome {
    pub checkpoint: Checkpoint,
    pub curves: Vec<CurvePoint>,
    pub report: EvalReport,
    pub test_ids: Vec<usize>,
    pub manifest: RunManifest,
}

/// Staged fine-tuning from `paths.base`: `vanilla` (the default) starts from
/// a fresh model, anything else names a checkpoint directory.
pub fn cmd_finetune(cfg: &RunConfig) -> CliResult<FinetuneOutcome> {
    let vocab_file = vocab_path(cfg)?;
    let data_file = dataset_path(cfg)?;
    let base_name = cfg.paths.base.clone().unwrap_or_else(|| VANILLA.to_string());
    let base_path = (base_name != VANILLA).then(|| PathBuf::from(&base_name));
    if let Some(p) = &base_path {
        require_input(p)?;
    }
    let vocab = Vocabulary::load(vocab_file)?;
    let docs = load_labeled(data_file)?;
    let base = match &base_path {
        Some(p) => load_base_checkpoint(p, &vocab)?,
        None => Checkpoint::new(Model::init(encoder_for(cfg, &vocab)?)?),
    };
    let split = labeled_split(cfg, docs.len())?;
    let max_len = base.model.config.max_len;
    let [train, val, test] = [&split.train, &split.val, &split.test].map(|idx| examples(&docs, idx, &vocab, max_len));
    if test.is_empty() {
        return Err(CliError::Usage(format!("{}: the test split is empty", data_file.display())));
    }
    let out = prepare_output(cfg)?;
    let pad = vocab.specials().pad;
    let outcome = finetune_staged(&base, &train, &val, pad, &cfg.train)?;
    let (report, _) = evaluate_classifier(&outcome.checkpoint, &test, cfg.train.finetune.batch, pad)?;
    save_checkpoint(&out, &outcome.checkpoint)?;
    save_curves(&out, &outcome.curves)?;
    save_report(&out, &report)?;

    let mut inputs: Vec<&Path> = vec![vocab_file, data_file];
    inputs.extend(base_path.as_deref());
    let details = json!({
        "base": base_name,
        "split": { "train": train.len(), "validation": val.len(), "test": test.len() },
        "selected": outcome.checkpoint.provenance,
        "test_ids": split.test,
    });
    let manifest = write_manifest("finetune", cfg, &inputs, &[CHECKPOINT_DIR, CURVES_FILE, REPORT_FILE], details)?;
    Ok(FinetuneOutcome { checkpoint: outcome.checkpoint, curves: outcome.curves, report, test_ids: split.test, manifest })
}

pub struct EvaluateOutcome {
    pub report: EvalReport,
    pub manifest: RunManifest,
}

/// Scores a checkpoint on the test split: corpus chunks for `Mlm`, the
/// labeled dataset for `Classify`.
pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: &Path, task: TaskKind) -> CliResult<EvaluateOutcome> {
    let vocab_file = vocab_path(cfg)?;
    require_input(checkpoint)?;
    let vocab = Vocabulary::load(vocab_file)?;
    let ckpt = load_base_checkpoint(checkpoint, &vocab)?;
    let mut inputs: Vec<&Path> = vec![vocab_file, checkpoint];
    let (report, details) = match task {
        TaskKind::Mlm => {
            let docs = load_corpus(cfg)?;
            let [_, _, test] = corpus_chunks(cfg, &docs, &vocab)?;
            inputs.extend(cfg.paths.corpus.iter().map(PathBuf::as_path));
            let r = evaluate_mlm(&ckpt, &test, &vocab, &cfg.train.masking, cfg.train.mlm.batch)?;
            (r, json!({ "task": task, "test_chunks": test.len() }))
        }
        TaskKind::Classify => {
            let data_file = dataset_path(cfg)?;
            let docs = load_labeled(data_file)?;
            let split = labeled_split(cfg, docs.len())?;
            let test = examples(&docs, &split.test, &vocab, ckpt.model.config.max_len);
            if test.is_empty() {
                return Err(CliError::Usage(format!("{}: the test split is empty", data_file.display())));
            }
            inputs.push(data_file);
            let (r, _) = evaluate_classifier(&ckpt, &test, cfg.train.finetune.batch, vocab.specials().pad)?;
            (r, json!({ "task": task, "test_ids": split.test }))
        }
    };
    let out = prepare_output(cfg)?;
    save_report(&out, &report)?;
    let manifest = write_manifest("evaluate", cfg, &inputs, &[REPORT_FILE], details)?;
    Ok(EvaluateOutcome { report, manifest })
}

pub struct BaselineOutcome {
    pub model: BaselineModel,
    pub report: EvalReport,
    pub lambda: f64,
    pub test_ids: Vec<usize>,
    pub manifest: RunManifest,
}

/// TF-IDF fitted on the training split, Pegasos lambda tuned on validation
/// F1, report on the test split.
pub fn cmd_baseline(cfg: &RunConfig) -> CliResult<BaselineOutcome> {
    let data_file = dataset_path(cfg)?;
    let docs = load_labeled(data_file)?;
    let split = labeled_split(cfg, docs.len())?;
    let texts = |idx: &[usize]| idx.iter().map(|&i| docs[i].text.as_str()).collect::<Vec<_>>();
    let labels = |idx: &[usize]| idx.iter().map(|&i| docs[i].label.expect("labels checked on load")).collect::<Vec<_>>();
    if split.test.is_empty() || split.val.is_empty() {
        return Err(CliError::Usage(format!("{}: validation and test splits must be non-empty", data_file.display())));
    }
    let tfidf = fit_tfidf(&texts(&split.train))?;
    let [xtr, xva, xte] = [&split.train, &split.val, &split.test].map(|idx| transform_all(&tfidf, &texts(idx)));
    let (ytr, yva, yte) = (labels(&split.train), labels(&split.val), labels(&split.test));
    let tuned = tune_lsvm(
        (&xtr, &ytr),
        (&xva, &yva),
        tfidf.num_features(),
        &cfg.baseline.lambda_grid,
        cfg.baseline.epochs,
        cfg.seed(),
    )?;
    let model = BaselineModel { tfidf, svm: tuned.model };
    let report = EvalReport::classification(&model.svm.scores(&xte), &yte, DEFAULT_THRESHOLD)?;

    let out = prepare_output(cfg)?;
    let path = out.join(BASELINE_FILE);
    model.save(&path)?;
    if BaselineModel::load(&path)? != model {
        return Err(CliError::Validation(format!("{}: baseline model did not reload identically", path.display())));
    }
    save_report(&out, &report)?;
    let details = json!({
        "lambda": tuned.lambda,
        "validation_f1": tuned.val_f1,
        "grid": tuned.scores,
        "test_ids": split.test,
    });
    let manifest = write_manifest("baseline", cfg, &[data_file], &[BASELINE_FILE, REPORT_FILE], details)?;
    Ok(BaselineOutcome { model, report, lambda: tuned.lambda, test_ids: split.test, manifest })
}

pub struct CompareOutcome {
    pub rows: Vec<ComparisonRow>,
    pub table: String,
    pub manifest: RunManifest,
}

/// Model × metric table over named classification reports.
pub fn cmd_compare(cfg: &RunConfig, reports: &[(String, PathBuf)]) -> CliResult<CompareOutcome> {
    if reports.len() < 2 {
        return Err(CliError::Usage(format!("compare needs at least 2 reports, got {}", reports.len())));
    }
    for (_, p) in reports {
        require_input(p)?;
    }
    let rows = rows_from_reports(reports)?;
    let table = render_table(&rows);
    let out = prepare_output(cfg)?;
    let txt = out.join(COMPARISON_TEXT);
    fs::write(&txt, &table).map_err(|e| CliError::io(&txt, e))?;
    let csv_path = out.join(COMPARISON_CSV);
    let csv_text = to_csv(&rows)?;
    fs::write(&csv_path, &csv_text).map_err(|e| CliError::io(&csv_path, e))?;
    if crate::compare::parse_csv(&csv_text)? != rows {
        return Err(CliError::Validation(format!("{}: comparison did not reparse", csv_path.display())));
    }
    let inputs: Vec<&Path> = reports.iter().map(|(_, p)| p.as_path()).collect();
    let names: Vec<&str> = reports.iter().map(|(n, _)| n.as_str()).collect();
    let manifest = write_manifest("compare", cfg, &inputs, &[COMPARISON_TEXT, COMPARISON_CSV], json!({ "models": names }))?;
    Ok(CompareOutcome { rows, table, manifest })
}
