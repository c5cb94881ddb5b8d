//! MLM domain adaptation and two-stage classifier fine-tuning.
//!
//! Losses are mean natural-log cross-entropies (nats). Every random draw
//! comes from a generator keyed by the run seed, the epoch and the batch
//! index, so a run is a pure function of its inputs and configuration.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Provenance};
use crate::corpus::{Chunk, SplitSpec, DEFAULT_CHUNK_SIZE};
use crate::error::{Error, Result};
use crate::masking::{batch_rng, collate, MaskingConfig};
use crate::metrics::{EvalReport, DEFAULT_THRESHOLD};
use crate::model::{Model, TokenBatch};
use crate::numerics::{sigmoid, Graph, Mode};
use crate::optim::{adam_step, lr_at, set_trainable, AdamState, Schedule, Trainable};
use crate::tokenizer::Vocabulary;

/// Stream keys that keep the generators of different purposes apart.
const SHUFFLE_KEY: u64 = 0x5348_5546;
const VAL_MASK_KEY: u64 = 0x5641_4c4d;
const FINETUNE_KEY: u64 = 0x4649_4e45;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlmConfig {
    pub epochs: usize,
    pub batch: usize,
    pub peak_lr: f64,
    /// Nominal warmup; the run uses [`Schedule::scaled_warmup`] of it.
    pub warmup: u64,
    pub weight_decay: f64,
}

impl Default for MlmConfig {
    fn default() -> Self {
        Self { epochs: 7, batch: 16, peak_lr: 1e-4, warmup: 1000, weight_decay: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch: usize,
    pub lr_frozen: f64,
    pub lr_unfrozen: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { stage1_epochs: 20, stage2_epochs: 20, batch: 32, lr_frozen: 1e-5, lr_unfrozen: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub chunk_size: usize,
    pub mlm: MlmConfig,
    pub finetune: FinetuneConfig,
    pub masking: MaskingConfig,
    pub mlm_split: SplitSpec,
    pub classification_split: SplitSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            chunk_size: DEFAULT_CHUNK_SIZE,
            mlm: MlmConfig::default(),
            finetune: FinetuneConfig::default(),
            masking: MaskingConfig::default(),
            mlm_split: SplitSpec::mlm(0),
            classification_split: SplitSpec::classification(0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.chunk_size < 2 {
            return bad(format!("chunk_size must be at least 2, got {}", self.chunk_size));
        }
        if self.mlm.batch == 0 || self.finetune.batch == 0 {
            return bad("batch sizes must be positive".into());
        }
        for (name, lr) in [
            ("mlm.peak_lr", self.mlm.peak_lr),
            ("finetune.lr_frozen", self.finetune.lr_frozen),
            ("finetune.lr_unfrozen", self.finetune.lr_unfrozen),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        if !(self.mlm.weight_decay >= 0.0 && self.mlm.weight_decay.is_finite()) {
            return bad(format!("mlm.weight_decay must be ≥ 0, got {}", self.mlm.weight_decay));
        }
        if self.mlm.warmup == 0 {
            return bad("mlm.warmup must be positive".into());
        }
        self.masking.validate()?;
        self.mlm_split.validate()?;
        self.classification_split.validate()
    }
}

/// One row of the learning-curve log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub stage: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: Option<f64>,
    pub val_acc: Option<f64>,
}

pub fn write_curves(path: &Path, curves: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    write_curve_rows(&mut w, curves)?;
    w.flush()?;
    Ok(())
}

pub fn curves_to_csv(curves: &[CurvePoint]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    write_curve_rows(&mut w, curves)?;
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn write_curve_rows<W: Write>(w: &mut csv::Writer<W>, curves: &[CurvePoint]) -> Result<()> {
    w.write_record(["stage", "epoch", "train_loss", "val_loss", "train_acc", "val_acc"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for c in curves {
        w.write_record([
            c.stage.clone(),
            c.epoch.to_string(),
            c.train_loss.to_string(),
            c.val_loss.to_string(),
            opt(c.train_acc),
            opt(c.val_acc),
        ])?;
    }
    Ok(())
}

pub fn read_curves(path: &Path) -> Result<Vec<CurvePoint>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

/// Step counts of an MLM run, recorded in run manifests.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlmSchedule {
    pub steps_per_epoch: u64,
    pub total_steps: u64,
    pub warmup_steps: u64,
}

pub struct MlmOutcome {
    pub checkpoint: Checkpoint,
    pub curves: Vec<CurvePoint>,
    pub schedule: Option<MlmSchedule>,
}

fn batches_of(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

fn shuffled(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_KEY);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    order
}

/// Mean MLM loss (nats per labeled position) and the number of labeled
/// positions, with masks drawn from a fixed generator so repeated calls agree.
pub fn mlm_eval_loss(
    model: &Model,
    chunks: &[Chunk],
    vocab: &Vocabulary,
    masking: &MaskingConfig,
    batch: usize,
) -> Result<(f64, u64)> {
    if chunks.is_empty() {
        return Err(Error::Data("MLM evaluation needs at least one chunk".into()));
    }
    let pad = vocab.specials().pad;
    let (mut total, mut count) = (0.0, 0u64);
    for (b, group) in chunks.chunks(batch.max(1)).enumerate() {
        let mut rng = batch_rng(masking.seed ^ VAL_MASK_KEY, 0, b as u64);
        let masked = collate(group, masking, vocab, &mut rng)?;
        let mut g = Graph::new();
        if let Some(loss) = model.mlm_loss_graph(&mut g, &masked, pad, Mode::Eval, &mut rng)? {
            let n = masked.num_labeled() as u64;
            total += g.value(loss).item() * n as f64;
            count += n;
        }
    }
    if count == 0 {
        return Err(Error::Data("no position was selected for masking".into()));
    }
    Ok((total / count as f64, count))
}

/// Continues MLM training of `init` on `train` chunks.
///
/// The classifier head is frozen throughout. Returns the final-epoch
/// weights; validation loss is logged per epoch but selects nothing.
pub fn adapt_mlm(
    init: &Checkpoint,
    train: &[Chunk],
    val: &[Chunk],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<MlmOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data(format!(
            "MLM adaptation needs non-empty splits, got {} train and {} validation chunks",
            train.len(),
            val.len()
        )));
    }
    if cfg.mlm.epochs == 0 {
        return Ok(MlmOutcome { checkpoint: init.clone(), curves: Vec::new(), schedule: None });
    }
    if cfg.mlm.batch > train.len() {
        return Err(Error::Config(format!(
            "mlm.batch {} exceeds the {} training chunks",
            cfg.mlm.batch,
            train.len()
        )));
    }
    let mut model = init.model.clone();
    for p in model.params.iter_mut() {
        p.trainable = !Model::is_classifier_param(&p.name);
    }
    let steps_per_epoch = batches_of(train.len(), cfg.mlm.batch) as u64;
    let total_steps = steps_per_epoch * cfg.mlm.epochs as u64;
    let warmup_steps = Schedule::scaled_warmup(cfg.mlm.warmup, total_steps);
    let schedule = Schedule::new(cfg.mlm.peak_lr, warmup_steps, total_steps, cfg.mlm.weight_decay)?;
    let mut opt = AdamState::new(&model.params);
    let pad = vocab.specials().pad;
    let mut curves = Vec::with_capacity(cfg.mlm.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.mlm.epochs as u64 {
        let order = shuffled(train.len(), cfg.seed, epoch);
        let (mut total, mut count) = (0.0, 0u64);
        for (b, idx) in order.chunks(cfg.mlm.batch).enumerate() {
            step += 1;
            let group: Vec<Chunk> = idx.iter().map(|&i| train[i].clone()).collect();
            let mut rng = batch_rng(cfg.masking.seed, epoch, b as u64);
            let masked = collate(&group, &cfg.masking, vocab, &mut rng)?;
            let mut g = Graph::new();
            let Some(loss) = model.mlm_loss_graph(&mut g, &masked, pad, Mode::Train, &mut rng)? else {
                continue;
            };
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("MLM loss at epoch {} batch {b}", epoch + 1)));
            }
            let n = masked.num_labeled() as u64;
            total += value * n as f64;
            count += n;
            g.backward(loss, &mut model.params)?;
            adam_step(&mut model.params, &mut opt, lr_at(&schedule, step)?, schedule.weight_decay)?;
        }
        let (val_loss, _) = mlm_eval_loss(&model, val, vocab, &cfg.masking, cfg.mlm.batch)?;
        curves.push(CurvePoint {
            stage: "mlm".into(),
            epoch: epoch as usize + 1,
            train_loss: if count > 0 { total / count as f64 } else { 0.0 },
            val_loss,
            train_acc: None,
            val_acc: None,
        });
    }
    for p in model.params.iter_mut() {
        p.trainable = true;
    }
    let provenance = Provenance {
        stage: "mlm".into(),
        epoch: cfg.mlm.epochs,
        val_metric: curves.last().map(|c| c.val_loss),
    };
    Ok(MlmOutcome {
        checkpoint: Checkpoint { model, optimizer: Some(opt), provenance },
        curves,
        schedule: Some(MlmSchedule { steps_per_epoch, total_steps, warmup_steps }),
    })
}

/// A token sequence (`[CLS] … [SEP]`) with its 0/1 label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub ids: Vec<usize>,
    pub label: u8,
}

/// Index groups of at most `batch` elements. A trailing group of one is
/// merged into the previous group, since batch norm needs two rows.
pub fn batch_groups(order: &[usize], batch: usize) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect();
    if groups.len() > 1 && groups.last().is_some_and(|g| g.len() == 1) {
        let tail = groups.pop().expect("non-empty");
        groups.last_mut().expect("non-empty").extend(tail);
    }
    groups
}

fn token_batch(examples: &[Example], idx: &[usize], pad: usize) -> Result<(TokenBatch, Vec<f64>)> {
    let seqs: Vec<Vec<usize>> = idx.iter().map(|&i| examples[i].ids.clone()).collect();
    let labels = idx.iter().map(|&i| f64::from(examples[i].label)).collect();
    Ok((TokenBatch::from_sequences(&seqs, pad)?, labels))
}

/// Eval-mode mean BCE (nats), accuracy at 0.5, and the probabilities.
pub fn classifier_eval(model: &mut Model, examples: &[Example], batch: usize, pad: usize) -> Result<(f64, f64, Vec<f64>)> {
    if examples.is_empty() {
        return Err(Error::Data("classifier evaluation needs at least one example".into()));
    }
    let idx: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut loss, mut correct) = (0.0, 0usize);
    let mut probs = Vec::with_capacity(examples.len());
    for group in idx.chunks(batch.max(1)) {
        let (tb, labels) = token_batch(examples, group, pad)?;
        let mut g = Graph::new();
        let enc = model.encode_graph(&mut g, &tb, Mode::Eval, &mut rng)?;
        let z = model.classifier_logits_graph(&mut g, enc.hidden, tb.batch, tb.seq, Mode::Eval, &mut rng)?;
        let l = g.bce_with_logits(z, &labels)?;
        loss += g.value(l).item() * group.len() as f64;
        for (&zi, &y) in g.value(z).data().iter().zip(&labels) {
            let p = sigmoid(zi);
            correct += usize::from((p >= DEFAULT_THRESHOLD) == (y == 1.0));
            probs.push(p);
        }
    }
    let n = examples.len() as f64;
    Ok((loss / n, correct as f64 / n, probs))
}

pub struct FinetuneOutcome {
    /// Lowest validation loss over both stages.
    pub checkpoint: Checkpoint,
    pub curves: Vec<CurvePoint>,
    /// Weights at the end of stage 1 (before restoring the best epoch).
    pub stage1_last: Option<Model>,
}

struct StageSpec<'a> {
    label: &'a str,
    epochs: usize,
    lr: f64,
    trainable: Trainable,
    /// Offsets the generator epoch index so the stages draw distinct streams.
    epoch_offset: u64,
}

/// Stage 1 trains the classifier head on a frozen encoder; the best stage-1
/// epoch is restored; stage 2 trains everything. The result is the epoch
/// with the lowest validation loss over both stages.
pub fn finetune_staged(
    base: &Checkpoint,
    train: &[Example],
    val: &[Example],
    pad: usize,
    cfg: &TrainConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let ft = &cfg.finetune;
    if ft.stage1_epochs + ft.stage2_epochs == 0 {
        return Ok(FinetuneOutcome { checkpoint: base.clone(), curves: Vec::new(), stage1_last: None });
    }
    if train.len() < 2 || val.is_empty() {
        return Err(Error::Data(format!(
            "fine-tuning needs at least 2 training and 1 validation examples, got {} and {}",
            train.len(),
            val.len()
        )));
    }
    if ft.batch > train.len() {
        return Err(Error::Config(format!(
            "finetune.batch {} exceeds the {} training examples",
            ft.batch,
            train.len()
        )));
    }
    let mut curves = Vec::with_capacity(ft.stage1_epochs + ft.stage2_epochs);
    let mut best: Option<Checkpoint> = None;
    let mut model = base.model.clone();
    let stages = [
        StageSpec { label: "stage1", epochs: ft.stage1_epochs, lr: ft.lr_frozen, trainable: Trainable::HeadOnly, epoch_offset: 0 },
        StageSpec {
            label: "stage2",
            epochs: ft.stage2_epochs,
            lr: ft.lr_unfrozen,
            trainable: Trainable::All,
            epoch_offset: ft.stage1_epochs as u64,
        },
    ];
    let mut stage1_last = None;
    for stage in &stages {
        if stage.epochs == 0 {
            continue;
        }
        set_trainable(&mut model.params, stage.trainable);
        let mut opt = AdamState::new(&model.params);
        let mut stage_best: Option<Checkpoint> = None;
        for e in 0..stage.epochs {
            let gen_epoch = stage.epoch_offset + e as u64;
            let order = shuffled(train.len(), cfg.seed ^ FINETUNE_KEY, gen_epoch);
            let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
            for (b, group) in batch_groups(&order, ft.batch).iter().enumerate() {
                let (tb, labels) = token_batch(train, group, pad)?;
                let mut rng = batch_rng(cfg.seed ^ FINETUNE_KEY, gen_epoch, b as u64);
                let mut g = Graph::new();
                let enc = model.encode_graph(&mut g, &tb, Mode::Train, &mut rng)?;
                let z = model.classifier_logits_graph(&mut g, enc.hidden, tb.batch, tb.seq, Mode::Train, &mut rng)?;
                let loss = g.bce_with_logits(z, &labels)?;
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!("{} loss at epoch {} batch {b}", stage.label, e + 1)));
                }
                for (&zi, &y) in g.value(z).data().iter().zip(&labels) {
                    correct += usize::from((sigmoid(zi) >= DEFAULT_THRESHOLD) == (y == 1.0));
                }
                loss_sum += value * group.len() as f64;
                seen += group.len();
                g.backward(loss, &mut model.params)?;
                adam_step(&mut model.params, &mut opt, stage.lr, 0.0)?;
            }
            let (val_loss, val_acc, _) = classifier_eval(&mut model, val, ft.batch, pad)?;
            curves.push(CurvePoint {
                stage: stage.label.into(),
                epoch: e + 1,
                train_loss: loss_sum / seen as f64,
                val_loss,
                train_acc: Some(correct as f64 / seen as f64),
                val_acc: Some(val_acc),
            });
            let improved = stage_best
                .as_ref()
                .and_then(|c| c.provenance.val_metric)
                .is_none_or(|b| val_loss < b);
            if improved {
                stage_best = Some(Checkpoint {
                    model: model.clone(),
                    optimizer: Some(opt.clone()),
                    provenance: Provenance { stage: stage.label.into(), epoch: e + 1, val_metric: Some(val_loss) },
                });
            }
        }
        let stage_best = stage_best.expect("stage ran at least one epoch");
        if stage.trainable == Trainable::HeadOnly {
            stage1_last = Some(model.clone());
            model = stage_best.model.clone();
        }
        let better = best
            .as_ref()
            .and_then(|c| c.provenance.val_metric)
            .is_none_or(|b| stage_best.provenance.val_metric.is_some_and(|v| v < b));
        if better {
            best = Some(stage_best);
        }
    }
    Ok(FinetuneOutcome { checkpoint: best.expect("at least one stage ran"), curves, stage1_last })
}

/// Perplexity report on `chunks` with fixed-seed masking.
pub fn evaluate_mlm(
    ckpt: &Checkpoint,
    chunks: &[Chunk],
    vocab: &Vocabulary,
    masking: &MaskingConfig,
    batch: usize,
) -> Result<EvalReport> {
    let (nats, n) = mlm_eval_loss(&ckpt.model, chunks, vocab, masking, batch)?;
    EvalReport::mlm(nats, n)
}

/// Eval-mode classification report at threshold 0.5.
pub fn evaluate_classifier(ckpt: &Checkpoint, examples: &[Example], batch: usize, pad: usize) -> Result<(EvalReport, Vec<f64>)> {
    let mut model = ckpt.model.clone();
    let (_, _, probs) = classifier_eval(&mut model, examples, batch, pad)?;
    let labels: Vec<u8> = examples.iter().map(|e| e.label).collect();
    Ok((EvalReport::classification(&probs, &labels, DEFAULT_THRESHOLD)?, probs))
}
