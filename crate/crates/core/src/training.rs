//! Step-driven SGD training with a halving learning-rate schedule, periodic
//! checkpoints and dev-set model selection.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::conllu::Corpus;
use crate::decode::{predict_corpus, DecodeConfig, DecodeError};
use crate::eval::{evaluate, EvalError, Metrics};
use crate::model::{save_model, Batch, CheckpointError, Dropout, Model, ModelError};
use crate::snippets::{EncodedExample, SnippetConfig, Vocab};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training examples")]
    NoExamples,
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("step {step}: {source}")]
    Model { step: usize, source: ModelError },
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMetric {
    AnalysisAccuracy,
    LemmaAccuracy,
    TagAccuracy,
}

impl SelectionMetric {
    pub fn value(&self, m: &Metrics) -> f64 {
        match self {
            SelectionMetric::AnalysisAccuracy => m.analysis_accuracy,
            SelectionMetric::LemmaAccuracy => m.lemma_accuracy,
            SelectionMetric::TagAccuracy => m.tag_accuracy,
        }
    }
}

impl FromStr for SelectionMetric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "analysis_accuracy" => Ok(SelectionMetric::AnalysisAccuracy),
            "lemma_accuracy" => Ok(SelectionMetric::LemmaAccuracy),
            "tag_accuracy" => Ok(SelectionMetric::TagAccuracy),
            _ => Err(format!("unknown selection metric {s:?}")),
        }
    }
}

impl fmt::Display for SelectionMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionMetric::AnalysisAccuracy => "analysis_accuracy",
            SelectionMetric::LemmaAccuracy => "lemma_accuracy",
            SelectionMetric::TagAccuracy => "tag_accuracy",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub checkpoint_every: usize,
    pub lr_initial: f64,
    pub lr_halve_start_step: usize,
    pub lr_halve_every: usize,
    /// Examples per batch.
    pub batch_size: usize,
    pub clip_norm: f64,
    pub selection_metric: SelectionMetric,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 50_000,
            checkpoint_every: 1_000,
            lr_initial: 1.0,
            lr_halve_start_step: 25_000,
            lr_halve_every: 10_000,
            batch_size: 32,
            clip_norm: 5.0,
            selection_metric: SelectionMetric::AnalysisAccuracy,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.total_steps == 0 {
            return bad("total_steps must be at least 1");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1");
        }
        if self.lr_halve_every == 0 {
            return bad("lr_halve_every must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr_initial > 0.0) {
            return bad("lr_initial must be positive");
        }
        if !(self.clip_norm >= 0.0) {
            return bad("clip_norm must be non-negative");
        }
        Ok(())
    }
}

/// Learning rate for a 0-based step: constant until `lr_halve_start_step`,
/// then halved at that step and every `lr_halve_every` steps after it.
pub fn lr_schedule(cfg: &TrainConfig, step: usize) -> f64 {
    if step < cfg.lr_halve_start_step {
        return cfg.lr_initial;
    }
    let halvings = (step - cfg.lr_halve_start_step) / cfg.lr_halve_every + 1;
    cfg.lr_initial * 0.5f64.powi(halvings.min(i32::MAX as usize) as i32)
}

/// Size of the shuffled window within which examples are sorted by length.
const BUCKET_BATCHES: usize = 20;

fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Batches of example indices for one epoch. Shuffled indices are grouped
/// into windows of `BUCKET_BATCHES` batches and sorted by length inside each
/// window before being cut. The batch order is then shuffled again.
pub fn epoch_batches(lengths: &[usize], batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut rng = epoch_rng(seed, epoch);
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(&mut rng);
    let mut batches = Vec::new();
    for window in order.chunks_mut(batch_size * BUCKET_BATCHES) {
        window.sort_by_key(|&i| lengths[i]);
        batches.extend(window.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(&mut rng);
    batches
}

/// Same shuffle without length bucketing, for comparison.
pub fn random_batches(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut rng = epoch_rng(seed, epoch);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Padding positions a set of batches incurs.
pub fn padding_waste(lengths: &[usize], batches: &[Vec<usize>]) -> usize {
    batches
        .iter()
        .map(|b| {
            let max = b.iter().map(|&i| lengths[i]).max().unwrap_or(0);
            b.iter().map(|&i| max - lengths[i]).sum::<usize>()
        })
        .sum()
}

/// Endless stream of index batches, epoch after epoch.
pub struct BatchStream {
    lengths: Vec<usize>,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    pending: std::vec::IntoIter<Vec<usize>>,
}

impl BatchStream {
    pub fn new(examples: &[EncodedExample], batch_size: usize, seed: u64) -> Result<Self, TrainError> {
        if examples.is_empty() {
            return Err(TrainError::NoExamples);
        }
        Ok(BatchStream {
            lengths: examples.iter().map(|e| e.source.len()).collect(),
            batch_size,
            seed,
            epoch: 0,
            pending: Vec::new().into_iter(),
        })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }
}

impl Iterator for BatchStream {
    type Item = Vec<usize>;
    fn next(&mut self) -> Option<Vec<usize>> {
        if let Some(b) = self.pending.next() {
            return Some(b);
        }
        self.pending = epoch_batches(&self.lengths, self.batch_size, self.seed, self.epoch).into_iter();
        self.epoch += 1;
        self.pending.next()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord {
    /// Number of completed update steps.
    pub step: usize,
    pub lr: f64,
    /// Mean training loss since the previous checkpoint.
    pub train_loss: f64,
    pub dev: Metrics,
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub checkpoints: Vec<CheckpointRecord>,
    pub selected_step: usize,
    pub selection_metric: SelectionMetric,
}

impl TrainReport {
    pub fn selected(&self) -> Option<&CheckpointRecord> {
        self.checkpoints.iter().find(|c| c.step == self.selected_step)
    }
}

/// Step of the checkpoint with the highest metric; ties go to the earliest.
pub fn select_checkpoint(records: &[CheckpointRecord], metric: SelectionMetric) -> Option<usize> {
    let mut best: Option<&CheckpointRecord> = None;
    for r in records {
        if best.map_or(true, |b| metric.value(&r.dev) > metric.value(&b.dev)) {
            best = Some(r);
        }
    }
    best.map(|r| r.step)
}

impl fmt::Display for TrainReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checkpoints {
            writeln!(f, "{}", format_record(c))?;
        }
        writeln!(f, "selected_step={} metric={}", self.selected_step, self.selection_metric)
    }
}

fn format_record(c: &CheckpointRecord) -> String {
    format!(
        "step={} lr={:.6} loss={:.6} dev_lemma_accuracy={:.6} dev_avg_lemma_distance={:.6} dev_tag_accuracy={:.6} dev_avg_tag_f1={:.6} dev_analysis_accuracy={:.6}",
        c.step,
        c.lr,
        c.train_loss,
        c.dev.lemma_accuracy,
        c.dev.avg_lemma_distance,
        c.dev.tag_accuracy,
        c.dev.avg_tag_f1,
        c.dev.analysis_accuracy
    )
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("ckpt-{step:06}.bin"))
}

/// Everything [`train`] needs besides the model.
pub struct TrainInputs<'a> {
    pub examples: &'a [EncodedExample],
    pub dev: &'a Corpus,
    pub vocab: &'a Vocab,
    pub snippet_cfg: &'a SnippetConfig,
    /// Where checkpoint files go; `None` keeps checkpoints in memory only.
    pub checkpoint_dir: Option<&'a Path>,
}

/// Dev metrics of `model` with greedy decoding and no voting.
pub fn dev_metrics(model: &Model, dev: &Corpus, vocab: &Vocab, snippet_cfg: &SnippetConfig) -> Result<Metrics, TrainError> {
    let (pred, _) = predict_corpus(model, dev, vocab, snippet_cfg, &DecodeConfig::greedy(), false)?;
    Ok(evaluate(&pred, dev, None)?.overall)
}

/// Runs `cfg.total_steps` SGD updates and returns the best checkpoint by the
/// dev selection metric. Progress lines go to `log`.
pub fn train(
    mut model: Model,
    inputs: &TrainInputs<'_>,
    cfg: &TrainConfig,
    log: &mut dyn Write,
) -> Result<(Model, TrainReport), TrainError> {
    cfg.validate()?;
    let mut stream = BatchStream::new(inputs.examples, cfg.batch_size, cfg.seed)?;
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5EED));
    let dropout_p = model.config.dropout;

    let mut records = Vec::new();
    let mut best: Option<(f64, Model)> = None;
    let mut loss_sum = 0.0;
    let mut loss_steps = 0usize;

    for step in 0..cfg.total_steps {
        let indices = stream.next().expect("stream is endless");
        let group: Vec<&EncodedExample> = indices.iter().map(|&i| &inputs.examples[i]).collect();
        let batch = Batch::from_examples(&group);
        let lr = lr_schedule(cfg, step);
        let mut dropout = Dropout::train(dropout_p, &mut dropout_rng);
        let (loss, grads) = model
            .backward(&batch, &mut dropout)
            .map_err(|source| TrainError::Model { step, source })?;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step });
        }
        model
            .sgd_update(&grads, lr, cfg.clip_norm)
            .map_err(|source| TrainError::Model { step, source })?;
        loss_sum += loss;
        loss_steps += 1;

        let done = step + 1;
        if done % cfg.checkpoint_every == 0 || done == cfg.total_steps {
            let dev = dev_metrics(&model, inputs.dev, inputs.vocab, inputs.snippet_cfg)?;
            let path = match inputs.checkpoint_dir {
                Some(dir) => {
                    let p = checkpoint_path(dir, done);
                    save_model(&model, inputs.vocab, &p)?;
                    Some(p)
                }
                None => None,
            };
            let record = CheckpointRecord {
                step: done,
                lr,
                train_loss: loss_sum / loss_steps as f64,
                dev,
                path,
            };
            writeln!(log, "{}", format_record(&record))?;
            let score = cfg.selection_metric.value(&record.dev);
            if best.as_ref().map_or(true, |(b, _)| score > *b) {
                best = Some((score, model.clone()));
            }
            records.push(record);
            loss_sum = 0.0;
            loss_steps = 0;
        }
    }

    let selected_step = select_checkpoint(&records, cfg.selection_metric).expect("at least one checkpoint");
    let report = TrainReport {
        checkpoints: records,
        selected_step,
        selection_metric: cfg.selection_metric,
    };
    writeln!(log, "selected_step={} metric={}", selected_step, cfg.selection_metric)?;
    let (_, best_model) = best.expect("at least one checkpoint");
    Ok((best_model, report))
}

/// Deletes checkpoint files other than the selected and the last one and
/// points `best.bin` at the selected file. Returns the best path.
pub fn retain_checkpoints(dir: &Path, report: &TrainReport) -> Result<Option<PathBuf>, TrainError> {
    let last = report.checkpoints.last().map(|c| c.step);
    for c in &report.checkpoints {
        if Some(c.step) != last && c.step != report.selected_step {
            if let Some(p) = &c.path {
                if p.exists() {
                    fs::remove_file(p)?;
                }
            }
        }
    }
    let Some(best) = report.selected().and_then(|c| c.path.clone()) else {
        return Ok(None);
    };
    let link = dir.join("best.bin");
    if link.symlink_metadata().is_ok() {
        fs::remove_file(&link)?;
    }
    link_or_copy(&best, &link)?;
    Ok(Some(best))
}

#[cfg(unix)]
fn link_or_copy(target: &Path, link: &Path) -> io::Result<()> {
    let name = target.file_name().map(PathBuf::from).unwrap_or_else(|| target.to_path_buf());
    std::os::unix::fs::symlink(name, link)
}

#[cfg(not(unix))]
fn link_or_copy(target: &Path, link: &Path) -> io::Result<()> {
    fs::copy(target, link).map(|_| ())
}
