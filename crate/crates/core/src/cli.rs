//! Command-line front end.
//!
//! Every setting can come from a `key=value` config file (`--config`) and be
//! overridden by the matching flag. Settings are resolved and validated
//! before any input is read. [`main`] maps outcomes to exit codes:
//! [`EXIT_OK`], [`EXIT_USAGE`], [`EXIT_DATA`] and [`EXIT_RUNTIME`].

use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::conllu::{corpus_stats, read_corpus, write_corpus, ParseMode};
use crate::decode::{check_voting, format_flags, predict_corpus, DecodeConfig, DecodeError};
use crate::eval::evaluate;
use crate::model::{load_model, Model, ModelConfig};
use crate::snippets::{build_examples, build_vocab, format_example, Mode, SnippetConfig};
use crate::training::{retain_checkpoints, train, SelectionMetric, TrainConfig, TrainError, TrainInputs};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

fn data(e: impl Display) -> CliError {
    CliError::Data(e.to_string())
}

fn runtime(e: impl Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "lemmed", version, about = "Joint lemmatization and morphological tagging")]
pub struct Cli {
    /// File of key=value lines; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print corpus statistics.
    Stats(StatsArgs),
    /// Write source/target example lines.
    Snippetize(SnippetizeArgs),
    /// Train a model and write checkpoints.
    Train(TrainArgs),
    /// Analyze a corpus with a trained model.
    Predict(PredictArgs),
    /// Score predictions against gold analyses.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    pub corpus: PathBuf,
    /// Training corpus used to count OOV tokens.
    #[arg(long)]
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SnippetizeArgs {
    pub corpus: PathBuf,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    /// Read surface forms only and emit source lines.
    #[arg(long)]
    pub surface_only: bool,
    #[command(flatten)]
    pub snippet: SnippetFlags,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: PathBuf,
    /// Directory for checkpoints, the log and the report.
    #[arg(long)]
    pub output_dir: PathBuf,
    /// Keep every checkpoint instead of only the selected and last ones.
    #[arg(long)]
    pub keep_all: bool,
    #[command(flatten)]
    pub snippet: SnippetFlags,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub schedule: TrainFlags,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    /// Write per-sentence decoding problems here.
    #[arg(long)]
    pub flags_out: Option<PathBuf>,
    #[command(flatten)]
    pub snippet: SnippetFlags,
    #[command(flatten)]
    pub decode: DecodeFlags,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gold: PathBuf,
    /// Training corpus that defines the OOV subset.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Also print key=value lines.
    #[arg(long)]
    pub kv: bool,
}

#[derive(Debug, Args, Default)]
pub struct SnippetFlags {
    /// full_sequence or context_window.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub window: Option<String>,
    /// none, lemmata, tags, both or surface.
    #[arg(long)]
    pub tc: Option<String>,
}

#[derive(Debug, Args, Default)]
pub struct ModelFlags {
    #[arg(long)]
    pub embedding_size: Option<String>,
    #[arg(long)]
    pub hidden_units: Option<String>,
    #[arg(long)]
    pub layers: Option<String>,
    #[arg(long)]
    pub dropout: Option<String>,
    #[arg(long)]
    pub min_freq: Option<String>,
}

#[derive(Debug, Args, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub total_steps: Option<String>,
    #[arg(long)]
    pub checkpoint_every: Option<String>,
    #[arg(long)]
    pub lr_initial: Option<String>,
    #[arg(long)]
    pub lr_halve_start_step: Option<String>,
    #[arg(long)]
    pub lr_halve_every: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub clip_norm: Option<String>,
    #[arg(long)]
    pub selection_metric: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
}

#[derive(Debug, Args, Default)]
pub struct DecodeFlags {
    #[arg(long)]
    pub beam: Option<String>,
    #[arg(long)]
    pub max_length: Option<String>,
    /// Majority vote over overlapping snippets.
    #[arg(long)]
    pub vote: bool,
}

type Pairs = Vec<(&'static str, String)>;

fn push(pairs: &mut Pairs, key: &'static str, value: &Option<String>) {
    if let Some(v) = value {
        pairs.push((key, v.clone()));
    }
}

impl SnippetFlags {
    fn pairs(&self, out: &mut Pairs) {
        push(out, "mode", &self.mode);
        push(out, "window", &self.window);
        push(out, "tc", &self.tc);
    }
}

impl ModelFlags {
    fn pairs(&self, out: &mut Pairs) {
        push(out, "embedding_size", &self.embedding_size);
        push(out, "hidden_units", &self.hidden_units);
        push(out, "layers", &self.layers);
        push(out, "dropout", &self.dropout);
        push(out, "min_freq", &self.min_freq);
    }
}

impl TrainFlags {
    fn pairs(&self, out: &mut Pairs) {
        push(out, "total_steps", &self.total_steps);
        push(out, "checkpoint_every", &self.checkpoint_every);
        push(out, "lr_initial", &self.lr_initial);
        push(out, "lr_halve_start_step", &self.lr_halve_start_step);
        push(out, "lr_halve_every", &self.lr_halve_every);
        push(out, "batch_size", &self.batch_size);
        push(out, "clip_norm", &self.clip_norm);
        push(out, "selection_metric", &self.selection_metric);
        push(out, "seed", &self.seed);
    }
}

impl DecodeFlags {
    fn pairs(&self, out: &mut Pairs) {
        push(out, "beam", &self.beam);
        push(out, "max_length", &self.max_length);
        if self.vote {
            out.push(("vote", "true".into()));
        }
    }
}

/// Fully resolved settings for every subcommand.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub snippet: SnippetConfig,
    /// Vocabulary sizes are filled in once the vocabulary is built.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub vote: bool,
    pub min_freq: usize,
}

impl Default for Settings {
    fn default() -> Self {
        let train = TrainConfig::default();
        let mut model = ModelConfig::new(1, 1);
        model.seed = train.seed;
        Settings {
            snippet: SnippetConfig::default(),
            model,
            train,
            decode: DecodeConfig::default(),
            vote: false,
            min_freq: 1,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| CliError::Usage(format!("invalid value {value:?} for {key}: {e}")))
}

impl Settings {
    pub const KEYS: [&'static str; 20] = [
        "mode",
        "window",
        "tc",
        "embedding_size",
        "hidden_units",
        "layers",
        "dropout",
        "min_freq",
        "total_steps",
        "checkpoint_every",
        "lr_initial",
        "lr_halve_start_step",
        "lr_halve_every",
        "batch_size",
        "clip_norm",
        "selection_metric",
        "seed",
        "beam",
        "max_length",
        "vote",
    ];

    /// Sets one value by key. Dashes in keys are read as underscores.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let key = key.replace('-', "_");
        let k = key.as_str();
        match k {
            "mode" => self.snippet.mode = parse::<Mode>(k, value)?,
            "window" => self.snippet.window = parse(k, value)?,
            "tc" => self.snippet.target_context = parse(k, value)?,
            "embedding_size" => self.model.embedding_size = parse(k, value)?,
            "hidden_units" => self.model.hidden_units = parse(k, value)?,
            "layers" => self.model.layers = parse(k, value)?,
            "dropout" => self.model.dropout = parse(k, value)?,
            "min_freq" => self.min_freq = parse(k, value)?,
            "total_steps" => self.train.total_steps = parse(k, value)?,
            "checkpoint_every" => self.train.checkpoint_every = parse(k, value)?,
            "lr_initial" => self.train.lr_initial = parse(k, value)?,
            "lr_halve_start_step" => self.train.lr_halve_start_step = parse(k, value)?,
            "lr_halve_every" => self.train.lr_halve_every = parse(k, value)?,
            "batch_size" => self.train.batch_size = parse(k, value)?,
            "clip_norm" => self.train.clip_norm = parse(k, value)?,
            "selection_metric" => self.train.selection_metric = parse::<SelectionMetric>(k, value)?,
            "seed" => {
                let seed: u64 = parse(k, value)?;
                self.train.seed = seed;
                self.model.seed = seed;
            }
            "beam" => self.decode.beam_size = parse(k, value)?,
            "max_length" => self.decode.max_length = Some(parse(k, value)?),
            "vote" => self.vote = parse(k, value)?,
            _ => return Err(CliError::Usage(format!("unknown setting {key:?}"))),
        }
        Ok(())
    }

    /// Applies the lines of a config file. Blank lines and `#` comments are
    /// skipped.
    pub fn apply_config(&mut self, text: &str) -> Result<(), CliError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value", i + 1)))?;
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Defaults, then the config file, then flags.
    pub fn resolve(config: Option<&Path>, flags: &[(&str, String)]) -> Result<Self, CliError> {
        let mut s = Settings::default();
        if let Some(path) = config {
            let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            s.apply_config(&text)?;
        }
        for (k, v) in flags {
            s.apply(k, v)?;
        }
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: &dyn Display| CliError::Usage(e.to_string());
        let mut model = self.model.clone();
        model.source_vocab_size = 1;
        model.target_vocab_size = 1;
        model.validate().map_err(|e| usage(&e))?;
        self.train.validate().map_err(|e| usage(&e))?;
        self.decode.validate().map_err(|e| usage(&e))?;
        if self.vote {
            check_voting(&self.snippet).map_err(|e| usage(&e))?;
        }
        if self.min_freq == 0 {
            return Err(CliError::Usage("min_freq must be at least 1".into()));
        }
        Ok(())
    }

    /// Config-file text that [`Settings::apply_config`] reads back to `self`.
    pub fn to_config(&self) -> String {
        let t = &self.train;
        let m = &self.model;
        let mut lines = vec![
            format!("mode={}", self.snippet.mode),
            format!("window={}", self.snippet.window),
            format!("tc={}", self.snippet.target_context),
            format!("embedding_size={}", m.embedding_size),
            format!("hidden_units={}", m.hidden_units),
            format!("layers={}", m.layers),
            format!("dropout={}", m.dropout),
            format!("min_freq={}", self.min_freq),
            format!("total_steps={}", t.total_steps),
            format!("checkpoint_every={}", t.checkpoint_every),
            format!("lr_initial={}", t.lr_initial),
            format!("lr_halve_start_step={}", t.lr_halve_start_step),
            format!("lr_halve_every={}", t.lr_halve_every),
            format!("batch_size={}", t.batch_size),
            format!("clip_norm={}", t.clip_norm),
            format!("selection_metric={}", t.selection_metric),
            format!("seed={}", t.seed),
            format!("beam={}", self.decode.beam_size),
        ];
        if let Some(n) = self.decode.max_length {
            lines.push(format!("max_length={n}"));
        }
        lines.push(format!("vote={}", self.vote));
        lines.join("\n") + "\n"
    }
}

impl Command {
    fn flag_pairs(&self) -> Pairs {
        let mut out = Vec::new();
        match self {
            Command::Stats(_) | Command::Evaluate(_) => {}
            Command::Snippetize(a) => a.snippet.pairs(&mut out),
            Command::Train(a) => {
                a.snippet.pairs(&mut out);
                a.model.pairs(&mut out);
                a.schedule.pairs(&mut out);
            }
            Command::Predict(a) => {
                a.snippet.pairs(&mut out);
                a.decode.pairs(&mut out);
            }
        }
        out
    }
}

/// Parses `args`, runs the subcommand and returns the exit code.
pub fn main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("lemmed: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let settings = Settings::resolve(cli.config.as_deref(), &cli.command.flag_pairs())?;
    settings.validate()?;
    match &cli.command {
        Command::Stats(a) => run_stats(a),
        Command::Snippetize(a) => run_snippetize(a, &settings),
        Command::Train(a) => run_train(a, &settings),
        Command::Predict(a) => run_predict(a, &settings),
        Command::Evaluate(a) => run_evaluate(a),
    }
}

fn emit(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display()))),
        None => io::stdout().write_all(text.as_bytes()).map_err(runtime),
    }
}

pub fn run_stats(a: &StatsArgs) -> Result<(), CliError> {
    let corpus = read_corpus(&a.corpus, ParseMode::Gold).map_err(data)?;
    let reference = match &a.reference {
        Some(p) => Some(read_corpus(p, ParseMode::Gold).map_err(data)?),
        None => None,
    };
    let stats = corpus_stats(&corpus, reference.as_ref());
    let mut out = format!(
        "sentences {}\ntokens {}\ngrammeme-form {:.2}\n",
        stats.sentence_count, stats.token_count, stats.grammeme_form_ratio
    );
    if let Some(r) = stats.oov_rate {
        out.push_str(&format!("oov_rate {r:.3}\n"));
    }
    emit(None, &out)
}

pub fn run_snippetize(a: &SnippetizeArgs, s: &Settings) -> Result<(), CliError> {
    let mode = if a.surface_only { ParseMode::SurfaceOnly } else { ParseMode::Gold };
    let corpus = read_corpus(&a.corpus, mode).map_err(data)?;
    let mut out = String::new();
    for ex in build_examples(&corpus.sentences, &s.snippet) {
        out.push_str(&format_example(&ex));
        out.push('\n');
    }
    emit(a.output.as_deref(), &out)
}

/// Copies log lines to a file and to stderr.
struct Tee<W: Write>(W);

impl<W: Write> Write for Tee<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.write_all(buf)?;
        io::stderr().write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        self.0.flush()
    }
}

pub fn run_train(a: &TrainArgs, s: &Settings) -> Result<(), CliError> {
    let train_corpus = read_corpus(&a.train, ParseMode::Gold).map_err(data)?;
    let dev = read_corpus(&a.dev, ParseMode::Gold).map_err(data)?;
    let examples = build_examples(&train_corpus.sentences, &s.snippet);
    if examples.is_empty() {
        return Err(CliError::Data("training corpus has no sentences".into()));
    }
    let vocab = build_vocab(&examples, s.min_freq);
    let encoded: Vec<_> = examples.iter().map(|e| vocab.encode(e)).collect();
    let mut cfg = s.model.clone();
    cfg.source_vocab_size = vocab.source.len();
    cfg.target_vocab_size = vocab.target.len();
    let model = Model::init(cfg).map_err(runtime)?;

    let dir = &a.output_dir;
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    fs::write(dir.join("config.txt"), s.to_config()).map_err(runtime)?;
    let log = fs::File::create(dir.join("train.log")).map_err(runtime)?;
    let mut log = Tee(io::BufWriter::new(log));
    let inputs = TrainInputs {
        examples: &encoded,
        dev: &dev,
        vocab: &vocab,
        snippet_cfg: &s.snippet,
        checkpoint_dir: Some(dir),
    };
    let (_, report) = train(model, &inputs, &s.train, &mut log).map_err(|e| match e {
        TrainError::Config(_) => CliError::Usage(e.to_string()),
        _ => runtime(e),
    })?;
    log.flush().map_err(runtime)?;
    fs::write(dir.join("report.txt"), report.to_string()).map_err(runtime)?;
    let best = if a.keep_all {
        let mut keep = report.clone();
        keep.checkpoints.clear();
        keep.checkpoints.extend(report.selected().cloned());
        retain_checkpoints(dir, &keep).map_err(runtime)?
    } else {
        retain_checkpoints(dir, &report).map_err(runtime)?
    };
    if let Some(p) = best {
        emit(None, &format!("best {}\n", p.display()))?;
    }
    Ok(())
}

pub fn run_predict(a: &PredictArgs, s: &Settings) -> Result<(), CliError> {
    let ck = load_model(&a.model, None).map_err(data)?;
    let corpus = read_corpus(&a.input, ParseMode::SurfaceOnly).map_err(data)?;
    let (pred, flags) = predict_corpus(&ck.model, &corpus, &ck.vocab, &s.snippet, &s.decode, s.vote).map_err(|e| match e {
        DecodeError::Config(_) => data(e),
        _ => runtime(e),
    })?;
    let text = write_corpus(&pred).map_err(runtime)?;
    emit(a.output.as_deref(), &text)?;
    if let Some(p) = &a.flags_out {
        emit(Some(p), &format_flags(&flags))?;
    }
    Ok(())
}

pub fn run_evaluate(a: &EvaluateArgs) -> Result<(), CliError> {
    let pred = read_corpus(&a.pred, ParseMode::Gold).map_err(data)?;
    let gold = read_corpus(&a.gold, ParseMode::Gold).map_err(data)?;
    let reference = match &a.train {
        Some(p) => Some(read_corpus(p, ParseMode::Gold).map_err(data)?),
        None => None,
    };
    let report = evaluate(&pred, &gold, reference.as_ref()).map_err(data)?;
    let mut out = report.to_string();
    if a.kv {
        out.push_str(&report.key_values());
    }
    emit(None, &out)
}
