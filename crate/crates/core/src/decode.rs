//! Inference. Searches decode symbol sequences, which are parsed back into
//! one analysis per token, optionally by voting over overlapping snippets.

use std::cmp::Ordering;
use std::collections::HashMap;

use ndarray::Array1;
use rayon::prelude::*;
use thiserror::Error;

use crate::conllu::{Analysis, Corpus, MorphoTag, Sentence, Token};
use crate::model::{Batch, Dropout, Model, ModelError};
use crate::snippets::{
    build_full_sequence_example, build_window_examples, Mode, SnippetConfig, Symbol, TargetContext, Vocab,
    END_ID, PAD_ID, START_ID,
};

#[derive(Debug, Error, PartialEq)]
pub enum DecodeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid decoding configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Defaults to `2 * source length + 16` when unset.
    pub max_length: Option<usize>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 5,
            max_length: None,
        }
    }
}

impl DecodeConfig {
    pub fn greedy() -> Self {
        DecodeConfig {
            beam_size: 1,
            max_length: None,
        }
    }

    pub fn max_length_for(&self, source_len: usize) -> usize {
        self.max_length.unwrap_or(2 * source_len + 16)
    }

    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.beam_size == 0 {
            return Err(DecodeError::Config("beam size must be at least 1".into()));
        }
        if self.max_length == Some(0) {
            return Err(DecodeError::Config("max length must be at least 1".into()));
        }
        Ok(())
    }
}

/// A decoded target sequence without start and end symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub ids: Vec<u32>,
    /// Sum of the log-probabilities of `ids`, plus the end symbol if finished.
    pub log_prob: f64,
    /// False when `max_length` was reached before the end symbol.
    pub finished: bool,
}

/// Next-symbol log-probabilities with symbols that may never be emitted
/// (padding, start) removed.
fn next_log_probs(logits: ndarray::ArrayView1<f64>) -> Array1<f64> {
    let mut lp = logits.to_owned();
    lp[PAD_ID as usize] = f64::NEG_INFINITY;
    lp[START_ID as usize] = f64::NEG_INFINITY;
    let max = lp.fold(f64::NEG_INFINITY, |a, &x| a.max(x));
    let lse = max + lp.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    lp.mapv_inplace(|x| x - lse);
    lp
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(v: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn greedy_decode(model: &Model, source: &[u32], cfg: &DecodeConfig) -> Result<Hypothesis, DecodeError> {
    cfg.validate()?;
    let max_len = cfg.max_length_for(source.len());
    let enc = model.encode_source(&Batch::from_sources(&[source]), &mut Dropout::off())?;
    let mut state = model.initial_state(&enc);
    let mut prev = START_ID;
    let mut ids = Vec::new();
    let mut log_prob = 0.0;
    for _ in 0..max_len {
        let out = model.decode_step(&[prev], &state, &enc, &mut Dropout::off())?;
        let lp = next_log_probs(out.logits.row(0));
        let next = argmax(&lp) as u32;
        log_prob += lp[next as usize];
        if next == END_ID {
            return Ok(Hypothesis {
                ids,
                log_prob,
                finished: true,
            });
        }
        ids.push(next);
        state = out.state;
        prev = next;
    }
    Ok(Hypothesis {
        ids,
        log_prob,
        finished: false,
    })
}

/// Higher score first; equal scores order by the smaller id sequence.
fn rank(a: &(f64, Vec<u32>), b: &(f64, Vec<u32>)) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(&b.1))
}

/// Beam search over summed log-probabilities.
///
/// Each step expands every live hypothesis and walks the expansions best
/// first: those ending in the end symbol retire as finished, the rest refill
/// the beam up to `beam_size`. The search stops once the best finished score
/// is at least the best live score (scores never increase) or `max_length`
/// is reached. The greedy hypothesis is returned instead when it scores
/// strictly higher, so the result never scores below greedy search.
pub fn beam_decode(model: &Model, source: &[u32], cfg: &DecodeConfig) -> Result<Hypothesis, DecodeError> {
    let beam = beam_search(model, source, cfg)?;
    if cfg.beam_size == 1 {
        return Ok(beam);
    }
    let greedy = greedy_decode(model, source, cfg)?;
    Ok(if greedy.log_prob > beam.log_prob { greedy } else { beam })
}

fn beam_search(model: &Model, source: &[u32], cfg: &DecodeConfig) -> Result<Hypothesis, DecodeError> {
    cfg.validate()?;
    let max_len = cfg.max_length_for(source.len());
    let enc1 = model.encode_source(&Batch::from_sources(&[source]), &mut Dropout::off())?;
    let mut state = model.initial_state(&enc1);
    // (score, ids without start)
    let mut live: Vec<(f64, Vec<u32>)> = vec![(0.0, Vec::new())];
    let mut finished: Vec<(f64, Vec<u32>)> = Vec::new();

    for _ in 0..max_len {
        let rows = vec![0; live.len()];
        let enc = enc1.select(&rows);
        let prev: Vec<u32> = live.iter().map(|(_, ids)| ids.last().copied().unwrap_or(START_ID)).collect();
        let out = model.decode_step(&prev, &state, &enc, &mut Dropout::off())?;

        let mut expansions: Vec<(f64, Vec<u32>, usize)> = Vec::new();
        for (b, (score, ids)) in live.iter().enumerate() {
            let lp = next_log_probs(out.logits.row(b));
            for (v, &l) in lp.iter().enumerate() {
                if l == f64::NEG_INFINITY {
                    continue;
                }
                let mut next = ids.clone();
                next.push(v as u32);
                expansions.push((score + l, next, b));
            }
        }
        expansions.sort_by(|a, b| rank(&(a.0, a.1.clone()), &(b.0, b.1.clone())));

        let mut next_live = Vec::new();
        let mut parents = Vec::new();
        for (score, ids, parent) in expansions {
            if next_live.len() == cfg.beam_size {
                break;
            }
            if ids.last() == Some(&END_ID) {
                let mut ids = ids;
                ids.pop();
                finished.push((score, ids));
            } else {
                next_live.push((score, ids));
                parents.push(parent);
            }
        }
        finished.sort_by(rank);
        finished.truncate(cfg.beam_size);
        live = next_live;
        state = out.state.select(&parents);

        let best_live = live.first().map_or(f64::NEG_INFINITY, |(s, _)| *s);
        if finished.first().is_some_and(|(s, _)| *s >= best_live) || live.is_empty() {
            break;
        }
    }

    if let Some((log_prob, ids)) = finished.into_iter().next() {
        return Ok(Hypothesis {
            ids,
            log_prob,
            finished: true,
        });
    }
    live.sort_by(rank);
    let (log_prob, ids) = live.into_iter().next().unwrap_or((0.0, Vec::new()));
    Ok(Hypothesis {
        ids,
        log_prob,
        finished: false,
    })
}

/// Greedy search for beam size 1, beam search otherwise.
pub fn decode(model: &Model, source: &[u32], cfg: &DecodeConfig) -> Result<Hypothesis, DecodeError> {
    if cfg.beam_size == 1 {
        greedy_decode(model, source, cfg)
    } else {
        beam_decode(model, source, cfg)
    }
}

/// One boundary-delimited unit of decoded output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedUnit {
    pub analysis: Analysis,
    /// Set when the unit did not have the shape `lemma grammemes*`.
    pub malformed: bool,
}

/// Splits a decoded target sequence into analyses. A trailing unit without a
/// boundary is kept.
pub fn parse_analysis_units(symbols: &[Symbol]) -> Vec<ParsedUnit> {
    let mut units = Vec::new();
    let mut lemma = String::new();
    let mut grammemes: Vec<String> = Vec::new();
    let mut malformed = false;
    let mut open = false;
    for sym in symbols {
        match sym {
            Symbol::WordBoundary => {
                units.push(finish_unit(&mut lemma, &mut grammemes, &mut malformed));
                open = false;
                continue;
            }
            Symbol::Char(c) => {
                if !grammemes.is_empty() {
                    malformed = true;
                }
                lemma.push(*c);
            }
            Symbol::Grammeme(g) => grammemes.push(g.clone()),
            Symbol::Unknown => {
                malformed = true;
                lemma.push(char::REPLACEMENT_CHARACTER);
            }
            Symbol::Pad | Symbol::Start | Symbol::End => malformed = true,
        }
        open = true;
    }
    if open {
        units.push(finish_unit(&mut lemma, &mut grammemes, &mut malformed));
    }
    units
}

fn finish_unit(lemma: &mut String, grammemes: &mut Vec<String>, malformed: &mut bool) -> ParsedUnit {
    let lemma = std::mem::take(lemma);
    let bad = std::mem::take(malformed) || lemma.is_empty();
    ParsedUnit {
        analysis: Analysis::new(lemma, MorphoTag::from_grammemes(std::mem::take(grammemes))),
        malformed: bad,
    }
}

/// Positional alignment of decoded units to the sentence. Returns the
/// analyses and whether the unit count differed from the token count.
/// Tokens without a unit fall back to their surface with an empty tag.
pub fn align_full_sequence(units: &[Analysis], sentence: &Sentence) -> (Vec<Analysis>, bool) {
    let analyses = sentence
        .tokens
        .iter()
        .enumerate()
        .map(|(i, t)| units.get(i).cloned().unwrap_or_else(|| Analysis::surface_copy(&t.surface)))
        .collect();
    (analyses, units.len() != sentence.len())
}

/// One vote for a token.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Vote {
    pub analysis: Analysis,
    /// Distance between the voted token and the focal token of the snippet.
    pub focal_distance: usize,
    /// Index of the snippet the vote came from.
    pub snippet: usize,
}

/// Votes for one token, in snippet order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct VotingBallot {
    pub votes: Vec<Vote>,
}

impl VotingBallot {
    /// The most frequent analysis. Ties go to the candidate whose closest
    /// vote has the smaller focal distance, then the lower snippet index.
    /// `None` for an empty ballot.
    pub fn winner(&self) -> Option<&Analysis> {
        // analysis -> (count, closest (focal distance, snippet))
        let mut tally: HashMap<&Analysis, (usize, (usize, usize))> = HashMap::new();
        for v in &self.votes {
            let e = tally.entry(&v.analysis).or_insert((0, (usize::MAX, usize::MAX)));
            e.0 += 1;
            e.1 = e.1.min((v.focal_distance, v.snippet));
        }
        tally
            .into_iter()
            .min_by(|(_, a), (_, b)| b.0.cmp(&a.0).then(a.1.cmp(&b.1)))
            .map(|(a, _)| a)
    }
}

/// Per-sentence diagnostics emitted alongside predictions.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PredictionFlags {
    /// Full-sequence mode: decoded unit count differed from token count.
    pub unit_mismatch: bool,
    /// Tokens whose analysis came from the surface-copy fallback.
    pub fallback_tokens: Vec<usize>,
    /// Tokens whose chosen unit was malformed.
    pub malformed_tokens: Vec<usize>,
    /// Number of decodes that hit the length limit.
    pub truncated_decodes: usize,
}

impl PredictionFlags {
    pub fn is_clean(&self) -> bool {
        !self.unit_mismatch
            && self.fallback_tokens.is_empty()
            && self.malformed_tokens.is_empty()
            && self.truncated_decodes == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SentencePrediction {
    pub analyses: Vec<Analysis>,
    pub flags: PredictionFlags,
}

/// Voting needs complete analyses for context tokens on the target side.
pub fn check_voting(cfg: &SnippetConfig) -> Result<(), DecodeError> {
    if cfg.mode != Mode::ContextWindow {
        return Err(DecodeError::Config("voting requires context_window mode".into()));
    }
    if cfg.window > 0 && cfg.target_context != TargetContext::Both {
        return Err(DecodeError::Config(format!(
            "voting requires target context 'both', got '{}'",
            cfg.target_context
        )));
    }
    Ok(())
}

/// Builds each token's ballot from the decoded output of every snippet of the
/// sentence. A missing unit votes for the surface-copy fallback.
pub fn collect_ballots(sentence: &Sentence, cfg: &SnippetConfig, decoded: &[Vec<Symbol>]) -> Vec<VotingBallot> {
    let len = sentence.len();
    let mut ballots = vec![VotingBallot::default(); len];
    for (snippet, symbols) in decoded.iter().enumerate() {
        let units = parse_analysis_units(symbols);
        let (start, end) = cfg.window_bounds(snippet, len);
        for (pos, ballot) in ballots.iter_mut().enumerate().take(end + 1).skip(start) {
            let analysis = units
                .get(pos - start)
                .map(|u| u.analysis.clone())
                .unwrap_or_else(|| Analysis::surface_copy(&sentence.tokens[pos].surface));
            ballot.votes.push(Vote {
                analysis,
                focal_distance: pos.abs_diff(snippet),
                snippet,
            });
        }
    }
    ballots
}

/// Combines per-snippet decodes (one per focal token, in order) into one
/// analysis per token.
pub fn assemble_window_predictions(
    sentence: &Sentence,
    cfg: &SnippetConfig,
    decoded: &[Vec<Symbol>],
    voting: bool,
) -> SentencePrediction {
    let len = sentence.len();
    let mut flags = PredictionFlags::default();
    let mut analyses = Vec::with_capacity(len);
    if voting {
        for (i, ballot) in collect_ballots(sentence, cfg, decoded).iter().enumerate() {
            match ballot.winner() {
                Some(a) => analyses.push(a.clone()),
                None => {
                    flags.fallback_tokens.push(i);
                    analyses.push(Analysis::surface_copy(&sentence.tokens[i].surface));
                }
            }
        }
        return SentencePrediction { analyses, flags };
    }
    for (i, token) in sentence.tokens.iter().enumerate() {
        let (start, _) = cfg.window_bounds(i, len);
        let unit = decoded
            .get(i)
            .map(|d| parse_analysis_units(d))
            .and_then(|units| units.into_iter().nth(cfg.focal_unit(i, start)));
        match unit {
            Some(u) => {
                if u.malformed {
                    flags.malformed_tokens.push(i);
                }
                analyses.push(u.analysis);
            }
            None => {
                flags.fallback_tokens.push(i);
                analyses.push(Analysis::surface_copy(&token.surface));
            }
        }
    }
    SentencePrediction { analyses, flags }
}

/// Full-sequence counterpart of [`assemble_window_predictions`].
pub fn assemble_full_sequence_prediction(sentence: &Sentence, decoded: &[Symbol]) -> SentencePrediction {
    let units = parse_analysis_units(decoded);
    let malformed_tokens = units
        .iter()
        .enumerate()
        .filter(|(i, u)| u.malformed && *i < sentence.len())
        .map(|(i, _)| i)
        .collect();
    let plain: Vec<Analysis> = units.into_iter().map(|u| u.analysis).collect();
    let (analyses, mismatch) = align_full_sequence(&plain, sentence);
    let flags = PredictionFlags {
        unit_mismatch: mismatch,
        fallback_tokens: (plain.len()..sentence.len()).collect(),
        malformed_tokens,
        truncated_decodes: 0,
    };
    SentencePrediction { analyses, flags }
}

/// Analyzes one sentence with `model`. Always yields one analysis per token.
pub fn predict_sentence(
    model: &Model,
    sentence: &Sentence,
    vocab: &Vocab,
    snippet_cfg: &SnippetConfig,
    decode_cfg: &DecodeConfig,
    voting: bool,
) -> Result<SentencePrediction, DecodeError> {
    decode_cfg.validate()?;
    if voting {
        check_voting(snippet_cfg)?;
    }
    if model.config.source_vocab_size != vocab.source.len() || model.config.target_vocab_size != vocab.target.len() {
        return Err(DecodeError::Config("model and vocabulary sizes differ".into()));
    }
    if sentence.is_empty() {
        return Ok(SentencePrediction {
            analyses: Vec::new(),
            flags: PredictionFlags::default(),
        });
    }
    let bare = sentence.surface_only();
    let mut truncated = 0;
    let mut run = |symbols: &[Symbol]| -> Result<Vec<Symbol>, DecodeError> {
        let ids = vocab.encode_source(symbols);
        let hyp = decode(model, &ids, decode_cfg)?;
        truncated += usize::from(!hyp.finished);
        Ok(vocab.decode_target(&hyp.ids))
    };
    let mut prediction = match snippet_cfg.mode {
        Mode::FullSequence => {
            let ex = build_full_sequence_example(&bare, 0);
            let decoded = run(&ex.source)?;
            assemble_full_sequence_prediction(sentence, &decoded)
        }
        Mode::ContextWindow => {
            let decoded = build_window_examples(&bare, snippet_cfg, 0)
                .iter()
                .map(|ex| run(&ex.source))
                .collect::<Result<Vec<_>, _>>()?;
            assemble_window_predictions(sentence, snippet_cfg, &decoded, voting)
        }
    };
    prediction.flags.truncated_decodes = truncated;
    Ok(prediction)
}

/// Predicts every sentence of `corpus` in parallel. The returned corpus
/// mirrors `corpus` with predicted analyses in place of any gold ones.
pub fn predict_corpus(
    model: &Model,
    corpus: &Corpus,
    vocab: &Vocab,
    snippet_cfg: &SnippetConfig,
    decode_cfg: &DecodeConfig,
    voting: bool,
) -> Result<(Corpus, Vec<PredictionFlags>), DecodeError> {
    let results: Vec<SentencePrediction> = corpus
        .sentences
        .par_iter()
        .map(|s| predict_sentence(model, s, vocab, snippet_cfg, decode_cfg, voting))
        .collect::<Result<_, _>>()?;
    let mut sentences = Vec::with_capacity(results.len());
    let mut flags = Vec::with_capacity(results.len());
    for (s, r) in corpus.sentences.iter().zip(results) {
        let tokens = s
            .tokens
            .iter()
            .zip(r.analyses)
            .map(|(t, a)| Token::new(t.surface.clone(), Some(a)))
            .collect();
        sentences.push(Sentence::new(tokens));
        flags.push(r.flags);
    }
    Ok((
        Corpus {
            sentences,
            source_path: None,
        },
        flags,
    ))
}

/// Flag sidecar: one line per sentence with a problem.
pub fn format_flags(flags: &[PredictionFlags]) -> String {
    let mut out = String::new();
    for (i, f) in flags.iter().enumerate() {
        if f.is_clean() {
            continue;
        }
        out.push_str(&format!(
            "sentence={} mismatch={} fallback={:?} malformed={:?} truncated={}\n",
            i, f.unit_mismatch, f.fallback_tokens, f.malformed_tokens, f.truncated_decodes
        ));
    }
    out
}
