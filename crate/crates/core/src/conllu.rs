//! Reading and writing the three-column annotated corpus format.
//!
//! Each token line carries `FORM \t LEMMA \t TAG`, where `TAG` is a
//! `;`-separated grammeme list or `_` for an empty tag. Sentences are
//! separated by blank lines. Lines beginning with `#` before the first token
//! of a sentence are comments. Columns beyond the third are ignored.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use thiserror::Error;

/// Sentinel written in the tag column for a token without grammemes.
pub const EMPTY_TAG: &str = "_";

/// Separator between grammemes in the tag column.
pub const GRAMMEME_SEPARATOR: char = ';';

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("line {line}: invalid UTF-8")]
    Utf8 { line: usize },
    #[error("line {line}: expected at least {expected} tab-separated columns, found {found}")]
    Columns {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: empty surface form")]
    EmptySurface { line: usize },
    #[error("line {line}: sentence block contains no tokens")]
    EmptySentence { line: usize },
    #[error("line {line}: {source}")]
    Tag { line: usize, source: TagError },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Error, PartialEq, Eq, Clone)]
pub enum TagError {
    #[error("empty grammeme in tag {0:?}")]
    EmptyGrammeme(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WriteError {
    #[error("sentence {sentence}, token {token} ({surface:?}) has no analysis")]
    MissingAnalysis {
        sentence: usize,
        token: usize,
        surface: String,
    },
    #[error("sentence {sentence}, token {token} cannot be written: {reason}")]
    Unrepresentable {
        sentence: usize,
        token: usize,
        reason: &'static str,
    },
}

/// A morpho-tag: grammemes in ascending byte order, without duplicates.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MorphoTag(Vec<String>);

impl MorphoTag {
    pub fn empty() -> Self {
        MorphoTag(Vec::new())
    }

    /// Builds a tag from arbitrary grammemes, sorting and deduplicating them.
    pub fn from_grammemes<I, S>(grammemes: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v: Vec<String> = grammemes.into_iter().map(Into::into).collect();
        v.sort_unstable();
        v.dedup();
        MorphoTag(v)
    }

    pub fn grammemes(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for MorphoTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            f.write_str(EMPTY_TAG)
        } else {
            f.write_str(&self.0.join(";"))
        }
    }
}

/// Parses a raw `;`-separated tag column into a normalized [`MorphoTag`].
pub fn normalize_tag(raw: &str) -> Result<MorphoTag, TagError> {
    if raw == EMPTY_TAG {
        return Ok(MorphoTag::empty());
    }
    let parts: Vec<&str> = raw.split(GRAMMEME_SEPARATOR).collect();
    if parts.iter().any(|g| g.is_empty()) {
        return Err(TagError::EmptyGrammeme(raw.to_string()));
    }
    Ok(MorphoTag::from_grammemes(parts))
}

/// A lexical form: lemma plus morpho-tag.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Analysis {
    pub lemma: String,
    pub tag: MorphoTag,
}

impl Analysis {
    pub fn new(lemma: impl Into<String>, tag: MorphoTag) -> Self {
        Analysis {
            lemma: lemma.into(),
            tag,
        }
    }

    /// The fallback analysis for a token: its surface copied as lemma, no grammemes.
    pub fn surface_copy(surface: &str) -> Self {
        Analysis::new(surface, MorphoTag::empty())
    }
}

impl fmt::Display for Analysis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}; {}", self.lemma, self.tag)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub surface: String,
    pub gold: Option<Analysis>,
}

impl Token {
    pub fn new(surface: impl Into<String>, gold: Option<Analysis>) -> Self {
        Token {
            surface: surface.into(),
            gold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<Token>,
}

impl Sentence {
    pub fn new(tokens: Vec<Token>) -> Self {
        Sentence { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Copy of the sentence with gold analyses removed.
    pub fn surface_only(&self) -> Sentence {
        Sentence::new(
            self.tokens
                .iter()
                .map(|t| Token::new(t.surface.clone(), None))
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    pub sentences: Vec<Sentence>,
    pub source_path: Option<String>,
}

impl Corpus {
    pub fn new(sentences: Vec<Sentence>) -> Self {
        Corpus {
            sentences,
            source_path: None,
        }
    }

    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(Sentence::len).sum()
    }

    pub fn tokens(&self) -> impl Iterator<Item = &Token> {
        self.sentences.iter().flat_map(|s| s.tokens.iter())
    }

    /// Set of gold lexical forms, used as the reference for OOV decisions.
    pub fn lexical_forms(&self) -> HashSet<&Analysis> {
        self.tokens().filter_map(|t| t.gold.as_ref()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseMode {
    Gold,
    SurfaceOnly,
}

/// Parses corpus bytes. Line numbers in errors are 1-based.
pub fn parse_corpus(input: &[u8], mode: ParseMode) -> Result<Corpus, ParseError> {
    let mut sentences = Vec::new();
    let mut tokens: Vec<Token> = Vec::new();
    // First line of the block currently being read, for empty-block errors.
    let mut block_start: Option<usize> = None;

    let mut lines: Vec<&[u8]> = input.split(|&b| b == b'\n').collect();
    if input.ends_with(b"\n") {
        lines.pop();
    }

    for (idx, raw) in lines.into_iter().enumerate() {
        let line_no = idx + 1;
        let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
        let line = std::str::from_utf8(raw).map_err(|_| ParseError::Utf8 { line: line_no })?;

        if line.trim().is_empty() {
            if let Some(start) = block_start.take() {
                if tokens.is_empty() {
                    return Err(ParseError::EmptySentence { line: start });
                }
                sentences.push(Sentence::new(std::mem::take(&mut tokens)));
            }
            continue;
        }
        block_start.get_or_insert(line_no);
        if tokens.is_empty() && line.starts_with('#') {
            continue;
        }
        tokens.push(parse_token_line(line, line_no, mode)?);
    }
    if let Some(start) = block_start {
        if tokens.is_empty() {
            return Err(ParseError::EmptySentence { line: start });
        }
        sentences.push(Sentence::new(tokens));
    }
    Ok(Corpus::new(sentences))
}

fn parse_token_line(line: &str, line_no: usize, mode: ParseMode) -> Result<Token, ParseError> {
    let cols: Vec<&str> = line.split('\t').collect();
    let surface = cols[0];
    if surface.is_empty() {
        return Err(ParseError::EmptySurface { line: line_no });
    }
    match mode {
        ParseMode::SurfaceOnly => Ok(Token::new(surface, None)),
        ParseMode::Gold => {
            if cols.len() < 3 {
                return Err(ParseError::Columns {
                    line: line_no,
                    expected: 3,
                    found: cols.len(),
                });
            }
            let tag = normalize_tag(cols[2]).map_err(|source| ParseError::Tag {
                line: line_no,
                source,
            })?;
            Ok(Token::new(surface, Some(Analysis::new(cols[1], tag))))
        }
    }
}

pub fn read_corpus(path: impl AsRef<Path>, mode: ParseMode) -> Result<Corpus, ParseError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| ParseError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut corpus = parse_corpus(&bytes, mode)?;
    corpus.source_path = Some(path.display().to_string());
    Ok(corpus)
}

fn unrepresentable(token: &Token, analysis: &Analysis, first: bool) -> Option<&'static str> {
    let breaks = |s: &str| s.contains(['\t', '\n', '\r']);
    if token.surface.is_empty() {
        Some("empty surface")
    } else if breaks(&token.surface) || breaks(&analysis.lemma) || analysis.tag.grammemes().iter().any(|g| breaks(g)) {
        Some("tab or line break in a column")
    } else if first && token.surface.starts_with('#') {
        Some("sentence-initial surface would read as a comment")
    } else if normalize_tag(&analysis.tag.to_string()).ok().as_ref() != Some(&analysis.tag) {
        Some("grammeme contains a separator")
    } else {
        None
    }
}

/// Serializes a fully analyzed corpus. Every sentence block is followed by
/// one blank line. Parsing the output in gold mode yields the same sentences.
pub fn write_corpus(corpus: &Corpus) -> Result<String, WriteError> {
    let mut out = String::new();
    for (si, sentence) in corpus.sentences.iter().enumerate() {
        for (ti, token) in sentence.tokens.iter().enumerate() {
            let analysis = token.gold.as_ref().ok_or_else(|| WriteError::MissingAnalysis {
                sentence: si,
                token: ti,
                surface: token.surface.clone(),
            })?;
            if let Some(reason) = unrepresentable(token, analysis, ti == 0) {
                return Err(WriteError::Unrepresentable {
                    sentence: si,
                    token: ti,
                    reason,
                });
            }
            out.push_str(&token.surface);
            out.push('\t');
            out.push_str(&analysis.lemma);
            out.push('\t');
            out.push_str(&analysis.tag.to_string());
            out.push('\n');
        }
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats {
    pub sentence_count: usize,
    pub token_count: usize,
    /// Mean number of grammemes per analyzed token.
    pub grammeme_form_ratio: f64,
    /// Share of tokens whose gold lexical form is absent from the reference.
    pub oov_rate: Option<f64>,
}

pub fn corpus_stats(corpus: &Corpus, reference: Option<&Corpus>) -> CorpusStats {
    let token_count = corpus.token_count();
    let grammemes: usize = corpus
        .tokens()
        .filter_map(|t| t.gold.as_ref())
        .map(|a| a.tag.len())
        .sum();
    let grammeme_form_ratio = if token_count == 0 {
        0.0
    } else {
        grammemes as f64 / token_count as f64
    };
    let oov_rate = reference.map(|r| {
        let seen = r.lexical_forms();
        let oov = corpus.tokens().filter(|t| is_oov(t, &seen)).count();
        if token_count == 0 {
            0.0
        } else {
            oov as f64 / token_count as f64
        }
    });
    CorpusStats {
        sentence_count: corpus.sentences.len(),
        token_count,
        grammeme_form_ratio,
        oov_rate,
    }
}

/// A token is OOV when its gold (lemma, tag) pair was never seen. Tokens
/// without a gold analysis are never OOV.
pub fn is_oov(token: &Token, seen: &HashSet<&Analysis>) -> bool {
    token.gold.as_ref().is_some_and(|g| !seen.contains(g))
}
