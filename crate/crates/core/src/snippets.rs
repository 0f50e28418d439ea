//! Source/target symbol sequences for both operating modes.
//!
//! In full-sequence mode a sentence becomes a single example whose source is
//! every surface form and whose target is every analysis. In context-window
//! mode each token becomes the focal token of its own example, with `W`
//! words of context on either side. The target side of a window example
//! always holds the focal analysis; what is written for the context words is
//! chosen by [`TargetContext`].
//!
//! Every word and every analysis unit ends in [`Symbol::WordBoundary`], an
//! atomic control symbol that cannot be confused with a surface character.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use crate::conllu::{Analysis, Sentence, Token};

/// One processing unit of a sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Symbol {
    Pad,
    Unknown,
    Start,
    End,
    WordBoundary,
    Char(char),
    /// A whole grammeme, rendered `+g`.
    Grammeme(String),
}

impl Symbol {
    /// Control symbols in id order; every vocabulary starts with these.
    pub const CONTROLS: [Symbol; 5] = [
        Symbol::Pad,
        Symbol::Unknown,
        Symbol::Start,
        Symbol::End,
        Symbol::WordBoundary,
    ];

    pub fn is_control(&self) -> bool {
        !matches!(self, Symbol::Char(_) | Symbol::Grammeme(_))
    }
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Symbol::Pad => f.write_str("<PAD>"),
            Symbol::Unknown => f.write_str("<UNK>"),
            Symbol::Start => f.write_str("<S>"),
            Symbol::End => f.write_str("</S>"),
            Symbol::WordBoundary => f.write_str("<WB>"),
            Symbol::Char(c) => write!(f, "{c}"),
            Symbol::Grammeme(g) => write!(f, "+{g}"),
        }
    }
}

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const START_ID: u32 = 2;
pub const END_ID: u32 = 3;
pub const WB_ID: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    FullSequence,
    ContextWindow,
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full_sequence" | "full-sequence" => Ok(Mode::FullSequence),
            "context_window" | "context-window" => Ok(Mode::ContextWindow),
            _ => Err(format!("unknown mode {s:?} (expected full_sequence or context_window)")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::FullSequence => "full_sequence",
            Mode::ContextWindow => "context_window",
        })
    }
}

/// What the target side records for context (non-focal) words.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetContext {
    None,
    Lemmata,
    Tags,
    Both,
    Surface,
}

impl TargetContext {
    pub const ALL: [TargetContext; 5] = [
        TargetContext::None,
        TargetContext::Lemmata,
        TargetContext::Tags,
        TargetContext::Both,
        TargetContext::Surface,
    ];
}

impl FromStr for TargetContext {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(TargetContext::None),
            "lemmata" => Ok(TargetContext::Lemmata),
            "tags" => Ok(TargetContext::Tags),
            "both" => Ok(TargetContext::Both),
            "surface" => Ok(TargetContext::Surface),
            _ => Err(format!(
                "unknown target context {s:?} (expected none, lemmata, tags, both or surface)"
            )),
        }
    }
}

impl fmt::Display for TargetContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TargetContext::None => "none",
            TargetContext::Lemmata => "lemmata",
            TargetContext::Tags => "tags",
            TargetContext::Both => "both",
            TargetContext::Surface => "surface",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SnippetConfig {
    pub mode: Mode,
    /// Context words on each side of the focal word.
    pub window: usize,
    pub target_context: TargetContext,
}

impl Default for SnippetConfig {
    fn default() -> Self {
        SnippetConfig {
            mode: Mode::ContextWindow,
            window: 1,
            target_context: TargetContext::Both,
        }
    }
}

impl SnippetConfig {
    pub fn full_sequence() -> Self {
        SnippetConfig {
            mode: Mode::FullSequence,
            ..Default::default()
        }
    }

    pub fn context_window(window: usize, target_context: TargetContext) -> Self {
        SnippetConfig {
            mode: Mode::ContextWindow,
            window,
            target_context,
        }
    }

    /// Token range `[start, end]` covered by the window around `focal`.
    pub fn window_bounds(&self, focal: usize, len: usize) -> (usize, usize) {
        (focal.saturating_sub(self.window), (focal + self.window).min(len - 1))
    }

    /// Ordinal of the focal unit among the target's boundary-terminated units.
    pub fn focal_unit(&self, focal: usize, window_start: usize) -> usize {
        match self.target_context {
            TargetContext::None => 0,
            _ => focal - window_start,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnippetExample {
    pub source: Vec<Symbol>,
    pub target: Option<Vec<Symbol>>,
    /// Position of the focal token in its sentence (window mode only).
    pub focal_index: Option<usize>,
    /// Half-open symbol range of the focal analysis inside `target`.
    pub focal_span: Option<(usize, usize)>,
    /// Index of the first covered token in the sentence.
    pub window_start: usize,
    pub sentence_id: usize,
    /// Number of tokens covered on the source side.
    pub token_count: usize,
}

pub fn tokenize_surface(token: &Token) -> Vec<Symbol> {
    surface_symbols(&token.surface)
}

fn surface_symbols(surface: &str) -> Vec<Symbol> {
    surface
        .chars()
        .map(Symbol::Char)
        .chain(std::iter::once(Symbol::WordBoundary))
        .collect()
}

pub fn tokenize_analysis(analysis: &Analysis) -> Vec<Symbol> {
    let mut out = lemma_symbols(analysis);
    out.extend(tag_symbols(analysis));
    out.push(Symbol::WordBoundary);
    out
}

fn lemma_symbols(analysis: &Analysis) -> Vec<Symbol> {
    analysis.lemma.chars().map(Symbol::Char).collect()
}

fn tag_symbols(analysis: &Analysis) -> impl Iterator<Item = Symbol> + '_ {
    analysis
        .tag
        .grammemes()
        .iter()
        .map(|g| Symbol::Grammeme(g.clone()))
}

/// Gold analyses of every token, or `None` if any token lacks one.
fn gold_analyses(tokens: &[Token]) -> Option<Vec<&Analysis>> {
    tokens.iter().map(|t| t.gold.as_ref()).collect()
}

pub fn build_full_sequence_example(sentence: &Sentence, sentence_id: usize) -> SnippetExample {
    let source = sentence.tokens.iter().flat_map(tokenize_surface).collect();
    let target = gold_analyses(&sentence.tokens)
        .map(|golds| golds.into_iter().flat_map(tokenize_analysis).collect());
    SnippetExample {
        source,
        target,
        focal_index: None,
        focal_span: None,
        window_start: 0,
        sentence_id,
        token_count: sentence.len(),
    }
}

/// One example per token of `sentence`, each centred on that token.
pub fn build_window_examples(
    sentence: &Sentence,
    cfg: &SnippetConfig,
    sentence_id: usize,
) -> Vec<SnippetExample> {
    let len = sentence.len();
    let golds = gold_analyses(&sentence.tokens);
    (0..len)
        .map(|focal| {
            let (start, end) = cfg.window_bounds(focal, len);
            let covered = &sentence.tokens[start..=end];
            let source = covered.iter().flat_map(tokenize_surface).collect();
            let (target, focal_span) = match &golds {
                Some(golds) => {
                    let (t, span) = window_target(&sentence.tokens, golds, start, end, focal, cfg);
                    (Some(t), Some(span))
                }
                None => (None, None),
            };
            SnippetExample {
                source,
                target,
                focal_index: Some(focal),
                focal_span,
                window_start: start,
                sentence_id,
                token_count: end - start + 1,
            }
        })
        .collect()
}

fn window_target(
    tokens: &[Token],
    golds: &[&Analysis],
    start: usize,
    end: usize,
    focal: usize,
    cfg: &SnippetConfig,
) -> (Vec<Symbol>, (usize, usize)) {
    let mut target = Vec::new();
    let mut span = (0, 0);
    for pos in start..=end {
        if pos == focal {
            let begin = target.len();
            target.extend(tokenize_analysis(golds[pos]));
            span = (begin, target.len());
            continue;
        }
        let unit: Vec<Symbol> = match cfg.target_context {
            TargetContext::None => continue,
            TargetContext::Both => tokenize_analysis(golds[pos]),
            TargetContext::Lemmata => {
                let mut u = lemma_symbols(golds[pos]);
                u.push(Symbol::WordBoundary);
                u
            }
            TargetContext::Tags => {
                let mut u: Vec<Symbol> = tag_symbols(golds[pos]).collect();
                u.push(Symbol::WordBoundary);
                u
            }
            TargetContext::Surface => tokenize_surface(&tokens[pos]),
        };
        target.extend(unit);
    }
    (target, span)
}

/// Examples for every sentence of a corpus under `cfg`.
pub fn build_examples(sentences: &[Sentence], cfg: &SnippetConfig) -> Vec<SnippetExample> {
    sentences
        .iter()
        .enumerate()
        .flat_map(|(id, s)| match cfg.mode {
            Mode::FullSequence => vec![build_full_sequence_example(s, id)],
            Mode::ContextWindow => build_window_examples(s, cfg, id),
        })
        .collect()
}

/// `source \t target` with space-separated symbols, as printed by `snippetize`.
pub fn format_example(example: &SnippetExample) -> String {
    let join = |syms: &[Symbol]| {
        syms.iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(" ")
    };
    match &example.target {
        Some(t) => format!("{}\t{}", join(&example.source), join(t)),
        None => join(&example.source),
    }
}

/// One side of a vocabulary: dense ids, control symbols first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolTable {
    symbols: Vec<Symbol>,
    index: HashMap<Symbol, u32>,
}

impl SymbolTable {
    /// Controls followed by `symbols` (deduplicated, in the given order).
    pub fn from_symbols(symbols: impl IntoIterator<Item = Symbol>) -> Self {
        let mut table = SymbolTable {
            symbols: Vec::new(),
            index: HashMap::new(),
        };
        for s in Symbol::CONTROLS.iter().cloned().chain(symbols) {
            if !table.index.contains_key(&s) {
                table.index.insert(s.clone(), table.symbols.len() as u32);
                table.symbols.push(s);
            }
        }
        table
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, symbol: &Symbol) -> u32 {
        self.index.get(symbol).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, symbol: &Symbol) -> Option<u32> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: u32) -> Option<&Symbol> {
        self.symbols.get(id as usize)
    }

    pub fn symbols(&self) -> &[Symbol] {
        &self.symbols
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    pub source: SymbolTable,
    pub target: SymbolTable,
    pub min_freq: usize,
}

/// Kept symbols are sorted by their natural order so that the vocabulary does
/// not depend on example order.
pub fn build_vocab(examples: &[SnippetExample], min_freq: usize) -> Vocab {
    let mut src: BTreeMap<&Symbol, usize> = BTreeMap::new();
    let mut tgt: BTreeMap<&Symbol, usize> = BTreeMap::new();
    for ex in examples {
        for s in &ex.source {
            *src.entry(s).or_default() += 1;
        }
        for s in ex.target.iter().flatten() {
            *tgt.entry(s).or_default() += 1;
        }
    }
    let keep = |counts: BTreeMap<&Symbol, usize>| {
        SymbolTable::from_symbols(
            counts
                .into_iter()
                .filter(|(s, n)| !s.is_control() && *n >= min_freq)
                .map(|(s, _)| s.clone()),
        )
    };
    Vocab {
        source: keep(src),
        target: keep(tgt),
        min_freq,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub source: Vec<u32>,
    /// Framed by start and end ids.
    pub target: Option<Vec<u32>>,
}

impl Vocab {
    pub fn encode_source(&self, symbols: &[Symbol]) -> Vec<u32> {
        symbols.iter().map(|s| self.source.id(s)).collect()
    }

    pub fn encode_target(&self, symbols: &[Symbol]) -> Vec<u32> {
        let mut ids = Vec::with_capacity(symbols.len() + 2);
        ids.push(START_ID);
        ids.extend(symbols.iter().map(|s| self.target.id(s)));
        ids.push(END_ID);
        ids
    }

    pub fn encode(&self, example: &SnippetExample) -> EncodedExample {
        EncodedExample {
            source: self.encode_source(&example.source),
            target: example.target.as_deref().map(|t| self.encode_target(t)),
        }
    }

    /// Maps target ids back to symbols, dropping start/end/padding.
    pub fn decode_target(&self, ids: &[u32]) -> Vec<Symbol> {
        ids.iter()
            .filter(|&&id| !matches!(id, PAD_ID | START_ID | END_ID))
            .map(|&id| self.target.symbol(id).cloned().unwrap_or(Symbol::Unknown))
            .collect()
    }
}
