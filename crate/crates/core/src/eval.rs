//! Lemmatization and tagging metrics, overall and on OOV tokens.

use std::collections::HashSet;
use std::fmt;

use thiserror::Error;

use crate::conllu::{is_oov, Analysis, Corpus, MorphoTag};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("prediction has {pred} sentences, gold has {gold}")]
    SentenceCount { pred: usize, gold: usize },
    #[error("sentence {sentence}: prediction has {pred} tokens, gold has {gold}")]
    TokenCount {
        sentence: usize,
        pred: usize,
        gold: usize,
    },
    #[error("sentence {sentence}, token {token}: surface {pred:?} differs from gold {gold:?}")]
    Surface {
        sentence: usize,
        token: usize,
        pred: String,
        gold: String,
    },
    #[error("sentence {sentence}, token {token}: missing {side} analysis")]
    MissingAnalysis {
        sentence: usize,
        token: usize,
        side: &'static str,
    },
}

/// Unit-cost edit distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let up = row[j + 1];
            let sub = diag + usize::from(ca != cb);
            row[j + 1] = sub.min(up + 1).min(row[j] + 1);
            diag = up;
        }
    }
    row[b.len()]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TagScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Set precision/recall of predicted grammemes. Two empty tags agree
/// perfectly; an empty tag against a non-empty one scores 0.
pub fn tag_f1(pred: &MorphoTag, gold: &MorphoTag) -> TagScore {
    match (pred.is_empty(), gold.is_empty()) {
        (true, true) => {
            return TagScore {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
            }
        }
        (true, false) | (false, true) => {
            return TagScore {
                precision: 0.0,
                recall: 0.0,
                f1: 0.0,
            }
        }
        _ => {}
    }
    let gold_set: HashSet<&String> = gold.grammemes().iter().collect();
    let common = pred.grammemes().iter().filter(|g| gold_set.contains(g)).count() as f64;
    let precision = common / pred.len() as f64;
    let recall = common / gold.len() as f64;
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    TagScore {
        precision,
        recall,
        f1,
    }
}

/// Metric values for one token split.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Metrics {
    pub tokens: usize,
    pub lemma_accuracy: f64,
    pub avg_lemma_distance: f64,
    pub tag_accuracy: f64,
    pub avg_tag_f1: f64,
    pub analysis_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub overall: Metrics,
    /// Present when a training reference corpus was supplied.
    pub oov: Option<Metrics>,
}

#[derive(Default)]
struct Sums {
    tokens: usize,
    lemma_correct: usize,
    distance: usize,
    tag_correct: usize,
    f1: f64,
    both_correct: usize,
}

impl Sums {
    fn add(&mut self, pred: &Analysis, gold: &Analysis) {
        let lemma_ok = pred.lemma == gold.lemma;
        let tag_ok = pred.tag == gold.tag;
        self.tokens += 1;
        self.lemma_correct += usize::from(lemma_ok);
        self.tag_correct += usize::from(tag_ok);
        self.both_correct += usize::from(lemma_ok && tag_ok);
        self.distance += levenshtein(&pred.lemma, &gold.lemma);
        self.f1 += tag_f1(&pred.tag, &gold.tag).f1;
    }

    fn metrics(&self) -> Metrics {
        if self.tokens == 0 {
            return Metrics::default();
        }
        let n = self.tokens as f64;
        Metrics {
            tokens: self.tokens,
            lemma_accuracy: self.lemma_correct as f64 / n,
            avg_lemma_distance: self.distance as f64 / n,
            tag_accuracy: self.tag_correct as f64 / n,
            avg_tag_f1: self.f1 / n,
            analysis_accuracy: self.both_correct as f64 / n,
        }
    }
}

pub fn evaluate(pred: &Corpus, gold: &Corpus, train_reference: Option<&Corpus>) -> Result<EvalReport, EvalError> {
    if pred.sentences.len() != gold.sentences.len() {
        return Err(EvalError::SentenceCount {
            pred: pred.sentences.len(),
            gold: gold.sentences.len(),
        });
    }
    let seen = train_reference.map(Corpus::lexical_forms);
    let mut overall = Sums::default();
    let mut oov = Sums::default();
    for (si, (ps, gs)) in pred.sentences.iter().zip(&gold.sentences).enumerate() {
        if ps.len() != gs.len() {
            return Err(EvalError::TokenCount {
                sentence: si,
                pred: ps.len(),
                gold: gs.len(),
            });
        }
        for (ti, (pt, gt)) in ps.tokens.iter().zip(&gs.tokens).enumerate() {
            if pt.surface != gt.surface {
                return Err(EvalError::Surface {
                    sentence: si,
                    token: ti,
                    pred: pt.surface.clone(),
                    gold: gt.surface.clone(),
                });
            }
            let missing = |side| EvalError::MissingAnalysis {
                sentence: si,
                token: ti,
                side,
            };
            let pa = pt.gold.as_ref().ok_or_else(|| missing("predicted"))?;
            let ga = gt.gold.as_ref().ok_or_else(|| missing("gold"))?;
            overall.add(pa, ga);
            if seen.as_ref().is_some_and(|s| is_oov(gt, s)) {
                oov.add(pa, ga);
            }
        }
    }
    Ok(EvalReport {
        overall: overall.metrics(),
        oov: seen.map(|_| oov.metrics()),
    })
}

impl EvalReport {
    /// Metric name and accessor, in report order.
    pub const METRICS: [(&'static str, fn(&Metrics) -> f64); 5] = [
        ("lemma_accuracy", |m| m.lemma_accuracy),
        ("avg_lemma_distance", |m| m.avg_lemma_distance),
        ("tag_accuracy", |m| m.tag_accuracy),
        ("avg_tag_f1", |m| m.avg_tag_f1),
        ("analysis_accuracy", |m| m.analysis_accuracy),
    ];

    /// `key=value` lines for scripts.
    pub fn key_values(&self) -> String {
        let mut out = format!("tokens={}\n", self.overall.tokens);
        for (name, get) in Self::METRICS {
            out.push_str(&format!("{name}={:.6}\n", get(&self.overall)));
        }
        if let Some(oov) = &self.oov {
            out.push_str(&format!("oov_tokens={}\n", oov.tokens));
            for (name, get) in Self::METRICS {
                out.push_str(&format!("oov_{name}={:.6}\n", get(oov)));
            }
        }
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<20} {:>9} {:>9}", "metric", "overall", "oov")?;
        for (name, get) in Self::METRICS {
            let oov = self
                .oov
                .as_ref()
                .filter(|m| m.tokens > 0)
                .map_or_else(|| "-".to_string(), |m| format!("{:.4}", get(m)));
            writeln!(f, "{:<20} {:>9.4} {:>9}", name, get(&self.overall), oov)?;
        }
        let oov_tokens = self.oov.as_ref().map_or_else(|| "-".to_string(), |m| m.tokens.to_string());
        writeln!(f, "{:<20} {:>9} {:>9}", "tokens", self.overall.tokens, oov_tokens)
    }
}
