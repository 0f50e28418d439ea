//! Joint lemmatization and morphological tagging with a character-level
//! attentional encoder-decoder.
//!
//! The pipeline runs corpus ingestion ([`conllu`]), conversion of sentences
//! into source/target symbol sequences ([`snippets`]), the network itself
//! ([`model`]), SGD training with checkpoint selection ([`training`]),
//! inference with beam search and optional majority voting ([`decode`]) and
//! scoring ([`eval`]). The `lemmed` binary exposes the same steps on the
//! command line ([`cli`]).

pub mod cli;
pub mod conllu;
pub mod decode;
pub mod eval;
pub mod model;
pub mod snippets;
pub mod synthetic;
pub mod training;

pub use conllu::{Analysis, Corpus, MorphoTag, Sentence, Token};
pub use decode::{DecodeConfig, SentencePrediction};
pub use eval::EvalReport;
pub use model::{Model, ModelConfig};
pub use snippets::{SnippetConfig, Symbol, TargetContext, Vocab};
pub use training::{TrainConfig, TrainReport};
