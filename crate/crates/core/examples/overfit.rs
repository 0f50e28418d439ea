//! Overfits the synthetic corpus and prints training-set metrics.

use std::time::Instant;

use lemmed::decode::{predict_corpus, DecodeConfig};
use lemmed::eval::evaluate;
use lemmed::snippets::{build_examples, build_vocab};
use lemmed::training::{train, TrainInputs};
use lemmed::{synthetic, Model, ModelConfig, SnippetConfig, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, d: usize| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let (emb, hidden, layers, steps, batch) = (arg(1, 32), arg(2, 64), arg(3, 1), arg(4, 3000), arg(5, 16));
    let corpus = synthetic::corpus(32, 1);
    let snip = SnippetConfig::default();
    let examples = build_examples(&corpus.sentences, &snip);
    let vocab = build_vocab(&examples, 1);
    let encoded: Vec<_> = examples.iter().map(|e| vocab.encode(e)).collect();
    let cfg = ModelConfig {
        embedding_size: emb,
        hidden_units: hidden,
        layers,
        dropout: 0.0,
        source_vocab_size: vocab.source.len(),
        target_vocab_size: vocab.target.len(),
        seed: 1,
    };
    let model = Model::init(cfg).unwrap();
    println!("tokens={} examples={} params={}", corpus.token_count(), encoded.len(), model.params.parameter_count());
    let tc = TrainConfig { total_steps: steps, checkpoint_every: 500, batch_size: batch, ..TrainConfig::default() };
    let start = Instant::now();
    let inputs = TrainInputs { examples: &encoded, dev: &corpus, vocab: &vocab, snippet_cfg: &snip, checkpoint_dir: None };
    let (best, report) = train(model, &inputs, &tc, &mut std::io::stdout()).unwrap();
    println!("trained in {:?}, selected {}", start.elapsed(), report.selected_step);
    let (pred, _) = predict_corpus(&best, &corpus, &vocab, &snip, &DecodeConfig::default(), false).unwrap();
    println!("beam5 {:?}", evaluate(&pred, &corpus, None).unwrap().overall);
    let (pred, _) = predict_corpus(&best, &corpus, &vocab, &snip, &DecodeConfig::default(), true).unwrap();
    println!("beam5+vote {:?}", evaluate(&pred, &corpus, None).unwrap().overall);
}
