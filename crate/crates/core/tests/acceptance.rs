//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::{BTreeMap, HashSet};
use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lemmed::conllu::{parse_corpus, write_corpus, ParseMode};
use lemmed::decode::{beam_decode, greedy_decode, predict_corpus, predict_sentence, Vote, VotingBallot};
use lemmed::eval::{evaluate, levenshtein, tag_f1, Metrics};
use lemmed::model::{load_model, save_model, Batch, Dropout, Params};
use lemmed::snippets::{build_examples, build_vocab, build_window_examples, Symbol, END_ID, WB_ID};
use lemmed::training::{lr_schedule, train, TrainInputs};
use lemmed::{
    synthetic, Analysis, Corpus, DecodeConfig, Model, ModelConfig, MorphoTag, Sentence, SnippetConfig, TargetContext,
    Token, TrainConfig,
};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

const BATS: &str = "Bats\tbat\tN;PL\nbit\tbite\tPST;V\ncats\tcat\tN;PL\n";

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient oracle", gradient_oracle),
        ("overfit run", overfit_run),
        ("metric oracle", metric_oracle),
        ("snippet laws", snippet_laws),
        ("decode equivalences", decode_equivalences),
        ("voting properties", voting_properties),
        ("schedule", schedule),
        ("determinism and persistence", determinism_and_persistence),
        ("format round-trip", format_round_trip),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|p| Err(format!("panicked: {}", panic_message(&p))));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {} {name}: PASS ({secs:.1}s) {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({secs:.1}s) {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn panic_message(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_default()
}

fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        embedding_size: 4,
        hidden_units: 3,
        layers: 1,
        dropout: 0.0,
        source_vocab_size: 10,
        target_vocab_size: 12,
        seed,
    }
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let mut model = Model::init(tiny_config(4)).map_err(|e| e.to_string())?;
    // Weights span five times the init range.
    for t in model.params.tensors_mut() {
        t.mapv_inplace(|x| (x * 5.0) as f32 as f64);
    }
    let sources: [&[u32]; 3] = [&[5, 6, 4, 7, 4], &[8, 4], &[9, 5, 7, 4]];
    let targets: [&[u32]; 3] = [&[2, 5, 9, 4, 3], &[2, 6, 10, 11, 4, 3], &[2, 7, 8, 3]];
    let examples: Vec<_> = sources
        .iter()
        .zip(&targets)
        .map(|(s, t)| lemmed::snippets::EncodedExample { source: s.to_vec(), target: Some(t.to_vec()) })
        .collect();
    let batch = Batch::from_examples(&examples.iter().collect::<Vec<_>>());
    let (_, grads) = model.backward(&batch, &mut Dropout::off()).map_err(|e| e.to_string())?;
    let loss = |p: &Params| {
        let m = Model { config: model.config.clone(), params: p.clone() };
        m.forward_loss(&batch, &mut Dropout::off()).expect("loss")
    };
    let eps = 1e-4;
    let names = model.params.tensor_names();
    let mut checked = 0;
    let mut worst = 0.0f64;
    let mut zeros = 0;
    for (ti, g) in grads.0.tensors().iter().enumerate() {
        let g = g.as_slice().expect("contiguous");
        for (idx, &analytic) in g.iter().enumerate() {
            let mut plus = model.params.clone();
            let mut minus = model.params.clone();
            plus.tensors_mut()[ti].as_slice_mut().expect("contiguous")[idx] += eps;
            minus.tensors_mut()[ti].as_slice_mut().expect("contiguous")[idx] -= eps;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * eps);
            let scale = analytic.abs().max(numeric.abs());
            let rel = if scale == 0.0 { 0.0 } else { (analytic - numeric).abs() / scale };
            ensure!(rel <= 1e-3, "{}[{idx}]: analytic {analytic:e} numeric {numeric:e} rel {rel:e}", names[ti]);
            worst = worst.max(rel);
            zeros += usize::from(scale == 0.0);
            checked += 1;
        }
    }
    ensure!(start.elapsed() < Duration::from_secs(60), "took {:?}", start.elapsed());
    Ok(format!(
        "{checked} entries ({zeros} exactly zero), worst relative error {worst:.2e}"
    ))
}

fn overfit_run() -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| e.to_string())?;
    pool.install(|| {
        let start = Instant::now();
        let corpus = synthetic::corpus(32, 1);
        let snip = SnippetConfig::context_window(1, TargetContext::Both);
        let examples = build_examples(&corpus.sentences, &snip);
        let vocab = build_vocab(&examples, 1);
        let encoded: Vec<_> = examples.iter().map(|e| vocab.encode(e)).collect();
        let cfg = ModelConfig {
            embedding_size: 32,
            hidden_units: 64,
            layers: 1,
            dropout: 0.0,
            source_vocab_size: vocab.source.len(),
            target_vocab_size: vocab.target.len(),
            seed: 1,
        };
        let tc = TrainConfig { total_steps: 3000, checkpoint_every: 500, batch_size: 16, ..TrainConfig::default() };
        let inputs = TrainInputs { examples: &encoded, dev: &corpus, vocab: &vocab, snippet_cfg: &snip, checkpoint_dir: None };
        let model = Model::init(cfg).map_err(|e| e.to_string())?;
        let (best, report) = train(model, &inputs, &tc, &mut std::io::sink()).map_err(|e| e.to_string())?;
        let selected = report.selected().ok_or("no checkpoint selected")?;
        let (pred, _) = predict_corpus(&best, &corpus, &vocab, &snip, &DecodeConfig::default(), false)
            .map_err(|e| e.to_string())?;
        let beam = evaluate(&pred, &corpus, None).map_err(|e| e.to_string())?.overall;
        let elapsed = start.elapsed();
        ensure!(
            selected.dev.analysis_accuracy >= 0.99,
            "selected step {} reached {:.4}",
            selected.step,
            selected.dev.analysis_accuracy
        );
        ensure!(beam.analysis_accuracy >= 0.99, "beam-5 accuracy {:.4}", beam.analysis_accuracy);
        ensure!(elapsed < Duration::from_secs(600), "took {elapsed:?}");
        Ok(format!(
            "{} tokens, selected step {}, greedy accuracy {:.4}, beam-5 accuracy {:.4}, one thread",
            corpus.token_count(),
            selected.step,
            selected.dev.analysis_accuracy,
            beam.analysis_accuracy
        ))
    })
}

/// Full-matrix edit distance with unit costs.
fn edit_distance_oracle(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

fn f1_oracle(pred: &[String], gold: &[String]) -> f64 {
    let p: HashSet<&String> = pred.iter().collect();
    let g: HashSet<&String> = gold.iter().collect();
    match (p.is_empty(), g.is_empty()) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => {
            let common = p.intersection(&g).count() as f64;
            if common == 0.0 {
                0.0
            } else {
                2.0 * common / (p.len() + g.len()) as f64
            }
        }
    }
}

fn random_analysis(rng: &mut ChaCha8Rng) -> Analysis {
    let lemmas = ["bat", "bite", "cat", "cut", "at", "bats", ""];
    let grammemes = ["N", "PL", "SG", "V", "PST", "ADJ"];
    let n = rng.gen_range(0..=3);
    let tag = MorphoTag::from_grammemes((0..n).map(|_| *grammemes.choose(rng).expect("non-empty")));
    Analysis::new(*lemmas.choose(rng).expect("non-empty"), tag)
}

fn random_corpus(rng: &mut ChaCha8Rng) -> Corpus {
    let sentences = (0..rng.gen_range(1..=5))
        .map(|_| {
            let tokens = (0..rng.gen_range(1..=6))
                .map(|i| Token::new(format!("w{i}"), Some(random_analysis(rng))))
                .collect();
            Sentence::new(tokens)
        })
        .collect();
    Corpus::new(sentences)
}

fn brute_force_metrics(pairs: &[(&Analysis, &Analysis)]) -> Metrics {
    if pairs.is_empty() {
        return Metrics::default();
    }
    let n = pairs.len() as f64;
    let count = |f: &dyn Fn(&Analysis, &Analysis) -> bool| pairs.iter().filter(|(p, g)| f(p, g)).count() as f64 / n;
    Metrics {
        tokens: pairs.len(),
        lemma_accuracy: count(&|p, g| p.lemma == g.lemma),
        avg_lemma_distance: pairs.iter().map(|(p, g)| edit_distance_oracle(&p.lemma, &g.lemma)).sum::<usize>() as f64 / n,
        tag_accuracy: count(&|p, g| p.tag.grammemes() == g.tag.grammemes()),
        avg_tag_f1: pairs.iter().map(|(p, g)| f1_oracle(p.tag.grammemes(), g.tag.grammemes())).sum::<f64>() / n,
        analysis_accuracy: count(&|p, g| p.lemma == g.lemma && p.tag.grammemes() == g.tag.grammemes()),
    }
}

fn metrics_close(a: &Metrics, b: &Metrics) -> bool {
    let close = |x: f64, y: f64| (x - y).abs() <= 1e-12;
    a.tokens == b.tokens
        && close(a.lemma_accuracy, b.lemma_accuracy)
        && close(a.avg_lemma_distance, b.avg_lemma_distance)
        && close(a.tag_accuracy, b.tag_accuracy)
        && close(a.avg_tag_f1, b.avg_tag_f1)
        && close(a.analysis_accuracy, b.analysis_accuracy)
}

fn metric_oracle() -> Outcome {
    let s = tag_f1(&MorphoTag::from_grammemes(["N"]), &MorphoTag::from_grammemes(["N", "PL"]));
    ensure!(s.precision == 1.0 && s.recall == 0.5, "P={} R={}", s.precision, s.recall);
    ensure!((s.f1 - 2.0 / 3.0).abs() < 1e-15, "F1={}", s.f1);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let alphabet: Vec<char> = "abcdeäöü".chars().collect();
    let word = |rng: &mut ChaCha8Rng| -> String {
        let n = rng.gen_range(0..=12);
        (0..n).map(|_| *alphabet.choose(rng).expect("non-empty")).collect()
    };
    for _ in 0..1000 {
        let (a, b) = (word(&mut rng), word(&mut rng));
        ensure!(levenshtein(&a, &b) == edit_distance_oracle(&a, &b), "levenshtein({a:?}, {b:?})");
    }

    for case in 0..100 {
        let gold = random_corpus(&mut rng);
        let mut pred = gold.clone();
        for t in pred.sentences.iter_mut().flat_map(|s| s.tokens.iter_mut()) {
            if rng.gen_bool(0.5) {
                t.gold = Some(random_analysis(&mut rng));
            }
        }
        let reference = random_corpus(&mut rng);
        let report = evaluate(&pred, &gold, Some(&reference)).map_err(|e| e.to_string())?;
        let seen: HashSet<(String, Vec<String>)> = reference
            .tokens()
            .map(|t| t.gold.as_ref().expect("gold"))
            .map(|a| (a.lemma.clone(), a.tag.grammemes().to_vec()))
            .collect();
        let pairs: Vec<(&Analysis, &Analysis)> = pred
            .tokens()
            .zip(gold.tokens())
            .map(|(p, g)| (p.gold.as_ref().expect("pred"), g.gold.as_ref().expect("gold")))
            .collect();
        let oov: Vec<_> = pairs
            .iter()
            .copied()
            .filter(|(_, g)| !seen.contains(&(g.lemma.clone(), g.tag.grammemes().to_vec())))
            .collect();
        ensure!(metrics_close(&report.overall, &brute_force_metrics(&pairs)), "corpus {case}: overall differs");
        let report_oov = report.oov.ok_or("missing OOV split")?;
        ensure!(metrics_close(&report_oov, &brute_force_metrics(&oov)), "corpus {case}: OOV split differs");
    }
    Ok("partial-overlap F1 exact, 1000 distance pairs, 100 corpora".into())
}

fn word_sentence(len: usize, rng: &mut ChaCha8Rng) -> Sentence {
    let tokens = (0..len)
        .map(|_| {
            let w: String = (0..rng.gen_range(1..=4)).map(|_| rng.gen_range('a'..='f')).collect();
            let lemma = w[..1].to_string();
            Token::new(w, Some(Analysis::new(lemma, MorphoTag::from_grammemes(["X"]))))
        })
        .collect();
    Sentence::new(tokens)
}

fn snippet_laws() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut with_both_regimes = 0;
    for case in 0..500 {
        let len = rng.gen_range(1..=12);
        let w = rng.gen_range(0..=3);
        let tc = *TargetContext::ALL.choose(&mut rng).expect("non-empty");
        let sentence = word_sentence(len, &mut rng);
        let cfg = SnippetConfig::context_window(w, tc);
        let examples = build_window_examples(&sentence, &cfg, 0);
        ensure!(examples.len() == len, "case {case}: {} examples for L={len}", examples.len());
        let mut overlap = vec![0usize; len];
        for (i, ex) in examples.iter().enumerate() {
            ensure!(ex.focal_index == Some(i), "case {case}: focal index of snippet {i}");
            let end = ex.window_start + ex.token_count;
            let wb = ex.source.iter().filter(|s| **s == Symbol::WordBoundary).count();
            ensure!(wb == ex.token_count, "case {case}: source of snippet {i} has {wb} words");
            for c in overlap.iter_mut().take(end).skip(ex.window_start) {
                *c += 1;
            }
        }
        for (i, &c) in overlap.iter().enumerate() {
            let expected = (len - 1).min(i + w) - i.saturating_sub(w) + 1;
            ensure!(c == expected, "case {case}: token {i} covered {c} times, expected {expected}");
        }
        if len > 2 * w {
            for (i, &c) in overlap.iter().enumerate() {
                if i >= w && i + w < len {
                    ensure!(c == 2 * w + 1, "case {case}: interior token {i} covered {c} times");
                }
            }
            ensure!(overlap[0] == w + 1 && overlap[len - 1] == w + 1, "case {case}: edge counts");
            if w == 1 {
                ensure!(overlap[0] == 2 * w && overlap[len - 1] == 2 * w, "case {case}: W=1 edge counts");
                with_both_regimes += 1;
            }
        }
    }
    Ok(format!(
        "500 cases; interior 2W+1, sentence edges W+1 (equal to 2W at W=1, {with_both_regimes} such cases)"
    ))
}

fn random_model(rng: &mut ChaCha8Rng) -> Model {
    let cfg = ModelConfig {
        embedding_size: rng.gen_range(2..=8),
        hidden_units: rng.gen_range(2..=8),
        layers: rng.gen_range(1..=2),
        dropout: 0.0,
        source_vocab_size: rng.gen_range(6..=14),
        target_vocab_size: rng.gen_range(6..=14),
        seed: rng.gen(),
    };
    let mut m = Model::init(cfg).expect("valid config");
    // Scaled output weights give peaked step distributions.
    let scale = rng.gen_range(1.0..30.0);
    m.params.output.mapv_inplace(|x| x * scale);
    m.params.output_bias.mapv_inplace(|_| rng.gen_range(-2.0..2.0));
    m
}

fn forced_model(vocab_sizes: (usize, usize), favoured: u32) -> Model {
    let mut cfg = ModelConfig::new(vocab_sizes.0, vocab_sizes.1);
    cfg.embedding_size = 4;
    cfg.hidden_units = 4;
    cfg.layers = 1;
    let mut m = Model::zeros(cfg).expect("valid config");
    m.params.output_bias[[0, favoured as usize]] = 10.0;
    m
}

fn decode_equivalences() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut improved = 0;
    let beam5 = DecodeConfig::default();
    let beam1 = DecodeConfig { beam_size: 1, ..DecodeConfig::default() };
    for case in 0..100 {
        let model = random_model(&mut rng);
        let n = model.config.source_vocab_size as u32;
        let source: Vec<u32> = (0..rng.gen_range(1..=8)).map(|_| rng.gen_range(5..n)).collect();
        let greedy = greedy_decode(&model, &source, &beam5).map_err(|e| e.to_string())?;
        let one = beam_decode(&model, &source, &beam1).map_err(|e| e.to_string())?;
        ensure!(one == greedy, "case {case}: beam 1 {:?} vs greedy {:?}", one.ids, greedy.ids);
        let five = beam_decode(&model, &source, &beam5).map_err(|e| e.to_string())?;
        ensure!(
            five.log_prob >= greedy.log_prob,
            "case {case}: beam 5 {} < greedy {}",
            five.log_prob,
            greedy.log_prob
        );
        improved += usize::from(five.log_prob > greedy.log_prob);
    }

    let corpus = synthetic::corpus(8, 2);
    let configs = [
        SnippetConfig::full_sequence(),
        SnippetConfig::context_window(0, TargetContext::None),
        SnippetConfig::context_window(1, TargetContext::Both),
        SnippetConfig::context_window(2, TargetContext::Lemmata),
        SnippetConfig::context_window(1, TargetContext::Tags),
        SnippetConfig::context_window(2, TargetContext::Surface),
    ];
    let mut predictions = 0;
    for cfg in configs {
        let vocab = build_vocab(&build_examples(&corpus.sentences, &cfg), 1);
        let sizes = (vocab.source.len(), vocab.target.len());
        let grammeme = vocab.target.get(&Symbol::Grammeme("N".into())).ok_or("no grammeme")?;
        let letter = vocab.target.get(&Symbol::Char('a')).ok_or("no letter")?;
        for favoured in [END_ID, WB_ID, grammeme, letter] {
            let model = forced_model(sizes, favoured);
            let votes: &[bool] = if cfg.mode == lemmed::snippets::Mode::ContextWindow
                && (cfg.window == 0 || cfg.target_context == TargetContext::Both)
            {
                &[false, true]
            } else {
                &[false]
            };
            for &vote in votes {
                for s in &corpus.sentences {
                    let p = predict_sentence(&model, s, &vocab, &cfg, &DecodeConfig::greedy(), vote)
                        .map_err(|e| e.to_string())?;
                    ensure!(p.analyses.len() == s.len(), "{cfg:?} favouring {favoured}: {} analyses", p.analyses.len());
                    predictions += 1;
                }
            }
        }
    }
    Ok(format!("100 pairs ({improved} where beam 5 beat greedy), {predictions} forced-malformed sentences"))
}

fn voting_oracle(votes: &[(usize, usize, usize)]) -> Option<usize> {
    let mut by_candidate: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for &(c, d, s) in votes {
        by_candidate.entry(c).or_default().push((d, s));
    }
    let top = by_candidate.values().map(Vec::len).max()?;
    by_candidate
        .into_iter()
        .filter(|(_, v)| v.len() == top)
        .min_by_key(|(_, v)| *v.iter().min().expect("non-empty"))
        .map(|(c, _)| c)
}

fn voting_properties() -> Outcome {
    let universe: Vec<Analysis> = ["bat", "bats", "bit"]
        .iter()
        .map(|l| Analysis::new(*l, MorphoTag::from_grammemes(["N"])))
        .collect();
    ensure!(VotingBallot::default().winner().is_none(), "empty ballot has a winner");
    let mut ballots = 0;
    for size in 1..=3usize {
        let positions = 3usize.pow(size as u32);
        let mut snippet_orders: Vec<Vec<usize>> = Vec::new();
        permutations(&mut (0..size).collect(), 0, &mut snippet_orders);
        for cands in 0..positions {
            let cand: Vec<usize> = digits(cands, size);
            for dists in 0..positions {
                let dist: Vec<usize> = digits(dists, size);
                for order in &snippet_orders {
                    let votes: Vec<(usize, usize, usize)> =
                        (0..size).map(|i| (cand[i], dist[i], order[i])).collect();
                    let ballot = VotingBallot {
                        votes: votes
                            .iter()
                            .map(|&(c, d, s)| Vote { analysis: universe[c].clone(), focal_distance: d, snippet: s })
                            .collect(),
                    };
                    let got = ballot.winner().ok_or("no winner")?;
                    let want = voting_oracle(&votes).expect("non-empty");
                    ensure!(*got == universe[want], "ballot {votes:?}: got {got}, want {}", universe[want]);
                    if cand.iter().all(|&c| c == cand[0]) {
                        ensure!(*got == universe[cand[0]], "unanimity on {votes:?}");
                    }
                    for c in 0..3 {
                        if 2 * cand.iter().filter(|&&x| x == c).count() > size {
                            ensure!(*got == universe[c], "strict majority on {votes:?}");
                        }
                    }
                    ballots += 1;
                }
            }
        }
    }
    Ok(format!("{ballots} ballots"))
}

fn digits(mut n: usize, len: usize) -> Vec<usize> {
    (0..len)
        .map(|_| {
            let d = n % 3;
            n /= 3;
            d
        })
        .collect()
}

fn permutations(items: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
    if k == items.len() {
        out.push(items.clone());
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permutations(items, k + 1, out);
        items.swap(k, i);
    }
}

fn schedule() -> Outcome {
    let cfg = TrainConfig::default();
    let expected = [(0, 1.0), (24_999, 1.0), (25_000, 0.5), (35_000, 0.25), (45_000, 0.125)];
    for (step, lr) in expected {
        let got = lr_schedule(&cfg, step);
        ensure!(got == lr, "step {step}: {got}");
    }
    Ok("1.0 / 1.0 / 0.5 / 0.25 / 0.125".into())
}

fn determinism_and_persistence() -> Outcome {
    let corpus = synthetic::corpus(16, 3);
    let snip = SnippetConfig::default();
    let examples = build_examples(&corpus.sentences, &snip);
    let vocab = build_vocab(&examples, 1);
    let encoded: Vec<_> = examples.iter().map(|e| vocab.encode(e)).collect();
    let cfg = ModelConfig {
        embedding_size: 8,
        hidden_units: 12,
        layers: 2,
        dropout: 0.3,
        source_vocab_size: vocab.source.len(),
        target_vocab_size: vocab.target.len(),
        seed: 7,
    };
    let tc = TrainConfig { total_steps: 200, checkpoint_every: 100, batch_size: 8, seed: 7, ..TrainConfig::default() };
    let inputs = TrainInputs { examples: &encoded, dev: &corpus, vocab: &vocab, snippet_cfg: &snip, checkpoint_dir: None };
    let run = || {
        let mut log = Vec::new();
        let model = Model::init(cfg.clone()).expect("valid config");
        let (best, report) = train(model, &inputs, &tc, &mut log).expect("training");
        (best, report, log)
    };
    let (m1, r1, log1) = run();
    let (m2, r2, log2) = run();
    ensure!(r1 == r2, "reports differ");
    ensure!(log1 == log2, "logs differ");
    ensure!(m1 == m2, "selected models differ");

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.bin");
    save_model(&m1, &vocab, &path).map_err(|e| e.to_string())?;
    let loaded = load_model(&path, Some(&vocab)).map_err(|e| e.to_string())?;
    let batch = Batch::from_examples(&encoded.iter().take(10).collect::<Vec<_>>());
    let l1 = m1.forward_loss(&batch, &mut Dropout::off()).map_err(|e| e.to_string())?;
    let l2 = loaded.model.forward_loss(&batch, &mut Dropout::off()).map_err(|e| e.to_string())?;
    ensure!(l1.to_bits() == l2.to_bits(), "loss {l1} vs {l2}");
    let dc = DecodeConfig::default();
    let p1 = predict_corpus(&m1, &corpus, &vocab, &snip, &dc, true).map_err(|e| e.to_string())?;
    let p2 = predict_corpus(&loaded.model, &corpus, &loaded.vocab, &snip, &dc, true).map_err(|e| e.to_string())?;
    ensure!(p1 == p2, "predictions differ after reload");
    Ok(format!("{} checkpoints, reload loss {l1:.6} bit-identical", r1.checkpoints.len()))
}

fn random_word(rng: &mut ChaCha8Rng) -> String {
    let pool: Vec<char> = "abcXYZäßжω0123-.,!?'\"_;# ".chars().collect();
    (0..rng.gen_range(1..=8)).map(|_| *pool.choose(rng).expect("non-empty")).collect()
}

fn format_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let grammemes = ["N", "V", "PL", "SG", "PST", "3", "ADJ", "Case=Nom", "V.PTCP"];
    let mut sentences = Vec::new();
    for _ in 0..1000 {
        let tokens = (0..rng.gen_range(1..=6))
            .map(|i| {
                let mut surface = random_word(&mut rng);
                // A sentence-initial `#` line is a comment.
                if i == 0 {
                    surface = surface.replace('#', "$");
                }
                let lemma = if rng.gen_bool(0.1) { String::new() } else { random_word(&mut rng) };
                let k = rng.gen_range(0..=4);
                let tag = MorphoTag::from_grammemes((0..k).map(|_| *grammemes.choose(&mut rng).expect("non-empty")));
                Token::new(surface, Some(Analysis::new(lemma, tag)))
            })
            .collect();
        sentences.push(Sentence::new(tokens));
    }
    let mut checked = 0;
    for chunk in sentences.chunks(10) {
        let corpus = Corpus::new(chunk.to_vec());
        let text = write_corpus(&corpus).map_err(|e| e.to_string())?;
        let parsed = parse_corpus(text.as_bytes(), ParseMode::Gold).map_err(|e| e.to_string())?;
        ensure!(parsed.sentences == corpus.sentences, "round-trip changed a corpus");
        let again = write_corpus(&parsed).map_err(|e| e.to_string())?;
        ensure!(again == text, "second write differs");
        checked += chunk.len();
    }

    let bats_sentence = parse_corpus(BATS.as_bytes(), ParseMode::Gold).map_err(|e| e.to_string())?;
    let text = write_corpus(&bats_sentence).map_err(|e| e.to_string())?;
    ensure!(text == format!("{BATS}\n"), "example text changed: {text:?}");
    let back = parse_corpus(text.as_bytes(), ParseMode::Gold).map_err(|e| e.to_string())?;
    ensure!(back.sentences == bats_sentence.sentences, "example corpus changed");
    Ok(format!("{checked} fuzzed sentences and the three-token example"))
}
