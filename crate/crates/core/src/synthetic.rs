//! A small deterministic corpus with rule-based morphology, for smoke tests
//! and demonstrations.
//!
//! Sentences follow `[ADJ] N V N`. Plural nouns end in `-s` and adjectives in
//! `-y`. Present verbs end in `-t`, past verbs in `-de`. All stems end in a
//! vowel so every suffix is unambiguous.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conllu::{Analysis, Corpus, MorphoTag, Sentence, Token};

/// The twenty characters every surface form and lemma is drawn from.
pub const ALPHABET: &str = "abdeghiklmnoprstuvyz";

const CONSONANTS: &[char] = &['b', 'd', 'g', 'h', 'k', 'l', 'm', 'n', 'p', 'r', 'v', 'z'];
const VOWELS: &[char] = &['a', 'i', 'o', 'u'];

#[derive(Debug, Clone, Copy)]
enum Pos {
    Noun,
    Verb,
    Adj,
}

fn stem(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.gen_range(1..=2);
    let mut s = String::new();
    for _ in 0..syllables {
        s.push(*CONSONANTS.choose(rng).expect("non-empty"));
        s.push(*VOWELS.choose(rng).expect("non-empty"));
    }
    s
}

fn lexicon(rng: &mut ChaCha8Rng, n: usize, taken: &mut Vec<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let s = stem(rng);
        if !taken.contains(&s) {
            taken.push(s.clone());
            out.push(s);
        }
    }
    out
}

fn inflect(stem: &str, pos: Pos, rng: &mut ChaCha8Rng) -> Token {
    let (suffix, tags): (&str, &[&str]) = match pos {
        Pos::Noun if rng.gen_bool(0.5) => ("", &["N", "SG"]),
        Pos::Noun => ("s", &["N", "PL"]),
        Pos::Verb if rng.gen_bool(0.5) => ("t", &["PRS", "V"]),
        Pos::Verb => ("de", &["PST", "V"]),
        Pos::Adj => ("y", &["ADJ"]),
    };
    Token::new(
        format!("{stem}{suffix}"),
        Some(Analysis::new(stem, MorphoTag::from_grammemes(tags.iter().copied()))),
    )
}

/// `sentences` sentences drawn with a fixed seed.
pub fn corpus(sentences: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken = Vec::new();
    let nouns = lexicon(&mut rng, 10, &mut taken);
    let verbs = lexicon(&mut rng, 6, &mut taken);
    let adjs = lexicon(&mut rng, 4, &mut taken);
    let pick = |rng: &mut ChaCha8Rng, words: &[String]| words.choose(rng).expect("non-empty").clone();
    let out = (0..sentences)
        .map(|_| {
            let mut tokens = Vec::new();
            if rng.gen_bool(0.5) {
                let a = pick(&mut rng, &adjs);
                tokens.push(inflect(&a, Pos::Adj, &mut rng));
            }
            let n = pick(&mut rng, &nouns);
            tokens.push(inflect(&n, Pos::Noun, &mut rng));
            let v = pick(&mut rng, &verbs);
            tokens.push(inflect(&v, Pos::Verb, &mut rng));
            let n = pick(&mut rng, &nouns);
            tokens.push(inflect(&n, Pos::Noun, &mut rng));
            Sentence::new(tokens)
        })
        .collect();
    Corpus::new(out)
}
