use proptest::prelude::*;

use lemmed::conllu::{normalize_tag, parse_corpus, write_corpus, ParseMode};
use lemmed::eval::{levenshtein, tag_f1};
use lemmed::{Analysis, Corpus, MorphoTag, Sentence, Token};

fn grammeme() -> impl Strategy<Value = String> {
    prop::sample::select(vec!["N", "V", "PL", "SG", "PST", "PRS", "ADJ", "3", "NOM"]).prop_map(String::from)
}

fn tag() -> impl Strategy<Value = MorphoTag> {
    prop::collection::vec(grammeme(), 0..5).prop_map(MorphoTag::from_grammemes)
}

fn token() -> impl Strategy<Value = Token> {
    ("[a-zäö.,'-]{1,8}", "[a-zäö]{0,8}", tag())
        .prop_map(|(surface, lemma, tag)| Token::new(surface, Some(Analysis::new(lemma, tag))))
}

fn corpus() -> impl Strategy<Value = Corpus> {
    prop::collection::vec(prop::collection::vec(token(), 1..6).prop_map(Sentence::new), 0..6).prop_map(Corpus::new)
}

proptest! {
    #[test]
    fn normalization_is_idempotent_and_order_free(mut gs in prop::collection::vec(grammeme(), 1..6)) {
        let once = normalize_tag(&gs.join(";")).unwrap();
        let twice = normalize_tag(&once.to_string()).unwrap();
        prop_assert_eq!(&once, &twice);
        gs.reverse();
        prop_assert_eq!(normalize_tag(&gs.join(";")).unwrap(), once);
    }

    #[test]
    fn written_corpora_parse_back(c in corpus()) {
        let text = write_corpus(&c).unwrap();
        let back = parse_corpus(text.as_bytes(), ParseMode::Gold).unwrap();
        prop_assert_eq!(back.sentences, c.sentences);
    }

    #[test]
    fn levenshtein_is_a_metric(a in "[abc]{0,8}", b in "[abc]{0,8}", c in "[abc]{0,8}") {
        prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
        prop_assert_eq!(levenshtein(&a, &a), 0);
        prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
        let bound = a.chars().count().max(b.chars().count());
        prop_assert!(levenshtein(&a, &b) <= bound);
    }

    #[test]
    fn tag_f1_is_symmetric_and_bounded(p in tag(), g in tag()) {
        let f = tag_f1(&p, &g).f1;
        prop_assert_eq!(f, tag_f1(&g, &p).f1);
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert_eq!(f == 1.0, p == g);
    }
}
