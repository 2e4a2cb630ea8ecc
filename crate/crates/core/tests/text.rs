use semitaco::text::*;
use semitaco::Error;
use proptest::prelude::*;

fn lexicon() -> Lexicon {
    Lexicon::from_json(
        r#"{"phonemes": ["th","a","ng","k","y","uu","h","i"],
            "words": {"thank": ["th","a","ng","k"], "you": ["y","uu"], "hi": ["h","i"]}}"#,
    )
    .unwrap()
}

fn ws(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn names(lex: &Lexicon, ids: &[usize]) -> Vec<String> {
    ids.iter().map(|&i| lex.symbol(i).unwrap().to_string()).collect()
}

#[test]
fn normalization_examples() {
    assert_eq!(normalize_text("Thank you."), ws(&["thank", "you"]));
    assert!(normalize_text("").is_empty());
    assert_eq!(normalize_text("Hello,  world"), ws(&["hello", "world"]));
    assert_eq!(normalize_text("Don't 'quote' me"), ws(&["don't", "quote", "me"]));
}

#[test]
fn thank_you_phonemes_and_spans() {
    let lex = lexicon();
    let seq = tokenize(&ws(&["thank", "you"]), &lex, TokenMode::Phoneme, OovPolicy::Error).unwrap();
    assert_eq!(
        names(&lex, &seq.token_ids),
        ws(&["th", "a", "ng", "k", "<sil>", "y", "uu", "<eos>"])
    );
    let spans: Vec<_> = seq.word_spans.iter().map(|s| (s.word, s.start, s.end)).collect();
    assert_eq!(spans, vec![(0, 0, 4), (1, 5, 7)]);
}

#[test]
fn empty_word_list_is_just_eos() {
    let seq = tokenize(&[], &lexicon(), TokenMode::Phoneme, OovPolicy::Error).unwrap();
    assert_eq!(seq.token_ids, vec![EOS]);
    assert!(seq.word_spans.is_empty());
}

#[test]
fn character_mode_spells_words() {
    let lex = lexicon();
    let seq = tokenize(&ws(&["hi"]), &lex, TokenMode::Character, OovPolicy::Error).unwrap();
    assert_eq!(names(&lex, &seq.token_ids), ws(&["#h", "#i", "<eos>"]));
    assert_eq!(seq.word_spans, vec![WordSpan { word: 0, start: 0, end: 2 }]);
}

#[test]
fn oov_error_names_the_word() {
    let err = tokenize(&ws(&["thank", "zebra"]), &lexicon(), TokenMode::Phoneme, OovPolicy::Error).unwrap_err();
    assert!(matches!(&err, Error::OutOfVocabulary(w) if w == "zebra"));
}

#[test]
fn oov_falls_back_to_graphemes() {
    let lex = lexicon();
    let seq = tokenize(&ws(&["ok"]), &lex, TokenMode::Phoneme, OovPolicy::Graphemes).unwrap();
    assert_eq!(names(&lex, &seq.token_ids), ws(&["#o", "#k", "<eos>"]));
}

#[test]
fn lexicon_rejects_bad_entries() {
    let bad = [
        r#"{"phonemes": ["a"], "words": {"x": []}}"#,
        r#"{"phonemes": ["a"], "words": {"x": ["b"]}}"#,
        r#"{"phonemes": ["a", "a"], "words": {}}"#,
        r#"{"phonemes": ["<sil>"], "words": {}}"#,
        r#"{"phonemes": ["a"], "words": {"X": ["a"]}}"#,
    ];
    for b in bad {
        assert!(Lexicon::from_json(b).is_err(), "{b}");
    }
}

#[test]
fn lexicon_json_roundtrip() {
    let lex = lexicon();
    assert_eq!(Lexicon::from_json(&lex.to_json().unwrap()).unwrap(), lex);
}

fn word_list() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["thank", "you", "hi", "ok", "zz"]), 0..8)
        .prop_map(|v| v.into_iter().map(String::from).collect())
}

proptest! {
    #[test]
    fn spans_reconstruct_tokens(words in word_list()) {
        let lex = lexicon();
        let seq = tokenize(&words, &lex, TokenMode::Phoneme, OovPolicy::Graphemes).unwrap();
        prop_assert_eq!(seq.word_spans.len(), seq.words.len());
        let mut rebuilt = Vec::new();
        for (i, s) in seq.word_spans.iter().enumerate() {
            if i > 0 {
                prop_assert_eq!(s.start, rebuilt.len() + 1);
                rebuilt.push(SIL);
            } else {
                prop_assert_eq!(s.start, 0);
            }
            rebuilt.extend_from_slice(&seq.token_ids[s.start..s.end]);
        }
        rebuilt.push(EOS);
        prop_assert_eq!(&rebuilt, &seq.token_ids);
        for (t, w) in seq.token_words().iter().enumerate() {
            if w.is_none() {
                prop_assert!(seq.token_ids[t] == SIL || seq.token_ids[t] == EOS);
            }
        }
    }

    #[test]
    fn tokenize_is_injective(a in word_list(), b in word_list()) {
        let lex = lexicon();
        let sa = tokenize(&a, &lex, TokenMode::Phoneme, OovPolicy::Graphemes).unwrap();
        let sb = tokenize(&b, &lex, TokenMode::Phoneme, OovPolicy::Graphemes).unwrap();
        prop_assert_eq!(a == b, sa.token_ids == sb.token_ids);
        prop_assert_eq!(sa, tokenize(&a, &lex, TokenMode::Phoneme, OovPolicy::Graphemes).unwrap());
    }
}
