//! Text normalization, lexicon handling and tokenization with word spans.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

pub const PAD: usize = 0;
pub const SIL: usize = 1;
pub const EOS: usize = 2;

const RESERVED: [&str; 3] = ["<pad>", "<sil>", "<eos>"];
/// Characters with their own token in character mode and grapheme fallback.
const GRAPHEMES: &str = "abcdefghijklmnopqrstuvwxyz0123456789'";

/// Lowercases, treats every non-alphanumeric character (other than a
/// word-internal apostrophe) as a word boundary and drops empty words.
pub fn normalize_text(raw: &str) -> Vec<String> {
    raw.to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .map(|w| w.trim_matches('\''))
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TokenMode {
    #[default]
    Phoneme,
    Character,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OovPolicy {
    /// Spell unknown words with grapheme tokens.
    #[default]
    Graphemes,
    Error,
}

#[derive(Serialize, Deserialize)]
struct LexiconFile {
    phonemes: Vec<String>,
    words: BTreeMap<String, Vec<String>>,
}

/// Pronunciation dictionary plus the full token inventory.
///
/// Ids 0..3 are `pad`, `sil`, `eos`; then the phonemes in file order; then one
/// grapheme token per supported character.
#[derive(Clone, Debug, PartialEq)]
pub struct Lexicon {
    symbols: Vec<String>,
    n_phonemes: usize,
    words: BTreeMap<String, Vec<usize>>,
    index: HashMap<String, usize>,
}

impl Lexicon {
    pub fn new(phonemes: &[String], words: &BTreeMap<String, Vec<String>>) -> Result<Self> {
        let mut symbols: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> =
            symbols.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        for p in phonemes {
            if p.is_empty() || p.starts_with('#') {
                return Err(Error::Invalid(format!("bad phoneme name `{p}`")));
            }
            if index.insert(p.clone(), symbols.len()).is_some() {
                return Err(Error::Invalid(format!("phoneme `{p}` listed twice or reserved")));
            }
            symbols.push(p.clone());
        }
        for c in GRAPHEMES.chars() {
            let s = format!("#{c}");
            index.insert(s.clone(), symbols.len());
            symbols.push(s);
        }
        let mut ids = BTreeMap::new();
        for (word, pron) in words {
            let key = normalize_text(word);
            if key.len() != 1 || key[0] != *word {
                return Err(Error::Invalid(format!("lexicon word `{word}` is not normalized")));
            }
            if pron.is_empty() {
                return Err(Error::Invalid(format!("empty pronunciation for `{word}`")));
            }
            let p = pron
                .iter()
                .map(|ph| match index.get(ph) {
                    Some(&i) if (3..3 + phonemes.len()).contains(&i) => Ok(i),
                    _ => Err(Error::Invalid(format!("`{word}` uses unknown phoneme `{ph}`"))),
                })
                .collect::<Result<Vec<_>>>()?;
            ids.insert(word.clone(), p);
        }
        Ok(Self {
            symbols,
            n_phonemes: phonemes.len(),
            words: ids,
            index,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: LexiconFile = serde_json::from_str(text)?;
        Self::new(&f.phonemes, &f.words)
    }

    pub fn to_json(&self) -> Result<String> {
        let f = LexiconFile {
            phonemes: self.phonemes().to_vec(),
            words: self
                .words
                .iter()
                .map(|(w, p)| (w.clone(), p.iter().map(|&i| self.symbols[i].clone()).collect()))
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&f)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).at(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).at(path)
    }

    pub fn phonemes(&self) -> &[String] {
        &self.symbols[3..3 + self.n_phonemes]
    }

    /// Number of distinct token ids (embedding table rows).
    pub fn vocab_size(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    /// Id of a phoneme name or a reserved symbol (`<sil>` etc.).
    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn grapheme_id(&self, c: char) -> Option<usize> {
        self.index.get(&format!("#{c}")).copied()
    }

    pub fn pronunciation(&self, word: &str) -> Option<&[usize]> {
        self.words.get(word).map(Vec::as_slice)
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.words.keys().map(String::as_str)
    }

    fn spell(&self, word: &str) -> Result<Vec<usize>> {
        word.chars()
            .map(|c| self.grapheme_id(c).ok_or_else(|| Error::OutOfVocabulary(word.to_string())))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordSpan {
    pub word: usize,
    pub start: usize,
    /// Exclusive.
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub token_ids: Vec<usize>,
    pub word_spans: Vec<WordSpan>,
    pub words: Vec<String>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// For every token, the index of the word it belongs to (`None` for sil/eos).
    pub fn token_words(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.token_ids.len()];
        for s in &self.word_spans {
            for slot in &mut out[s.start..s.end] {
                *slot = Some(s.word);
            }
        }
        out
    }
}

/// Converts normalized words into token ids, inserting `sil` between words
/// and appending `eos`.
pub fn tokenize(words: &[String], lex: &Lexicon, mode: TokenMode, oov: OovPolicy) -> Result<TokenSequence> {
    let mut token_ids = Vec::new();
    let mut word_spans = Vec::with_capacity(words.len());
    for (i, w) in words.iter().enumerate() {
        if i > 0 {
            token_ids.push(SIL);
        }
        let toks = match mode {
            TokenMode::Character => lex.spell(w)?,
            TokenMode::Phoneme => match (lex.pronunciation(w), oov) {
                (Some(p), _) => p.to_vec(),
                (None, OovPolicy::Graphemes) => lex.spell(w)?,
                (None, OovPolicy::Error) => return Err(Error::OutOfVocabulary(w.clone())),
            },
        };
        if toks.is_empty() {
            return Err(Error::Invalid(format!("word {i} is empty")));
        }
        let start = token_ids.len();
        token_ids.extend(toks);
        word_spans.push(WordSpan {
            word: i,
            start,
            end: token_ids.len(),
        });
    }
    token_ids.push(EOS);
    Ok(TokenSequence {
        token_ids,
        word_spans,
        words: words.to_vec(),
    })
}
